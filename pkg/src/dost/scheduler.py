"""Calendar-aligned awake/hibernate alternation."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction


class Phase(str, enum.Enum):
    AWAKE = "awake"
    HIBERNATE = "hibernate"


@dataclass(frozen=True)
class AHConfig:
    """Awake length ``L_a`` (in intervals) and hibernate ratio ``lam``.

    ``awake_len`` defaults to one week of intervals.
    """

    intervals_per_week: int
    awake_len: int | None = None
    lam: float = 1.0
    online_start: int = 0

    def __post_init__(self):
        if self.intervals_per_week < 1:
            raise ValueError("intervals_per_week must be positive")
        if self.awake_len is None:
            object.__setattr__(self, "awake_len", self.intervals_per_week)
        if self.awake_len < 1:
            raise ValueError("awake_len must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")

    @property
    def hibernate_len(self) -> int:
        # round half up; exact rational product so 0.5 * 3 -> 2
        return math.floor(Fraction(self.lam) * self.awake_len + Fraction(1, 2))

    @property
    def cycle_len(self) -> int:
        return self.awake_len + self.hibernate_len


class PhaseClock:
    def __init__(self, config: AHConfig):
        self.config = config

    def _offset(self, t: int) -> int:
        if t < self.config.online_start:
            raise ValueError(f"step {t} precedes online start {self.config.online_start}")
        return (t - self.config.online_start) % self.config.cycle_len

    def phase_at(self, t: int) -> Phase:
        return Phase.AWAKE if self._offset(t) < self.config.awake_len else Phase.HIBERNATE

    def is_hibernate_start(self, t: int) -> bool:
        if self.phase_at(t) is not Phase.HIBERNATE:
            return False
        return t == self.config.online_start or self.phase_at(t - 1) is Phase.AWAKE


def phase_at(clock: PhaseClock, t: int) -> Phase:
    return clock.phase_at(t)


def is_hibernate_start(clock: PhaseClock, t: int) -> bool:
    return clock.is_hibernate_start(t)
