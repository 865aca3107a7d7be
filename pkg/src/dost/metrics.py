"""Forecast error metrics and lazy scoring of H-step-ahead predictions."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def mae(pred, truth) -> float:
    p, y = _pair(pred, truth)
    return float(np.mean(np.abs(y - p)))


def rmse(pred, truth) -> float:
    p, y = _pair(pred, truth)
    return float(np.sqrt(np.mean((y - p) ** 2)))


def wmape(pred, truth) -> float | None:
    """``sum|y - p| / sum|y|``; ``None`` when the truth is identically zero."""
    p, y = _pair(pred, truth)
    denom = np.sum(np.abs(y))
    if denom == 0:
        return None
    return float(np.sum(np.abs(y - p)) / denom)


def _pair(pred, truth):
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"prediction shape {p.shape} != truth shape {y.shape}")
    return p, y


@dataclass
class ScoredPair:
    step: int
    phase: str
    pred: np.ndarray  # [N, H, d], original units
    truth: np.ndarray


@dataclass
class _Sums:
    abs_err: list = field(default_factory=list)
    sq_err: list = field(default_factory=list)
    abs_truth: list = field(default_factory=list)
    count: int = 0

    def add(self, a: float, s: float, t: float, n: int) -> None:
        self.abs_err.append(a)
        self.sq_err.append(s)
        self.abs_truth.append(t)
        self.count += n

    def metrics(self) -> dict:
        if self.count == 0:
            return {"mae": None, "rmse": None, "wmape": None, "count": 0}
        # fsum is exactly rounded, so the result does not depend on accumulation order
        a = math.fsum(self.abs_err)
        t = math.fsum(self.abs_truth)
        return {
            "mae": a / self.count,
            "rmse": math.sqrt(math.fsum(self.sq_err) / self.count),
            "wmape": a / t if t > 0 else None,
            "count": self.count,
        }


class MetricReport:
    """Accumulates per-horizon, per-phase and overall MAE/RMSE/WMAPE."""

    def __init__(self, horizon: int):
        self.horizon = horizon
        self._sums: dict[tuple[str, str], _Sums] = {}
        self.rows: list[tuple[int, str, int, float, float, float | None]] = []
        self.n_pairs = 0
        self.unresolved = 0

    def _bucket(self, phase: str, h: str) -> _Sums:
        return self._sums.setdefault((phase, h), _Sums())

    def add(self, pair: ScoredPair) -> None:
        err = pair.truth - pair.pred
        per_h = err.shape[1]
        for h in range(per_h):
            e = err[:, h]
            y = pair.truth[:, h]
            a = float(np.sum(np.abs(e)))
            s = float(np.sum(e * e))
            t = float(np.sum(np.abs(y)))
            n = e.size
            for phase in (pair.phase, "all"):
                for key in (str(h + 1), "all"):
                    self._bucket(phase, key).add(a, s, t, n)
            self.rows.append((pair.step, pair.phase, h + 1, a / n, math.sqrt(s / n), a / t if t > 0 else None))
        self.n_pairs += 1

    def summary(self) -> dict[tuple[str, str], dict]:
        def order(key):
            phase, h = key
            return phase, h == "all", int(h) if h != "all" else 0

        return {k: self._sums[k].metrics() for k in sorted(self._sums, key=order)}

    def overall(self) -> dict:
        return self._bucket("all", "all").metrics()

    @classmethod
    def from_pairs(cls, pairs, horizon: int, unresolved: int = 0) -> "MetricReport":
        rep = cls(horizon)
        for p in pairs:
            rep.add(p)
        rep.unresolved = unresolved
        return rep

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,phase,horizon,mae,rmse,wmape\n")
            for step, phase, h, m, r, w in self.rows:
                fh.write(f"{step},{phase},{h},{m:.17g},{r:.17g},{_fmt(w)}\n")
            fh.write("# summary\n")
            fh.write("scope,phase,horizon,mae,rmse,wmape,count\n")
            for (phase, h), m in self.summary().items():
                fh.write(f"summary,{phase},{h},{_fmt(m['mae'])},{_fmt(m['rmse'])},{_fmt(m['wmape'])},{m['count']}\n")
            fh.write(f"unresolved,{self.unresolved}\n")

    def format_summary(self) -> str:
        lines = [f"{'phase':<10} {'horizon':>7} {'MAE':>12} {'RMSE':>12} {'WMAPE':>10} {'count':>8}"]
        for (phase, h), m in self.summary().items():
            if h != "all" and phase != "all":
                continue
            lines.append(
                f"{phase:<10} {h:>7} {_fmt(m['mae'], 6):>12} {_fmt(m['rmse'], 6):>12} "
                f"{_fmt(m['wmape'], 4):>10} {m['count']:>8}"
            )
        lines.append(f"resolved predictions: {self.n_pairs}, unresolved: {self.unresolved}")
        return "\n".join(lines)


def _fmt(v, digits: int = 17) -> str:
    if v is None:
        return "NA"
    return f"{v:.{digits}g}" if digits == 17 else f"{v:.{digits}f}"


class PredictionLedger:
    """Holds issued forecasts until their whole horizon has been observed."""

    def __init__(self, horizon: int, report: MetricReport | None = None):
        self.horizon = horizon
        self.pending: dict[int, tuple[np.ndarray, str]] = {}
        self.resolved: list[ScoredPair] = []
        self.report = report if report is not None else MetricReport(horizon)
        self._truths: deque[tuple[int, np.ndarray]] = deque(maxlen=horizon)
        self._last_t: int | None = None

    def issue(self, t: int, pred: np.ndarray, phase: str) -> None:
        if t in self.pending:
            raise ValueError(f"prediction for step {t} already issued")
        self.pending[t] = (np.asarray(pred, dtype=np.float64), phase)

    def observe(self, t: int, row) -> list[ScoredPair]:
        """Record truth ``X_t``; resolve the prediction made at ``t - H``."""
        if self._last_t is not None and t != self._last_t + 1:
            raise ValueError(f"truth rows must arrive in order: got {t} after {self._last_t}")
        self._last_t = t
        self._truths.append((t, np.asarray(row, dtype=np.float64)))
        issued = t - self.horizon
        if issued not in self.pending:
            return []
        pred, phase = self.pending.pop(issued)
        truth = np.stack([r for _, r in self._truths], axis=1)  # [N, H, d]
        pair = ScoredPair(issued, phase, pred, truth)
        self.resolved.append(pair)
        self.report.add(pair)
        return [pair]

    def close(self) -> MetricReport:
        self.report.unresolved = len(self.pending)
        return self.report

    def save(self, path) -> None:
        n = len(self.resolved)
        np.savez(
            Path(path),
            steps=np.array([p.step for p in self.resolved], dtype=np.int64),
            phases=np.array([p.phase for p in self.resolved], dtype="U16"),
            preds=np.stack([p.pred for p in self.resolved]) if n else np.empty((0,)),
            truths=np.stack([p.truth for p in self.resolved]) if n else np.empty((0,)),
            horizon=np.int64(self.horizon),
            unresolved=np.int64(len(self.pending)),
        )


def score_lazily(ledger: PredictionLedger, t: int, row) -> list[ScoredPair]:
    return ledger.observe(t, row)


def rescore_ledger(path) -> MetricReport:
    with np.load(Path(path)) as z:
        pairs = [
            ScoredPair(int(s), str(ph), p, y)
            for s, ph, p, y in zip(z["steps"], z["phases"], z["preds"], z["truths"])
        ]
        return MetricReport.from_pairs(pairs, int(z["horizon"]), int(z["unresolved"]))
