"""Warm-up training, streaming memory updates and the online awake/hibernate loop."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import NormStats, PhaseSplit, SeriesFrame, fit_stats, split_phases, windows
from .memory import MemoryEntry, MemoryPlaceholder, StreamingMemoryBuffer, em_sample, stack_entries
from .metrics import MetricReport, PredictionLedger
from .model import AdaptiveSTNetwork, ModelConfig
from .numerics import Parameter
from .scheduler import AHConfig, Phase, PhaseClock

logger = logging.getLogger(__name__)

UPDATE_SCOPES = ("adapter", "full", "none")
MEMORY_MODES = ("smu", "smur", "er", "none")


class NumericError(FloatingPointError):
    """A non-finite gradient or loss was produced."""


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 150
    patience: int = 10
    batch_size: int = 32
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


@dataclass(frozen=True)
class StrategyConfig:
    """Online learning knobs.

    ``memory_mode``: ``smu`` episodic draw from the resettable buffer; ``smur``
    adds the latest sample; ``er`` draws from a never-reset reservoir and adds the
    latest sample; ``none`` trains on the latest sample only.
    """

    update_scope: str = "adapter"
    hibernate_enabled: bool = True
    reset_enabled: bool = True
    memory_mode: str = "smu"
    lam: float | None = None

    def __post_init__(self):
        if self.update_scope not in UPDATE_SCOPES:
            raise ValueError(f"update_scope must be one of {UPDATE_SCOPES}")
        if self.memory_mode not in MEMORY_MODES:
            raise ValueError(f"memory_mode must be one of {MEMORY_MODES}")


# ----------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay. Gradients are zeroed after each step."""

    def __init__(self, params: Sequence[Parameter], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        for p in self.params:
            if not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient in {p.name or 'parameter'}; step rejected")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data = p.data - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data)
            p.zero_grad()

    def zero_grad(self) -> None:
        nx.zero_grad(self.params)


def adamw_step(params, opt: AdamW) -> None:
    opt.step()


# ----------------------------------------------------------------------------
# warm-up


class EarlyStopping:
    """Tracks the best validation loss; ties do not count as improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Register an epoch's loss; returns True when training should stop."""
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class WarmupReport:
    epochs_run: int
    best_epoch: int
    best_val_loss: float
    train_losses: list[float]
    val_losses: list[float]


def _batch_loss(net: AdaptiveSTNetwork, entries, stats: NormStats | None) -> nx.Tensor:
    x, y = stack_entries(entries)
    if stats is not None:
        x, y = stats.normalize(x), stats.normalize(y)
    return nx.mae_loss(net.forward(nx.Tensor(x)), nx.Tensor(y))


def evaluate(net: AdaptiveSTNetwork, entries, stats: NormStats | None = None, batch_size: int = 256) -> float:
    """Sample-weighted MAE over ``entries`` (no gradient)."""
    total, n = 0.0, 0
    for i in range(0, len(entries), batch_size):
        chunk = entries[i : i + batch_size]
        total += _batch_loss(net, chunk, stats).item() * len(chunk)
        n += len(chunk)
    return total / n


def warmup_train(
    net: AdaptiveSTNetwork,
    train_set: Sequence[MemoryEntry],
    val_set: Sequence[MemoryEntry],
    cfg: TrainerConfig,
    stats: NormStats | None = None,
    rng: np.random.Generator | None = None,
) -> WarmupReport:
    """Mini-batch MAE training of all parameters with early stopping on validation MAE.

    The best-validation snapshot is restored before returning.
    """
    if not train_set:
        raise ValueError("warm-up training set is empty")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    params = net.set_trainable("full")
    opt = AdamW(params, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
    stopper = EarlyStopping(cfg.patience)
    best_state = net.state_dict()
    train_losses, val_losses = [], []
    train_set = list(train_set)
    val_set = list(val_set)
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_set))
        running, seen = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            batch = [train_set[j] for j in order[i : i + cfg.batch_size]]
            with nx.Tape():
                loss = _batch_loss(net, batch, stats)
                nx.backward(loss)
            opt.step()
            running += loss.item() * len(batch)
            seen += len(batch)
        train_losses.append(running / seen)
        val = evaluate(net, val_set, stats) if val_set else train_losses[-1]
        val_losses.append(val)
        improved = val < stopper.best
        stop = stopper.update(epoch, val)
        if improved:
            best_state = net.state_dict()
        logger.debug("epoch %d train %.5f val %.5f", epoch, train_losses[-1], val)
        if stop:
            break
    net.load_state_dict(best_state)
    return WarmupReport(epoch, stopper.best_epoch, stopper.best, train_losses, val_losses)


def seed_smb(val_set: Sequence[MemoryEntry], smb: StreamingMemoryBuffer, rng: np.random.Generator) -> StreamingMemoryBuffer:
    """Offer validation samples to the buffer in temporal order."""
    for entry in val_set:
        smb.offer(entry, rng)
    return smb


# ----------------------------------------------------------------------------
# online phase


@dataclass
class StepRecord:
    step: int
    phase: str
    forward_count: int
    backward_count: int
    loss: float | None
    wall_time: float
    predicted: bool


class OnlineEngine:
    """Runs one step of the online loop per incoming observation.

    Each step: push into the placeholder, reset the buffer at a hibernate start,
    offer the newest labelled sample, fine-tune while awake, then forecast.
    """

    def __init__(
        self,
        net: AdaptiveSTNetwork,
        ah: AHConfig,
        strategy: StrategyConfig,
        trainer: TrainerConfig,
        smb_size: int = 1000,
        em_size: int = 8,
        stats: NormStats | None = None,
        smb: StreamingMemoryBuffer | None = None,
        er_buffer: StreamingMemoryBuffer | None = None,
        rng: np.random.Generator | None = None,
    ):
        self.net = net
        self.strategy = strategy
        lam = strategy.lam if strategy.lam is not None else ah.lam
        if not strategy.hibernate_enabled:
            lam = 0.0
        self.clock = PhaseClock(replace(ah, lam=lam))
        self.trainer = trainer
        self.em_size = em_size
        self.stats = stats
        self.rng = rng if rng is not None else np.random.default_rng(trainer.seed)
        cfg = net.config
        self.mp = MemoryPlaceholder(cfg.lookback, cfg.horizon, (cfg.n_nodes, cfg.n_features))
        self.smb = smb if smb is not None else StreamingMemoryBuffer(smb_size)
        self.er_buffer = er_buffer if er_buffer is not None else StreamingMemoryBuffer(smb_size)
        self.ledger = PredictionLedger(cfg.horizon)
        self.records: list[StepRecord] = []
        self.latest_entry: MemoryEntry | None = None
        self.t: int | None = None

        self.online_params = self._select_online_params()
        self.opt = AdamW(
            self.online_params, trainer.learning_rate, (trainer.beta1, trainer.beta2),
            trainer.eps, trainer.weight_decay,
        )

    def _select_online_params(self) -> list[Parameter]:
        scope = self.strategy.update_scope
        if scope == "adapter" and not self.net.config.use_adapter:
            # without adapters in the forward path the backbone itself is tuned
            scope = "traditional"
        return self.net.set_trainable(scope)

    @property
    def online_start(self) -> int:
        return self.clock.config.online_start

    def prime(self, history: np.ndarray) -> None:
        """Fill the placeholder with pre-online context; nothing is offered or scored."""
        start = self.online_start - len(history)
        for i, row in enumerate(history):
            self.mp.push(row, start + i)

    def _em_batch(self) -> list[MemoryEntry]:
        mode = self.strategy.memory_mode
        if mode == "none":
            return [self.latest_entry] if self.latest_entry is not None else []
        source = self.er_buffer if mode == "er" else self.smb
        batch = em_sample(source, self.em_size, self.rng)
        if mode in ("smur", "er") and self.latest_entry is not None:
            batch.append(self.latest_entry)
        return batch

    def smu_update(self) -> tuple[float | None, int]:
        """One gradient step on an episodic batch; returns (loss, batch size)."""
        batch = self._em_batch()
        if not batch:
            return None, 0
        with nx.Tape():
            loss = _batch_loss(self.net, batch, self.stats)
            nx.backward(loss)
        if not np.isfinite(loss.item()):
            raise NumericError("non-finite online loss")
        self.opt.step()
        return loss.item(), len(batch)

    def step(self, x_t) -> np.ndarray | None:
        """Process observation ``X_t``; returns the forecast ``[N, H, d]`` in original units."""
        t = self.online_start if self.t is None else self.t + 1
        start = time.perf_counter()
        x_t = np.asarray(x_t, dtype=np.float64)
        self.ledger.observe(t, x_t)
        self.mp.push(x_t, t)
        phase = self.clock.phase_at(t)
        if self.clock.is_hibernate_start(t) and self.strategy.reset_enabled:
            self.smb.reset(t)
        entry = self.mp.extract()
        if entry is not None:
            self.latest_entry = entry
            self.smb.offer(entry, self.rng)
            if self.strategy.memory_mode == "er":
                self.er_buffer.offer(entry, self.rng)

        fwd = bwd = 0
        loss = None
        if phase is Phase.AWAKE and self.strategy.update_scope != "none" and self.online_params:
            loss, n = self.smu_update()
            if n:
                fwd += n
                bwd += 1

        forecast = None
        window = self.mp.latest(self.net.config.lookback)
        if window is not None:
            x = window.transpose(1, 0, 2)[None]  # [1, N, L, d]
            if self.stats is not None:
                x = self.stats.normalize(x)
            y = self.net.predict(x)[0]
            forecast = self.stats.denormalize(y) if self.stats is not None else y
            fwd += 1
            self.ledger.issue(t, forecast, phase.value)
        self.t = t
        self.records.append(
            StepRecord(t, phase.value, fwd, bwd, loss, time.perf_counter() - start, forecast is not None)
        )
        return forecast


def online_step(engine: OnlineEngine, x_t) -> tuple[np.ndarray | None, StepRecord]:
    forecast = engine.step(x_t)
    return forecast, engine.records[-1]


# ----------------------------------------------------------------------------
# end-to-end run


@dataclass(frozen=True)
class RunConfig:
    lookback: int = 12
    horizon: int = 12
    d_hidden: int = 32
    d_out: int = 256
    d_adapter: int = 4
    st_blocks: int = 2
    diffusion_steps: int = 2
    kernel_size: int = 2
    use_adapter: bool = True
    shared_adapter: bool = False
    intervals_per_week: int | None = None
    awake_len: int | None = None
    lam: float = 1.0
    learning_rate: float = 1e-3
    max_epochs: int = 150
    patience: int = 10
    batch_size: int = 32
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    update_scope: str = "adapter"
    hibernate_enabled: bool = True
    reset_enabled: bool = True
    memory_mode: str = "smu"
    smb_size: int = 1000
    em_size: int = 8
    seed: int = 0
    data_dir: str = ""
    output_dir: str = ""

    def model_config(self, n_nodes: int, n_features: int) -> ModelConfig:
        return ModelConfig(
            n_nodes=n_nodes, lookback=self.lookback, horizon=self.horizon, n_features=n_features,
            d_hidden=self.d_hidden, d_out=self.d_out, d_adapter=self.d_adapter, st_blocks=self.st_blocks,
            diffusion_steps=self.diffusion_steps, kernel_size=self.kernel_size,
            use_adapter=self.use_adapter, shared_adapter=self.shared_adapter,
        )

    def trainer_config(self) -> TrainerConfig:
        return TrainerConfig(self.learning_rate, self.max_epochs, self.patience, self.batch_size,
                             self.weight_decay, self.beta1, self.beta2, self.eps, self.seed)

    def strategy_config(self) -> StrategyConfig:
        return StrategyConfig(self.update_scope, self.hibernate_enabled, self.reset_enabled, self.memory_mode)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)


STRATEGY_PRESETS: dict[str, dict] = {
    "dost": {},
    "frozen": {"update_scope": "none"},
    "no-hibernate": {"hibernate_enabled": False},
    "full": {"update_scope": "full"},
    "er": {"memory_mode": "er", "hibernate_enabled": False},
    "erh": {"memory_mode": "er"},
    "smur": {"memory_mode": "smur"},
    "no-reset": {"reset_enabled": False},
    "no-via": {"use_adapter": False},
    "shared-adapter": {"shared_adapter": True},
    "no-smu": {"memory_mode": "none"},
}


def apply_preset(cfg: RunConfig, name: str) -> RunConfig:
    if name not in STRATEGY_PRESETS:
        raise KeyError(f"unknown strategy preset {name!r}; choose from {sorted(STRATEGY_PRESETS)}")
    defaults = RunConfig()
    knobs = ("update_scope", "hibernate_enabled", "reset_enabled", "memory_mode", "use_adapter", "shared_adapter")
    base = {k: getattr(defaults, k) for k in knobs}
    return replace(cfg, **{**base, **STRATEGY_PRESETS[name]})


def _coerce(raw: str, typ):
    typ = str(typ)
    if "bool" in typ:
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if raw.lower() in ("", "none") and "None" in typ:
        return None
    if "int" in typ:
        return int(raw)
    if "float" in typ:
        return float(raw)
    return raw


def parse_run_config(kv: dict[str, str]) -> RunConfig:
    """Build a RunConfig from ``key=value`` pairs (``lambda`` is accepted for ``lam``)."""
    known = {f.name: f.type for f in fields(RunConfig)}
    aliases = {"lambda": "lam", "smb_slots": "smb_size", "M": "smb_size", "M_e": "em_size"}
    kw = {}
    for k, v in kv.items():
        name = aliases.get(k, k)
        if name not in known:
            raise KeyError(f"unknown config key {k!r}")
        kw[name] = _coerce(v, known[name])
    return RunConfig(**kw)


def format_run_config(cfg: RunConfig) -> str:
    return "".join(f"{k}={'' if v is None else v}\n" for k, v in asdict(cfg).items())


@dataclass
class RunResult:
    config: RunConfig
    report: MetricReport
    records: list[StepRecord]
    ledger: PredictionLedger
    warmup: WarmupReport
    net: AdaptiveSTNetwork
    split: PhaseSplit
    stats: NormStats
    engine: OnlineEngine = field(repr=False, default=None)

    def write_run_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,phase,fwd,bwd,loss\n")
            for r in self.records:
                loss = "NA" if r.loss is None else f"{r.loss:.17g}"
                fh.write(f"{r.step},{r.phase},{r.forward_count},{r.backward_count},{loss}\n")


def _rng_streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def prepare(frame: SeriesFrame, adj, cfg: RunConfig, warm_net: AdaptiveSTNetwork | None = None):
    """Split, normalize, build and warm up a network; returns (net, split, stats, train, val, report)."""
    split = split_phases(frame.meta.n_steps)
    stats = fit_stats(frame, split)
    values = frame.values
    train = list(windows(values, cfg.lookback, cfg.horizon, split.warmup_train))
    val = list(windows(values, cfg.lookback, cfg.horizon, split.warmup_val))
    init_rng, shuffle_rng, _, _ = _rng_streams(cfg.seed, 4)
    mcfg = cfg.model_config(frame.meta.n_locations, frame.meta.n_features)
    if warm_net is not None:
        return warm_net, split, stats, train, val, None
    net = AdaptiveSTNetwork(mcfg, adj, seed=int(init_rng.integers(2**31)))
    report = warmup_train(net, train, val, cfg.trainer_config(), stats, shuffle_rng)
    return net, split, stats, train, val, report


def run_stream(
    frame: SeriesFrame,
    adj,
    cfg: RunConfig,
    warm_start: tuple[AdaptiveSTNetwork, WarmupReport] | None = None,
    stop: int | None = None,
    on_step=None,
) -> RunResult:
    """Warm up, seed the buffer from validation, then stream the online range.

    ``warm_start`` reuses an already trained network (it is cloned). ``stop``
    truncates the stream at that absolute step (exclusive). ``on_step(engine, record)``
    is called after every online step.
    """
    split = split_phases(frame.meta.n_steps)
    if warm_start is not None:
        net0, wreport = warm_start
        net, split, stats, train, val, _ = prepare(frame, adj, cfg, warm_net=net0.clone())
    else:
        net, split, stats, train, val, wreport = prepare(frame, adj, cfg)
    _, _, smb_rng, online_rng = _rng_streams(cfg.seed, 4)

    smb = seed_smb(val, StreamingMemoryBuffer(cfg.smb_size), smb_rng)
    er = seed_smb(val, StreamingMemoryBuffer(cfg.smb_size), smb_rng) if cfg.memory_mode == "er" else None
    ah = AHConfig(
        intervals_per_week=cfg.intervals_per_week or frame.meta.intervals_per_week,
        awake_len=cfg.awake_len,
        lam=cfg.lam,
        online_start=split.online_start,
    )
    engine = OnlineEngine(net, ah, cfg.strategy_config(), cfg.trainer_config(), cfg.smb_size, cfg.em_size,
                          stats, smb=smb, er_buffer=er, rng=online_rng)
    ctx = cfg.lookback + cfg.horizon - 1
    s0 = split.online_start
    engine.prime(frame.values[max(0, s0 - ctx) : s0])
    end = frame.meta.n_steps if stop is None else min(stop, frame.meta.n_steps)
    for t in range(s0, end):
        engine.step(frame.values[t])
        if on_step is not None:
            on_step(engine, engine.records[-1])
    report = engine.ledger.close()
    return RunResult(cfg, report, engine.records, engine.ledger, wreport, net, split, stats, engine)
