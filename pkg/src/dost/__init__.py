"""Distribution-aware online continual learning for spatio-temporal streams."""
from .data import SyntheticSpec, generate_synthetic, load_dataset, save_dataset, split_phases
from .engine import (
    AdamW,
    OnlineEngine,
    RunConfig,
    StrategyConfig,
    TrainerConfig,
    apply_preset,
    run_stream,
    warmup_train,
)
from .memory import MemoryEntry, MemoryPlaceholder, StreamingMemoryBuffer, em_sample
from .metrics import MetricReport, PredictionLedger, mae, rmse, wmape
from .model import AdaptiveSTNetwork, ModelConfig, normalize_adjacency
from .scheduler import AHConfig, Phase, PhaseClock

__version__ = "0.1.0"
