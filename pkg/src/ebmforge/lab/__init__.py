"""Training, diagnostics, experiment presets and the command-line interface."""
from .config import ExperimentConfig, apply_overrides
from .data import Dataset, load_idx, mixture2d, rings2d, synthetic_digits
from .diagnostics import mixing_rate, mode_coverage, spurious_minima_probe
from .metrics import MetricsLog, MetricsRecord, emit_metrics, parse_metrics
from .optim import AdamHyper, AdamState, adam_step
from .train import load_checkpoint, save_checkpoint, train

__all__ = [
    "ExperimentConfig", "apply_overrides", "Dataset", "load_idx", "mixture2d", "rings2d",
    "synthetic_digits", "mixing_rate", "mode_coverage", "spurious_minima_probe", "MetricsLog",
    "MetricsRecord", "emit_metrics", "parse_metrics", "AdamHyper", "AdamState", "adam_step",
    "load_checkpoint", "save_checkpoint", "train",
]
