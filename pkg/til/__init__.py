"""TIL - Fingerprint template inversion lab: reconstruct fingerprints from templates and measure attack success."""

__version__ = "0.1.0"

from til.config import (  # noqa: E402
    AttackSpec,
    EvaluateConfig,
    LabConfig,
    MapConfig,
    MatcherSpec,
    NetworkProfile,
    SynthConfig,
    TemplateSourceSpec,
    TrainConfig,
)
from til.evaluation import attack_matrix, build_pairs, run_attack, tar_at_far, threshold_at_far  # noqa: E402
from til.synthdata import build_dataset, load_dataset, save_dataset  # noqa: E402
from til.training import train_embedder, train_inverter, train_map_estimator  # noqa: E402

__all__ = [
    "AttackSpec",
    "EvaluateConfig",
    "LabConfig",
    "MapConfig",
    "MatcherSpec",
    "NetworkProfile",
    "SynthConfig",
    "TemplateSourceSpec",
    "TrainConfig",
    "attack_matrix",
    "build_pairs",
    "run_attack",
    "tar_at_far",
    "threshold_at_far",
    "build_dataset",
    "load_dataset",
    "save_dataset",
    "train_embedder",
    "train_inverter",
    "train_map_estimator",
]
