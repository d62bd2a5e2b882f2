"""Configuration models for the template inversion lab."""

import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from til.exceptions import ConfigurationError


class LabSettings(BaseSettings):
    """Environment-level settings (read from ``TIL_*`` variables)."""

    model_config = SettingsConfigDict(env_prefix="TIL_")

    data_root: Path = Field(
        default=Path("data"),
        description="Default dataset root. Reads from $TIL_DATA_ROOT.",
    )
    device: Literal["auto", "cpu", "cuda"] = Field(
        default="auto",
        description="Torch device used by training and inversion. Reads from $TIL_DEVICE.",
    )


class MapConfig(BaseModel):
    """Geometry and kernel widths of the 6-channel minutiae map."""

    model_config = ConfigDict(frozen=True)

    height: int = Field(default=512, gt=0, description="Map height in pixels")
    width: int = Field(default=512, gt=0, description="Map width in pixels")
    channels: Literal[6] = Field(
        default=6, description="Orientation channel count K (fixed at 6)"
    )
    sigma_s: float = Field(
        default=3.0, gt=0, description="Spatial Gaussian width in pixels"
    )
    sigma_o: float = Field(
        default=math.pi / 6, gt=0, description="Orientation Gaussian width in radians"
    )

    @classmethod
    def for_resolution(cls, resolution: int, **kwargs) -> "MapConfig":
        """Square map matching a network profile resolution."""
        return cls(height=resolution, width=resolution, **kwargs)


class NetworkProfile(BaseModel):
    """Channel multiplier and output resolution shared by every network."""

    model_config = ConfigDict(frozen=True)

    name: Literal["full", "reduced"] = Field(
        default="reduced", description="Profile name"
    )
    base_width: int = Field(
        default=12, ge=2, description="Channel multiplier (full = 48, reduced = 12)"
    )
    resolution: int = Field(
        default=128, description="Output side length (full = 512, reduced = 128)"
    )

    @field_validator("resolution")
    @classmethod
    def validate_resolution(cls, v: int) -> int:
        """Resolution must be a power of two between 32 and 512."""
        if v < 32 or v > 512 or v & (v - 1):
            raise ValueError(
                f"Resolution must be a power of two in [32, 512], got {v}"
            )
        return v

    @classmethod
    def full(cls) -> "NetworkProfile":
        return cls(name="full", base_width=48, resolution=512)

    @classmethod
    def reduced(cls) -> "NetworkProfile":
        return cls(name="reduced", base_width=12, resolution=128)

    @classmethod
    def from_name(cls, name: str) -> "NetworkProfile":
        """Return the canonical profile for ``name``."""
        if name == "full":
            return cls.full()
        if name == "reduced":
            return cls.reduced()
        raise ConfigurationError(f"Unknown network profile: {name}")


class LossWeights(BaseModel):
    """Weights of the generator objective and the orthogonal regularizer."""

    lambda1: float = Field(default=1.0, ge=0)
    lambda2: float = Field(default=2.0, ge=0)
    lambda3: float = Field(default=1.0, ge=0)
    lambda4: float = Field(default=10.0, ge=0, description="Unused by the deep kind")
    beta: float = Field(
        default=1e-4, ge=0, description="Orthogonal regularization scale"
    )

    @classmethod
    def minutiae(cls) -> "LossWeights":
        return cls(lambda1=1.0, lambda2=2.0, lambda3=1.0, lambda4=10.0)

    @classmethod
    def deep(cls) -> "LossWeights":
        return cls(lambda1=1.0, lambda2=1.0, lambda3=10.0, lambda4=0.0)

    @classmethod
    def for_kind(cls, kind: str) -> "LossWeights":
        if kind == "minutiae":
            return cls.minutiae()
        if kind == "deep":
            return cls.deep()
        raise ConfigurationError(f"Unknown inverter kind: {kind}")


class TrainConfig(BaseModel):
    """Configuration shared by the adversarial and supervised training loops."""

    lr_generator: float = Field(default=1e-4, gt=0, description="Generator learning rate")
    lr_discriminator: float = Field(
        default=1e-4, gt=0, description="Discriminator learning rate"
    )
    g_steps_per_d_step: int = Field(
        default=3, ge=1, description="Generator updates per discriminator update"
    )
    batch_size: int = Field(default=8, ge=1, description="Mini-batch size")
    total_d_steps: int = Field(
        default=2000, ge=0, description="Discriminator updates in an inverter run"
    )
    seed: int = Field(default=0, description="Seed for every random stream of the run")
    profile: NetworkProfile = Field(
        default_factory=NetworkProfile.reduced, description="Network profile"
    )
    weights: Optional[LossWeights] = Field(
        default=None,
        description="Loss weights. If None, uses the defaults of the inverter kind.",
    )
    checkpoint_every: int = Field(
        default=500, ge=0, description="Checkpoint interval in d-steps (0 disables)"
    )
    adam_betas: tuple[float, float] = Field(
        default=(0.0, 0.999), description="Adaptive-moment optimizer coefficients"
    )
    supervised_epochs: int = Field(
        default=30,
        ge=0,
        description="Epochs for the map estimator and embedder (0 leaves them untrained)",
    )
    lr_supervised: float = Field(
        default=1e-3, gt=0, description="Learning rate for the map estimator and embedder"
    )
    augment_rotation_deg: float = Field(
        default=30.0, ge=0, description="Embedder rotation augmentation range (±deg)"
    )
    augment_shift_px: float = Field(
        default=40.0, ge=0, description="Embedder translation augmentation range (±px at 512, scaled with resolution)"
    )
    num_workers: int = Field(
        default=0, ge=0, description="Read-only data loading workers"
    )
    device: Literal["auto", "cpu", "cuda"] = Field(
        default="auto", description="Torch device"
    )

    @field_validator("adam_betas")
    @classmethod
    def validate_betas(cls, v: tuple[float, float]) -> tuple[float, float]:
        if not all(0.0 <= b < 1.0 for b in v):
            raise ValueError(f"Optimizer betas must lie in [0, 1), got {v}")
        return v

    def resolved_weights(self, kind: str) -> LossWeights:
        """Loss weights for ``kind``, falling back to its defaults."""
        return self.weights if self.weights is not None else LossWeights.for_kind(kind)


class SynthConfig(BaseModel):
    """Configuration for synthetic dataset generation."""

    n_fingers: int = Field(default=100, ge=2, description="Number of fingers")
    impressions: int = Field(default=2, ge=2, description="Impressions per finger")
    eval_fingers: int = Field(
        default=0, ge=0, description="Fingers tagged as the eval split (the rest are train)"
    )
    seed: int = Field(default=1, description="Generation seed")
    profile: NetworkProfile = Field(
        default_factory=NetworkProfile.reduced,
        description="Profile whose resolution sets the image size",
    )
    ridge_frequency: tuple[float, float] = Field(
        default=(0.09, 0.12),
        description="Range of ridge frequencies in cycles/px",
    )
    noise_level: float = Field(
        default=0.2, ge=0, le=1, description="Impression noise level"
    )
    max_rotation_deg: float = Field(
        default=15.0, ge=0, le=30, description="Maximum impression rotation (±deg)"
    )
    max_shift_px: float = Field(
        default=20.0, ge=0, le=60, description="Maximum impression shift (±px)"
    )
    workers: int = Field(default=4, ge=1, description="Parallel finger generation workers")

    @model_validator(mode="after")
    def validate_split(self) -> "SynthConfig":
        if self.eval_fingers >= self.n_fingers:
            raise ValueError(
                f"eval_fingers ({self.eval_fingers}) must be smaller than n_fingers ({self.n_fingers})"
            )
        return self


class MatcherSpec(BaseModel):
    """A comparison matcher used as an attack target."""

    name: str = Field(description="Matcher name used in reports")
    kind: Literal["minutiae", "embedding", "external"] = Field(
        description="Matcher kind"
    )
    system: str = Field(
        default="",
        description="System the matcher belongs to; equal source/matcher systems mark a white-box cell",
    )
    distance_tol: float = Field(default=12.0, gt=0, description="Pairing distance (px)")
    angle_tol: float = Field(default=0.35, gt=0, description="Pairing angle (rad)")
    rotation_range_deg: float = Field(default=30.0, ge=0)
    rotation_step_deg: float = Field(default=5.0, gt=0)
    instance: Optional[Literal["A", "B"]] = Field(
        default=None, description="Embedder instance wrapped by an embedding matcher"
    )
    embedder_checkpoint: Optional[Path] = Field(
        default=None, description="Embedder checkpoint directory"
    )
    score_file: Optional[str] = Field(
        default=None, description="CSV with (probe_id, gallery_id, score) rows"
    )

    @model_validator(mode="after")
    def validate_kind_parameters(self) -> "MatcherSpec":
        if self.kind == "embedding":
            if self.instance is None or self.embedder_checkpoint is None:
                raise ValueError(
                    f"Embedding matcher '{self.name}' must declare instance and embedder_checkpoint"
                )
        if self.kind == "external" and not self.score_file:
            raise ValueError(f"External matcher '{self.name}' requires score_file")
        if not self.system:
            self.system = self.name
        return self


class TemplateSourceSpec(BaseModel):
    """Where inverted templates come from and which inverter reconstructs them."""

    name: str = Field(description="Source name used in reports")
    kind: Literal["ground_truth", "classical", "estimator", "deep"] = Field(
        description="ground_truth scores templates without inversion (calibration path)"
    )
    system: str = Field(default="", description="System that produced the template")
    inverter_checkpoint: Optional[Path] = Field(default=None)
    map_estimator_checkpoint: Optional[Path] = Field(
        default=None, description="Required for the estimator kind"
    )
    embedder_checkpoint: Optional[Path] = Field(
        default=None, description="Embedder-A checkpoint, required for the deep kind"
    )
    peak_threshold: float = Field(default=0.5, gt=0, lt=1)

    @model_validator(mode="after")
    def validate_dependencies(self) -> "TemplateSourceSpec":
        if self.kind != "ground_truth" and self.inverter_checkpoint is None:
            raise ValueError(f"Source '{self.name}' requires inverter_checkpoint")
        if self.kind == "estimator" and self.map_estimator_checkpoint is None:
            raise ValueError(f"Source '{self.name}' requires map_estimator_checkpoint")
        if self.kind == "deep" and self.embedder_checkpoint is None:
            raise ValueError(f"Source '{self.name}' requires embedder_checkpoint")
        if not self.system:
            self.system = self.name
        return self


class AttackSpec(BaseModel):
    """One (template source, matcher) attack evaluated at a fixed FAR."""

    attack_types: List[Literal["type1", "type2"]] = Field(
        default_factory=lambda: ["type1", "type2"],
        description="type1 scores against the source impression, type2 against another impression",
    )
    source: TemplateSourceSpec
    matcher: MatcherSpec
    far: float = Field(default=1e-4, gt=0, lt=1, description="False accept rate")


class EvaluateConfig(BaseModel):
    """Attack-matrix evaluation run."""

    dataset: Optional[Path] = Field(
        default=None, description="Eval dataset directory (defaults under $TIL_DATA_ROOT)"
    )
    split: Literal["train", "eval", "all"] = Field(default="eval")
    style: Literal["sd4_style", "fvc_style"] = Field(default="sd4_style")
    sources: List[TemplateSourceSpec] = Field(default_factory=list)
    matchers: List[MatcherSpec] = Field(default_factory=list)
    far: float = Field(default=1e-4, gt=0, lt=1)
    workers: int = Field(default=4, ge=1, description="Parallel pair scoring workers")
    histograms: bool = Field(default=True, description="Write a score histogram per cell")


class LabConfig(BaseModel):
    """Top-level configuration document."""

    map: MapConfig = Field(default_factory=MapConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    evaluate: EvaluateConfig = Field(default_factory=EvaluateConfig)
    dataset: Optional[Path] = Field(
        default=None, description="Training dataset directory (defaults under $TIL_DATA_ROOT)"
    )
    checkpoint_dir: Path = Field(
        default=Path("checkpoints"),
        description="Root holding one sub-directory per training stage",
    )

    def map_config(self) -> MapConfig:
        """Map geometry matched to the training profile resolution."""
        res = self.train.profile.resolution
        return MapConfig(
            height=res,
            width=res,
            sigma_s=self.map.sigma_s,
            sigma_o=self.map.sigma_o,
        )

    @classmethod
    def from_yaml(cls, path: Path) -> "LabConfig":
        """Load configuration from YAML file."""
        with open(path, "r") as f:
            data = yaml.safe_load(f) or {}
        return cls(**data)

    def to_yaml(self, path: Path) -> None:
        """Save configuration to YAML file."""
        with open(path, "w") as f:
            yaml.dump(self.model_dump(mode="json"), f, default_flow_style=False)


def apply_overrides(config: BaseModel, overrides: List[str]) -> BaseModel:
    """
    Apply dotted ``key=value`` overrides to a configuration model.

    Values are parsed as YAML scalars so ``train.seed=3`` sets an int and
    ``train.profile.name=full`` a string.

    Args:
        config: Any pydantic configuration model
        overrides: Strings of the form ``a.b.c=value``

    Returns:
        A new, re-validated model of the same type

    Raises:
        ConfigurationError: If an override is malformed or names an unknown key
    """
    data: Dict[str, Any] = config.model_dump(mode="json")
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"Override must look like key=value, got '{item}'")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                if part in node and node[part] is None:
                    node[part] = {}
                else:
                    raise ConfigurationError(f"Unknown configuration key: {key}")
            node = node[part]
        if parts[-1] not in node and not _is_open_field(config, parts):
            raise ConfigurationError(f"Unknown configuration key: {key}")
        node[parts[-1]] = yaml.safe_load(raw)
    return type(config).model_validate(data)


def _is_open_field(config: BaseModel, parts: List[str]) -> bool:
    """True when the parent of ``parts`` was an unset optional sub-model."""
    model: Any = type(config)
    for part in parts[:-1]:
        field = model.model_fields.get(part)
        if field is None:
            return False
        annotation = field.annotation
        args = getattr(annotation, "__args__", ())
        candidates = [a for a in (annotation, *args) if isinstance(a, type)]
        model = next((a for a in candidates if issubclass(a, BaseModel)), None)
        if model is None:
            return False
    return parts[-1] in model.model_fields


class RunManifest(BaseModel):
    """Record written into every command output directory; enough to re-run the command."""

    command: str = Field(description="CLI command and stage, e.g. 'train invert-minutiae'")
    version: str = Field(description="Package version that produced the outputs")
    config: Dict[str, Any] = Field(description="Effective configuration snapshot")
    seeds: Dict[str, int] = Field(default_factory=dict, description="Seeds used by the command")
    inputs: Dict[str, str] = Field(default_factory=dict, description="Input paths by role")
    outputs: Dict[str, str] = Field(default_factory=dict, description="Output paths by role")
    input_hashes: Dict[str, str] = Field(
        default_factory=dict,
        description="Content hashes of consumed checkpoints and datasets, keyed by role",
    )

    def write(self, directory: Path) -> Path:
        """Write ``run_manifest.json`` into ``directory``."""
        import json

        from til.utils import atomic_write_text

        path = Path(directory) / RUN_MANIFEST_NAME
        atomic_write_text(path, json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
        return path


RUN_MANIFEST_NAME = "run_manifest.json"
