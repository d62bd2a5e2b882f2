"""Inversion generators, discriminator, map estimator and embedder.

Every network runs NCHW internally. Dimension traces report rows as
(H, W, C) for feature maps and (D,) for vectors so they read like the layer
tables they reproduce.
"""

import hashlib
import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from til.codec import MinutiaeMap, MinutiaeTemplate, decode_peaks
from til.config import MapConfig, NetworkProfile
from til.exceptions import ContractError, DependencyError, UsageError

logger = logging.getLogger(__name__)

EMBEDDING_DIM = 192
MAP_CHANNELS = 6

TraceRow = Tuple[str, Tuple[int, ...]]


@dataclass(frozen=True)
class Embedding:
    """A 192-d fixed-length template; unit norm when ``normalized``."""

    values: np.ndarray
    normalized: bool = True

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.shape != (EMBEDDING_DIM,):
            raise ContractError(
                f"Embedding must have {EMBEDDING_DIM} values, got {values.shape[0]}"
            )
        if self.normalized and abs(np.linalg.norm(values) - 1.0) > 1e-6:
            raise ContractError(
                f"Embedding flagged normalized has norm {np.linalg.norm(values):.8f}"
            )
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls) -> "Embedding":
        return cls(values=np.zeros(EMBEDDING_DIM), normalized=False)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


class ResBlock(nn.Module):
    """
    Pre-activation residual block.

    Main path: BN → ReLU → [2× nearest upsample] → 3×3 conv → BN → ReLU →
    3×3 conv → [2×2 average pool]. The skip path resamples the same way and
    uses a 1×1 conv when the channel count changes.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        resample: Optional[str] = None,
        norm: bool = True,
        preactivate: bool = True,
    ):
        super().__init__()
        if resample not in (None, "up", "down"):
            raise ValueError(f"Unknown resample mode: {resample}")
        self.resample = resample
        self.preactivate = preactivate
        self.bn1 = nn.BatchNorm2d(in_channels) if norm and preactivate else nn.Identity()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(out_channels) if norm else nn.Identity()
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.shortcut = (
            nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else None
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.bn1(x)) if self.preactivate else x
        if self.resample == "up":
            h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.conv1(h)
        h = self.conv2(F.relu(self.bn2(h)))
        if self.resample == "down":
            h = F.avg_pool2d(h, 2)

        s = x
        if self.resample == "up":
            s = F.interpolate(s, scale_factor=2, mode="nearest")
        if self.shortcut is not None:
            s = self.shortcut(s)
        if self.resample == "down":
            s = F.avg_pool2d(s, 2)
        return h + s


class NonLocalBlock(nn.Module):
    """Embedded-Gaussian self-attention with a zero-initialized residual gain."""

    def __init__(self, channels: int):
        super().__init__()
        inner = max(1, channels // 8)
        self.channels = channels
        self.theta = nn.Conv2d(channels, inner, 1, bias=False)
        self.phi = nn.Conv2d(channels, inner, 1, bias=False)
        self.g = nn.Conv2d(channels, inner, 1, bias=False)
        self.out = nn.Conv2d(inner, channels, 1, bias=False)
        self.gamma = nn.Parameter(torch.zeros(()))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, _, h, w = x.shape
        theta = self.theta(x).flatten(2)
        phi = self.phi(x).flatten(2)
        g = self.g(x).flatten(2)
        attention = torch.softmax(theta.transpose(1, 2) @ phi, dim=-1)
        o = (g @ attention.transpose(1, 2)).reshape(n, -1, h, w)
        return x + self.gamma * self.out(o)


class GlobalSumPool(nn.Module):
    """Sum over the spatial dimensions: (N, C, H, W) → (N, C)."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return global_sum_pool(x)


def global_sum_pool(x: torch.Tensor) -> torch.Tensor:
    return x.sum(dim=(2, 3))


class Reshape(nn.Module):
    def __init__(self, *shape: int):
        super().__init__()
        self.shape = shape

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x.reshape(x.shape[0], *self.shape)


class StagedNetwork(nn.Module):
    """A stack of named stages whose output shapes can be traced."""

    def __init__(self):
        super().__init__()
        self.stages = nn.ModuleList()
        self.stage_names: List[str] = []

    def add_stage(self, name: str, module: nn.Module) -> None:
        self.stages.append(module)
        self.stage_names.append(name)

    def forward(self, x: torch.Tensor, trace: Optional[List[TraceRow]] = None) -> torch.Tensor:
        for name, stage in zip(self.stage_names, self.stages):
            x = stage(x)
            if trace is not None:
                trace.append((name, _row_shape(x)))
        return x


def _row_shape(x: torch.Tensor) -> Tuple[int, ...]:
    if x.dim() == 4:
        return (int(x.shape[2]), int(x.shape[3]), int(x.shape[1]))
    return tuple(int(d) for d in x.shape[1:])


def _up_then_res(in_ch: int, out_ch: int) -> nn.Module:
    return nn.Sequential(ResBlock(in_ch, out_ch, "up"), ResBlock(out_ch, out_ch))


def _res_then_up(in_ch: int, out_ch: int) -> nn.Module:
    return nn.Sequential(ResBlock(in_ch, in_ch), ResBlock(in_ch, out_ch, "up"))


class ResidualDecoder(StagedNetwork):
    """
    Decoder shared by both generators: four up stages with a non-local block
    after the second, then BN/ReLU, a 3×3 conv to one channel and tanh.

    ``order`` selects "up_first" (ResBlock Up + ResBlock) or "res_first"
    (ResBlock + ResBlock Up) for the first three stages; the last is a plain
    ResBlock Up.
    """

    def __init__(self, base_width: int, in_channels: int, order: str):
        super().__init__()
        if order == "up_first":
            make, label = _up_then_res, "ResBlock Up + ResBlock"
        elif order == "res_first":
            make, label = _res_then_up, "ResBlock + ResBlock Up"
        else:
            raise ValueError(f"Unknown decoder order: {order}")
        widths = [8 * base_width, 4 * base_width, 2 * base_width]
        channels = in_channels
        for idx, width in enumerate(widths):
            self.add_stage(f"Dec {idx}: {label}", make(channels, width))
            channels = width
            if idx == 1:
                self.add_stage(f"Non-Local Block ({width} × {width})", NonLocalBlock(width))
        self.add_stage("Dec 3: ResBlock Up", ResBlock(channels, base_width, "up"))
        self.add_stage(
            "Batch Normalization, ReLU",
            nn.Sequential(nn.BatchNorm2d(base_width), nn.ReLU()),
        )
        self.add_stage(
            "Convolution (channels=1, kernel=3×3, stride=1)",
            nn.Conv2d(base_width, 1, 3, padding=1),
        )
        self.add_stage("Tanh", nn.Tanh())


# ---------------------------------------------------------------------------
# Inversion networks
# ---------------------------------------------------------------------------


class GeneratorM(nn.Module):
    """Minutiae-map generator G_m: encoder E_m plus the shared decoder."""

    kind = "minutiae"

    def __init__(self, profile: NetworkProfile):
        super().__init__()
        self.profile = profile
        b = profile.base_width
        self.encoder = StagedNetwork()
        channels = MAP_CHANNELS
        for idx, width in enumerate([b, 2 * b, 4 * b, 8 * b]):
            self.encoder.add_stage(
                f"Enc {idx}: ResBlock Down + ResBlock",
                nn.Sequential(ResBlock(channels, width, "down"), ResBlock(width, width)),
            )
            channels = width
            if idx == 2:
                self.encoder.add_stage(
                    f"Non-Local Block ({width} × {width})", NonLocalBlock(width)
                )
        self.decoder = ResidualDecoder(b, channels, order="up_first")

    def forward(self, x: torch.Tensor, trace: Optional[List[TraceRow]] = None) -> torch.Tensor:
        return self.decoder(self.encoder(x, trace), trace)

    def input_shape(self) -> Tuple[int, ...]:
        r = self.profile.resolution
        return (MAP_CHANNELS, r, r)


class GeneratorE(nn.Module):
    """Deep-template generator G_e: fully connected seed, up stages, shared decoder."""

    kind = "deep"

    ENCODER_STAGES = (
        ("Enc 0: ResBlock Up", 16),
        ("Enc 1: ResBlock Up", 8),
        ("Enc 2: ResBlock + ResBlock Up", 8),
    )

    def __init__(self, profile: NetworkProfile):
        super().__init__()
        self.profile = profile
        b = profile.base_width
        n_up = int(round(math.log2(profile.resolution / 4)))
        n_encoder = n_up - 4
        if n_encoder < 0:
            raise ContractError(
                f"Deep-template generator needs resolution >= 64, got {profile.resolution}"
            )
        hidden = b * 32 // 3
        self.encoder = StagedNetwork()
        self.encoder.add_stage(
            "Fully Connected", nn.Sequential(nn.Linear(EMBEDDING_DIM, hidden), nn.ReLU())
        )
        self.encoder.add_stage("Fully Connected", nn.Linear(hidden, 16 * b))
        self.encoder.add_stage("Reshape", Reshape(b, 4, 4))
        channels = b
        kept = self.ENCODER_STAGES[len(self.ENCODER_STAGES) - n_encoder :] if n_encoder else ()
        for name, mult in kept:
            width = mult * b
            if "ResBlock + ResBlock Up" in name:
                block: nn.Module = _res_then_up(channels, width)
            else:
                block = ResBlock(channels, width, "up")
            self.encoder.add_stage(name, block)
            channels = width
        self.decoder = ResidualDecoder(b, channels, order="res_first")

    def forward(self, x: torch.Tensor, trace: Optional[List[TraceRow]] = None) -> torch.Tensor:
        return self.decoder(self.encoder(x, trace), trace)

    def input_shape(self) -> Tuple[int, ...]:
        return (EMBEDDING_DIM,)


class Discriminator(StagedNetwork):
    """Discriminator D_A: residual down stages, global summation pooling, linear logit."""

    def __init__(self, profile: NetworkProfile):
        super().__init__()
        self.profile = profile
        b = profile.base_width
        channels = 1
        for idx, width in enumerate([b, 2 * b, 4 * b, 8 * b, 16 * b]):
            self.add_stage(
                f"Disc {idx}: ResBlock Down",
                ResBlock(channels, width, "down", norm=False, preactivate=idx > 0),
            )
            channels = width
            if idx == 2:
                self.add_stage(f"Non-Local Block ({width} × {width})", NonLocalBlock(width))
        self.add_stage("ReLU", nn.ReLU())
        self.add_stage("Global Summation Pooling", GlobalSumPool())
        self.add_stage("Linear", nn.Linear(channels, 1))

    def input_shape(self) -> Tuple[int, ...]:
        r = self.profile.resolution
        return (1, r, r)


def _conv_bn_relu(in_ch: int, out_ch: int, stride: int = 1) -> nn.Module:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(),
    )


class MapEstimatorNet(nn.Module):
    """Four-level U-shaped network estimating the 6-channel minutiae map of an image."""

    kind = "map-estimator"

    def __init__(self, width: int = 16):
        super().__init__()
        self.width = width
        w = width
        self.enc1 = nn.Sequential(_conv_bn_relu(1, w), _conv_bn_relu(w, w))
        self.enc2 = nn.Sequential(_conv_bn_relu(w, 2 * w), _conv_bn_relu(2 * w, 2 * w))
        self.enc3 = nn.Sequential(_conv_bn_relu(2 * w, 4 * w), _conv_bn_relu(4 * w, 4 * w))
        self.bottleneck = nn.Sequential(
            _conv_bn_relu(4 * w, 8 * w), _conv_bn_relu(8 * w, 8 * w)
        )
        self.dec3 = nn.Sequential(_conv_bn_relu(12 * w, 4 * w), _conv_bn_relu(4 * w, 4 * w))
        self.dec2 = nn.Sequential(_conv_bn_relu(6 * w, 2 * w), _conv_bn_relu(2 * w, 2 * w))
        self.dec1 = nn.Sequential(_conv_bn_relu(3 * w, w), _conv_bn_relu(w, w))
        self.head = nn.Conv2d(w, MAP_CHANNELS, 1)
        self.register_buffer("trained_flag", torch.tensor(False))

    @property
    def trained(self) -> bool:
        return bool(self.trained_flag)

    def mark_trained(self, value: bool = True) -> None:
        self.trained_flag.fill_(value)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 8 or x.shape[-2] % 8:
            raise ContractError(f"Map estimator input sides must be multiples of 8, got {tuple(x.shape[-2:])}")
        e1 = self.enc1(x)
        e2 = self.enc2(F.avg_pool2d(e1, 2))
        e3 = self.enc3(F.avg_pool2d(e2, 2))
        bottom = self.bottleneck(F.avg_pool2d(e3, 2))
        d3 = self.dec3(torch.cat([_upsample(bottom), e3], dim=1))
        d2 = self.dec2(torch.cat([_upsample(d3), e2], dim=1))
        d1 = self.dec1(torch.cat([_upsample(d2), e1], dim=1))
        return torch.sigmoid(self.head(d1))


def _upsample(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="nearest")


class EmbedderNet(nn.Module):
    """
    Convolutional identity classifier whose 192-d penultimate layer, L2
    normalized, is the fixed-length template.

    The classification head is a cosine classifier with an additive margin,
    so embeddings are trained for the cosine comparison used in matching.
    """

    kind = "embedder"

    def __init__(self, num_classes: int, width: int = 16, scale: float = 16.0, margin: float = 0.2):
        super().__init__()
        if num_classes < 1:
            raise ContractError("Embedder needs at least one identity class")
        w = width
        self.width = width
        self.num_classes = num_classes
        self.scale = scale
        self.margin = margin
        self.features = nn.Sequential(
            _conv_bn_relu(1, w),
            _conv_bn_relu(w, 2 * w, stride=2),
            _conv_bn_relu(2 * w, 4 * w, stride=2),
            _conv_bn_relu(4 * w, 8 * w, stride=2),
            _conv_bn_relu(8 * w, 8 * w, stride=2),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.project = nn.Sequential(nn.Linear(8 * w, EMBEDDING_DIM), nn.BatchNorm1d(EMBEDDING_DIM))
        self.classifier = nn.Parameter(torch.empty(num_classes, EMBEDDING_DIM))
        self.register_buffer("trained_flag", torch.tensor(False))

    @property
    def trained(self) -> bool:
        return bool(self.trained_flag)

    def mark_trained(self, value: bool = True) -> None:
        self.trained_flag.fill_(value)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Unit-norm embeddings of an (N, 1, H, W) batch."""
        return F.normalize(self.project(self.features(x)), dim=1, eps=1e-12)

    def logits(self, embeddings: torch.Tensor, labels: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Scaled cosine logits; the target class is penalized by the margin when labels are given."""
        cosine = embeddings @ F.normalize(self.classifier, dim=1).t()
        if labels is not None:
            cosine = cosine - self.margin * F.one_hot(labels, self.num_classes).to(cosine.dtype)
        return self.scale * cosine


Network = Union[GeneratorM, GeneratorE, Discriminator, MapEstimatorNet, EmbedderNet]


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def orthogonal_init(module: nn.Module, init_seed: int) -> nn.Module:
    """Orthogonally initialize every conv/linear weight (zero biases) under a fixed seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        for sub in module.modules():
            if isinstance(sub, (nn.Conv2d, nn.Linear)):
                nn.init.orthogonal_(sub.weight)
                if sub.bias is not None:
                    nn.init.zeros_(sub.bias)
        if isinstance(module, EmbedderNet):
            nn.init.orthogonal_(module.classifier)
    return module


def build_generator_m(profile: NetworkProfile, init_seed: Optional[int] = 0) -> GeneratorM:
    """Build G_m; ``init_seed=None`` skips initialization (used for meta-device traces)."""
    net = GeneratorM(profile)
    return orthogonal_init(net, init_seed) if init_seed is not None else net


def build_generator_e(profile: NetworkProfile, init_seed: Optional[int] = 0) -> GeneratorE:
    """Build G_e; ``init_seed=None`` skips initialization."""
    net = GeneratorE(profile)
    return orthogonal_init(net, init_seed) if init_seed is not None else net


def build_discriminator(profile: NetworkProfile, init_seed: Optional[int] = 0) -> Discriminator:
    """Build D_A; ``init_seed=None`` skips initialization."""
    net = Discriminator(profile)
    return orthogonal_init(net, init_seed) if init_seed is not None else net


def build_map_estimator(init_seed: int = 0, width: int = 16) -> MapEstimatorNet:
    return orthogonal_init(MapEstimatorNet(width=width), init_seed)


def build_embedder(num_classes: int, init_seed: int = 0, width: int = 16) -> EmbedderNet:
    return orthogonal_init(EmbedderNet(num_classes=num_classes, width=width), init_seed)


def weight_matrices(module: nn.Module) -> List[torch.Tensor]:
    """Parameters with at least two dimensions (conv kernels and linear weights)."""
    return [p for p in module.parameters() if p.dim() >= 2]


def dimension_trace(net: nn.Module, batch_size: int = 1) -> List[TraceRow]:
    """
    Per-stage output dimensions of a generator or discriminator, starting with
    the ``Input`` row.

    The forward pass runs on whatever device the network lives on; build it
    under ``torch.device("meta")`` to trace full-profile shapes without
    allocating activations.
    """
    if not hasattr(net, "input_shape"):
        raise ContractError(f"{type(net).__name__} has no tabulated dimension trace")
    device = next(net.parameters()).device
    x = torch.zeros((batch_size, *net.input_shape()), device=device)
    trace: List[TraceRow] = [("Input", _row_shape(x))]
    was_training = net.training
    net.eval()
    with torch.no_grad():
        net(x, trace)
    net.train(was_training)
    return trace


def trace_for(kind: str, profile: NetworkProfile) -> List[TraceRow]:
    """Dimension trace of a network kind built on the meta device."""
    builders = {
        "minutiae": build_generator_m,
        "deep": build_generator_e,
        "discriminator": build_discriminator,
    }
    if kind not in builders:
        raise ContractError(f"No dimension trace for network kind '{kind}'")
    with torch.device("meta"):
        net = builders[kind](profile, init_seed=None)
    return dimension_trace(net)


def trace_hash(trace: Sequence[TraceRow]) -> str:
    payload = json.dumps([[name, list(shape)] for name, shape in trace])
    return hashlib.sha256(payload.encode()).hexdigest()


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over the state dict (parameters and buffers) in key order."""
    digest = hashlib.sha256()
    for key, tensor in sorted(module.state_dict().items()):
        digest.update(key.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def freeze(module: nn.Module) -> nn.Module:
    """Put a network in eval mode and stop gradients into its parameters."""
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


# ---------------------------------------------------------------------------
# Inference entry points
# ---------------------------------------------------------------------------


def _device_of(module: nn.Module) -> torch.device:
    return next(module.parameters()).device


def _image_batch(img, device: torch.device) -> Tuple[torch.Tensor, bool]:
    """Return an (N, 1, H, W) tensor and whether the caller passed a tensor."""
    if isinstance(img, torch.Tensor):
        x = img
        if x.dim() == 2:
            x = x[None, None]
        elif x.dim() == 3:
            x = x[:, None]
        return x, True
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 2:
        raise ContractError(f"Image must be a 2-D raster, got shape {arr.shape}")
    return torch.from_numpy(arr)[None, None].to(device), False


def generate(g: Union[GeneratorM, GeneratorE], input: Any):
    """
    Reconstruct an image from a minutiae map (G_m) or an embedding (G_e).

    Domain inputs (``MinutiaeMap`` / ``Embedding``) return a 2-D float32 image
    in [−1, 1]; tensor inputs (``(N, 6, H, W)`` or ``(N, 192)``) return the
    differentiable ``(N, 1, H, W)`` output.

    Raises:
        ContractError: If the input kind or shape does not match the generator
    """
    device = _device_of(g)
    r = g.profile.resolution
    if isinstance(input, torch.Tensor):
        x = input if input.dim() > len(g.input_shape()) else input[None]
        if tuple(x.shape[1:]) != g.input_shape():
            raise ContractError(
                f"{type(g).__name__} expects inputs of shape {g.input_shape()}, got {tuple(x.shape[1:])}"
            )
        return g(x)

    if isinstance(g, GeneratorM):
        if not isinstance(input, MinutiaeMap):
            raise ContractError("Minutiae generator takes a MinutiaeMap")
        if (input.config.height, input.config.width) != (r, r):
            raise ContractError(
                f"Map is {input.config.height}x{input.config.width}, generator expects {r}x{r}"
            )
        x = torch.from_numpy(np.transpose(input.values, (2, 0, 1)).copy())[None]
    elif isinstance(g, GeneratorE):
        if not isinstance(input, Embedding):
            raise ContractError("Deep-template generator takes an Embedding")
        x = torch.from_numpy(input.values.astype(np.float32))[None]
    else:
        raise ContractError(f"{type(g).__name__} is not a generator")

    was_training = g.training
    g.eval()
    with torch.no_grad():
        out = g(x.to(device=device, dtype=_dtype_of(g)))
    g.train(was_training)
    return out[0, 0].float().cpu().numpy()


def _dtype_of(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def map_estimator(me: MapEstimatorNet, img, cfg: Optional[MapConfig] = None):
    """
    Estimate the minutiae map M̂ of an image.

    A numpy image returns a :class:`MinutiaeMap`; a tensor returns the
    differentiable ``(N, 6, H, W)`` estimate so gradients reach the image.

    Raises:
        UsageError: If the estimator has not been trained
    """
    if not me.trained:
        raise UsageError("Map estimator is untrained; run the map-estimator training stage first")
    x, is_tensor = _image_batch(img, _device_of(me))
    if is_tensor:
        return me(x)
    me.eval()
    with torch.no_grad():
        out = me(x.to(_dtype_of(me)))
    values = np.transpose(out[0].float().cpu().numpy(), (1, 2, 0))
    h, w = values.shape[:2]
    if cfg is None:
        cfg = MapConfig(height=h, width=w)
    return MinutiaeMap(values=np.clip(values, 0.0, 1.0), config=cfg)


def extract_minutiae_learned(
    me: MapEstimatorNet, img: np.ndarray, threshold: float = 0.5, cfg: Optional[MapConfig] = None
) -> MinutiaeTemplate:
    """Minutiae read off the map estimator: :func:`map_estimator` then peak decoding."""
    return decode_peaks(map_estimator(me, img, cfg), threshold, source_id="estimator")


def embed(e: EmbedderNet, img):
    """
    Fixed-length template of an image.

    A numpy image returns an :class:`Embedding`; a tensor returns the
    differentiable ``(N, 192)`` unit-norm batch.

    Raises:
        UsageError: If the embedder has not been trained
    """
    if not e.trained:
        raise UsageError("Embedder is untrained; run the embedder training stage first")
    x, is_tensor = _image_batch(img, _device_of(e))
    if is_tensor:
        return e(x)
    e.eval()
    with torch.no_grad():
        out = e(x.to(_dtype_of(e)))
    values = out[0].double().cpu().numpy()
    return Embedding(values=values / np.linalg.norm(values), normalized=True)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

WEIGHTS_FILE = "weights.pt"
MANIFEST_FILE = "manifest.json"


def save_checkpoint(
    directory: Path,
    modules: Dict[str, nn.Module],
    manifest: Dict[str, Any],
    optimizers: Optional[Dict[str, torch.optim.Optimizer]] = None,
) -> Path:
    """
    Atomically write a checkpoint directory.

    ``weights.pt`` holds one state dict per named module (keys are layer
    names) plus optimizer states; ``manifest.json`` records the caller's
    manifest extended with parameter hashes. The directory is written under a
    temporary name and renamed into place.
    """
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "modules": {name: m.state_dict() for name, m in modules.items()},
        "optimizers": {name: o.state_dict() for name, o in (optimizers or {}).items()},
    }
    manifest = dict(manifest)
    manifest["parameter_hashes"] = {name: parameter_hash(m) for name, m in modules.items()}

    tmp = Path(tempfile.mkdtemp(prefix=f".{directory.name}.", dir=directory.parent))
    try:
        torch.save(payload, tmp / WEIGHTS_FILE)
        (tmp / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
        if directory.exists():
            stale = directory.with_name(f".{directory.name}.stale")
            shutil.rmtree(stale, ignore_errors=True)
            os.replace(directory, stale)
            os.replace(tmp, directory)
            shutil.rmtree(stale, ignore_errors=True)
        else:
            os.replace(tmp, directory)
    except Exception:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    logger.info(f"Wrote checkpoint {directory}")
    return directory


def read_manifest(directory: Path) -> Dict[str, Any]:
    path = Path(directory) / MANIFEST_FILE
    if not path.exists():
        raise DependencyError(f"No checkpoint manifest at {path}", dependency=str(directory))
    return json.loads(path.read_text())


def load_checkpoint(directory: Path, map_location: str = "cpu") -> Tuple[Dict[str, Any], Dict[str, Any]]:
    """Return ``(manifest, payload)`` of a checkpoint directory."""
    manifest = read_manifest(directory)
    payload = torch.load(Path(directory) / WEIGHTS_FILE, map_location=map_location, weights_only=True)
    return manifest, payload


def load_generator(directory: Path, device: str = "cpu") -> Union[GeneratorM, GeneratorE]:
    """Rebuild an inverter generator from its checkpoint, in eval mode."""
    manifest, payload = load_checkpoint(directory, device)
    kind = manifest.get("kind")
    profile = NetworkProfile(**manifest["profile"])
    if kind == "minutiae":
        g: Union[GeneratorM, GeneratorE] = build_generator_m(profile, init_seed=None)
    elif kind == "deep":
        g = build_generator_e(profile, init_seed=None)
    else:
        raise ContractError(f"Checkpoint {directory} holds '{kind}', not an inverter")
    g.load_state_dict(payload["modules"]["generator"])
    return g.to(device).eval()


def load_map_estimator(directory: Path, device: str = "cpu") -> MapEstimatorNet:
    """Rebuild the frozen map estimator from its checkpoint."""
    manifest, payload = load_checkpoint(directory, device)
    if manifest.get("kind") != "map-estimator":
        raise ContractError(f"Checkpoint {directory} holds '{manifest.get('kind')}', not a map estimator")
    me = MapEstimatorNet(width=manifest.get("width", 16))
    me.load_state_dict(payload["modules"]["map_estimator"])
    return freeze(me.to(device))


def load_embedder(directory: Path, device: str = "cpu") -> EmbedderNet:
    """Rebuild a frozen embedder from its checkpoint."""
    manifest, payload = load_checkpoint(directory, device)
    if manifest.get("kind") != "embedder":
        raise ContractError(f"Checkpoint {directory} holds '{manifest.get('kind')}', not an embedder")
    e = EmbedderNet(num_classes=manifest["num_classes"], width=manifest.get("width", 16))
    e.load_state_dict(payload["modules"]["embedder"])
    return freeze(e.to(device))
