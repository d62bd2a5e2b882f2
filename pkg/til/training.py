"""Training loops: adversarial inverters plus the supervised map estimator and embedders."""

import logging
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from til.codec import rasterize, stack_maps
from til.config import MapConfig, TrainConfig
from til.exceptions import ConfigurationError, ContractError, NumericError
from til.losses import (
    discriminator_loss,
    gan_loss_g,
    identity_loss,
    minutiae_map_loss,
    ortho_reg,
    pixel_loss,
    total_generator_loss,
)
from til.networks import (
    EmbedderNet,
    MapEstimatorNet,
    build_discriminator,
    build_embedder,
    build_generator_e,
    build_generator_m,
    build_map_estimator,
    freeze,
    load_checkpoint,
    parameter_hash,
    save_checkpoint,
    trace_for,
    trace_hash,
    weight_matrices,
)
from til.synthdata import BACKGROUND, Dataset
from til.utils import atomic_write_text, derive_seed, resolve_device, seed_everything

logger = logging.getLogger(__name__)

LOSS_LOG = "loss_log.csv"
LOSS_COLUMNS = ["step", "role", "L_A", "L_m", "L_ID", "L_i", "L_reg", "total"]
INVERTER_KINDS = ("minutiae", "deep")


@dataclass
class TrainState:
    """Step counters, loss history and checkpoint references of one run."""

    kind: str
    g_updates: int = 0
    d_updates: int = 0
    history: List[Dict[str, Any]] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)
    networks: Dict[str, nn.Module] = field(default_factory=dict)
    holdout_pixel_loss: Optional[Tuple[float, float]] = None

    @property
    def checkpoint(self) -> Optional[Path]:
        """Most recent checkpoint directory."""
        return self.checkpoints[-1] if self.checkpoints else None

    def log_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=LOSS_COLUMNS)


@dataclass
class FrozenNetworks:
    """Trained networks held fixed while an inverter trains."""

    embedder_a: Optional[EmbedderNet] = None
    map_estimator: Optional[MapEstimatorNet] = None

    def require(self, kind: str) -> None:
        """
        Raises:
            ConfigurationError: If a network ``kind`` needs is missing or untrained
        """
        needed = {"embedder_a": self.embedder_a}
        if kind == "minutiae":
            needed["map_estimator"] = self.map_estimator
        for name, net in needed.items():
            if net is None:
                raise ConfigurationError(f"The {kind} inverter needs a frozen {name}")
            if not net.trained:
                raise ConfigurationError(f"Frozen {name} is untrained")

    def hashes(self) -> Dict[str, str]:
        return {
            name: parameter_hash(net)
            for name, net in (("embedder_a", self.embedder_a), ("map_estimator", self.map_estimator))
            if net is not None
        }


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _image_tensor(data: Dataset) -> torch.Tensor:
    return torch.from_numpy(
        np.stack([imp.image for imp in data.impressions()]).astype(np.float32)
    )[:, None]


def _map_tensor(data: Dataset, cfg: MapConfig) -> torch.Tensor:
    return torch.from_numpy(stack_maps(rasterize(imp.template, cfg) for imp in data.impressions()))


def _check_resolution(data: Dataset, resolution: int) -> None:
    shape = data.impressions()[0].image.shape
    if shape != (resolution, resolution):
        raise ConfigurationError(
            f"Dataset images are {shape[1]}x{shape[0]}, profile expects {resolution}x{resolution}"
        )


def _batch_indices(n: int, batch_size: int, seed: int, *labels: Any) -> np.ndarray:
    """Batch drawn from a stream keyed by step, so a resumed run draws the same batches."""
    rng = np.random.default_rng(derive_seed(seed, *labels))
    return rng.choice(n, size=batch_size, replace=n < batch_size)


def _finite_row(row: Dict[str, Any]) -> bool:
    return all(math.isfinite(v) for k, v in row.items() if k not in ("step", "role") and v is not None)


def _write_log(state: TrainState, directory: Path) -> None:
    atomic_write_text(
        Path(directory) / LOSS_LOG, state.log_frame().to_csv(index=False, float_format="%.9g")
    )


def _read_log(directory: Path, g_updates: int, d_updates: int) -> List[Dict[str, Any]]:
    """Loss rows of a checkpoint up to its recorded counters, in logged order."""
    path = Path(directory) / LOSS_LOG
    if not path.exists():
        logger.warning(f"No {LOSS_LOG} in {directory}; the resumed log starts empty")
        return []
    frame = pd.read_csv(path)
    limit = frame["role"].map({"generator": g_updates, "discriminator": d_updates})
    frame = frame[frame["step"] <= limit]
    frame = frame.astype(object).where(frame.notna(), None)
    return frame.to_dict("records")


def _snapshot_dir(out_dir: Optional[Path]) -> Path:
    if out_dir is None:
        return Path(tempfile.mkdtemp(prefix="til-nonfinite-"))
    return Path(out_dir).with_name(f"{Path(out_dir).name}.nonfinite")


def _abort_nonfinite(
    state: TrainState,
    row: Dict[str, Any],
    modules: Dict[str, nn.Module],
    manifest: Dict[str, Any],
    out_dir: Optional[Path],
) -> None:
    snapshot = save_checkpoint(
        _snapshot_dir(out_dir), modules, {**manifest, "nonfinite_row": row, "trained": False}
    )
    _write_log(state, snapshot)
    raise NumericError(f"Non-finite {row['role']} loss at step {row['step']}: {row}", snapshot=snapshot)


# ---------------------------------------------------------------------------
# Inverters
# ---------------------------------------------------------------------------


def train_inverter(
    kind: str,
    data: Dataset,
    cfg: TrainConfig,
    frozen: FrozenNetworks,
    out_dir: Optional[Path] = None,
    *,
    map_config: Optional[MapConfig] = None,
    holdout: Optional[Dataset] = None,
    resume_from: Optional[Path] = None,
) -> TrainState:
    """
    Adversarially train a template inverter.

    Each cycle runs ``cfg.g_steps_per_d_step`` generator updates followed by
    one discriminator update, for ``cfg.total_d_steps`` cycles. The generator
    minimizes the weighted objective of its kind plus the orthogonal
    regularizer; the discriminator minimizes the shared GAN loss. Frozen
    networks only pass gradients through to the reconstruction.

    Args:
        kind: "minutiae" (G_m from ground-truth minutiae maps) or "deep"
            (G_e from embedder-A embeddings)
        data: Training fingers
        cfg: Training configuration
        frozen: embedder-A, plus the map estimator for the minutiae kind
        out_dir: Checkpoint directory (None keeps everything in memory)
        map_config: Kernel widths of the ground-truth maps
        holdout: Fingers whose pixel loss is measured before and after training
        resume_from: Checkpoint to continue from (counters, weights, optimizer state)

    Returns:
        TrainState with counters, history and the trained networks

    Raises:
        ConfigurationError: On an unknown kind, missing frozen networks or a
            profile/dataset mismatch
        NumericError: On a non-finite loss (a snapshot is written first)
    """
    if kind not in INVERTER_KINDS:
        raise ConfigurationError(f"Unknown inverter kind: {kind}")
    frozen.require(kind)
    if len(data) == 0:
        raise ConfigurationError("Cannot train an inverter on an empty dataset")
    profile = cfg.profile
    _check_resolution(data, profile.resolution)
    device = resolve_device(cfg.device)
    weights = cfg.resolved_weights(kind)
    seed_everything(cfg.seed)

    map_cfg = MapConfig.for_resolution(
        profile.resolution,
        **({"sigma_s": map_config.sigma_s, "sigma_o": map_config.sigma_o} if map_config else {}),
    )
    images = _image_tensor(data).to(device)
    maps = _map_tensor(data, map_cfg).to(device) if kind == "minutiae" else None
    embedder = freeze(frozen.embedder_a.to(device))
    estimator = freeze(frozen.map_estimator.to(device)) if frozen.map_estimator is not None else None
    frozen_before = frozen.hashes()

    build_g = build_generator_m if kind == "minutiae" else build_generator_e
    g = build_g(profile, init_seed=derive_seed(cfg.seed, "generator")).to(device)
    d = build_discriminator(profile, init_seed=derive_seed(cfg.seed, "discriminator")).to(device)
    opt_g = torch.optim.Adam(g.parameters(), lr=cfg.lr_generator, betas=cfg.adam_betas)
    opt_d = torch.optim.Adam(d.parameters(), lr=cfg.lr_discriminator, betas=cfg.adam_betas)

    state = TrainState(kind=kind, networks={"generator": g, "discriminator": d})
    resumed_start: Optional[float] = None
    if resume_from is not None:
        manifest, payload = load_checkpoint(resume_from, str(device))
        if manifest.get("kind") != kind:
            raise ConfigurationError(f"Cannot resume a {kind} run from a '{manifest.get('kind')}' checkpoint")
        g.load_state_dict(payload["modules"]["generator"])
        d.load_state_dict(payload["modules"]["discriminator"])
        opt_g.load_state_dict(payload["optimizers"]["generator"])
        opt_d.load_state_dict(payload["optimizers"]["discriminator"])
        state.g_updates, state.d_updates = manifest["g_updates"], manifest["d_updates"]
        state.history = _read_log(resume_from, state.g_updates, state.d_updates)
        if manifest.get("holdout_pixel_loss"):
            resumed_start = manifest["holdout_pixel_loss"][0]
        logger.info(f"Resumed {kind} inverter at d-step {state.d_updates}")

    def conditioning(idx: np.ndarray) -> torch.Tensor:
        if kind == "minutiae":
            return maps[idx]
        with torch.no_grad():
            return embedder(images[idx])

    def manifest() -> Dict[str, Any]:
        return {
            "kind": kind,
            "profile": profile.model_dump(mode="json"),
            "seed": cfg.seed,
            "g_updates": state.g_updates,
            "d_updates": state.d_updates,
            "g_steps_per_d_step": cfg.g_steps_per_d_step,
            "train_fingers": data.finger_ids,
            "trace_hash": trace_hash(trace_for(kind, profile)),
            "frozen_hashes": frozen_before,
            "weights": weights.model_dump(),
            "holdout_pixel_loss": state.holdout_pixel_loss or (
                [holdout_start, None] if holdout_start is not None else None
            ),
            "trained": state.d_updates > 0,
        }

    def checkpoint() -> None:
        if out_dir is None:
            return
        path = save_checkpoint(
            out_dir, {"generator": g, "discriminator": d}, manifest(), {"generator": opt_g, "discriminator": opt_d}
        )
        _write_log(state, path)
        if path not in state.checkpoints:
            state.checkpoints.append(path)

    holdout_images = None
    if holdout is not None and len(holdout):
        _check_resolution(holdout, profile.resolution)
        holdout_images = _image_tensor(holdout)[: cfg.batch_size].to(device)
    holdout_start = resumed_start
    if holdout_start is None:
        holdout_start = _holdout_loss(g, kind, holdout_images, holdout, map_cfg, embedder, device)

    n = images.shape[0]
    g.train()
    d.train()
    remaining = cfg.total_d_steps - state.d_updates
    with tqdm(total=max(remaining, 0), desc=f"Training {kind} inverter") as pbar:
        while state.d_updates < cfg.total_d_steps:
            for _ in range(cfg.g_steps_per_d_step):
                idx = _batch_indices(n, cfg.batch_size, cfg.seed, "g", state.g_updates)
                real = images[idx]
                fake = g(conditioning(idx))
                parts = {
                    "L_A": gan_loss_g(d(fake)),
                    "L_ID": identity_loss(embedder(real), embedder(fake), batched=True),
                    "L_i": pixel_loss(real, fake, batched=True),
                }
                if kind == "minutiae":
                    parts["L_m"] = minutiae_map_loss(maps[idx], estimator(fake), batched=True)
                reg = ortho_reg(weight_matrices(g), weights.beta)
                loss = total_generator_loss(kind, parts, weights) + reg
                state.g_updates += 1
                row = {"step": state.g_updates, "role": "generator", "L_reg": float(reg), "total": float(loss)}
                row.update({name: float(value) for name, value in parts.items()})
                state.history.append(row)
                if not _finite_row(row):
                    _abort_nonfinite(state, row, {"generator": g, "discriminator": d}, manifest(), out_dir)
                opt_g.zero_grad(set_to_none=True)
                loss.backward()
                opt_g.step()

            idx = _batch_indices(n, cfg.batch_size, cfg.seed, "d", state.d_updates)
            with torch.no_grad():
                fake = g(conditioning(idx))
            loss_d = discriminator_loss(d(images[idx]), d(fake))
            state.d_updates += 1
            row = {"step": state.d_updates, "role": "discriminator", "L_A": float(loss_d), "total": float(loss_d)}
            state.history.append(row)
            if not _finite_row(row):
                _abort_nonfinite(state, row, {"generator": g, "discriminator": d}, manifest(), out_dir)
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            opt_d.step()
            pbar.update(1)
            logger.debug(
                f"d-step {state.d_updates}: generator {state.history[-2]['total']:.4f}, "
                f"discriminator {float(loss_d):.4f}"
            )

            if cfg.checkpoint_every and state.d_updates % cfg.checkpoint_every == 0:
                checkpoint()

    frozen_after = frozen.hashes()
    if frozen_after != frozen_before:
        raise ContractError("A frozen network changed during inverter training")
    if holdout_images is not None:
        state.holdout_pixel_loss = (
            holdout_start,
            _holdout_loss(g, kind, holdout_images, holdout, map_cfg, embedder, device),
        )
        logger.info(
            f"Held-out pixel loss {state.holdout_pixel_loss[0]:.2f} -> {state.holdout_pixel_loss[1]:.2f}"
        )
    checkpoint()
    logger.info(
        f"Finished {kind} inverter: {state.g_updates} generator / {state.d_updates} discriminator updates"
    )
    return state


def _holdout_loss(
    g: nn.Module,
    kind: str,
    holdout_images: Optional[torch.Tensor],
    holdout: Optional[Dataset],
    map_cfg: MapConfig,
    embedder: EmbedderNet,
    device: torch.device,
) -> Optional[float]:
    """Pixel loss of the generator (eval mode) on the held-out batch."""
    if holdout_images is None:
        return None
    was_training = g.training
    g.eval()
    with torch.no_grad():
        if kind == "minutiae":
            cond = _map_tensor(holdout, map_cfg)[: holdout_images.shape[0]].to(device)
        else:
            cond = embedder(holdout_images)
        value = float(pixel_loss(holdout_images, g(cond), batched=True))
    g.train(was_training)
    return value


# ---------------------------------------------------------------------------
# Supervised networks
# ---------------------------------------------------------------------------


def _loader(tensors: Tuple[torch.Tensor, ...], cfg: TrainConfig, *labels: Any) -> DataLoader:
    n = tensors[0].shape[0]
    generator = torch.Generator().manual_seed(derive_seed(cfg.seed, "loader", *labels))
    return DataLoader(
        TensorDataset(*tensors),
        batch_size=cfg.batch_size,
        shuffle=True,
        drop_last=n > cfg.batch_size,
        generator=generator,
        num_workers=cfg.num_workers,
    )


def train_map_estimator(
    data: Dataset,
    cfg: TrainConfig,
    out_dir: Optional[Path] = None,
    *,
    map_config: Optional[MapConfig] = None,
    width: int = 16,
) -> TrainState:
    """
    Train the map estimator on (image, ground-truth map) pairs with a per-cell
    L2 loss. Blank images paired with empty maps are mixed in so background
    maps to zero. ``cfg.supervised_epochs == 0`` leaves the net untrained.

    Raises:
        ConfigurationError: On an empty dataset
        NumericError: On a non-finite loss
    """
    if len(data) == 0:
        raise ConfigurationError("Cannot train the map estimator on an empty dataset")
    h, w = data.impressions()[0].image.shape
    map_cfg = MapConfig(
        height=h,
        width=w,
        **({"sigma_s": map_config.sigma_s, "sigma_o": map_config.sigma_o} if map_config else {}),
    )
    device = resolve_device(cfg.device)
    seed_everything(cfg.seed)

    images = _image_tensor(data)
    maps = _map_tensor(data, map_cfg)
    n_blank = max(1, images.shape[0] // 10)
    images = torch.cat([images, torch.full((n_blank, 1, h, w), float(BACKGROUND))])
    maps = torch.cat([maps, torch.zeros((n_blank, *maps.shape[1:]))])

    net = build_map_estimator(init_seed=derive_seed(cfg.seed, "map-estimator"), width=width).to(device)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr_supervised)
    state = TrainState(kind="map-estimator", networks={"map_estimator": net})
    manifest = {
        "kind": "map-estimator",
        "width": width,
        "seed": cfg.seed,
        "train_fingers": data.finger_ids,
        "map_config": map_cfg.model_dump(),
    }

    loader = _loader((images, maps), cfg, "map-estimator")
    net.train()
    for epoch in tqdm(range(cfg.supervised_epochs), desc="Training map estimator"):
        for x, m in loader:
            loss = F.mse_loss(net(x.to(device)), m.to(device))
            state.g_updates += 1
            row = {"step": state.g_updates, "role": "map_estimator", "total": float(loss)}
            state.history.append(row)
            if not _finite_row(row):
                _abort_nonfinite(state, row, {"map_estimator": net}, manifest, out_dir)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        logger.debug(f"Map estimator epoch {epoch + 1}: loss {state.history[-1]['total']:.5f}")

    net.mark_trained(cfg.supervised_epochs > 0)
    net.eval()
    if not net.trained:
        logger.warning("Zero supervised epochs: map estimator left untrained")
    if out_dir is not None:
        path = save_checkpoint(
            out_dir,
            {"map_estimator": net},
            {**manifest, "trained": net.trained, "steps": state.g_updates},
            {"map_estimator": opt},
        )
        _write_log(state, path)
        state.checkpoints.append(path)
    return state


def _augment(x: torch.Tensor, cfg: TrainConfig, generator: torch.Generator) -> torch.Tensor:
    """Random rotation and translation; uncovered area becomes background."""
    n, _, h, _ = x.shape
    max_rot = math.radians(cfg.augment_rotation_deg)
    max_shift = cfg.augment_shift_px * h / 512.0
    rot = (torch.rand(n, generator=generator) * 2 - 1) * max_rot
    shift = (torch.rand(n, 2, generator=generator) * 2 - 1) * max_shift * 2.0 / h
    cos, sin = torch.cos(rot), torch.sin(rot)
    theta = torch.stack(
        [torch.stack([cos, -sin, shift[:, 0]], dim=1), torch.stack([sin, cos, shift[:, 1]], dim=1)],
        dim=1,
    ).to(x)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    moved = F.grid_sample(x - BACKGROUND, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return moved + BACKGROUND


def train_embedder(
    data: Dataset,
    cfg: TrainConfig,
    instance: str,
    out_dir: Optional[Path] = None,
    *,
    peer_seed: Optional[int] = None,
    width: int = 16,
) -> TrainState:
    """
    Train one embedder instance as an identity classifier over fingers with
    rotation/translation augmentation.

    Args:
        data: Fingers; each finger is one class
        cfg: Training configuration (``cfg.seed`` seeds this instance)
        instance: "A" (used inside inversion losses) or "B" (black-box matcher)
        out_dir: Checkpoint directory
        peer_seed: Seed of the other instance, when it exists
        width: Channel multiplier

    Raises:
        ConfigurationError: On an unknown instance, an empty dataset or a seed
            shared with the other instance
        NumericError: On a non-finite loss
    """
    if instance not in ("A", "B"):
        raise ConfigurationError(f"Embedder instance must be A or B, got {instance}")
    if len(data) == 0:
        raise ConfigurationError("Cannot train an embedder on an empty dataset")
    if peer_seed is not None and peer_seed == cfg.seed:
        raise ConfigurationError(
            f"Embedder-A and embedder-B must be trained with different seeds (both {cfg.seed})"
        )
    device = resolve_device(cfg.device)
    seed_everything(cfg.seed)

    images = _image_tensor(data)
    labels = torch.tensor(
        [i for i, f in enumerate(data.fingers) for _ in f.impressions], dtype=torch.long
    )
    net = build_embedder(
        len(data.fingers), init_seed=derive_seed(cfg.seed, "embedder", instance), width=width
    ).to(device)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr_supervised)
    augment_rng = torch.Generator().manual_seed(derive_seed(cfg.seed, "augment", instance))
    state = TrainState(kind="embedder", networks={"embedder": net})
    manifest = {
        "kind": "embedder",
        "instance": instance,
        "width": width,
        "num_classes": len(data.fingers),
        "seed": cfg.seed,
        "train_fingers": data.finger_ids,
    }

    loader = _loader((images, labels), cfg, "embedder", instance)
    net.train()
    for epoch in tqdm(range(cfg.supervised_epochs), desc=f"Training embedder-{instance}"):
        for x, y in loader:
            x, y = _augment(x, cfg, augment_rng).to(device), y.to(device)
            loss = F.cross_entropy(net.logits(net(x), y), y)
            state.g_updates += 1
            row = {"step": state.g_updates, "role": f"embedder_{instance}", "total": float(loss)}
            state.history.append(row)
            if not _finite_row(row):
                _abort_nonfinite(state, row, {"embedder": net}, manifest, out_dir)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        logger.debug(f"Embedder-{instance} epoch {epoch + 1}: loss {state.history[-1]['total']:.4f}")

    net.mark_trained(cfg.supervised_epochs > 0)
    net.eval()
    if not net.trained:
        logger.warning(f"Zero supervised epochs: embedder-{instance} left untrained")
    if out_dir is not None:
        path = save_checkpoint(
            out_dir,
            {"embedder": net},
            {**manifest, "trained": net.trained, "steps": state.g_updates},
            {"embedder": opt},
        )
        _write_log(state, path)
        state.checkpoints.append(path)
    return state
