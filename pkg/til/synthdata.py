"""Synthetic fingerprint datasets with ground-truth minutiae.

Fingers are generated from a zero-pole orientation field, grown into a ridge
pattern by iterated oriented Gabor filtering, and turned into impressions by
a rigid transform plus contrast and dropout noise. Every impression template
is re-extracted from the impression itself with a crossing-number extractor.
"""

import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import cv2
import numpy as np
from scipy import ndimage
from scipy.signal import fftconvolve
from scipy.spatial import cKDTree
from skimage.morphology import remove_small_holes, remove_small_objects, skeletonize
from tqdm import tqdm

from til.codec import Minutia, MinutiaeMap, MinutiaeTemplate, rasterize, read_template, write_map, write_template
from til.config import MapConfig, NetworkProfile, SynthConfig
from til.exceptions import ConfigurationError, DependencyError, GenerationError, InvalidInputError
from til.utils import atomic_write_text, derive_seed, ensure_local_dir, read_image, write_image

logger = logging.getLogger(__name__)

BACKGROUND = -1.0
BORDER_PX = 16
PRUNE_DISTANCE_PX = 8.0
MANIFEST_NAME = "manifest.json"

# Ring of 8 neighbours as (dy, dx), walked clockwise from the top-left
_RING = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


# ---------------------------------------------------------------------------
# Orientation fields
# ---------------------------------------------------------------------------


class Singularity(NamedTuple):
    kind: str  # "core" or "delta"
    x: float
    y: float


@dataclass(frozen=True)
class OrientationField:
    """H×W ridge orientations in [0, π) and the singularities that shaped them."""

    orientation: np.ndarray
    singularities: Tuple[Singularity, ...] = ()

    @property
    def shape(self) -> Tuple[int, int]:
        return self.orientation.shape

    @property
    def cores(self) -> List[Singularity]:
        return [s for s in self.singularities if s.kind == "core"]

    @property
    def deltas(self) -> List[Singularity]:
        return [s for s in self.singularities if s.kind == "delta"]


def gen_orientation_field(
    h: int,
    w: int,
    singularities: Sequence[Tuple[str, float, float]] = (),
    seed: int = 0,
    perturbation: float = 0.3,
) -> OrientationField:
    """
    Build an orientation field with the zero-pole construction.

    Each core adds half the argument of (z − core), each delta subtracts half
    the argument of (z − delta); a random base angle and a smooth low-frequency
    perturbation of total amplitude ``perturbation`` are added on top.

    Raises:
        InvalidInputError: On unknown kinds, more than two cores or deltas,
            out-of-bounds positions, or coincident singularities
    """
    sings = tuple(Singularity(*s) for s in singularities)
    for s in sings:
        if s.kind not in ("core", "delta"):
            raise InvalidInputError(f"Unknown singularity kind: {s.kind}")
        if not (0 <= s.x < w and 0 <= s.y < h):
            raise InvalidInputError(f"Singularity {s} lies outside {w}x{h}")
    for kind in ("core", "delta"):
        count = sum(1 for s in sings if s.kind == kind)
        if count > 2:
            raise InvalidInputError(f"At most two {kind}s are supported, got {count}")
    for a, b in itertools.combinations(sings, 2):
        if math.hypot(a.x - b.x, a.y - b.y) < 1.0:
            raise InvalidInputError(f"Coincident singularities at ({a.x}, {a.y})")

    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    z = xs + 1j * ys
    theta = np.full((h, w), rng.uniform(0.0, math.pi))
    for s in sings:
        sign = 1.0 if s.kind == "core" else -1.0
        theta += sign * 0.5 * np.angle(z - complex(s.x, s.y))

    # wavelengths of at least twice the image side keep the field smooth
    scale = 2.0 * max(h, w)
    for _ in range(3):
        kx, ky = rng.uniform(-1.0, 1.0, size=2)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        amplitude = rng.uniform(0.0, perturbation / 3.0)
        theta += amplitude * np.sin(2.0 * math.pi * (kx * xs + ky * ys) / scale + phase)

    return OrientationField(orientation=np.mod(theta, math.pi), singularities=sings)


# ---------------------------------------------------------------------------
# Master fingerprints
# ---------------------------------------------------------------------------


def _orientation_distance(a: np.ndarray, b: float) -> np.ndarray:
    """Distance between orientations modulo π, in [0, π/2]."""
    return np.abs(np.mod(a - b + math.pi / 2, math.pi) - math.pi / 2)


def gabor_bank(freq: float, n_bins: int = 16, gain: float = 2.0) -> List[np.ndarray]:
    """
    Zero-mean Gabor kernels for ``n_bins`` ridge orientations.

    Each kernel has gain ``gain`` on a sinusoid of the matching frequency and
    orientation, so repeated filtering with clipping grows a saturated ridge
    pattern.
    """
    sigma = 1.5 / freq * math.sqrt(1.0 / (6.0 * math.log(10.0)))
    radius = int(math.ceil(3.0 * sigma))
    ys, xs = np.mgrid[-radius : radius + 1, -radius : radius + 1].astype(np.float64)
    envelope = np.exp(-(xs**2 + ys**2) / (2.0 * sigma**2))
    kernels = []
    for n in range(n_bins):
        wave_dir = math.pi * n / n_bins + math.pi / 2
        phase = 2.0 * math.pi * freq * (xs * math.cos(wave_dir) + ys * math.sin(wave_dir))
        kernel = envelope * np.cos(phase)
        kernel -= envelope * (kernel.sum() / envelope.sum())
        matched = np.sum(kernel * np.cos(phase))
        kernels.append(gain * kernel / matched)
    return kernels


def _orientation_masks(orientation: np.ndarray, n_bins: int) -> np.ndarray:
    width = math.pi / n_bins
    masks = np.stack(
        [
            np.exp(-_orientation_distance(orientation, math.pi * n / n_bins) ** 2 / (2.0 * width**2))
            for n in range(n_bins)
        ]
    )
    return masks / masks.sum(axis=0, keepdims=True)


def ridge_coverage(img: np.ndarray, period: float) -> float:
    """Fraction of pixels whose local ridge amplitude reaches 0.5."""
    amplitude = ndimage.gaussian_filter(np.abs(img), sigma=period / 2.0)
    return float(np.mean(amplitude >= 0.5))


def synth_master(
    field: OrientationField,
    freq: float,
    seed: int,
    max_steps: int = 100,
    n_bins: int = 16,
    settle_steps: int = 3,
) -> np.ndarray:
    """
    Grow a master fingerprint from sparse impulses steered by ``field``.

    Args:
        field: Ridge orientations
        freq: Ridge frequency in cycles per pixel, in [0.05, 0.25]
        seed: Seed for the impulse positions and signs
        max_steps: Filtering iterations allowed before giving up
        n_bins: Orientation bins of the Gabor bank
        settle_steps: Extra iterations after coverage is reached

    Returns:
        float32 image in [−1, 1]

    Raises:
        InvalidInputError: If ``freq`` is out of range
        GenerationError: If 90% ridge coverage is not reached in ``max_steps``
    """
    if not 0.05 <= freq <= 0.25:
        raise InvalidInputError(f"Ridge frequency must lie in [0.05, 0.25], got {freq}")
    h, w = field.shape
    rng = np.random.default_rng(seed)
    kernels = gabor_bank(freq, n_bins)
    masks = _orientation_masks(field.orientation, n_bins)

    img = np.zeros((h, w), dtype=np.float64)
    n_spots = max(3, (h * w) // 2000)
    img[rng.integers(0, h, n_spots), rng.integers(0, w, n_spots)] = rng.choice([-1.0, 1.0], n_spots)

    def step(current: np.ndarray) -> np.ndarray:
        grown = np.zeros_like(current)
        for kernel, mask in zip(kernels, masks):
            grown += fftconvolve(current, kernel, mode="same") * mask
        return np.clip(grown, -1.0, 1.0)

    period = 1.0 / freq
    for n_step in range(1, max_steps + 1):
        img = step(img)
        if ridge_coverage(img, period) >= 0.9:
            logger.debug(f"Master reached ridge coverage after {n_step} steps")
            break
    else:
        raise GenerationError(
            f"Ridge pattern did not cover 90% of the image after {max_steps} steps (freq={freq})"
        )
    for _ in range(settle_steps):
        img = step(img)
    return img.astype(np.float32)


# ---------------------------------------------------------------------------
# Impressions
# ---------------------------------------------------------------------------


def _shift_exact(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    h, w = img.shape
    out = np.full_like(img, BACKGROUND)
    src = img[max(-dy, 0) : h - max(dy, 0), max(-dx, 0) : w - max(dx, 0)]
    out[max(dy, 0) : max(dy, 0) + src.shape[0], max(dx, 0) : max(dx, 0) + src.shape[1]] = src
    return out


def make_impression(
    master: np.ndarray,
    rot: float,
    shift: Tuple[float, float],
    noise_level: float,
    seed: int,
) -> np.ndarray:
    """
    One impression of a master: rigid transform, contrast and dropout noise.

    ``rot`` rotates counter-clockwise (as displayed) about the image center
    and ``shift`` moves content by (dx, dy) pixels; uncovered pixels take the
    background value −1. Contrast modulation, dropout blotches and pixel noise
    all scale with ``noise_level``.

    Raises:
        InvalidInputError: If |rot| > π/6 or a shift component exceeds 60 px
    """
    dx, dy = shift
    if abs(rot) > math.pi / 6 + 1e-12:
        raise InvalidInputError(f"Rotation must lie within ±π/6, got {rot}")
    if abs(dx) > 60 or abs(dy) > 60:
        raise InvalidInputError(f"Shift must lie within ±60 px, got ({dx}, {dy})")

    img = np.asarray(master, dtype=np.float32)
    h, w = img.shape
    if rot == 0 and float(dx).is_integer() and float(dy).is_integer():
        out = _shift_exact(img, int(dx), int(dy))
    else:
        matrix = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), math.degrees(rot), 1.0)
        matrix[:, 2] += (dx, dy)
        out = cv2.warpAffine(
            img,
            matrix,
            (w, h),
            flags=cv2.INTER_LINEAR,
            borderMode=cv2.BORDER_CONSTANT,
            borderValue=BACKGROUND,
        )

    if noise_level <= 0:
        return out.astype(np.float32)

    rng_contrast, rng_blotch, rng_pixel = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)
    )
    smooth = ndimage.gaussian_filter(rng_contrast.standard_normal((h, w)), sigma=h / 8.0)
    smooth /= smooth.std() + 1e-12
    contrast = np.clip(1.0 + 0.5 * noise_level * smooth, 0.2, 1.5)
    out = out * contrast

    max_blotches = 8
    centers = rng_blotch.uniform(0, 1, size=(max_blotches, 2)) * (w, h)
    radii = rng_blotch.uniform(0.03, 0.08, size=max_blotches) * min(h, w)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    for (cx, cy), r in list(zip(centers, radii))[: int(round(max_blotches * noise_level))]:
        weight = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * r**2))
        out = out * (1.0 - weight) + BACKGROUND * weight

    out = out + 0.3 * noise_level * rng_pixel.standard_normal((h, w))
    return np.clip(out, -1.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Classical minutiae extraction
# ---------------------------------------------------------------------------


class DetectedMinutia(NamedTuple):
    x: float
    y: float
    theta: float
    kind: str  # "ending" or "bifurcation"


def foreground_mask(img: np.ndarray, sigma: float = 8.0, min_std: float = 0.2) -> np.ndarray:
    """Pixels whose local standard deviation marks ridge texture."""
    mean = ndimage.gaussian_filter(img, sigma)
    sq = ndimage.gaussian_filter(img**2, sigma)
    std = np.sqrt(np.maximum(sq - mean**2, 0.0))
    return ndimage.binary_fill_holes(std > min_std)


def binarize(img: np.ndarray, block_size: int = 17) -> np.ndarray:
    """Ridge pixels (brighter than their local mean) as a boolean mask."""
    raw = np.round((np.clip(img, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    raw = cv2.GaussianBlur(raw, (3, 3), 0)
    binary = cv2.adaptiveThreshold(
        raw, 1, cv2.ADAPTIVE_THRESH_MEAN_C, cv2.THRESH_BINARY, block_size, 0
    )
    return binary.astype(bool)


def crossing_numbers(skeleton: np.ndarray) -> np.ndarray:
    """Crossing number ½ Σ |P_i − P_{i+1}| over the 8-ring of each skeleton pixel."""
    h, w = skeleton.shape
    padded = np.pad(skeleton.astype(np.int8), 1)
    ring = [padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w] for dy, dx in _RING]
    cn = sum(np.abs(ring[i] - ring[(i + 1) % 8]) for i in range(8)) // 2
    return np.where(skeleton, cn, 0)


def _branch_directions(skeleton: np.ndarray, y: int, x: int, length: int = 8) -> List[float]:
    """Directions from (x, y) to the points reached by walking each skeleton branch."""
    h, w = skeleton.shape

    def on(py: int, px: int) -> bool:
        return 0 <= py < h and 0 <= px < w and bool(skeleton[py, px])

    ring = [(y + dy, x + dx) for dy, dx in _RING]
    occupied = [on(py, px) for py, px in ring]
    starts = [ring[i] for i in range(8) if occupied[i] and not occupied[i - 1]]
    if not starts and any(occupied):
        starts = [ring[occupied.index(True)]]

    directions = []
    for start in starts:
        visited = {(y, x), *(p for p, o in zip(ring, occupied) if o)}
        cy, cx = start
        for _ in range(length - 1):
            nxt = next(
                (
                    (cy + dy, cx + dx)
                    for dy, dx in _RING
                    if on(cy + dy, cx + dx) and (cy + dy, cx + dx) not in visited
                ),
                None,
            )
            if nxt is None:
                break
            visited.add(nxt)
            cy, cx = nxt
        directions.append(math.atan2(cy - y, cx - x))
    return directions


def _minutia_direction(kind: str, directions: List[float]) -> Optional[float]:
    if not directions:
        return None
    if kind == "ending" or len(directions) < 3:
        return directions[0] + math.pi

    def isolation(i: int) -> float:
        return min(
            abs(math.remainder(directions[i] - directions[j], 2 * math.pi))
            for j in range(len(directions))
            if j != i
        )

    stem = max(range(len(directions)), key=isolation)
    return directions[stem] + math.pi


def _collapse(points: List[DetectedMinutia], radius: float) -> List[DetectedMinutia]:
    """Keep the first of every group of same-kind points within ``radius``."""
    kept: List[DetectedMinutia] = []
    for p in points:
        if not any(q.kind == p.kind and math.hypot(q.x - p.x, q.y - p.y) <= radius for q in kept):
            kept.append(p)
    return kept


def detect_minutiae(
    img: np.ndarray, border: int = BORDER_PX, prune_distance: float = PRUNE_DISTANCE_PX
) -> List[DetectedMinutia]:
    """
    Crossing-number minutiae with their kind.

    Binarize with an adaptive threshold, thin to a one-pixel skeleton, keep
    skeleton pixels with crossing number 1 (ending) or 3 (bifurcation) that
    lie more than ``border`` pixels inside both the image and the textured
    foreground, then drop every pair closer than ``prune_distance``.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.size == 0 or float(img.std()) < 1e-6:
        return []

    fg = foreground_mask(img)
    inside = ndimage.distance_transform_edt(np.pad(fg, 1))[1:-1, 1:-1] > border
    ridges = binarize(img) & fg
    ridges = remove_small_objects(ridges, min_size=12)
    ridges = remove_small_holes(ridges, area_threshold=12)
    skeleton = skeletonize(ridges)
    cn = crossing_numbers(skeleton)

    points: List[DetectedMinutia] = []
    for y, x in np.argwhere(((cn == 1) | (cn == 3)) & inside):
        kind = "ending" if cn[y, x] == 1 else "bifurcation"
        theta = _minutia_direction(kind, _branch_directions(skeleton, int(y), int(x)))
        if theta is not None:
            points.append(DetectedMinutia(float(x), float(y), theta, kind))

    points = _collapse(points, radius=3.0)
    if len(points) > 1:
        tree = cKDTree(np.array([(p.x, p.y) for p in points]))
        spurious = {i for pair in tree.query_pairs(r=prune_distance - 1e-9) for i in pair}
        points = [p for i, p in enumerate(points) if i not in spurious]
    return sorted(points, key=lambda p: (p.y, p.x))


def extract_minutiae_classical(img: np.ndarray, source_id: str = "classical") -> MinutiaeTemplate:
    """
    Minutiae template of an image by the crossing-number method.

    A blank image gives an empty template.
    """
    img = np.asarray(img)
    h, w = img.shape
    minutiae = tuple(Minutia(p.x, p.y, p.theta) for p in detect_minutiae(img))
    return MinutiaeTemplate(minutiae=minutiae, width=w, height=h, source_id=source_id)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineParams:
    rotation: float
    dx: float
    dy: float
    noise_level: float
    seed: int

    def to_dict(self) -> Dict[str, float]:
        return {
            "rotation": self.rotation,
            "dx": self.dx,
            "dy": self.dy,
            "noise_level": self.noise_level,
            "seed": self.seed,
        }


@dataclass
class Impression:
    """One impression: image, re-extracted template and the transform that made it."""

    impression_id: str
    index: int
    image: np.ndarray
    template: MinutiaeTemplate
    affine: AffineParams

    def minutiae_map(self, cfg: MapConfig) -> MinutiaeMap:
        return rasterize(self.template, cfg)


@dataclass
class SyntheticFinger:
    finger_id: str
    impressions: List[Impression]
    split: str = "train"
    pattern: str = "arch"
    frequency: float = 0.1
    master: Optional[np.ndarray] = None


@dataclass
class Dataset:
    """Identity-labeled fingers plus the generation manifest."""

    fingers: List[SyntheticFinger]
    manifest: Dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        ids = [f.finger_id for f in self.fingers]
        if len(ids) != len(set(ids)):
            raise InvalidInputError("Finger ids must be unique")
        for f in self.fingers:
            if f.split not in ("train", "eval"):
                raise InvalidInputError(f"Unknown split '{f.split}' for {f.finger_id}")

    def __len__(self) -> int:
        return len(self.fingers)

    @property
    def finger_ids(self) -> List[str]:
        return [f.finger_id for f in self.fingers]

    @property
    def impressions_per_finger(self) -> int:
        counts = {len(f.impressions) for f in self.fingers}
        return counts.pop() if len(counts) == 1 else min(counts, default=0)

    def split(self, name: str) -> "Dataset":
        """Fingers tagged ``name`` ("train", "eval"), or all for "all"."""
        if name == "all":
            return self
        return Dataset([f for f in self.fingers if f.split == name], dict(self.manifest))

    def impressions(self) -> List[Impression]:
        return [imp for f in self.fingers for imp in f.impressions]

    def impression(self, impression_id: str) -> Impression:
        for imp in self.impressions():
            if imp.impression_id == impression_id:
                return imp
        raise KeyError(impression_id)

    def finger_of(self, impression_id: str) -> str:
        return impression_id.rsplit("_", 1)[0]

    def manifest_json(self) -> str:
        return json.dumps(self.manifest, indent=2, sort_keys=True)


def _finger_layout(rng: np.random.Generator, h: int, w: int) -> Tuple[str, List[Tuple[str, float, float]]]:
    """Draw a pattern class and its singularity positions."""
    pattern = str(rng.choice(["arch", "loop", "whorl"], p=[0.2, 0.5, 0.3]))
    cx = w / 2 + rng.uniform(-0.15, 0.15) * w
    cy = h * 0.4 + rng.uniform(-0.1, 0.1) * h
    if pattern == "arch":
        return pattern, []
    if pattern == "loop":
        side = rng.choice([-1.0, 1.0])
        delta = (cx + side * rng.uniform(0.2, 0.3) * w, cy + rng.uniform(0.3, 0.4) * h)
        return pattern, [("core", cx, cy), ("delta", *_clamp(delta, h, w))]
    gap = rng.uniform(0.05, 0.1) * h
    return pattern, [
        ("core", cx, cy - gap),
        ("core", cx, cy + gap),
        ("delta", *_clamp((cx - 0.3 * w, cy + 0.35 * h), h, w)),
        ("delta", *_clamp((cx + 0.3 * w, cy + 0.35 * h), h, w)),
    ]


def _clamp(point: Tuple[float, float], h: int, w: int) -> Tuple[float, float]:
    return (float(np.clip(point[0], 2, w - 3)), float(np.clip(point[1], 2, h - 3)))


def _make_finger(index: int, n_impressions: int, split: str, cfg: SynthConfig) -> SyntheticFinger:
    finger_id = f"s{cfg.seed}-f{index:05d}"
    res = cfg.profile.resolution
    rng = np.random.default_rng(derive_seed(cfg.seed, "finger", index))
    pattern, singularities = _finger_layout(rng, res, res)
    freq = float(rng.uniform(*cfg.ridge_frequency))
    orientation = gen_orientation_field(
        res, res, singularities, seed=derive_seed(cfg.seed, "field", index)
    )
    master = synth_master(orientation, freq, seed=derive_seed(cfg.seed, "master", index))

    impressions = []
    max_rot = math.radians(cfg.max_rotation_deg)
    for k in range(n_impressions):
        affine = AffineParams(
            rotation=float(rng.uniform(-max_rot, max_rot)),
            dx=float(np.round(rng.uniform(-cfg.max_shift_px, cfg.max_shift_px))),
            dy=float(np.round(rng.uniform(-cfg.max_shift_px, cfg.max_shift_px))),
            noise_level=cfg.noise_level,
            seed=derive_seed(cfg.seed, "impression", index, k),
        )
        image = make_impression(
            master, affine.rotation, (affine.dx, affine.dy), affine.noise_level, affine.seed
        )
        impression_id = f"{finger_id}_{k}"
        template = extract_minutiae_classical(image, source_id=impression_id)
        impressions.append(Impression(impression_id, k, image, template, affine))
    return SyntheticFinger(finger_id, impressions, split, pattern, freq, master)


def _finger_manifest(finger: SyntheticFinger) -> Dict:
    return {
        "finger_id": finger.finger_id,
        "split": finger.split,
        "pattern": finger.pattern,
        "frequency": finger.frequency,
        "impressions": [
            {
                "impression_id": imp.impression_id,
                "index": imp.index,
                "affine": imp.affine.to_dict(),
                "n_minutiae": len(imp.template),
            }
            for imp in finger.impressions
        ],
    }


def build_dataset(
    n_fingers: int,
    impressions_per_finger: int,
    profile: Optional[NetworkProfile] = None,
    seed: int = 1,
    *,
    eval_fingers: int = 0,
    config: Optional[SynthConfig] = None,
) -> Dataset:
    """
    Generate a deterministic identity-labeled dataset.

    Fingers are generated in parallel, each from seeds derived from ``seed``
    and its index, so the result does not depend on scheduling. The last
    ``eval_fingers`` fingers are tagged "eval", the rest "train".

    Args:
        n_fingers: Number of fingers (≥ 2)
        impressions_per_finger: Impressions per finger (≥ 2)
        profile: Network profile whose resolution sets the image size
        seed: Generation seed
        eval_fingers: Fingers tagged as the eval split
        config: Remaining generation options (noise, rotation, frequency, workers)

    Returns:
        Dataset with a manifest of seeds, parameters and affine transforms

    Raises:
        ConfigurationError: If the counts are invalid
        GenerationError: If any finger fails to generate
    """
    base = config or SynthConfig()
    try:
        cfg = SynthConfig(
            **{
                **base.model_dump(),
                "n_fingers": n_fingers,
                "impressions": impressions_per_finger,
                "seed": seed,
                "eval_fingers": eval_fingers,
                "profile": (profile or base.profile).model_dump(),
            }
        )
    except ValueError as e:
        raise ConfigurationError(f"Invalid dataset request: {e}") from e

    logger.info(
        f"Generating {cfg.n_fingers} fingers x {cfg.impressions} impressions "
        f"at {cfg.profile.resolution}px (seed {cfg.seed})"
    )
    first_eval = cfg.n_fingers - cfg.eval_fingers
    fingers: Dict[int, SyntheticFinger] = {}
    failed = []
    with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
        future_to_index = {
            executor.submit(
                _make_finger, i, cfg.impressions, "eval" if i >= first_eval else "train", cfg
            ): i
            for i in range(cfg.n_fingers)
        }
        with tqdm(total=cfg.n_fingers, desc="Generating fingers") as pbar:
            for future in as_completed(future_to_index):
                index = future_to_index[future]
                try:
                    fingers[index] = future.result()
                except Exception as e:
                    failed.append((index, str(e)))
                pbar.update(1)

    if failed:
        error_summary = "\n".join(f"  - finger {i}: {err}" for i, err in sorted(failed))
        raise GenerationError(
            f"Failed to generate {len(failed)}/{cfg.n_fingers} fingers:\n{error_summary}"
        )

    ordered = [fingers[i] for i in range(cfg.n_fingers)]
    manifest = {
        "seed": cfg.seed,
        "n_fingers": cfg.n_fingers,
        "impressions": cfg.impressions,
        "eval_fingers": cfg.eval_fingers,
        "profile": cfg.profile.model_dump(mode="json"),
        "config": cfg.model_dump(mode="json", exclude={"workers"}),
        "fingers": [_finger_manifest(f) for f in ordered],
    }
    total = sum(len(imp.template) for f in ordered for imp in f.impressions)
    logger.info(f"Generated {len(ordered)} fingers with {total} minutiae in total")
    return Dataset(ordered, manifest)


def save_dataset(dataset: Dataset, root: Path, map_config: Optional[MapConfig] = None) -> Path:
    """
    Write a dataset as ``<root>/<finger_id>/impression_<k>.{png,tpl,map}``
    plus ``master.png`` per finger and ``manifest.json`` at the root.
    """
    root = Path(root)
    ensure_local_dir(root)
    for finger in tqdm(dataset.fingers, desc="Writing fingers"):
        finger_dir = root / finger.finger_id
        ensure_local_dir(finger_dir)
        if finger.master is not None:
            write_image(finger.master, finger_dir / "master.png")
        for imp in finger.impressions:
            stem = finger_dir / f"impression_{imp.index}"
            write_image(imp.image, stem.with_suffix(".png"))
            write_template(imp.template, stem.with_suffix(".tpl"))
            h, w = imp.image.shape
            cfg = map_config or MapConfig(height=h, width=w)
            write_map(imp.minutiae_map(cfg), stem.with_suffix(".map"))
    atomic_write_text(root / MANIFEST_NAME, dataset.manifest_json() + "\n")
    logger.info(f"Wrote dataset of {len(dataset)} fingers to {root}")
    return root


def load_dataset(root: Path) -> Dataset:
    """
    Read a dataset written by :func:`save_dataset`.

    Raises:
        DependencyError: If the directory or its manifest is missing
    """
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DependencyError(f"No dataset manifest at {manifest_path}", dependency=str(root))
    manifest = json.loads(manifest_path.read_text())

    fingers = []
    for entry in manifest["fingers"]:
        finger_dir = root / entry["finger_id"]
        impressions = []
        for meta in entry["impressions"]:
            stem = finger_dir / f"impression_{meta['index']}"
            template = read_template(stem.with_suffix(".tpl"))
            template = MinutiaeTemplate(
                template.minutiae, template.width, template.height, source_id=meta["impression_id"]
            )
            impressions.append(
                Impression(
                    impression_id=meta["impression_id"],
                    index=meta["index"],
                    image=read_image(stem.with_suffix(".png")),
                    template=template,
                    affine=AffineParams(**meta["affine"]),
                )
            )
        master_path = finger_dir / "master.png"
        fingers.append(
            SyntheticFinger(
                finger_id=entry["finger_id"],
                impressions=impressions,
                split=entry["split"],
                pattern=entry["pattern"],
                frequency=entry["frequency"],
                master=read_image(master_path) if master_path.exists() else None,
            )
        )
    logger.info(f"Loaded dataset of {len(fingers)} fingers from {root}")
    return Dataset(fingers, manifest)
