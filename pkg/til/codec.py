"""Minutiae templates: text codec, 6-channel map rasterization and peak decoding."""

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from til.config import MapConfig
from til.exceptions import ContractError, InvalidInputError, ParseError

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
ANGLE_TOLERANCE = 1e-9

# H, W, K as unsigned 32-bit little-endian
_MAP_HEADER = struct.Struct("<III")


def wrap_angle(theta: float) -> float:
    """Reduce an angle to the canonical range [0, 2π)."""
    wrapped = math.fmod(theta, TWO_PI)
    if wrapped < 0:
        wrapped += TWO_PI
    if wrapped >= TWO_PI:
        wrapped = 0.0
    return wrapped


def angle_distance(a, b):
    """Wrapped angular distance in [0, π]; works on floats and arrays."""
    return np.abs(np.mod(np.asarray(a) - np.asarray(b) + np.pi, TWO_PI) - np.pi)


@dataclass(frozen=True, eq=False)
class Minutia:
    """A ridge ending or bifurcation: column ``x``, row ``y``, direction ``theta``."""

    x: float
    y: float
    theta: float

    def __post_init__(self) -> None:
        if self.x < 0 or self.y < 0:
            raise InvalidInputError(
                f"Minutia coordinates must be non-negative, got ({self.x}, {self.y})"
            )
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Minutia):
            return NotImplemented
        return (
            self.x == other.x
            and self.y == other.y
            and float(angle_distance(self.theta, other.theta)) <= ANGLE_TOLERANCE
        )

    def __hash__(self) -> int:
        return hash((self.x, self.y))


@dataclass(frozen=True)
class MinutiaeTemplate:
    """Ordered minutiae of one impression in image coordinates (origin top-left)."""

    minutiae: Tuple[Minutia, ...]
    width: int
    height: int
    source_id: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "minutiae", tuple(self.minutiae))
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError(
                f"Template dimensions must be positive, got {self.width}x{self.height}"
            )
        for idx, m in enumerate(self.minutiae):
            if not (m.x < self.width and m.y < self.height):
                raise InvalidInputError(
                    f"Minutia {idx} at ({m.x}, {m.y}) lies outside {self.width}x{self.height}"
                )

    def __len__(self) -> int:
        return len(self.minutiae)

    def as_array(self) -> np.ndarray:
        """Minutiae as an ``(N, 3)`` float array of (x, y, theta)."""
        if not self.minutiae:
            return np.zeros((0, 3), dtype=np.float64)
        return np.array([(m.x, m.y, m.theta) for m in self.minutiae], dtype=np.float64)

    @classmethod
    def from_array(
        cls, points: np.ndarray, width: int, height: int, source_id: str = ""
    ) -> "MinutiaeTemplate":
        """Build a template from an ``(N, 3)`` array of (x, y, theta)."""
        minutiae = [Minutia(float(x), float(y), float(t)) for x, y, t in points]
        return cls(minutiae=tuple(minutiae), width=width, height=height, source_id=source_id)


@dataclass(frozen=True)
class MinutiaeMap:
    """H×W×K grid of minutiae evidence, every cell in [0, 1]."""

    values: np.ndarray
    config: MapConfig

    def __post_init__(self) -> None:
        expected = (self.config.height, self.config.width, self.config.channels)
        if self.values.shape != expected:
            raise InvalidInputError(
                f"Map values have shape {self.values.shape}, expected {expected}"
            )
        values = np.asarray(self.values, dtype=np.float32)
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise InvalidInputError("Map cells must lie in [0, 1]")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)


def parse_template(text: str, source_id: str = "") -> MinutiaeTemplate:
    """
    Parse a template document.

    The document is a ``W H`` header line followed by one ``x y theta_degrees``
    line per minutia. Blank lines are ignored.

    Args:
        text: Template document
        source_id: Extractor provenance recorded on the template

    Returns:
        Parsed template with theta in radians in [0, 2π)

    Raises:
        ParseError: On a malformed line (message names the line number)
        InvalidInputError: On an out-of-bounds coordinate
    """
    header: Optional[Tuple[int, int]] = None
    minutiae: List[Minutia] = []
    for line_number, line in enumerate(text.splitlines(), 1):
        tokens = line.split()
        if not tokens:
            continue
        if header is None:
            if len(tokens) != 2:
                raise ParseError("header must be 'W H'", line_number)
            try:
                width, height = int(tokens[0]), int(tokens[1])
            except ValueError:
                raise ParseError(f"non-integer header '{line.strip()}'", line_number)
            header = (width, height)
            continue
        if len(tokens) != 3:
            raise ParseError(
                f"expected 'x y theta', got {len(tokens)} fields", line_number
            )
        try:
            x, y, degrees = (float(t) for t in tokens)
        except ValueError:
            raise ParseError(f"non-numeric minutia '{line.strip()}'", line_number)
        if not all(math.isfinite(v) for v in (x, y, degrees)):
            raise ParseError("non-finite value", line_number)
        minutiae.append(Minutia(x, y, math.radians(math.fmod(degrees, 360.0))))

    if header is None:
        raise ParseError("missing 'W H' header", 1)
    return MinutiaeTemplate(
        minutiae=tuple(minutiae), width=header[0], height=header[1], source_id=source_id
    )


def serialize_template(template: MinutiaeTemplate) -> str:
    """Render a template in the text format read by :func:`parse_template`."""
    lines = [f"{template.width} {template.height}"]
    for m in template.minutiae:
        lines.append(f"{m.x!r} {m.y!r} {math.degrees(m.theta)!r}")
    return "\n".join(lines) + "\n"


def read_template(path: Path) -> MinutiaeTemplate:
    """Read a template file."""
    path = Path(path)
    return parse_template(path.read_text(encoding="utf-8"), source_id=path.stem)


def write_template(template: MinutiaeTemplate, path: Path) -> None:
    """Write a template file (UTF-8, LF line endings)."""
    Path(path).write_text(serialize_template(template), encoding="utf-8", newline="\n")


def channel_centers(channels: int = 6) -> np.ndarray:
    """Orientation channel centers 2πk/K."""
    return TWO_PI * np.arange(channels) / channels


def rasterize(template: MinutiaeTemplate, cfg: MapConfig) -> MinutiaeMap:
    """
    Encode a template as a 6-channel minutiae map.

    Cell (i, j, k) is the clipped sum over minutiae of a spatial Gaussian
    (width ``sigma_s``) at the minutia position times a wrapped Gaussian
    (width ``sigma_o``) between the minutia direction and channel center 2πk/K.

    Raises:
        InvalidInputError: If template and map dimensions disagree
    """
    if template.width != cfg.width or template.height != cfg.height:
        raise InvalidInputError(
            f"Template is {template.width}x{template.height} but map is {cfg.width}x{cfg.height}"
        )
    values = np.zeros((cfg.height, cfg.width, cfg.channels), dtype=np.float64)
    if not template.minutiae:
        return MinutiaeMap(values=values.astype(np.float32), config=cfg)

    points = template.as_array()
    xs, ys = points[:, 0], points[:, 1]
    # quantized so theta and theta + 2π hit identical kernels
    thetas = np.round(points[:, 2] * 1e9) / 1e9

    rows = np.arange(cfg.height, dtype=np.float64)
    cols = np.arange(cfg.width, dtype=np.float64)
    gy = np.exp(-((rows[None, :] - ys[:, None]) ** 2) / (2.0 * cfg.sigma_s**2))
    gx = np.exp(-((cols[None, :] - xs[:, None]) ** 2) / (2.0 * cfg.sigma_s**2))
    d_o = angle_distance(thetas[:, None], channel_centers(cfg.channels)[None, :])
    go = np.exp(-(d_o**2) / (2.0 * cfg.sigma_o**2))

    values = np.einsum("mi,mj,mk->ijk", gy, gx, go)
    np.clip(values, 0.0, 1.0, out=values)
    return MinutiaeMap(values=values.astype(np.float32), config=cfg)


def decode_peaks(
    m: MinutiaeMap, threshold: float, source_id: str = "decoded"
) -> MinutiaeTemplate:
    """
    Recover minutiae from a map as local maxima of the channel-summed map.

    Positions are refined to sub-pixel accuracy with a parabola through the
    log-values of the 3-neighborhood along each axis; theta is the circular
    mean of the channel centers weighted by the channel responses at the peak.
    On plateaus the lexicographically smallest (row, col) is kept.
    """
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    cfg = m.config
    values = m.values.astype(np.float64)
    summed = values.sum(axis=2)
    if not np.any(summed > threshold):
        return MinutiaeTemplate(minutiae=(), width=cfg.width, height=cfg.height, source_id=source_id)

    local_max = ndimage.maximum_filter(summed, size=3, mode="constant", cval=-np.inf)
    candidates = (summed == local_max) & (summed > threshold)
    labels, count = ndimage.label(candidates, structure=np.ones((3, 3)))
    centers = channel_centers(cfg.channels)

    minutiae: List[Minutia] = []
    seen = set()
    # argwhere walks row-major, so the first pixel of each label is the smallest (i, j)
    for i, j in np.argwhere(labels > 0):
        label = labels[i, j]
        if label in seen:
            continue
        seen.add(label)
        y = i + _parabolic_offset(summed, i, j, axis=0)
        x = j + _parabolic_offset(summed, i, j, axis=1)
        x = min(max(x, 0.0), np.nextafter(cfg.width, 0))
        y = min(max(y, 0.0), np.nextafter(cfg.height, 0))
        weights = values[i, j]
        theta = math.atan2(
            float(np.dot(weights, np.sin(centers))), float(np.dot(weights, np.cos(centers)))
        )
        minutiae.append(Minutia(float(x), float(y), theta))

    logger.debug(f"Decoded {len(minutiae)} peaks from {count} candidate regions")
    return MinutiaeTemplate(
        minutiae=tuple(minutiae), width=cfg.width, height=cfg.height, source_id=source_id
    )


def _parabolic_offset(grid: np.ndarray, i: int, j: int, axis: int) -> float:
    """Sub-pixel offset of a peak along one axis from log-values of its neighbors."""
    size = grid.shape[axis]
    idx = i if axis == 0 else j
    if idx == 0 or idx == size - 1:
        return 0.0
    if axis == 0:
        lo, mid, hi = grid[i - 1, j], grid[i, j], grid[i + 1, j]
    else:
        lo, mid, hi = grid[i, j - 1], grid[i, j], grid[i, j + 1]
    if min(lo, mid, hi) <= 0:
        return 0.0
    lo, mid, hi = math.log(lo), math.log(mid), math.log(hi)
    denom = lo - 2.0 * mid + hi
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (lo - hi) / denom, -0.5, 0.5))


def write_map(m: MinutiaeMap, path: Path) -> None:
    """Write a map: ``<III`` (H, W, K) header then row-major little-endian float32."""
    cfg = m.config
    with open(path, "wb") as f:
        f.write(_MAP_HEADER.pack(cfg.height, cfg.width, cfg.channels))
        f.write(np.ascontiguousarray(m.values, dtype="<f4").tobytes())


def read_map(path: Path, sigma_s: float = 3.0, sigma_o: float = math.pi / 6) -> MinutiaeMap:
    """
    Read a map written by :func:`write_map`.

    The binary format carries only dimensions, so kernel widths are supplied
    by the caller.
    """
    data = Path(path).read_bytes()
    if len(data) < _MAP_HEADER.size:
        raise InvalidInputError(f"Map file {path} is truncated")
    height, width, channels = _MAP_HEADER.unpack_from(data)
    expected = _MAP_HEADER.size + 4 * height * width * channels
    if len(data) != expected:
        raise InvalidInputError(
            f"Map file {path} has {len(data)} bytes, expected {expected} for {height}x{width}x{channels}"
        )
    values = np.frombuffer(data, dtype="<f4", offset=_MAP_HEADER.size)
    cfg = MapConfig(
        height=height, width=width, channels=channels, sigma_s=sigma_s, sigma_o=sigma_o
    )
    return MinutiaeMap(values=values.reshape(height, width, channels).copy(), config=cfg)


def stack_maps(maps: Iterable[MinutiaeMap]) -> np.ndarray:
    """Stack maps into an ``(N, K, H, W)`` float32 array (channels first)."""
    return np.stack([np.transpose(m.values, (2, 0, 1)) for m in maps]).astype(np.float32)
