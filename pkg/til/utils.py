"""Utility functions shared by the lab modules."""

import hashlib
import logging
import os
import random
import tempfile
from pathlib import Path
from typing import Union

import cv2
import numpy as np
import torch

from til.exceptions import InvalidInputError

logger = logging.getLogger(__name__)


def ensure_local_dir(path: Path) -> None:
    """Ensure local directory exists."""
    Path(path).mkdir(parents=True, exist_ok=True)


def derive_seed(seed: int, *labels: Union[str, int]) -> int:
    """
    Split one run seed into an independent component seed.

    The derived value depends only on ``seed`` and the labels, so the same
    component always gets the same stream regardless of scheduling order.
    """
    payload = ":".join([str(seed), *(str(label) for label in labels)])
    return int.from_bytes(hashlib.sha256(payload.encode()).digest()[:4], "little")


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch global generators."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def resolve_device(name: str = "auto") -> torch.device:
    """Map ``auto``/``cpu``/``cuda`` to a torch device."""
    if name == "auto":
        name = "cuda" if torch.cuda.is_available() else "cpu"
    return torch.device(name)


def file_hash(path: Path) -> str:
    """SHA-256 of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def directory_hash(path: Path) -> str:
    """Content hash of every file under a directory, in sorted relative-path order."""
    root = Path(path)
    digest = hashlib.sha256()
    for item in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(item.relative_to(root).as_posix().encode())
        digest.update(file_hash(item).encode())
    return digest.hexdigest()


def atomic_write_text(path: Path, text: str) -> None:
    """Write text through a temporary sibling file and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except Exception:
        Path(tmp).unlink(missing_ok=True)
        raise


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Map an image in [−1, 1] to 8-bit grayscale."""
    return np.round((np.clip(img, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    """Map 8-bit grayscale [0, 255] to float32 in [−1, 1]."""
    return (raw.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def write_image(img: np.ndarray, path: Path) -> None:
    """Write an image in [−1, 1] as an 8-bit grayscale PNG."""
    if not cv2.imwrite(str(path), to_uint8(img)):
        raise InvalidInputError(f"Could not write image {path}")


def read_image(path: Path) -> np.ndarray:
    """Read an 8-bit grayscale image into [−1, 1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise InvalidInputError(f"Could not read image {path}")
    return from_uint8(raw)
