"""Training objectives for the two inversion pipelines.

Per-sample losses are sums over their cells; with ``batched=True`` the first
dimension is the batch and the result is the batch mean of per-sample sums.
"""

import logging
from typing import Iterable, Mapping, Union

import numpy as np
import torch

from til.config import LossWeights
from til.exceptions import ContractError

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12

MINUTIAE_PARTS = ("L_A", "L_m", "L_ID", "L_i")
DEEP_PARTS = ("L_A", "L_ID", "L_i")

TensorLike = Union[torch.Tensor, np.ndarray, float, Iterable[float]]


def _as_tensor(x) -> torch.Tensor:
    """Accept tensors, arrays, scalars and value-holding records (maps, embeddings)."""
    if isinstance(x, torch.Tensor):
        return x
    if hasattr(x, "values") and not isinstance(x, Mapping):
        x = x.values
    arr = np.asarray(x)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float64)
    return torch.from_numpy(np.ascontiguousarray(arr))


def _guarded_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.clamp(p, min=LOG_FLOOR))


def gan_loss_d(real_logits: TensorLike, fake_logits: TensorLike) -> torch.Tensor:
    """
    Discriminator objective: −(mean log σ(real) + mean log(1 − σ(fake))).

    This is the negated min-max value so the discriminator minimizes it.
    """
    real = _as_tensor(real_logits).reshape(-1)
    fake = _as_tensor(fake_logits).reshape(-1)
    if real.numel() == 0 or fake.numel() == 0:
        raise ContractError("GAN loss needs non-empty real and fake logits")
    real_term = _guarded_log(torch.sigmoid(real)).mean()
    fake_term = _guarded_log(1.0 - torch.sigmoid(fake)).mean()
    return -(real_term + fake_term)


def gan_loss_g(fake_logits: TensorLike) -> torch.Tensor:
    """Non-saturating generator objective: −mean log σ(fake)."""
    fake = _as_tensor(fake_logits).reshape(-1)
    if fake.numel() == 0:
        raise ContractError("GAN loss needs non-empty fake logits")
    return -_guarded_log(torch.sigmoid(fake)).mean()


def discriminator_loss(real_logits: TensorLike, fake_logits: TensorLike) -> torch.Tensor:
    """Discriminator loss shared verbatim by both pipelines."""
    return gan_loss_d(real_logits, fake_logits)


def ortho_reg(weight_matrices: Iterable[TensorLike], beta: float) -> torch.Tensor:
    """
    Orthogonal regularization: β · Σ ‖G ⊙ (1 − I)‖²_F over weight matrices.

    Each weight is reshaped to (out, fan-in) and G is its Gram matrix on the
    smaller side (``W Wᵀ`` when out ≤ fan-in, else ``Wᵀ W``); for square
    matrices both sides carry the same off-diagonal mass.
    """
    total = None
    for weight in weight_matrices:
        w = _as_tensor(weight)
        if w.dim() < 2:
            continue
        w = w.reshape(w.shape[0], -1)
        gram = w @ w.t() if w.shape[0] <= w.shape[1] else w.t() @ w
        off_diag = gram * (1.0 - torch.eye(gram.shape[0], dtype=gram.dtype, device=gram.device))
        term = (off_diag**2).sum()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros((), dtype=torch.float64)
    return beta * total


def minutiae_map_loss(m: TensorLike, m_hat: TensorLike, batched: bool = False) -> torch.Tensor:
    """L1 distance Σ|M − M̂| between ground-truth and extracted minutiae maps."""
    a, b = _as_tensor(m), _as_tensor(m_hat)
    _check_same_shape(a, b, "minutiae maps")
    return _reduce((a - b).abs(), batched)


def identity_loss(r: TensorLike, r_hat: TensorLike, batched: bool = False) -> torch.Tensor:
    """½ Σ (R − R̂)² between source and reconstruction embeddings."""
    a, b = _as_tensor(r), _as_tensor(r_hat)
    _check_same_shape(a, b, "embeddings")
    return 0.5 * _reduce((a - b) ** 2, batched)


def pixel_loss(i: TensorLike, i_hat: TensorLike, batched: bool = False) -> torch.Tensor:
    """½ Σ (I − Î)² between source and reconstructed images."""
    a, b = _as_tensor(i), _as_tensor(i_hat)
    _check_same_shape(a, b, "images")
    return 0.5 * _reduce((a - b) ** 2, batched)


def total_generator_loss(kind: str, parts: Mapping[str, TensorLike], w: LossWeights):
    """
    Weighted generator objective.

    minutiae: λ1·L_A + λ2·L_m + λ3·L_ID + λ4·L_i
    deep:     λ1·L_A + λ2·L_ID + λ3·L_i

    The orthogonal regularizer is added by the training loop, not here.

    Raises:
        ContractError: If ``kind`` is unknown or a required part is missing
    """
    if kind == "minutiae":
        required, coefficients = MINUTIAE_PARTS, (w.lambda1, w.lambda2, w.lambda3, w.lambda4)
    elif kind == "deep":
        required, coefficients = DEEP_PARTS, (w.lambda1, w.lambda2, w.lambda3)
    else:
        raise ContractError(f"Unknown generator kind: {kind}")

    missing = [name for name in required if name not in parts]
    if missing:
        raise ContractError(f"Missing loss parts for {kind} generator: {', '.join(missing)}")

    total = 0.0
    for name, coefficient in zip(required, coefficients):
        total = total + coefficient * parts[name]
    return total


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ContractError(
            f"Cannot compare {what} of shapes {tuple(a.shape)} and {tuple(b.shape)}"
        )


def _reduce(cells: torch.Tensor, batched: bool) -> torch.Tensor:
    if not batched:
        return cells.sum()
    if cells.dim() < 1 or cells.shape[0] == 0:
        raise ContractError("Batched loss needs a non-empty leading batch dimension")
    return cells.reshape(cells.shape[0], -1).sum(dim=1).mean()
