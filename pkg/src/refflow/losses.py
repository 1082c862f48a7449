"""Training objectives: velocity regression, reference alignment (positive /
negative / combined), the noisy-target alignment baseline, and the total.

Every loss here is a differentiable graph op over ``grad.Tensor`` values; the
test suite checks each one against an explicit nested-loop scalar oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError
from .grad import Tensor, as_tensor


@dataclass
class RAConfig:
    delta: float = 0.5          # hinge margin on cosine distance, in [0, 2]
    lambda_neg: float = 1.0     # weight of the negative (push-apart) term
    eta: float = 1.0            # weight of the alignment loss in the total
    k_align: int = 4            # number of leading blocks aligned

    def validate(self):
        for name in ("delta", "lambda_neg", "eta"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise InvalidArgumentError(f"{name} must be finite and >= 0")
        if self.delta > 2.0:
            raise InvalidArgumentError("delta exceeds the cosine-distance range [0, 2]")
        if self.k_align < 0:
            raise InvalidArgumentError("k_align must be >= 0")


def _check_norms(x: np.ndarray, what: str):
    norms = np.sqrt((x.astype(np.float64) ** 2).sum(axis=-1))
    if np.any(norms < 1e-12):
        raise DegenerateInputError(f"zero-norm token vector in {what}; cosine undefined")


def _normalize(x: Tensor) -> Tensor:
    return x * ((x * x).sum(axis=-1, keepdims=True) ** -0.5)


def rf_loss(velocity_pred, eps, z0) -> Tensor:
    """Mean squared error against the straight-line velocity target (eps - z0)."""
    pred = as_tensor(velocity_pred)
    eps = as_tensor(eps)
    z0 = as_tensor(z0)
    if pred.shape != eps.shape or pred.shape != z0.shape:
        raise InvalidArgumentError(
            f"shape mismatch: pred {pred.shape}, eps {eps.shape}, z0 {z0.shape}")
    diff = pred - (eps - z0)
    return (diff * diff).mean()


def ra_pos(proj, targets) -> Tensor:
    """Per-block mean cosine distance between matched (same-subject) tokens.

    proj: (K, M, N, D), targets: (M, N, D). Returns a (K,) tensor.
    """
    proj = as_tensor(proj)
    targets = as_tensor(targets)
    if proj.ndim != 4 or targets.ndim != 3 or proj.shape[1:] != targets.shape:
        raise InvalidArgumentError(
            f"proj {proj.shape} and targets {targets.shape} are inconsistent")
    _check_norms(proj.data, "projected taps")
    _check_norms(targets.data, "target features")
    cos = (_normalize(proj) * _normalize(targets)).sum(axis=-1)
    return (1.0 - cos).mean(axis=(1, 2))


def ra_neg(proj, targets, delta: float) -> Tensor:
    """Per-block hinge repulsion between cross-subject token pairs.

    For a single reference (M=1) the cross-subject term is undefined and the
    loss is exactly zero.
    """
    proj = as_tensor(proj)
    targets = as_tensor(targets)
    if proj.ndim != 4 or targets.ndim != 3 or proj.shape[1:] != targets.shape:
        raise InvalidArgumentError(
            f"proj {proj.shape} and targets {targets.shape} are inconsistent")
    k, m, n, d = proj.shape
    if m == 1:
        return Tensor(np.zeros(k, dtype=proj.dtype))
    _check_norms(proj.data, "projected taps")
    _check_norms(targets.data, "target features")
    p = _normalize(proj).reshape(k, m * n, d)
    f = _normalize(targets).reshape(m * n, d)
    cos = p @ f.swapaxes(0, 1)                      # (K, M*N, M*N)
    subj = np.repeat(np.arange(m), n)
    cross = (subj[:, None] != subj[None, :]).astype(proj.dtype)
    hinge = (delta - (1.0 - cos)).relu()
    return (hinge * cross).sum(axis=(1, 2)) * (1.0 / (m * (m - 1) * n * n))


def ra_loss(proj, targets, cfg: RAConfig) -> Tensor:
    """Block-averaged positive + weighted negative alignment loss."""
    cfg.validate()
    proj = as_tensor(proj)
    if cfg.k_align == 0:
        raise InvalidArgumentError("alignment depth K=0: alignment loss undefined")
    if proj.shape[0] != cfg.k_align:
        raise InvalidArgumentError(
            f"taps carry {proj.shape[0]} blocks, config says K={cfg.k_align}")
    pos = ra_pos(proj, targets)
    neg = ra_neg(proj, targets, cfg.delta)
    return (pos + cfg.lambda_neg * neg).mean()


def repa_loss(proj_noisy, targets) -> Tensor:
    """Negative mean cosine between noisy-stream projections and target tokens.

    Shapes broadcast: proj (..., N, D) against targets (N, D) or (..., N, D).
    """
    proj = as_tensor(proj_noisy)
    targets = as_tensor(targets)
    if proj.shape[-2:] != targets.shape[-2:]:
        raise InvalidArgumentError(
            f"token mismatch: proj {proj.shape} vs targets {targets.shape}")
    _check_norms(proj.data, "projected features")
    _check_norms(targets.data, "target features")
    cos = (_normalize(proj) * _normalize(targets)).sum(axis=-1)
    return -cos.mean()


def total_loss(rf, ra, eta: float) -> Tensor:
    """Overall objective: velocity loss plus eta times the alignment loss."""
    return as_tensor(rf) + eta * as_tensor(ra)
