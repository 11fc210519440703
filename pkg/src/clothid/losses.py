"""Force, impulse, position and sign-penalty losses.

Arrays are frame-major: ``(F, P, 3)`` optionally with a batch axis
``(F, P, B, 3)``.  ``free`` masks (``(P,)`` or ``(P, B)``) exclude pinned
particles from the sums; normalisation always uses the full particle count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lattice import _bcast


@dataclass(frozen=True)
class LossWeights:
    force: float = 1.0
    impulse: float = 10.0
    k_neg: float = 1.0
    b_neg: float = 1.0
    position: float = 0.0

    def __post_init__(self):
        vals = (self.force, self.impulse, self.k_neg, self.b_neg, self.position)
        if min(vals) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.force == 0 and self.impulse == 0 and self.position == 0:
            raise ValueError("at least one data term must have positive weight")


def _mask(free, arr):
    if free is None:
        return 1.0
    return _bcast(np.asarray(free, dtype=float), arr.ndim - 1)[None]


def target_net_force(xhat, masses, dt: float, pinned=None) -> np.ndarray:
    """Mass times the central second difference of target positions.

    Returns forces for interior frames 1..F-2; pinned particles are zeroed.
    """
    xhat = np.asarray(xhat, dtype=float)
    if len(xhat) < 3:
        raise ValueError("need at least 3 frames")
    m = _bcast(np.asarray(masses, dtype=float), xhat.ndim - 1)
    f = m * (xhat[2:] - 2.0 * xhat[1:-1] + xhat[:-2]) / dt**2
    if pinned is not None:
        f = f * _mask(~np.asarray(pinned, dtype=bool), f)
    return f


def force_loss(f, fhat, free=None, n_particles: int | None = None) -> float:
    """Sum of squared force errors divided by P times the number of frames."""
    f, fhat = np.asarray(f), np.asarray(fhat)
    if f.shape != fhat.shape:
        raise ValueError(f"shape mismatch {f.shape} vs {fhat.shape}")
    P = f.shape[1] if n_particles is None else n_particles
    return float(np.sum(_mask(free, f) * (f - fhat) ** 2) / (P * len(f)))


def impulse(f, dt: float) -> np.ndarray:
    """Trapezoid-rule time integral of a force sequence along the frame axis."""
    f = np.asarray(f)
    if len(f) < 2:
        raise ValueError("need at least 2 frames of forces")
    return dt * (0.5 * (f[0] + f[-1]) + f[1:-1].sum(axis=0))


def impulse_loss(f, fhat, dt: float, free=None, n_particles: int | None = None) -> float:
    f, fhat = np.asarray(f), np.asarray(fhat)
    if f.shape != fhat.shape:
        raise ValueError(f"shape mismatch {f.shape} vs {fhat.shape}")
    P = f.shape[1] if n_particles is None else n_particles
    dJ = impulse(f, dt) - impulse(fhat, dt)
    mask = 1.0 if free is None else _mask(free, f)[0]
    return float(np.sum(mask * dJ**2) / P)


def position_loss(x, xhat, free=None, n_particles: int | None = None) -> float:
    x, xhat = np.asarray(x), np.asarray(xhat)
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {xhat.shape}")
    P = x.shape[1] if n_particles is None else n_particles
    return float(np.sum(_mask(free, x) * (x - xhat) ** 2) / (P * len(x)))


def negativity_penalties(k, b) -> tuple[float, float]:
    return float(np.sum(np.maximum(-np.asarray(k), 0.0))), float(np.sum(np.maximum(-np.asarray(b), 0.0)))


def negativity_grad(p) -> np.ndarray:
    """d/dp of sum(relu(-p)), taking 0 at p == 0."""
    return np.where(np.asarray(p) < 0, -1.0, 0.0)
