"""Rest-space barycentric resampling of landmark data onto surrogate particles."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .lattice import GridSpec, rest_layout

log = logging.getLogger(__name__)

EXTRAPOLATION_LIMIT = 2.0
AREA_TOL = 1e-8  # relative to the squared landmark spacing


@dataclass(frozen=True)
class ResamplingMap:
    indices: np.ndarray  # (P, 3) landmark indices
    weights: np.ndarray  # (P, 3), rows sum to one
    n_landmarks: int
    fallback: np.ndarray  # (P,) bool, inverse-distance weights were used
    extrapolated: np.ndarray  # (P,) bool, some |weight| > EXTRAPOLATION_LIMIT

    @property
    def warning_count(self) -> int:
        return int(self.fallback.sum() + self.extrapolated.sum())


def _barycentric(p, a, b, c):
    """Weights of ``p`` in triangle (a, b, c); returns (weights, twice signed area)."""
    e1, e2, r = b - a, c - a, p - a
    det = e1[0] * e2[1] - e1[1] * e2[0]
    if det == 0.0:
        return None, 0.0
    w1 = (r[0] * e2[1] - r[1] * e2[0]) / det
    w2 = (e1[0] * r[1] - e1[1] * r[0]) / det
    return np.array([1.0 - w1 - w2, w1, w2]), det


def build_map(landmark_rest, surrogate_rest, max_candidates: int = 12) -> ResamplingMap:
    """Three nearest landmarks per particle and barycentric weights in their triangle.

    Only the first two rest coordinates are used.  Collinear neighbour
    triples are replaced by the next nearest landmark; if no usable triangle
    exists among ``max_candidates`` neighbours, inverse-distance weights over
    the three nearest are used and the particle is flagged.
    """
    Y = np.asarray(landmark_rest, dtype=float)[:, :2]
    X = np.asarray(surrogate_rest, dtype=float)[:, :2]
    N = len(Y)
    if N < 3:
        raise ValueError("need at least 3 landmarks")
    tree = cKDTree(Y)
    spacing = np.median(tree.query(Y, k=2)[0][:, 1])
    min_area2 = 2.0 * AREA_TOL * spacing**2
    K = min(N, max_candidates)
    dist, cand = tree.query(X, k=K)
    P = len(X)
    idx = np.zeros((P, 3), dtype=np.int64)
    w = np.zeros((P, 3))
    fallback = np.zeros(P, dtype=bool)
    for p in range(P):
        found = False
        c = cand[p]
        # prefer the closest triple in lexicographic neighbour-rank order
        for k in range(2, K):
            for j in range(1, k):
                for i in range(j):
                    tri = (c[i], c[j], c[k])
                    wt, det = _barycentric(X[p], Y[tri[0]], Y[tri[1]], Y[tri[2]])
                    if wt is not None and abs(det) > min_area2:
                        idx[p], w[p] = tri, wt
                        found = True
                        break
                if found:
                    break
            if found:
                break
        if not found:
            d = np.maximum(dist[p, :3], 1e-300)
            inv = 1.0 / d
            idx[p], w[p] = c[:3], inv / inv.sum()
            fallback[p] = True
    extrap = np.any(np.abs(w) > EXTRAPOLATION_LIMIT, axis=1)
    if fallback.any():
        log.warning("%d particles fell back to inverse-distance weights", fallback.sum())
    if extrap.any():
        log.warning("%d particles extrapolate with |weight| > %g", extrap.sum(), EXTRAPOLATION_LIMIT)
    return ResamplingMap(idx, w, N, fallback, extrap)


def resample_frame(rmap: ResamplingMap, y) -> np.ndarray:
    """Affine combination of landmark values; ``y`` is (N, 3) or (F, N, 3)."""
    y = np.asarray(y, dtype=float)
    if y.shape[-2] != rmap.n_landmarks:
        raise ValueError(f"expected {rmap.n_landmarks} landmarks, got {y.shape[-2]}")
    out = np.zeros(y.shape[:-2] + (len(rmap.indices), y.shape[-1]))
    for k in range(3):
        out += rmap.weights[:, k, None] * y[..., rmap.indices[:, k], :]
    return out


def assign_masses(rho: float, spec: GridSpec) -> np.ndarray:
    if rho <= 0:
        raise ValueError("area density must be positive")
    return np.full(spec.n_particles, rho * spec.area / spec.n_particles)


def classify_pinned(rmap: ResamplingMap, landmark_pinned) -> np.ndarray:
    """A particle is pinned iff its largest-weight landmark is pinned."""
    landmark_pinned = np.asarray(landmark_pinned, dtype=bool)
    dominant = rmap.indices[np.arange(len(rmap.indices)), np.argmax(rmap.weights, axis=1)]
    return landmark_pinned[dominant]


@dataclass
class TargetTrajectory:
    """Surrogate-space targets for one rollout."""

    xhat: np.ndarray  # (F, P, 3)
    pinned: np.ndarray  # (P,)
    masses: np.ndarray  # (P,)
    dt: float
    gravity: tuple
    rayleigh_b: float
    rollout_id: int = 0
    meta: dict | None = None

    def __post_init__(self):
        if len(self.xhat) < 3:
            raise ValueError("a target trajectory needs at least 3 frames")
        if self.xhat.shape[1] != len(self.pinned) or len(self.pinned) != len(self.masses):
            raise ValueError("inconsistent particle counts")


def surrogate_rayleigh(rayleigh_b: float, mass_proportional: bool, masses) -> float:
    """Absolute Rayleigh coefficient for uniform surrogate masses."""
    return float(rayleigh_b * np.mean(masses)) if mass_proportional else float(rayleigh_b)


def resample_rollout(rollout, spec: GridSpec, rmap: ResamplingMap | None = None) -> TargetTrajectory:
    """Targets, pinning, masses and external-force data of one source rollout on a surrogate grid."""
    src = rollout.source
    if rmap is None:
        rmap = build_map(rollout.rest, rest_layout(spec))
    masses = assign_masses(src.rho, spec)
    return TargetTrajectory(resample_frame(rmap, rollout.y), classify_pinned(rmap, rollout.landmark_pinned),
                            masses, src.dt, tuple(src.gravity),
                            surrogate_rayleigh(src.rayleigh_b, src.mass_proportional_damping, masses),
                            rollout.index, {"warnings": rmap.warning_count})
