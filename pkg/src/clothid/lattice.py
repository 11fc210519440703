"""Regular-grid spring networks and incidence gather/scatter.

Particles are indexed row-major, ``p = r * cols + c``.  The rest layout lies in
the z = 0 plane with column index along x and row index along y.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

STRUCTURAL, SHEAR, BENDING = 0, 1, 2
CLASS_NAMES = {STRUCTURAL: "structural", SHEAR: "shear", BENDING: "bending"}


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    width: float
    height: float

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError(f"grid needs at least 2x2 particles, got {self.rows}x{self.cols}")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("grid width and height must be positive")

    @property
    def n_particles(self) -> int:
        return self.rows * self.cols

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def spacing(self) -> tuple[float, float]:
        return self.width / (self.cols - 1), self.height / (self.rows - 1)


@dataclass(frozen=True)
class TopologyFlags:
    structural: bool = True
    shear_main: bool = True
    shear_anti: bool = True
    bending: bool = True
    bending_stride: int = 1

    def __post_init__(self):
        if not self.structural:
            raise ValueError("structural springs must be enabled")
        if self.bending_stride < 1:
            raise ValueError("bending_stride must be >= 1")


def rest_layout(spec: GridSpec) -> np.ndarray:
    """Rest positions as a (P, 3) array with z = 0."""
    xs = np.linspace(0.0, spec.width, spec.cols)
    ys = np.linspace(0.0, spec.height, spec.rows)
    gx, gy = np.meshgrid(xs, ys)
    out = np.zeros((spec.n_particles, 3))
    out[:, 0] = gx.ravel()
    out[:, 1] = gy.ravel()
    return out


@dataclass(frozen=True, eq=False)
class SpringNetwork:
    spec: GridSpec
    flags: TopologyFlags
    a: np.ndarray
    b: np.ndarray
    rest_length: np.ndarray
    spring_class: np.ndarray
    rest_positions: np.ndarray
    incidence: sp.csr_matrix = field(repr=False)
    incidence_t: sp.csr_matrix = field(repr=False)

    @property
    def n_particles(self) -> int:
        return self.spec.n_particles

    @property
    def n_springs(self) -> int:
        return len(self.a)

    def class_counts(self) -> dict[str, int]:
        return {name: int(np.sum(self.spring_class == c)) for c, name in CLASS_NAMES.items()}


def from_springs(spec: GridSpec, flags: TopologyFlags, pairs, classes, rest=None) -> SpringNetwork:
    """Assemble a network from explicit endpoint pairs (validated)."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    a, b = pairs[:, 0].copy(), pairs[:, 1].copy()
    P = spec.n_particles
    if np.any(a == b):
        raise ValueError("spring endpoints must differ")
    if np.any((a < 0) | (a >= P) | (b < 0) | (b >= P)):
        raise ValueError("spring endpoint out of range")
    key = np.minimum(a, b) * P + np.maximum(a, b)
    if len(np.unique(key)) != len(key):
        raise ValueError("duplicate spring")
    if rest is None:
        rest = rest_layout(spec)
    l0 = np.linalg.norm(rest[b] - rest[a], axis=1)
    S = len(a)
    rows = np.repeat(np.arange(S), 2)
    cols = np.stack([a, b], axis=1).ravel()
    vals = np.tile([-1.0, 1.0], S)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(S, P))
    arrays = [a, b, l0, np.asarray(classes, dtype=np.int8), rest]
    for arr in arrays:
        arr.setflags(write=False)
    return SpringNetwork(spec, flags, *arrays, A, A.T.tocsr())


def build_lattice(spec: GridSpec, flags: TopologyFlags = TopologyFlags()) -> SpringNetwork:
    """Build the surrogate spring network on a regular grid.

    Ordering is fixed: structural springs (per particle, row-major: right
    neighbour then lower neighbour), then main-diagonal shear, anti-diagonal
    shear, then horizontal and vertical bending springs.
    """
    R, C = spec.rows, spec.cols
    idx = np.arange(R * C).reshape(R, C)
    pairs, classes = [], []

    def add(p, q, cls):
        pairs.append(np.stack([p.ravel(), q.ravel()], axis=1))
        classes.append(np.full(p.size, cls, dtype=np.int8))

    # structural: interleave right/down per particle
    struct = []
    for r in range(R):
        for c in range(C):
            if c + 1 < C:
                struct.append((idx[r, c], idx[r, c + 1]))
            if r + 1 < R:
                struct.append((idx[r, c], idx[r + 1, c]))
    add(np.array([s[0] for s in struct]), np.array([s[1] for s in struct]), STRUCTURAL)
    if flags.shear_main:
        add(idx[:-1, :-1], idx[1:, 1:], SHEAR)
    if flags.shear_anti:
        add(idx[:-1, 1:], idx[1:, :-1], SHEAR)
    if flags.bending:
        s = flags.bending_stride + 1
        if C > s:
            add(idx[:, :-s], idx[:, s:], BENDING)
        if R > s:
            add(idx[:-s, :], idx[s:, :], BENDING)
    return from_springs(spec, flags, np.concatenate(pairs), np.concatenate(classes))


def expected_spring_count(spec: GridSpec, flags: TopologyFlags) -> int:
    R, C = spec.rows, spec.cols
    n = R * (C - 1) + C * (R - 1)
    n += (R - 1) * (C - 1) * (int(flags.shear_main) + int(flags.shear_anti))
    if flags.bending:
        s = flags.bending_stride + 1
        n += R * max(C - s, 0) + C * max(R - s, 0)
    return n


def _bcast(a: np.ndarray, ndim: int) -> np.ndarray:
    # (N,) -> (N, 1, ..., 1) to broadcast against an ndim-dimensional array
    return a.reshape(a.shape + (1,) * (ndim - a.ndim))


def spring_extension_map(net: SpringNetwork, per_particle: np.ndarray) -> np.ndarray:
    """value(b) - value(a) for every spring; extra batch axes after the first pass through."""
    per_particle = np.asarray(per_particle, dtype=float)
    if per_particle.shape[0] != net.n_particles:
        raise ValueError(f"expected {net.n_particles} particles, got {per_particle.shape[0]}")
    return per_particle[net.b] - per_particle[net.a]


def accumulate_particle_forces(net: SpringNetwork, spring_forces: np.ndarray) -> np.ndarray:
    """Scatter per-spring forces to particles: +f on endpoint b, -f on endpoint a."""
    spring_forces = np.asarray(spring_forces, dtype=float)
    if spring_forces.shape[0] != net.n_springs:
        raise ValueError(f"expected {net.n_springs} springs, got {spring_forces.shape[0]}")
    rest = spring_forces.shape[1:]
    out = net.incidence_t @ spring_forces.reshape(net.n_springs, -1)
    return np.asarray(out).reshape((net.n_particles,) + rest)
