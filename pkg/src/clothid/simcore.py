"""Spring forces and semi-implicit Euler time stepping.

All routines accept positions shaped ``(P, 3)`` or with extra batch axes
``(P, B, 3)``; per-spring and per-particle coefficients broadcast over the
batch axes.  Batched rollouts share one parameter set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .lattice import SpringNetwork, _bcast, accumulate_particle_forces, spring_extension_map

log = logging.getLogger(__name__)

DEGENERATE_EPS = 1e-9


class SimulationDiverged(RuntimeError):
    def __init__(self, message, step=None, particle=None):
        super().__init__(message)
        self.step = step
        self.particle = particle


@dataclass
class SimStats:
    degenerate_springs: int = 0
    degenerate_triangles: int = 0


@dataclass
class MaterialParams:
    k: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.k.shape != self.b.shape or self.k.ndim != 1:
            raise ValueError("k and b must be 1-D arrays of equal length")

    @classmethod
    def uniform(cls, n_springs: int, k: float, b: float) -> "MaterialParams":
        return cls(np.full(n_springs, float(k)), np.full(n_springs, float(b)))

    def copy(self) -> "MaterialParams":
        return MaterialParams(self.k.copy(), self.b.copy())

    def check(self, net: SpringNetwork):
        if len(self.k) != net.n_springs:
            raise ValueError(f"params have {len(self.k)} springs, network has {net.n_springs}")


@dataclass
class SimState:
    x: np.ndarray
    v: np.ndarray
    pinned: np.ndarray
    t: float = 0.0

    def copy(self) -> "SimState":
        return SimState(self.x.copy(), self.v.copy(), self.pinned.copy(), self.t)


@dataclass(frozen=True)
class ExternalForceSpec:
    gravity: tuple = (0.0, 0.0, -9.81)
    rayleigh_b: float = 0.1

    def __post_init__(self):
        if self.rayleigh_b < 0:
            raise ValueError("rayleigh_b must be nonnegative")


@dataclass(frozen=True)
class Plane:
    point: tuple
    normal: tuple

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if not np.isclose(np.linalg.norm(n), 1.0, atol=1e-9):
            raise ValueError("plane normal must be unit length")


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")


@dataclass(frozen=True)
class ColliderSet:
    planes: tuple = ()
    spheres: tuple = ()

    def __bool__(self):
        return bool(self.planes or self.spheres)


def spring_forces(net: SpringNetwork, params: MaterialParams, x, v, stats: SimStats | None = None):
    """Per-spring force acting on endpoint a (endpoint b receives the negative).

    Elastic term ``k (|d| - l0) / |d| * d`` plus damping ``b (v.d) / |d|^2 * d``
    with ``d = x_b - x_a`` and ``v = v_b - v_a``.  Springs shorter than
    ``DEGENERATE_EPS`` contribute zero.
    """
    d = spring_extension_map(net, x)
    vr = spring_extension_map(net, v)
    L = np.linalg.norm(d, axis=-1)
    bad = L < DEGENERATE_EPS
    Ls = np.where(bad, 1.0, L)
    nd = L.ndim
    k = _bcast(params.k, nd)
    b = _bcast(params.b, nd)
    l0 = _bcast(net.rest_length, nd)
    coef = k * (1.0 - l0 / Ls) + b * np.sum(vr * d, axis=-1) / Ls**2
    if bad.any():
        coef = np.where(bad, 0.0, coef)
        if stats is not None:
            stats.degenerate_springs += int(bad.sum())
    return coef[..., None] * d


def external_forces(masses, v, ext: ExternalForceSpec):
    m = _bcast(np.asarray(masses, dtype=float), v.ndim)
    return m * np.asarray(ext.gravity, dtype=float) - ext.rayleigh_b * v


def net_force(net, params, x, v, masses, ext: ExternalForceSpec, stats=None):
    """Gravity, Rayleigh damping and accumulated spring forces per particle.

    ``spring_forces`` returns the pull on endpoint a (towards b for a
    stretched spring), so the particle forces are the negated scatter: this
    makes the elastic part the negative gradient of the spring energy.
    """
    f = accumulate_particle_forces(net, spring_forces(net, params, x, v, stats))
    return external_forces(masses, v, ext) - f


def step_semi_implicit(state: SimState, forces, masses, dt: float, pinned=None) -> SimState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    pinned = state.pinned if pinned is None else pinned
    forces = np.asarray(forces)
    if not np.all(np.isfinite(forces)):
        bad = np.argwhere(~np.isfinite(forces))[0]
        raise SimulationDiverged(f"non-finite force on particle {bad[0]}", particle=int(bad[0]))
    free = _bcast(~np.asarray(pinned, dtype=bool), forces.ndim)
    m = _bcast(np.asarray(masses, dtype=float), forces.ndim)
    v = np.where(free, state.v + dt * forces / m, 0.0)
    x = np.where(free, state.x + dt * v, state.x)
    return SimState(x, v, state.pinned, state.t + dt)


def resolve_contacts(state: SimState, colliders: ColliderSet | None) -> SimState:
    """Project penetrating free particles to collider surfaces (frictionless, inelastic)."""
    if not colliders:
        return state
    x, v = state.x.copy(), state.v.copy()
    free = ~_bcast(np.asarray(state.pinned, dtype=bool), x.ndim - 1)
    for pl in colliders.planes:
        n = np.asarray(pl.normal, dtype=float)
        s = (x - np.asarray(pl.point, dtype=float)) @ n
        hit = (s < 0) & free
        if hit.any():
            x[hit] -= s[hit][..., None] * n
            v[hit] -= (v[hit] @ n)[..., None] * n
    for sph in colliders.spheres:
        c = np.asarray(sph.center, dtype=float)
        r = x - c
        dist = np.linalg.norm(r, axis=-1)
        hit = (dist < sph.radius) & (dist > 0) & free
        if hit.any():
            n = r[hit] / dist[hit][..., None]
            x[hit] = c + sph.radius * n
            v[hit] -= np.sum(v[hit] * n, axis=-1, keepdims=True) * n
    return SimState(x, v, state.pinned, state.t)


@dataclass
class Trajectory:
    """Frames of a rollout; ``x`` and ``v`` are (F, P, [B,] 3)."""

    x: np.ndarray
    v: np.ndarray
    pinned: np.ndarray
    dt: float
    t0: float = 0.0
    stats: SimStats = field(default_factory=SimStats)

    def __len__(self):
        return len(self.x)

    def __getitem__(self, i) -> SimState:
        return SimState(self.x[i], self.v[i], self.pinned, self.t0 + i * self.dt)


def kinetic_energy(v, masses):
    m = _bcast(np.asarray(masses, dtype=float), v.ndim - 1)
    return 0.5 * np.sum(m * np.sum(v * v, axis=-1), axis=0)


def simulate(net, params, initial: SimState, masses, ext, colliders=None, steps: int = 1,
             dt: float = 1e-3, force_fn=None, record_every: int = 1) -> Trajectory:
    """Roll out ``steps`` steps of net_force -> step -> contacts.

    ``force_fn(x, v, stats)`` overrides the mass-spring force evaluation, which
    is how the FEM source reuses this integrator.  The returned trajectory
    includes the initial state.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if force_fn is None:
        params.check(net)

        def force_fn(x, v, stats):
            return net_force(net, params, x, v, masses, ext, stats)

    stats = SimStats()
    state = initial.copy()
    n_rec = steps // record_every + 1
    xs = np.empty((n_rec,) + state.x.shape)
    vs = np.empty_like(xs)
    xs[0], vs[0] = state.x, state.v
    for j in range(1, steps + 1):
        f = force_fn(state.x, state.v, stats)
        try:
            state = step_semi_implicit(state, f, masses, dt)
        except SimulationDiverged as e:
            e.step = j
            raise SimulationDiverged(f"step {j}: {e}", step=j, particle=e.particle) from None
        state = resolve_contacts(state, colliders)
        if j % record_every == 0:
            xs[j // record_every], vs[j // record_every] = state.x, state.v
    if stats.degenerate_springs:
        log.warning("%d degenerate spring evaluations", stats.degenerate_springs)
    return Trajectory(xs, vs, initial.pinned, dt * record_every, initial.t, stats)


def free_fall_reference(x0, v0, g, dt, steps):
    """Closed form of the semi-implicit Euler recurrence under constant acceleration."""
    g = np.asarray(g, dtype=float)
    n = steps
    v = v0 + n * dt * g
    x = x0 + n * dt * v0 + dt * dt * g * n * (n + 1) / 2
    return x, v
