"""Randomized source rollouts and the clip dataset built from them.

Sources are either a mass-spring cloth on the surrogate lattice or the
linear-triangle shell from ``femsrc``.  Each rollout pins two random anchor
neighbourhoods, rotates the sheet uniformly at random about its centroid and
lets it fall under gravity and Rayleigh damping.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import femsrc
from .lattice import GridSpec, SpringNetwork, TopologyFlags, build_lattice, rest_layout
from .simcore import (ExternalForceSpec, MaterialParams, SimState, SimulationDiverged,
                      kinetic_energy, simulate)

log = logging.getLogger(__name__)

LAYOUTS = ("uniform", "three-band", "stripes-patch")
KINDS = ("mass-spring", "fem")


def region_values(layout: str, centers, width: float, height: float, values) -> np.ndarray:
    """Assign a stiffness to each element from the rest-space position of its centre.

    ``three-band``: thirds along x get ``values[0..2]``.
    ``stripes-patch``: four vertical stripes alternate ``values[0]`` and
    ``values[1]``; a centred square patch of half the side gets ``values[2]``.
    ``uniform``: everything gets ``values[0]``.
    """
    c = np.asarray(centers, dtype=float)
    vals = np.asarray(values, dtype=float)
    u, w = c[:, 0] / width, c[:, 1] / height
    if layout == "uniform":
        return np.full(len(c), vals[0])
    if len(vals) < 3:
        raise ValueError(f"layout {layout!r} needs three values")
    if layout == "three-band":
        return vals[np.clip((u * 3).astype(int), 0, 2)]
    if layout == "stripes-patch":
        out = vals[np.clip((u * 4).astype(int), 0, 3) % 2]
        patch = (np.abs(u - 0.5) <= 0.25) & (np.abs(w - 0.5) <= 0.25)
        out[patch] = vals[2]
        return out
    raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")


@dataclass
class SourceSpec:
    """Source cloth: engine, resolution, size, material layout and timing.

    For ``fem`` sources, ``stiffness`` values are membrane stiffnesses per
    triangle and ``bending`` is the hinge bending modulus.  With
    ``mass_proportional_damping`` the Rayleigh coefficient is multiplied by
    each vertex mass.
    """

    kind: str = "mass-spring"
    rows: int = 12
    cols: int = 12
    width: float = 5.5
    height: float = 5.5
    rho: float = 0.2
    layout: str = "three-band"
    stiffness: tuple = (10.0, 50.0, 100.0)
    damping: float = 6.0
    topology: dict = field(default_factory=dict)
    bending: float = 1e-4
    orientation: str = "uniform"
    gravity: tuple = (0.0, 0.0, -9.81)
    rayleigh_b: float = 0.1
    mass_proportional_damping: bool = False
    dt: float = 1e-3
    duration: float = 8.0
    substeps: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown source kind {self.kind!r}")
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}")
        if min(self.stiffness) <= 0:
            raise ValueError("stiffness values must be positive")
        if self.damping < 0 or self.rho <= 0 or self.dt <= 0 or self.duration <= 0:
            raise ValueError("damping must be >= 0; rho, dt and duration positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        self.stiffness = tuple(float(s) for s in self.stiffness)
        self.gravity = tuple(float(g) for g in self.gravity)

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.rows, self.cols, self.width, self.height)

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def cell(self) -> float:
        return min(self.grid.spacing)

    def spec_hash(self) -> str:
        text = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class RolloutSpec:
    """How many rollouts and how their boundary and initial conditions are drawn.

    ``anchor_radius`` is in metres; ``None`` means 1.5 grid cells.  ``pins``
    lists fixed corner names (``ll``, ``lr``, ``ul``, ``ur``) that replace the
    random anchors, and ``rotate=False`` starts from the flat rest shape.
    With exactly two pinned corners the random rotation turns the sheet
    about the line through them, so the anchors keep their rest positions.
    """

    count: int = 1
    seed: int = 0
    anchor_radius: float | None = None
    angular_speed: float = 0.0
    pins: tuple = ()
    rotate: bool = True
    batch: int = 16
    record_velocities: bool = False

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("rollout count must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


@dataclass
class SourceRollout:
    y: np.ndarray  # (F, N, 3) landmark positions
    landmark_pinned: np.ndarray  # (N,)
    rest: np.ndarray  # (N, 3) unrolled rest positions
    source: SourceSpec
    seed: int
    index: int
    velocities: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return len(self.y)

    @property
    def dt(self) -> float:
        return self.source.dt

    def metadata(self) -> dict:
        s = self.source
        return {"kind": s.kind, "rows": s.rows, "cols": s.cols, "width": s.width,
                "height": s.height, "dt": s.dt, "rho": s.rho,
                "pinned": np.flatnonzero(self.landmark_pinned).tolist(),
                "gravity": list(s.gravity), "rayleigh_b": s.rayleigh_b,
                "mass_proportional_damping": s.mass_proportional_damping,
                "seed": self.seed, "index": self.index, "spec_hash": s.spec_hash(),
                "source": asdict(s)}


def rollout_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per rollout, so batching never changes the outputs."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def sample_boundary_condition(rest, radius: float, rng, half_width: float | None = None) -> np.ndarray:
    """Pin every landmark within ``radius`` (inclusive) of two distinct random centres."""
    Y = np.asarray(rest, dtype=float)[:, :2]
    if half_width is not None and radius >= half_width:
        raise ValueError("anchor radius must be smaller than the cloth half-width")
    centres = rng.choice(len(Y), size=2, replace=False)
    tol = 1e-9 * max(radius, 1e-12)
    d = np.linalg.norm(Y[:, None, :] - Y[None, centres, :], axis=-1)
    pinned = np.any(d <= radius + tol, axis=1)
    if pinned.all():
        raise ValueError("anchor radius leaves no free landmark")
    return pinned


def sample_initial_condition(rest, rng, angular_speed: float = 0.0, rotate: bool = True,
                             hinge=None):
    """Uniformly random rotation of the rest shape about its centroid.

    Velocities are zero unless ``angular_speed`` > 0, in which case the sheet
    spins rigidly about a random axis at that rate.  ``hinge`` (two particle
    indices) restricts both the rotation and the spin to the axis through
    those particles, with a uniformly random angle.
    """
    X = np.asarray(rest, dtype=float)
    if hinge is None:
        c = X.mean(axis=0)
        R = Rotation.random(random_state=rng).as_matrix() if rotate else np.eye(3)
        axis = rng.standard_normal(3) if angular_speed > 0 else None
    else:
        c = X[hinge[0]]
        axis = X[hinge[1]] - c
        axis = axis / np.linalg.norm(axis)
        angle = rng.uniform(0.0, 2.0 * np.pi) if rotate else 0.0
        R = Rotation.from_rotvec(angle * axis).as_matrix()
    x = (X - c) @ R.T + c
    v = np.zeros_like(x)
    if angular_speed > 0:
        omega = angular_speed * axis / np.linalg.norm(axis)
        v = np.cross(omega, x - c)
    return x, v


@dataclass
class SourceModel:
    """The concrete simulator behind a SourceSpec."""

    source: SourceSpec
    rest: np.ndarray
    masses: np.ndarray
    net: SpringNetwork | None = None
    params: MaterialParams | None = None
    mesh: femsrc.TriMesh | None = None
    material: femsrc.FemMaterial | None = None

    @property
    def ext(self) -> ExternalForceSpec:
        s = self.source
        rb = 0.0 if s.mass_proportional_damping else s.rayleigh_b
        return ExternalForceSpec(gravity=s.gravity, rayleigh_b=rb)


def build_source(source: SourceSpec) -> SourceModel:
    grid = source.grid
    if source.kind == "mass-spring":
        net = build_lattice(grid, TopologyFlags(**source.topology))
        mid = 0.5 * (net.rest_positions[net.a] + net.rest_positions[net.b])
        k = region_values(source.layout, mid[:, :2], grid.width, grid.height, source.stiffness)
        params = MaterialParams(k, np.full(net.n_springs, source.damping))
        masses = np.full(grid.n_particles, source.rho * grid.area / grid.n_particles)
        if source.mass_proportional_damping:
            raise ValueError("mass-proportional damping is only supported for fem sources")
        return SourceModel(source, net.rest_positions.copy(), masses, net=net, params=params)
    mesh = femsrc.build_tri_grid(grid.rows, grid.cols, grid.width, grid.height, source.orientation)
    cent = mesh.vertices[mesh.triangles].mean(axis=1)
    membrane = region_values(source.layout, cent[:, :2], grid.width, grid.height, source.stiffness)
    masses = mesh.lumped_masses(source.rho)
    rb = source.rayleigh_b * masses if source.mass_proportional_damping else source.rayleigh_b
    bending = source.bending * femsrc.hinge_weights(mesh)
    material = femsrc.FemMaterial(membrane, bending, rb)
    return SourceModel(source, mesh.vertices.copy(), masses, mesh=mesh, material=material)


def _conditions(model: SourceModel, rollouts: RolloutSpec, index: int):
    rng = rollout_rng(rollouts.seed, index)
    src = model.source
    if rollouts.pins:
        pinned = np.zeros(len(model.rest), dtype=bool)
        for name in rollouts.pins:
            pinned[_corner(src.grid, name)] = True
    else:
        radius = 1.5 * src.cell if rollouts.anchor_radius is None else rollouts.anchor_radius
        pinned = sample_boundary_condition(model.rest, radius, rng,
                                           half_width=0.5 * min(src.width, src.height))
    hinge = np.flatnonzero(pinned) if rollouts.pins and pinned.sum() == 2 else None
    x0, v0 = sample_initial_condition(model.rest, rng, rollouts.angular_speed, rollouts.rotate, hinge)
    v0[pinned] = 0.0
    return pinned, x0, v0


def _corner(grid: GridSpec, name: str) -> int:
    r, c = {"ll": (0, 0), "lr": (0, grid.cols - 1), "ul": (grid.rows - 1, 0),
            "ur": (grid.rows - 1, grid.cols - 1)}[name]
    return r * grid.cols + c


def _simulate_mass_spring(model: SourceModel, pinned, x0, v0, record_v: bool):
    """Batched rollouts: arrays carry a batch axis after the particle axis."""
    src = model.source
    state = SimState(np.stack(x0, axis=1), np.stack(v0, axis=1), np.stack(pinned, axis=1))
    tr = simulate(model.net, model.params, state, model.masses, model.ext,
                  steps=src.n_steps * src.substeps, dt=src.dt / src.substeps,
                  record_every=src.substeps)
    ys = [np.ascontiguousarray(tr.x[:, :, i]) for i in range(len(x0))]
    vs = [np.ascontiguousarray(tr.v[:, :, i]) for i in range(len(x0))] if record_v else None
    return ys, vs


def _simulate_fem(model: SourceModel, pinned, x0, v0, record_v: bool):
    src = model.source
    out = np.empty((len(x0), 3))

    def force_fn(x, v, stats):
        return femsrc.fem_forces_fast(model.mesh, model.material, x, v, model.masses, src.gravity, out)

    tr = simulate(None, None, SimState(x0, v0, pinned), model.masses, None,
                  steps=src.n_steps * src.substeps, dt=src.dt / src.substeps,
                  force_fn=force_fn, record_every=src.substeps)
    return tr.x, (tr.v if record_v else None)


def generate_rollouts(source: SourceSpec, rollouts: RolloutSpec, model: SourceModel | None = None,
                      indices=None) -> list[SourceRollout]:
    """Simulate ``rollouts.count`` randomized episodes of the source.

    Mass-spring rollouts advance together in batches; a batch that diverges
    is replayed one rollout at a time so only the failing rollouts are
    dropped (with a logged diagnostic).
    """
    model = build_source(source) if model is None else model
    indices = list(range(rollouts.count)) if indices is None else list(indices)
    results: dict[int, SourceRollout] = {}
    conds = {n: _conditions(model, rollouts, n) for n in indices}

    def emit(n, y, v):
        if not np.all(np.isfinite(y)):
            log.error("rollout %d produced non-finite positions; dropped", n)
            return
        results[n] = SourceRollout(y, conds[n][0], model.rest, source, rollouts.seed, n, v)

    if source.kind == "mass-spring":
        for i in range(0, len(indices), rollouts.batch):
            chunk = indices[i:i + rollouts.batch]
            try:
                ys, vs = _simulate_mass_spring(model, *zip(*(conds[n] for n in chunk)),
                                               rollouts.record_velocities)
                for j, n in enumerate(chunk):
                    emit(n, ys[j], None if vs is None else vs[j])
            except SimulationDiverged:
                for n in chunk:
                    try:
                        ys, vs = _simulate_mass_spring(model, *zip(conds[n]), rollouts.record_velocities)
                        emit(n, ys[0], None if vs is None else vs[0])
                    except SimulationDiverged as e:
                        log.error("rollout %d diverged: %s", n, e)
    else:
        for n in indices:
            try:
                y, v = _simulate_fem(model, *conds[n], rollouts.record_velocities)
                emit(n, y, v)
            except SimulationDiverged as e:
                log.error("rollout %d diverged: %s", n, e)
    return [results[n] for n in indices if n in results]


def settling_ratio(rollout: SourceRollout, masses) -> float:
    """Mean kinetic energy over the final second divided by that over the first."""
    v = np.gradient(rollout.y, rollout.dt, axis=0) if rollout.velocities is None else rollout.velocities
    ke = np.array([kinetic_energy(vi, masses) for vi in v])
    n = int(round(1.0 / rollout.dt))
    return float(ke[-n:].mean() / max(ke[:n].mean(), 1e-300))


@dataclass
class ClipSet:
    """Clip table: one row per (rollout, start frame) with subset membership flags."""

    T: int
    rollout: np.ndarray
    start: np.ndarray
    general: np.ndarray
    low_velocity: np.ndarray
    seed: int = 0

    def __len__(self):
        return len(self.start)

    def subset(self, name: str) -> list[tuple[int, int]]:
        mask = {"general": self.general, "low_velocity": self.low_velocity}[name]
        return [(int(r), int(s)) for r, s in zip(self.rollout[mask], self.start[mask])]

    def to_dict(self) -> dict:
        return {"T": self.T, "seed": self.seed, "rollout": self.rollout.tolist(),
                "start": self.start.tolist(), "general": self.general.tolist(),
                "low_velocity": self.low_velocity.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ClipSet":
        return cls(int(d["T"]), np.asarray(d["rollout"], dtype=np.int64),
                   np.asarray(d["start"], dtype=np.int64), np.asarray(d["general"], dtype=bool),
                   np.asarray(d["low_velocity"], dtype=bool), int(d.get("seed", 0)))


def build_clipset(frame_counts, dt: float, T: int = 500, keep_fraction: float = 0.06,
                  low_velocity_seconds: float = 1.0, low_velocity_keep: float = 0.5,
                  seed: int = 0) -> ClipSet:
    """Partition rollouts into non-overlapping clips and draw the two subsets.

    ``frame_counts`` maps rollout ids to their frame counts (a list is taken
    as ids 0..n-1).  Each rollout yields ``frames // T`` clips starting at
    multiples of ``T``.  The general set keeps ``round(keep_fraction * total)``
    clips drawn uniformly without replacement (at least one).  Low-velocity
    candidates are clips that start within the last ``low_velocity_seconds``
    of their rollout; ``low_velocity_keep`` of them are retained.
    """
    if not isinstance(frame_counts, dict):
        frame_counts = dict(enumerate(frame_counts))
    if not frame_counts:
        raise ValueError("no rollouts to partition into clips")
    if not (0 < keep_fraction <= 1 and 0 < low_velocity_keep <= 1):
        raise ValueError("keep fractions must lie in (0, 1]")
    rid, start, lv_cand = [], [], []
    lv_frames = int(round(low_velocity_seconds / dt))
    for r in sorted(frame_counts):
        F = int(frame_counts[r])
        if T > F:
            raise ValueError(f"clip length {T} exceeds rollout {r} with {F} frames")
        for i in range(F // T):
            rid.append(r)
            start.append(i * T)
            lv_cand.append(i * T >= (F - 1) - lv_frames)
    rid, start, lv_cand = np.array(rid), np.array(start), np.array(lv_cand)
    rng = np.random.default_rng(seed)
    n = len(start)
    general = np.zeros(n, dtype=bool)
    general[rng.choice(n, size=max(1, int(round(keep_fraction * n))), replace=False)] = True
    low = np.zeros(n, dtype=bool)
    cand = np.flatnonzero(lv_cand)
    if len(cand):
        low[rng.choice(cand, size=max(1, int(round(low_velocity_keep * len(cand)))), replace=False)] = True
    keep = general | low
    return ClipSet(T, rid[keep], start[keep], general[keep], low[keep], seed)
