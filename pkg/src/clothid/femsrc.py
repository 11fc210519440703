"""Linear-triangle thin-shell cloth used as a data source.

Membrane: constant-strain triangles with a St. Venant-Kirchhoff energy.
Bending: discrete hinges with energy ``0.5 * kappa * (theta - theta_rest)^2``.
Linear triangles lock in bending when a fold crosses element diagonals, which
is exactly what the fold experiment is meant to exhibit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp

from .lattice import GridSpec, _bcast, rest_layout
from .simcore import SimState, SimStats, kinetic_energy, resolve_contacts, step_semi_implicit

log = logging.getLogger(__name__)

AREA_EPS = 1e-14


@dataclass(frozen=True, eq=False)
class TriMesh:
    spec: GridSpec
    vertices: np.ndarray
    triangles: np.ndarray
    hinges: np.ndarray  # (H, 4): opposite A, edge start, edge end, opposite B
    diagonal_orientation: str
    rest_Dinv: np.ndarray
    rest_area: np.ndarray
    tri_scatter: sp.csr_matrix
    hinge_scatter: sp.csr_matrix

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def lumped_masses(self, rho: float) -> np.ndarray:
        m = np.zeros(self.n_vertices)
        np.add.at(m, self.triangles.ravel(), np.repeat(rho * self.rest_area / 3.0, 3))
        return m

    def corner(self, name: str) -> int:
        R, C = self.spec.rows, self.spec.cols
        return {"ll": 0, "lr": C - 1, "ul": (R - 1) * C, "ur": R * C - 1}[name]


def _scatter_matrix(idx: np.ndarray, n_vertices: int) -> sp.csr_matrix:
    # columns ordered corner-major: column j*M + e for corner j of element e
    M, K = idx.shape
    cols = np.arange(M * K)
    return sp.csr_matrix((np.ones(M * K), (idx.T.ravel(), cols)), shape=(n_vertices, M * K))


def build_tri_grid(rows: int, cols: int, width: float, height: float,
                   diagonal_orientation: str = "uniform") -> TriMesh:
    """Triangulate a rows x cols vertex grid.

    ``uniform`` splits every cell along its (+x, +y) diagonal, ``anti`` along
    the other one, and ``alternating`` switches per cell in a checkerboard.
    """
    if diagonal_orientation not in ("uniform", "anti", "alternating"):
        raise ValueError(f"unknown diagonal orientation {diagonal_orientation!r}")
    spec = GridSpec(rows, cols, width, height)
    idx = np.arange(rows * cols).reshape(rows, cols)
    tris = []
    for r in range(rows - 1):
        for c in range(cols - 1):
            p00, p01, p10, p11 = idx[r, c], idx[r, c + 1], idx[r + 1, c], idx[r + 1, c + 1]
            main = (diagonal_orientation == "uniform"
                    or (diagonal_orientation == "alternating" and (r + c) % 2 == 0))
            if main:
                tris += [(p00, p01, p11), (p00, p11, p10)]
            else:
                tris += [(p00, p01, p10), (p01, p11, p10)]
    tris = np.array(tris, dtype=np.int64)

    edges = {}
    for t, tri in enumerate(tris):
        for j in range(3):
            e0, e1, o = tri[j], tri[(j + 1) % 3], tri[(j + 2) % 3]
            edges.setdefault((min(e0, e1), max(e0, e1)), []).append((e0, e1, o))
    hinges = []
    for key in sorted(edges):
        sides = edges[key]
        if len(sides) == 2:
            (e0, e1, oa), (_, _, ob) = sides
            hinges.append((oa, e0, e1, ob))
        elif len(sides) > 2:
            raise ValueError("non-manifold edge")
    hinges = np.array(hinges, dtype=np.int64).reshape(-1, 4)

    verts = rest_layout(spec)
    X = verts[:, :2]
    Dm = np.stack([X[tris[:, 1]] - X[tris[:, 0]], X[tris[:, 2]] - X[tris[:, 0]]], axis=-1)
    area = 0.5 * np.abs(np.linalg.det(Dm))
    Dinv = np.linalg.inv(Dm)
    return TriMesh(spec, verts, tris, hinges, diagonal_orientation, Dinv, area,
                   _scatter_matrix(tris, len(verts)), _scatter_matrix(hinges, len(verts)))


@dataclass
class FemMaterial:
    membrane_stiffness: np.ndarray  # per triangle, Young's modulus x thickness (N/m)
    bending_stiffness: np.ndarray  # per hinge (N m)
    rayleigh_b: float | np.ndarray = 0.1
    poisson: float = 0.3

    def __post_init__(self):
        self.membrane_stiffness = np.asarray(self.membrane_stiffness, dtype=float)
        self.bending_stiffness = np.asarray(self.bending_stiffness, dtype=float)
        if np.any(self.membrane_stiffness < 0) or np.any(self.bending_stiffness < 0):
            raise ValueError("FEM stiffnesses must be nonnegative")
        if np.any(np.asarray(self.rayleigh_b) < 0):
            raise ValueError("rayleigh_b must be nonnegative")

    @classmethod
    def uniform(cls, mesh: TriMesh, membrane: float, bending: float, rayleigh_b=0.1,
                poisson: float = 0.3) -> "FemMaterial":
        """Build from continuum values; ``bending`` is a plate modulus D (N m).

        Hinge stiffness follows 3 D |e|^2 / (A1 + A2) so that refinement leaves
        the bending response unchanged.
        """
        ym = np.full(len(mesh.triangles), float(membrane))
        return cls(ym, bending * hinge_weights(mesh), rayleigh_b, poisson)


def hinge_weights(mesh: TriMesh) -> np.ndarray:
    """3 |e|^2 / (A1 + A2) per hinge, using rest geometry."""
    h = mesh.hinges
    X = mesh.vertices
    e2 = np.sum((X[h[:, 2]] - X[h[:, 1]]) ** 2, axis=1)
    a1 = 0.5 * np.linalg.norm(np.cross(X[h[:, 1]] - X[h[:, 0]], X[h[:, 2]] - X[h[:, 0]]), axis=1)
    a2 = 0.5 * np.linalg.norm(np.cross(X[h[:, 1]] - X[h[:, 3]], X[h[:, 2]] - X[h[:, 3]]), axis=1)
    return 3.0 * e2 / (a1 + a2)


def _lame(material: FemMaterial):
    Y, nu = material.membrane_stiffness, material.poisson
    return Y / (2.0 * (1.0 + nu)), Y * nu / (1.0 - nu * nu)


def _membrane(mesh: TriMesh, material: FemMaterial, x, stats=None):
    """Return (energy per triangle, gradient per corner (3, T, ..., 3))."""
    t = mesh.triangles
    x0, x1, x2 = x[t[:, 0]], x[t[:, 1]], x[t[:, 2]]
    e1, e2 = x1 - x0, x2 - x0
    nd = e1.ndim - 1
    Di = [[_bcast(mesh.rest_Dinv[:, i, j], nd) for j in range(2)] for i in range(2)]
    f1 = e1 * Di[0][0][..., None] + e2 * Di[1][0][..., None]
    f2 = e1 * Di[0][1][..., None] + e2 * Di[1][1][..., None]
    E00 = 0.5 * (np.sum(f1 * f1, axis=-1) - 1.0)
    E11 = 0.5 * (np.sum(f2 * f2, axis=-1) - 1.0)
    E01 = 0.5 * np.sum(f1 * f2, axis=-1)
    mu, lam = (_bcast(a, nd) for a in _lame(material))
    A0 = _bcast(mesh.rest_area, nd)
    tr = E00 + E11
    live = np.ones_like(tr, dtype=bool)
    cur_area = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=-1)
    dead = cur_area < AREA_EPS
    if dead.any():
        live = ~dead
        if stats is not None:
            stats.degenerate_triangles += int(dead.sum())
    energy = np.where(live, A0 * (mu * (E00**2 + E11**2 + 2 * E01**2) + 0.5 * lam * tr**2), 0.0)
    S00 = 2 * mu * E00 + lam * tr
    S11 = 2 * mu * E11 + lam * tr
    S01 = 2 * mu * E01
    p1 = f1 * S00[..., None] + f2 * S01[..., None]
    p2 = f1 * S01[..., None] + f2 * S11[..., None]
    w = np.where(live, A0, 0.0)[..., None]
    g1 = w * (p1 * Di[0][0][..., None] + p2 * Di[0][1][..., None])
    g2 = w * (p1 * Di[1][0][..., None] + p2 * Di[1][1][..., None])
    return energy, np.stack([-g1 - g2, g1, g2])


def _dihedral(mesh: TriMesh, x):
    """Signed dihedral angle per hinge and its gradient per hinge vertex."""
    h = mesh.hinges
    xa, x3, x4, xb = x[h[:, 0]], x[h[:, 1]], x[h[:, 2]], x[h[:, 3]]
    E = x4 - x3
    N1 = np.cross(xa - x3, xa - x4)
    N2 = np.cross(xb - x4, xb - x3)
    el = np.linalg.norm(E, axis=-1)
    n1s = np.sum(N1 * N1, axis=-1)
    n2s = np.sum(N2 * N2, axis=-1)
    ok = (n1s > AREA_EPS**2) & (n2s > AREA_EPS**2) & (el > 0)
    n1s = np.where(ok, n1s, 1.0)
    n2s = np.where(ok, n2s, 1.0)
    els = np.where(ok, el, 1.0)
    n1 = N1 / np.sqrt(n1s)[..., None]
    n2 = N2 / np.sqrt(n2s)[..., None]
    Eh = E / els[..., None]
    sin_t = np.sum(np.cross(n1, n2) * Eh, axis=-1)
    cos_t = np.sum(n1 * n2, axis=-1)
    theta = np.where(ok, np.arctan2(sin_t, cos_t), 0.0)
    u1 = N1 / n1s[..., None]
    u2 = N2 / n2s[..., None]
    ua = els[..., None] * u1
    ub = els[..., None] * u2
    u3 = (np.sum((xa - x4) * Eh, -1)[..., None] * u1 + np.sum((xb - x4) * Eh, -1)[..., None] * u2)
    u4 = -(np.sum((xa - x3) * Eh, -1)[..., None] * u1 + np.sum((xb - x3) * Eh, -1)[..., None] * u2)
    # these are gradients of -theta for the atan2 convention above
    grad = -np.stack([ua, u3, u4, ub])
    grad = np.where(ok[..., None], grad, 0.0)
    return theta, grad


def _bending(mesh: TriMesh, material: FemMaterial, x):
    theta, grad = _dihedral(mesh, x)
    kap = _bcast(material.bending_stiffness, theta.ndim)
    energy = 0.5 * kap * theta**2
    return energy, (kap * theta)[..., None] * grad


def _scatter(mat: sp.csr_matrix, corner_grads: np.ndarray, n_vertices: int) -> np.ndarray:
    K, M = corner_grads.shape[:2]
    rest = corner_grads.shape[2:]
    out = mat @ corner_grads.reshape(K * M, -1)
    return np.asarray(out).reshape((n_vertices,) + rest)


def fem_energy(mesh: TriMesh, material: FemMaterial, x) -> float:
    em, _ = _membrane(mesh, material, x)
    eb, _ = _bending(mesh, material, x)
    return float(np.sum(em) + np.sum(eb))


def fem_internal_forces(mesh: TriMesh, material: FemMaterial, x, stats: SimStats | None = None):
    """Negative gradient of membrane plus bending energy."""
    _, gm = _membrane(mesh, material, x, stats)
    _, gb = _bending(mesh, material, x)
    V = mesh.n_vertices
    return -(_scatter(mesh.tri_scatter, gm, V) + _scatter(mesh.hinge_scatter, gb, V))


def fem_forces(mesh, material, x, v, masses, gravity=(0.0, 0.0, -9.81), stats=None):
    """Internal forces plus gravity and Rayleigh damping."""
    m = _bcast(np.asarray(masses, dtype=float), x.ndim)
    rb = np.asarray(material.rayleigh_b, dtype=float)
    if rb.ndim:
        rb = _bcast(rb, x.ndim)
    return (fem_internal_forces(mesh, material, x, stats)
            + m * np.asarray(gravity, dtype=float) - rb * v)


@numba.njit(cache=True)
def _cross(ax, ay, az, bx, by, bz):
    return ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx


@numba.njit(cache=True)
def _fem_forces_kernel(x, v, tris, Dinv, area, mu, lam, hinges, kappa, masses, rayleigh, g, out):
    for i in range(x.shape[0]):
        for c in range(3):
            out[i, c] = masses[i] * g[c] - rayleigh[i] * v[i, c]
    for t in range(tris.shape[0]):
        i0, i1, i2 = tris[t, 0], tris[t, 1], tris[t, 2]
        ax, ay, az = x[i1, 0] - x[i0, 0], x[i1, 1] - x[i0, 1], x[i1, 2] - x[i0, 2]
        bx, by, bz = x[i2, 0] - x[i0, 0], x[i2, 1] - x[i0, 1], x[i2, 2] - x[i0, 2]
        cx, cy, cz = _cross(ax, ay, az, bx, by, bz)
        if 0.5 * np.sqrt(cx * cx + cy * cy + cz * cz) < AREA_EPS:
            continue
        d00, d01, d10, d11 = Dinv[t, 0, 0], Dinv[t, 0, 1], Dinv[t, 1, 0], Dinv[t, 1, 1]
        f1x, f1y, f1z = ax * d00 + bx * d10, ay * d00 + by * d10, az * d00 + bz * d10
        f2x, f2y, f2z = ax * d01 + bx * d11, ay * d01 + by * d11, az * d01 + bz * d11
        E00 = 0.5 * (f1x * f1x + f1y * f1y + f1z * f1z - 1.0)
        E11 = 0.5 * (f2x * f2x + f2y * f2y + f2z * f2z - 1.0)
        E01 = 0.5 * (f1x * f2x + f1y * f2y + f1z * f2z)
        tr = E00 + E11
        S00 = 2.0 * mu[t] * E00 + lam[t] * tr
        S11 = 2.0 * mu[t] * E11 + lam[t] * tr
        S01 = 2.0 * mu[t] * E01
        A = area[t]
        p1x, p1y, p1z = f1x * S00 + f2x * S01, f1y * S00 + f2y * S01, f1z * S00 + f2z * S01
        p2x, p2y, p2z = f1x * S01 + f2x * S11, f1y * S01 + f2y * S11, f1z * S01 + f2z * S11
        g1x = A * (p1x * d00 + p2x * d01)
        g1y = A * (p1y * d00 + p2y * d01)
        g1z = A * (p1z * d00 + p2z * d01)
        g2x = A * (p1x * d10 + p2x * d11)
        g2y = A * (p1y * d10 + p2y * d11)
        g2z = A * (p1z * d10 + p2z * d11)
        out[i0, 0] += g1x + g2x
        out[i0, 1] += g1y + g2y
        out[i0, 2] += g1z + g2z
        out[i1, 0] -= g1x
        out[i1, 1] -= g1y
        out[i1, 2] -= g1z
        out[i2, 0] -= g2x
        out[i2, 1] -= g2y
        out[i2, 2] -= g2z
    for h in range(hinges.shape[0]):
        ia, i3, i4, ib = hinges[h, 0], hinges[h, 1], hinges[h, 2], hinges[h, 3]
        Ex, Ey, Ez = x[i4, 0] - x[i3, 0], x[i4, 1] - x[i3, 1], x[i4, 2] - x[i3, 2]
        a3x, a3y, a3z = x[ia, 0] - x[i3, 0], x[ia, 1] - x[i3, 1], x[ia, 2] - x[i3, 2]
        a4x, a4y, a4z = x[ia, 0] - x[i4, 0], x[ia, 1] - x[i4, 1], x[ia, 2] - x[i4, 2]
        b3x, b3y, b3z = x[ib, 0] - x[i3, 0], x[ib, 1] - x[i3, 1], x[ib, 2] - x[i3, 2]
        b4x, b4y, b4z = x[ib, 0] - x[i4, 0], x[ib, 1] - x[i4, 1], x[ib, 2] - x[i4, 2]
        N1x, N1y, N1z = _cross(a3x, a3y, a3z, a4x, a4y, a4z)
        N2x, N2y, N2z = _cross(b4x, b4y, b4z, b3x, b3y, b3z)
        el = np.sqrt(Ex * Ex + Ey * Ey + Ez * Ez)
        n1s = N1x * N1x + N1y * N1y + N1z * N1z
        n2s = N2x * N2x + N2y * N2y + N2z * N2z
        if n1s <= AREA_EPS * AREA_EPS or n2s <= AREA_EPS * AREA_EPS or el <= 0.0:
            continue
        ex, ey, ez = Ex / el, Ey / el, Ez / el
        r1, r2 = 1.0 / np.sqrt(n1s), 1.0 / np.sqrt(n2s)
        cx, cy, cz = _cross(N1x * r1, N1y * r1, N1z * r1, N2x * r2, N2y * r2, N2z * r2)
        sin_t = cx * ex + cy * ey + cz * ez
        cos_t = (N1x * N2x + N1y * N2y + N1z * N2z) * r1 * r2
        s = kappa[h] * np.arctan2(sin_t, cos_t)
        q1, q2 = s / n1s, s / n2s
        ca3 = a3x * ex + a3y * ey + a3z * ez
        ca4 = a4x * ex + a4y * ey + a4z * ez
        cb3 = b3x * ex + b3y * ey + b3z * ez
        cb4 = b4x * ex + b4y * ey + b4z * ez
        out[ia, 0] += el * q1 * N1x
        out[ia, 1] += el * q1 * N1y
        out[ia, 2] += el * q1 * N1z
        out[ib, 0] += el * q2 * N2x
        out[ib, 1] += el * q2 * N2y
        out[ib, 2] += el * q2 * N2z
        out[i3, 0] += ca4 * q1 * N1x + cb4 * q2 * N2x
        out[i3, 1] += ca4 * q1 * N1y + cb4 * q2 * N2y
        out[i3, 2] += ca4 * q1 * N1z + cb4 * q2 * N2z
        out[i4, 0] -= ca3 * q1 * N1x + cb3 * q2 * N2x
        out[i4, 1] -= ca3 * q1 * N1y + cb3 * q2 * N2y
        out[i4, 2] -= ca3 * q1 * N1z + cb3 * q2 * N2z
    return out


def fem_forces_fast(mesh, material, x, v, masses, gravity=(0.0, 0.0, -9.81), out=None):
    """Compiled equivalent of ``fem_forces`` for a single (V, 3) state."""
    T, V = len(mesh.triangles), mesh.n_vertices
    mu, lam = (np.ascontiguousarray(np.broadcast_to(a, (T,))) for a in _lame(material))
    rb = np.ascontiguousarray(np.broadcast_to(np.asarray(material.rayleigh_b, dtype=float), (V,)))
    if out is None:
        out = np.empty((V, 3))
    return _fem_forces_kernel(np.ascontiguousarray(x), np.ascontiguousarray(v), mesh.triangles,
                              mesh.rest_Dinv, mesh.rest_area, mu, lam, mesh.hinges,
                              material.bending_stiffness, np.asarray(masses, dtype=float), rb,
                              np.asarray(gravity, dtype=float), out)


def stable_dt(mesh: TriMesh, material: FemMaterial, masses, safety: float = 0.25) -> float:
    """Heuristic explicit step bound from the stiffest membrane edge and lightest vertex."""
    k_edge = np.max(material.membrane_stiffness) * 4.0
    kb = np.max(material.bending_stiffness, initial=0.0) / min(mesh.spec.spacing) ** 2 * 4.0
    return safety * 2.0 / np.sqrt((k_edge + kb) / np.min(masses))


@dataclass
class FoldResult:
    positions: np.ndarray
    sag: float
    min_z: float
    converged: bool
    steps: int
    time: float
    alignment: str
    resolution: int


def fold_pins(mesh: TriMesh, alignment: str) -> np.ndarray:
    """Pinned corners so the fold line runs along (aligned) or across (misaligned) cell diagonals."""
    if alignment not in ("aligned", "misaligned"):
        raise ValueError("alignment must be 'aligned' or 'misaligned'")
    main = mesh.diagonal_orientation in ("uniform", "alternating")
    along_main = (alignment == "aligned") == main
    names = ("ll", "ur") if along_main else ("lr", "ul")
    pinned = np.zeros(mesh.n_vertices, dtype=bool)
    pinned[[mesh.corner(n) for n in names]] = True
    return pinned


def run_to_equilibrium(force_fn, state: SimState, masses, dt, max_steps, colliders=None,
                       speed_tol=1e-4, hold_steps=200, callback=None):
    """Step until the max free-particle speed stays below ``speed_tol`` for ``hold_steps``."""
    calm = 0
    stats = SimStats()
    for j in range(1, max_steps + 1):
        f = force_fn(state.x, state.v, stats)
        state = step_semi_implicit(state, f, masses, dt)
        state = resolve_contacts(state, colliders)
        if callback is not None:
            callback(j, state)
        speed = np.sqrt(np.max(np.sum(state.v**2, axis=-1)))
        calm = calm + 1 if speed < speed_tol else 0
        if calm >= hold_steps:
            return state, True, j
    return state, False, max_steps


def fold_experiment(resolution: int, alignment: str, membrane: float = 100.0,
                    bending: float = 1e-4, side: float = 1.0, rho: float = 0.2,
                    damping_ratio: float = 8.0, duration: float = 10.0, dt: float | None = None,
                    speed_tol: float = 1e-4, hold_steps: int = 200, material: FemMaterial | None = None,
                    orientation: str = "uniform") -> FoldResult:
    """Hang a flat square from two opposite corners and settle it.

    Rayleigh damping defaults to mass-proportional (``damping_ratio * m``) so
    every resolution settles on the same time scale.
    """
    mesh = build_tri_grid(resolution, resolution, side, side, orientation)
    masses = mesh.lumped_masses(rho)
    if material is None:
        material = FemMaterial.uniform(mesh, membrane, bending, rayleigh_b=damping_ratio * masses)
    if dt is None:
        dt = stable_dt(mesh, material, masses)
    pinned = fold_pins(mesh, alignment)
    state = SimState(mesh.vertices.copy(), np.zeros_like(mesh.vertices), pinned)
    steps = int(np.ceil(duration / dt))

    def force_fn(x, v, stats):
        return fem_forces_fast(mesh, material, x, v, masses)

    state, converged, n = run_to_equilibrium(force_fn, state, masses, dt, steps,
                                             speed_tol=speed_tol, hold_steps=hold_steps)
    if not converged:
        log.warning("fold %dx%d %s did not converge in %.2fs (KE %.3g)", resolution, resolution,
                    alignment, duration, kinetic_energy(state.v, masses))
    z_free = state.x[~pinned, 2]
    z_pin = state.x[pinned, 2].mean()
    return FoldResult(state.x, float(z_pin - z_free.min()), float(z_free.min()), converged, n,
                      n * dt, alignment, resolution)
