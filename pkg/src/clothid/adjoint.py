"""Clip rollouts with a stored tape and exact reverse-mode parameter gradients.

A clip of ``T`` target frames ``xhat[0..T-1]`` is replayed from the state
``x = xhat[1], v = (xhat[1] - xhat[0]) / dt``, which is the exact
semi-implicit Euler state at frame 1 when the data came from the same
integrator.  The surrogate then advances ``T - 2`` steps, producing states for
frames 1..T-1 and net forces for frames 1..T-2, the frames for which
central-difference target forces exist.

Reverse accumulation walks the tape backwards through

    F_j     = m g - c v_j - A^T f(x_j, v_j; k, b)
    v_{j+1} = v_j + dt F_j / m
    x_{j+1} = x_j + dt v_{j+1}

with adjoints of (x_j, v_j) carried between steps.  Pinned particles hold
their state and are masked out of every adjoint.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np

from .lattice import SpringNetwork
from .losses import LossWeights, negativity_grad, negativity_penalties, target_net_force
from .simcore import DEGENERATE_EPS, ExternalForceSpec, MaterialParams

log = logging.getLogger(__name__)


@numba.njit(cache=True)
def _net_force(ia, ib, l0, k, b, m, g, ray, x, v, out):
    P = x.shape[0]
    for p in range(P):
        for c in range(3):
            out[p, c] = m[p] * g[c] - ray * v[p, c]
    for s in range(ia.shape[0]):
        pa, pb = ia[s], ib[s]
        dx = x[pb, 0] - x[pa, 0]
        dy = x[pb, 1] - x[pa, 1]
        dz = x[pb, 2] - x[pa, 2]
        L2 = dx * dx + dy * dy + dz * dz
        L = np.sqrt(L2)
        if L < DEGENERATE_EPS:
            continue
        vd = (v[pb, 0] - v[pa, 0]) * dx + (v[pb, 1] - v[pa, 1]) * dy + (v[pb, 2] - v[pa, 2]) * dz
        coef = k[s] * (1.0 - l0[s] / L) + b[s] * vd / L2
        out[pa, 0] += coef * dx
        out[pa, 1] += coef * dy
        out[pa, 2] += coef * dz
        out[pb, 0] -= coef * dx
        out[pb, 1] -= coef * dy
        out[pb, 2] -= coef * dz


@numba.njit(cache=True)
def _forward(ia, ib, l0, k, b, m, g, ray, free, x0, v0, dt, xs, vs, fs):
    """Fill xs, vs (n+1, P, 3) and fs (n, P, 3); returns False on non-finite state."""
    P = x0.shape[0]
    xs[0] = x0
    vs[0] = v0
    for j in range(fs.shape[0]):
        _net_force(ia, ib, l0, k, b, m, g, ray, xs[j], vs[j], fs[j])
        for p in range(P):
            if free[p]:
                for c in range(3):
                    vn = vs[j, p, c] + dt * fs[j, p, c] / m[p]
                    vs[j + 1, p, c] = vn
                    xs[j + 1, p, c] = xs[j, p, c] + dt * vn
            else:
                for c in range(3):
                    vs[j + 1, p, c] = 0.0
                    xs[j + 1, p, c] = xs[j, p, c]
    for val in xs[-1].ravel():
        if not np.isfinite(val):
            return False
    for val in fs.ravel():
        if not np.isfinite(val):
            return False
    return True


@numba.njit(cache=True)
def _backward(ia, ib, l0, k, b, m, ray, free, dt, xs, vs, gF, gX, a, u, kbar, bbar):
    """Accumulate dL/dk, dL/db over one stretch of steps, walking backwards.

    ``xs[j], vs[j], gF[j], gX[j]`` refer to the same step ``j`` of the
    stretch.  ``a`` and ``u`` hold the adjoints of position and velocity at
    the state after the stretch on entry and before it on exit.
    """
    n, P = gF.shape[0], xs.shape[1]
    Fbar = np.zeros((P, 3))
    for j in range(n - 1, -1, -1):
        for p in range(P):
            if free[p]:
                for c in range(3):
                    V = u[p, c] + dt * a[p, c]
                    Fbar[p, c] = gF[j, p, c] + dt * V / m[p]
                    u[p, c] = V - ray * Fbar[p, c]
                    a[p, c] += gX[j, p, c]
            else:
                for c in range(3):
                    Fbar[p, c] = 0.0
                    u[p, c] = 0.0
                    a[p, c] = 0.0
        x = xs[j]
        v = vs[j]
        for s in range(ia.shape[0]):
            pa, pb = ia[s], ib[s]
            fx = Fbar[pa, 0] - Fbar[pb, 0]
            fy = Fbar[pa, 1] - Fbar[pb, 1]
            fz = Fbar[pa, 2] - Fbar[pb, 2]
            if fx == 0.0 and fy == 0.0 and fz == 0.0:
                continue
            dx = x[pb, 0] - x[pa, 0]
            dy = x[pb, 1] - x[pa, 1]
            dz = x[pb, 2] - x[pa, 2]
            L2 = dx * dx + dy * dy + dz * dz
            L = np.sqrt(L2)
            if L < DEGENERATE_EPS:
                continue
            wx = v[pb, 0] - v[pa, 0]
            wy = v[pb, 1] - v[pa, 1]
            wz = v[pb, 2] - v[pa, 2]
            vd = wx * dx + wy * dy + wz * dz
            df = dx * fx + dy * fy + dz * fz
            ratio = 1.0 - l0[s] / L
            kbar[s] += ratio * df
            bbar[s] += vd * df / L2
            # d-adjoint: elastic + damping Jacobians transposed
            c_f = k[s] * ratio + b[s] * vd / L2
            c_d = k[s] * l0[s] / (L2 * L) * df - 2.0 * b[s] * vd * df / (L2 * L2)
            c_w = b[s] * df / L2
            ddx = c_f * fx + c_d * dx + c_w * wx
            ddy = c_f * fy + c_d * dy + c_w * wy
            ddz = c_f * fz + c_d * dz + c_w * wz
            a[pb, 0] += ddx
            a[pb, 1] += ddy
            a[pb, 2] += ddz
            a[pa, 0] -= ddx
            a[pa, 1] -= ddy
            a[pa, 2] -= ddz
            c_v = b[s] * df / L2
            u[pb, 0] += c_v * dx
            u[pb, 1] += c_v * dy
            u[pb, 2] += c_v * dz
            u[pa, 0] -= c_v * dx
            u[pa, 1] -= c_v * dy
            u[pa, 2] -= c_v * dz


@dataclass
class ClipData:
    """One training clip: target positions (T, P, 3) and boundary data."""

    xhat: np.ndarray
    pinned: np.ndarray
    masses: np.ndarray
    dt: float
    ext: ExternalForceSpec
    clip_id: tuple = ()
    fhat: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.xhat = np.ascontiguousarray(self.xhat, dtype=float)
        self.pinned = np.asarray(self.pinned, dtype=bool)
        if len(self.xhat) < 3:
            raise ValueError("clip needs at least 3 frames")
        if self.fhat is None:
            self.fhat = target_net_force(self.xhat, self.masses, self.dt, self.pinned)

    @property
    def free(self):
        return ~self.pinned

    def initial_state(self):
        v0 = (self.xhat[1] - self.xhat[0]) / self.dt
        v0[self.pinned] = 0.0
        return self.xhat[1].copy(), v0


@dataclass
class Tape:
    xs: np.ndarray  # states for frames 1..T-1
    vs: np.ndarray
    forces: np.ndarray  # net forces for frames 1..T-2
    finite: bool
    clip: ClipData

    @property
    def nbytes(self) -> int:
        return self.xs.nbytes + self.vs.nbytes + self.forces.nbytes


def clip_rollout_with_tape(net: SpringNetwork, params: MaterialParams, clip: ClipData) -> Tape:
    params.check(net)
    T, P = clip.xhat.shape[:2]
    x0, v0 = clip.initial_state()
    xs = np.empty((T - 1, P, 3))
    vs = np.empty((T - 1, P, 3))
    fs = np.empty((T - 2, P, 3))
    ok = _forward(net.a, net.b, net.rest_length, params.k, params.b, np.asarray(clip.masses, float),
                  np.asarray(clip.ext.gravity, float), float(clip.ext.rayleigh_b), clip.free,
                  x0, v0, clip.dt, xs, vs, fs)
    if not ok:
        log.warning("clip %s diverged", clip.clip_id)
    return Tape(xs, vs, fs, bool(ok), clip)


@dataclass
class ClipLoss:
    force: float
    impulse: float
    position: float
    total_data: float
    gF: np.ndarray = field(repr=False)
    gX: np.ndarray = field(repr=False)


def clip_losses(tape: Tape, weights: LossWeights) -> ClipLoss:
    """Data loss terms of one clip and their gradients wrt forces and positions."""
    clip = tape.clip
    T, P = clip.xhat.shape[:2]
    n = T - 2
    free = clip.free.astype(float)[None, :, None]
    dF = (tape.forces - clip.fhat) * free
    Lf = float(np.sum(dF**2) / (P * n))
    dJ = clip.dt * (0.5 * (dF[0] + dF[-1]) + dF[1:-1].sum(axis=0)) if n >= 2 else np.zeros((P, 3))
    LJ = float(np.sum(dJ**2) / P) if n >= 2 else 0.0
    dX = (tape.xs[1:] - clip.xhat[2:]) * free
    Lx = float(np.sum(dX**2) / (P * n))
    gF = (2.0 * weights.force / (P * n)) * dF
    if n >= 2 and weights.impulse:
        trap = np.full(n, clip.dt)
        trap[0] = trap[-1] = 0.5 * clip.dt
        gF += (2.0 * weights.impulse / P) * trap[:, None, None] * dJ[None] * free
    gX = np.zeros_like(tape.xs)
    if weights.position:
        gX[1:] = (2.0 * weights.position / (P * n)) * dX
    total = weights.force * Lf + weights.impulse * LJ + weights.position * Lx
    return ClipLoss(Lf, LJ, Lx, total, gF, gX)


def grad_params(net: SpringNetwork, params: MaterialParams, tape: Tape, weights: LossWeights):
    """Loss terms and (dL/dk, dL/db) of the clip's data loss (penalties excluded)."""
    if not tape.finite:
        raise FloatingPointError("cannot differentiate a diverged rollout")
    closs = clip_losses(tape, weights)
    clip = tape.clip
    kbar = np.zeros(net.n_springs)
    bbar = np.zeros(net.n_springs)
    n = len(tape.forces)
    a = closs.gX[n].copy()
    u = np.zeros_like(a)
    _backward(net.a, net.b, net.rest_length, params.k, params.b, np.asarray(clip.masses, float),
              float(clip.ext.rayleigh_b), clip.free, clip.dt, tape.xs[:n], tape.vs[:n],
              np.ascontiguousarray(closs.gF), np.ascontiguousarray(closs.gX[:n]), a, u, kbar, bbar)
    return closs, kbar, bbar


def _segment_forward(net, params, clip, x0, v0, steps):
    P = x0.shape[0]
    xs = np.empty((steps + 1, P, 3))
    vs = np.empty((steps + 1, P, 3))
    fs = np.empty((steps, P, 3))
    ok = _forward(net.a, net.b, net.rest_length, params.k, params.b, np.asarray(clip.masses, float),
                  np.asarray(clip.ext.gravity, float), float(clip.ext.rayleigh_b), clip.free,
                  x0, v0, clip.dt, xs, vs, fs)
    return ok, xs, vs, fs


def grad_params_checkpointed(net: SpringNetwork, params: MaterialParams, clip: ClipData,
                             weights: LossWeights, every: int):
    """Same result as ``grad_params`` while storing only every ``every``-th state.

    The forward sweep keeps segment start states and running loss sums; the
    reverse sweep recomputes each segment from its start state before
    back-propagating through it.  Memory drops from O(T P) to
    O((T / every + every) P) at the cost of a second forward pass.
    """
    if every < 1:
        raise ValueError("checkpoint interval must be >= 1")
    T, P = clip.xhat.shape[:2]
    n = T - 2
    free = clip.free.astype(float)[None, :, None]
    trap = np.full(n, clip.dt)
    if n >= 2:
        trap[0] = trap[-1] = 0.5 * clip.dt
    bounds = [(j0, min(j0 + every, n)) for j0 in range(0, n, every)]
    starts = []
    x, v = clip.initial_state()
    sf = sx = 0.0
    dJ = np.zeros((P, 3))
    for j0, j1 in bounds:
        starts.append((x, v))
        ok, xs, vs, fs = _segment_forward(net, params, clip, x, v, j1 - j0)
        if not ok:
            raise FloatingPointError("cannot differentiate a diverged rollout")
        dF = (fs - clip.fhat[j0:j1]) * free
        sf += float(np.sum(dF**2))
        dJ += np.sum(trap[j0:j1, None, None] * dF, axis=0)
        dX = (xs[1:] - clip.xhat[j0 + 2:j1 + 2]) * free
        sx += float(np.sum(dX**2))
        x, v = xs[-1], vs[-1]
    Lf, Lx = sf / (P * n), sx / (P * n)
    LJ = float(np.sum(dJ**2) / P) if n >= 2 else 0.0
    cx = 2.0 * weights.position / (P * n)
    a = cx * (x - clip.xhat[n + 1]) * free[0]
    u = np.zeros_like(a)
    kbar = np.zeros(net.n_springs)
    bbar = np.zeros(net.n_springs)
    for (j0, j1), (xa, va) in zip(reversed(bounds), reversed(starts)):
        _, xs, vs, fs = _segment_forward(net, params, clip, xa, va, j1 - j0)
        dF = (fs - clip.fhat[j0:j1]) * free
        gF = (2.0 * weights.force / (P * n)) * dF
        if n >= 2 and weights.impulse:
            gF += (2.0 * weights.impulse / P) * trap[j0:j1, None, None] * dJ[None] * free
        gX = np.zeros((j1 - j0, P, 3))
        if weights.position:
            gX = cx * (xs[:-1] - clip.xhat[j0 + 1:j1 + 1]) * free
            if j0 == 0:
                gX[0] = 0.0
        _backward(net.a, net.b, net.rest_length, params.k, params.b, np.asarray(clip.masses, float),
                  float(clip.ext.rayleigh_b), clip.free, clip.dt, xs[:-1], vs[:-1],
                  np.ascontiguousarray(gF), np.ascontiguousarray(gX), a, u, kbar, bbar)
    total = weights.force * Lf + weights.impulse * LJ + weights.position * Lx
    return ClipLoss(Lf, LJ, Lx, total, None, None), kbar, bbar


@dataclass
class BatchResult:
    loss: float
    force: float
    impulse: float
    position: float
    k_neg: float
    b_neg: float
    grad_k: np.ndarray
    grad_b: np.ndarray
    n_ok: int
    skipped: list


def batch_loss_and_grad(net, params, clips, weights: LossWeights, order=None,
                        checkpoint_every: int = 0) -> BatchResult:
    """Average data loss over clips plus sign penalties, with gradients.

    Per-clip gradients are reduced in clip-list order regardless of the
    evaluation ``order``, so the result does not depend on scheduling.
    Diverged clips are skipped and listed in ``skipped``.  A positive
    ``checkpoint_every`` recomputes states instead of storing the full tape.
    """
    idx = range(len(clips)) if order is None else order
    per = {}
    skipped = []
    for i in idx:
        if checkpoint_every > 0:
            try:
                per[i] = grad_params_checkpointed(net, params, clips[i], weights, checkpoint_every)
            except FloatingPointError:
                log.warning("clip %s diverged", clips[i].clip_id)
                skipped.append(clips[i].clip_id)
            continue
        tape = clip_rollout_with_tape(net, params, clips[i])
        if not tape.finite:
            skipped.append(clips[i].clip_id)
            continue
        per[i] = grad_params(net, params, tape, weights)
    gk = np.zeros(net.n_springs)
    gb = np.zeros(net.n_springs)
    lf = lj = lx = 0.0
    for i in sorted(per):
        closs, kb, bb = per[i]
        gk += kb
        gb += bb
        lf += closs.force
        lj += closs.impulse
        lx += closs.position
    n = max(len(per), 1)
    gk /= n
    gb /= n
    lf, lj, lx = lf / n, lj / n, lx / n
    pk, pb = negativity_penalties(params.k, params.b)
    gk += weights.k_neg * negativity_grad(params.k)
    gb += weights.b_neg * negativity_grad(params.b)
    total = (weights.force * lf + weights.impulse * lj + weights.position * lx
             + weights.k_neg * pk + weights.b_neg * pb)
    if not per:
        total = float("nan")
    return BatchResult(total, lf, lj, lx, pk, pb, gk, gb, len(per), skipped)
