import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clothid.lattice import GridSpec, TopologyFlags, build_lattice
from clothid.losses import (LossWeights, force_loss, impulse, impulse_loss, negativity_grad,
                            negativity_penalties, position_loss, target_net_force)
from clothid.simcore import ExternalForceSpec, MaterialParams, SimState, net_force, simulate


def test_stationary_trajectory_has_zero_force(rng):
    x = np.broadcast_to(rng.standard_normal((5, 3)), (6, 5, 3))
    np.testing.assert_array_equal(target_net_force(x, np.ones(5), 1e-3), 0.0)


def test_free_fall_parabola_gives_weight():
    dt, m, g = 1e-3, np.array([0.5, 2.0]), np.array([0.0, 0.0, -9.81])
    t = np.arange(12) * dt
    x0 = np.array([[0.0, 1.0, 2.0], [3.0, -1.0, 0.5]])
    x = x0[None] + 0.5 * g * t[:, None, None] ** 2
    f = target_net_force(x, m, dt)
    assert f.shape == (10, 2, 3)
    np.testing.assert_allclose(f, np.broadcast_to(m[:, None] * g, f.shape), rtol=1e-9, atol=1e-9 * 9.81)


def test_pinned_entries_zeroed(rng):
    x = rng.standard_normal((5, 3, 3))
    f = target_net_force(x, np.ones(3), 0.1, pinned=np.array([True, False, False]))
    np.testing.assert_array_equal(f[:, 0], 0.0)
    assert np.abs(f[:, 1:]).min() > 0
    with pytest.raises(ValueError):
        target_net_force(x[:2], np.ones(3), 0.1)


def test_target_force_matches_simulator_recorded_force(rng):
    net = build_lattice(GridSpec(4, 4, 1.0, 1.0), TopologyFlags())
    P, S = net.n_particles, net.n_springs
    params = MaterialParams(rng.uniform(10, 100, S), rng.uniform(0.1, 1.0, S))
    m = np.full(P, 0.05)
    ext = ExternalForceSpec(rayleigh_b=0.1)
    pinned = np.zeros(P, bool)
    pinned[[0, 3]] = True
    x0 = net.rest_positions.copy()
    x0[:, 2] = 0.2 * x0[:, 1]
    dt = 1e-3
    tr = simulate(net, params, SimState(x0, np.zeros_like(x0), pinned), m, ext, steps=40, dt=dt)
    rec = np.stack([net_force(net, params, tr.x[j], tr.v[j], m, ext) for j in range(1, 40)])
    rec[:, pinned] = 0.0
    fhat = target_net_force(tr.x, m, dt, pinned)
    scale = np.abs(rec).max()
    np.testing.assert_allclose(fhat, rec, rtol=0, atol=1e-6 * scale)


def test_force_loss_examples():
    f = np.zeros((7, 1, 3))
    fhat = f.copy()
    assert force_loss(f, fhat) == 0.0
    fhat[3, 0] = [3.0, 4.0, 0.0]
    assert force_loss(f, fhat) == pytest.approx(25.0 / 7, rel=1e-15)
    with pytest.raises(ValueError):
        force_loss(f, fhat[:-1])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), F=st.integers(1, 6), P=st.integers(1, 5))
def test_losses_match_scalar_sums(seed, F, P):
    rng = np.random.default_rng(seed)
    f, fhat = rng.standard_normal((2, F, P, 3))
    free = rng.random(P) < 0.7
    total = 0.0
    pos = 0.0
    for i in range(F):
        for p in range(P):
            if free[p]:
                for c in range(3):
                    total += (f[i, p, c] - fhat[i, p, c]) ** 2
    assert force_loss(f, fhat, free) == pytest.approx(total / (P * F), rel=1e-12, abs=1e-300)
    for i in range(F):
        for p in range(P):
            for c in range(3):
                pos += (f[i, p, c] - fhat[i, p, c]) ** 2
    assert position_loss(f, fhat) == pytest.approx(pos / (P * F), rel=1e-12)


def test_impulse_of_constant_and_ramp():
    dt, T = 0.01, 9
    c = np.array([[1.0, -2.0, 0.5]])
    f = np.broadcast_to(c, (T, 1, 3))
    np.testing.assert_allclose(impulse(f, dt), (T - 1) * dt * c, rtol=1e-14)
    ramp = np.arange(T, dtype=float)[:, None, None] * np.ones((1, 1, 3))
    # trapezoid sum of j over j=0..T-1 equals the exact integral (T-1)^2/2 for a linear ramp
    np.testing.assert_allclose(impulse(ramp, dt), dt * (T - 1) ** 2 / 2, rtol=1e-14)
    with pytest.raises(ValueError):
        impulse(f[:1], dt)


def test_impulse_loss(rng):
    f = rng.standard_normal((6, 2, 3))
    assert impulse_loss(f, f, 0.1) == 0.0
    g = f.copy()
    g[:, 0] += np.array([1.0, 0.0, 0.0])
    # uniform offset on one particle changes its impulse by 5*dt along x
    assert impulse_loss(f, g, 0.1) == pytest.approx((5 * 0.1) ** 2 / 2, rel=1e-12)
    with pytest.raises(ValueError):
        impulse_loss(f, g[:, :1], 0.1)


def test_position_loss_uniform_offset(rng):
    x = rng.standard_normal((4, 5, 3))
    c = np.array([0.3, -0.4, 1.2])
    assert position_loss(x, x) == 0.0
    assert position_loss(x + c, x) == pytest.approx(c @ c, rel=1e-12)


def test_negativity_penalties():
    assert negativity_penalties(np.array([1.0, 2.0]), np.array([0.0, 3.0])) == (0.0, 0.0)
    assert negativity_penalties(np.array([-2.0, 3.0]), np.array([1.0, -0.5])) == (2.0, 0.5)
    np.testing.assert_array_equal(negativity_grad(np.array([-1.0, 0.0, 2.0])), [-1.0, 0.0, 0.0])


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(force=-1.0)
    with pytest.raises(ValueError):
        LossWeights(force=0.0, impulse=0.0)
    assert LossWeights().force == 1.0 and LossWeights().impulse == 10.0
