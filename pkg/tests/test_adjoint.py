import numpy as np
import pytest
from conftest import draped_clip, fd_gradient, numpy_clip_loss, perturbed, relative_error

from clothid.adjoint import (ClipData, batch_loss_and_grad, clip_rollout_with_tape, grad_params,
                             grad_params_checkpointed)
from clothid.lattice import TopologyFlags
from clothid.losses import LossWeights, negativity_penalties
from clothid.simcore import MaterialParams

W_DEFAULT = LossWeights()
W_ALL = LossWeights(force=1.0, impulse=10.0, k_neg=1.0, b_neg=1.0, position=3.0)


def _grads(net, params, clip, weights):
    _, kb, bb = grad_params(net, params, clip_rollout_with_tape(net, params, clip), weights)
    return kb, bb


@pytest.mark.parametrize("weights", [W_DEFAULT, W_ALL])
@pytest.mark.parametrize("flags", [TopologyFlags(bending=False), TopologyFlags()])
def test_2x2_ten_step_gradients_match_finite_differences(weights, flags):
    net, truth, clip, rng = draped_clip(rows=2, cols=2, flags=flags, steps=20, start=3, length=12)
    params = perturbed(truth, rng)
    kb, bb = _grads(net, params, clip, weights)
    for group, an in (("k", kb), ("b", bb)):
        fd = fd_gradient(net, params, clip, weights, group, 1e-5)
        assert relative_error(an, fd).max() < 1e-5, group


def test_4x4_fifty_step_gradients_all_spring_classes():
    net, truth, clip, rng = draped_clip(flags=TopologyFlags(), length=52)
    params = perturbed(truth, rng)
    kb, bb = _grads(net, params, clip, W_ALL)
    for group, an in (("k", kb), ("b", bb)):
        fd = fd_gradient(net, params, clip, W_ALL, group, 1e-3, order=4)
        assert relative_error(an, fd).max() < 1e-5, group


def test_spring_between_pinned_particles_has_zero_gradient():
    net, truth, clip, rng = draped_clip(rows=2, cols=2, steps=20, start=3, length=12)
    params = perturbed(truth, rng)
    kb, bb = _grads(net, params, clip, W_ALL)
    s = np.flatnonzero(clip.pinned[net.a] & clip.pinned[net.b])
    assert len(s) == 1
    assert kb[s[0]] == 0.0 and bb[s[0]] == 0.0
    assert np.all(np.delete(kb, s) != 0.0)


def test_gradient_is_linear_in_impulse_weight():
    net, truth, clip, rng = draped_clip()
    params = perturbed(truth, rng)
    k1, b1 = _grads(net, params, clip, LossWeights(force=1.0, impulse=10.0))
    k2, b2 = _grads(net, params, clip, LossWeights(force=1.0, impulse=20.0))
    kj, bj = _grads(net, params, clip, LossWeights(force=0.0, impulse=10.0))
    np.testing.assert_allclose(k2 - k1, kj, rtol=1e-9, atol=1e-12 * np.abs(kj).max())
    np.testing.assert_allclose(b2 - b1, bj, rtol=1e-9, atol=1e-12 * np.abs(bj).max())


def test_self_consistent_clip_has_negligible_loss():
    net, truth, clip, _ = draped_clip()
    tape = clip_rollout_with_tape(net, truth, clip)
    closs, _, _ = grad_params(net, truth, tape, W_DEFAULT)
    assert closs.force < 1e-16 and closs.impulse < 1e-16
    np.testing.assert_allclose(tape.xs[1:], clip.xhat[2:], rtol=0, atol=1e-12)


def test_tape_memory_linear_in_clip_length():
    net, truth, clip, _ = draped_clip(steps=120, start=2, length=101)
    P = net.n_particles
    for T in (11, 51, 101):
        sub = ClipData(clip.xhat[:T], clip.pinned, clip.masses, clip.dt, clip.ext)
        tape = clip_rollout_with_tape(net, truth, sub)
        assert tape.nbytes == (3 * T - 4) * P * 3 * 8


@pytest.mark.parametrize("every", [1, 7, 50, 200])
def test_checkpointed_gradient_matches_full_tape(every):
    net, truth, clip, rng = draped_clip(flags=TopologyFlags())
    params = perturbed(truth, rng)
    full, kb, bb = grad_params(net, params, clip_rollout_with_tape(net, params, clip), W_ALL)
    ck, kc, bc = grad_params_checkpointed(net, params, clip, W_ALL, every)
    np.testing.assert_allclose(kc, kb, rtol=1e-12, atol=1e-12 * np.abs(kb).max())
    np.testing.assert_allclose(bc, bb, rtol=1e-12, atol=1e-12 * np.abs(bb).max())
    assert ck.total_data == pytest.approx(full.total_data, rel=1e-12)
    with pytest.raises(ValueError):
        grad_params_checkpointed(net, params, clip, W_ALL, 0)


def _clips(n=4):
    out = []
    net = truth = rng = None
    for seed in range(n):
        net, t, clip, r = draped_clip(seed=0, start=2 + 3 * seed, truth=truth)
        truth = t if truth is None else truth
        rng = r if rng is None else rng
        out.append(clip)
    return net, truth, out, rng


def test_batch_gradient_independent_of_order():
    net, truth, clips, rng = _clips()
    params = perturbed(truth, rng)
    a = batch_loss_and_grad(net, params, clips, W_ALL)
    b = batch_loss_and_grad(net, params, clips, W_ALL, order=[3, 1, 0, 2])
    np.testing.assert_allclose(b.grad_k, a.grad_k, rtol=0, atol=1e-10 * np.abs(a.grad_k).max())
    np.testing.assert_allclose(b.grad_b, a.grad_b, rtol=0, atol=1e-10 * np.abs(a.grad_b).max())
    assert b.loss == pytest.approx(a.loss, rel=1e-12)
    c = batch_loss_and_grad(net, params, clips, W_ALL, checkpoint_every=9)
    np.testing.assert_allclose(c.grad_k, a.grad_k, rtol=1e-12, atol=1e-12 * np.abs(a.grad_k).max())


def test_batch_loss_decomposes_into_weighted_components():
    net, truth, clips, rng = _clips(3)
    params = perturbed(truth, rng)
    params.k[2] = -1.5
    params.b[5] = -0.25
    res = batch_loss_and_grad(net, params, clips, W_ALL)
    w = W_ALL
    assert res.loss == pytest.approx(w.force * res.force + w.impulse * res.impulse
                                     + w.position * res.position + w.k_neg * res.k_neg
                                     + w.b_neg * res.b_neg, rel=1e-12)
    # components recomputed with the plain numpy simulator and loss functions
    data = np.mean([numpy_clip_loss(net, params, c, w) for c in clips])
    pk, pb = negativity_penalties(params.k, params.b)
    assert (pk, pb) == (1.5, 0.25)
    assert res.loss == pytest.approx(data + pk + pb, rel=1e-9)
    # penalty gradient: -1 on the negative entries on top of the data gradient
    data_only = batch_loss_and_grad(net, params, clips, LossWeights(1.0, 10.0, 0.0, 0.0, 3.0))
    assert res.grad_k[2] - data_only.grad_k[2] == pytest.approx(-1.0, abs=1e-12)
    assert res.grad_b[5] - data_only.grad_b[5] == pytest.approx(-1.0, abs=1e-12)


def test_diverged_clip_is_skipped():
    net, truth, clips, _ = _clips(2)
    wild = MaterialParams(np.full(net.n_springs, 1e9), np.full(net.n_springs, 1e6))
    tape = clip_rollout_with_tape(net, wild, clips[0])
    assert not tape.finite
    with pytest.raises(FloatingPointError):
        grad_params(net, wild, tape, W_DEFAULT)
    res = batch_loss_and_grad(net, wild, clips, W_DEFAULT)
    assert res.n_ok == 0 and len(res.skipped) == 2 and np.isnan(res.loss)
