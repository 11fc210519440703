import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clothid.datagen import RolloutSpec, SourceSpec, build_source, generate_rollouts
from clothid.lattice import GridSpec, TopologyFlags, build_lattice
from clothid.metrics import (motion_rmse, motion_rmse_frames, replay_target, rmse_params,
                             write_motion_csv, write_params_csv)
from clothid.resample import resample_rollout
from clothid.simcore import MaterialParams


def test_rmse_params_examples(rng):
    t = MaterialParams(np.array([1.0, 2.0]), np.array([0.5, 0.5]))
    assert rmse_params(t, t).rmse_k == 0.0 and rmse_params(t, t).rmse_b == 0.0
    e = MaterialParams(np.array([4.0, 6.0]), np.array([0.5, 0.5]))
    assert rmse_params(e, t).rmse_k == pytest.approx(math.sqrt(25 / 2), rel=1e-15)
    with pytest.raises(ValueError):
        rmse_params(MaterialParams(np.ones(3), np.ones(3)), t)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), S=st.integers(1, 40))
def test_rmse_params_scalar_oracle_and_permutation(seed, S):
    rng = np.random.default_rng(seed)
    a = MaterialParams(rng.uniform(-5, 100, S), rng.uniform(0, 3, S))
    b = MaterialParams(rng.uniform(-5, 100, S), rng.uniform(0, 3, S))
    ref = math.sqrt(sum((x - y) ** 2 for x, y in zip(a.k, b.k)) / S)
    rep = rmse_params(a, b)
    assert rep.rmse_k == pytest.approx(ref, rel=1e-12)
    perm = rng.permutation(S)
    rp = rmse_params(MaterialParams(a.k[perm], a.b[perm]), MaterialParams(b.k[perm], b.b[perm]))
    assert rp.rmse_k == pytest.approx(rep.rmse_k, rel=1e-12)
    assert rp.rmse_b == pytest.approx(rep.rmse_b, rel=1e-12)


def test_per_class_breakdown(rng):
    net = build_lattice(GridSpec(5, 5, 1.0, 1.0), TopologyFlags())
    S = net.n_springs
    t = MaterialParams(rng.uniform(10, 100, S), np.full(S, 1.0))
    e = MaterialParams(t.k + 2.0, t.b)
    rep = rmse_params(e, t, net.spring_class)
    assert set(rep.per_class) == {"structural", "shear", "bending"}
    for name, (rk, rb, n) in rep.per_class.items():
        assert rk == pytest.approx(2.0) and rb == 0.0
    assert sum(n for _, _, n in rep.per_class.values()) == S


def test_motion_rmse_examples(rng):
    x = rng.standard_normal((5, 7, 3))
    np.testing.assert_array_equal(motion_rmse_frames(x, x), 0.0)
    y = x.copy()
    y[2, :, 2] += 1.0
    np.testing.assert_allclose(motion_rmse_frames(y, x), [0, 0, 1.0, 0, 0], atol=1e-15)
    np.testing.assert_allclose(motion_rmse_frames(y, x, per_coordinate=True)[2], 1 / math.sqrt(3))
    y[3, 0] += [3.0, 4.0, 0.0]
    assert motion_rmse_frames(y, x)[3] == pytest.approx(math.sqrt(25 / 7))
    with pytest.raises(ValueError):
        motion_rmse_frames(x, x[:, :3])


def test_motion_rmse_translation_invariant_and_aggregates(rng):
    a, b = rng.standard_normal((2, 2, 6, 4, 3))
    c = rng.standard_normal(3) * 50
    r1 = motion_rmse(list(a), list(b))
    r2 = motion_rmse(list(a + c), list(b + c))
    np.testing.assert_allclose(r2.per_frame, r1.per_frame, rtol=1e-10)
    assert r1.per_frame.shape == (2, 6)
    assert r1.mean == pytest.approx(r1.per_frame.mean()) and r1.std == pytest.approx(r1.per_frame.std())
    assert r1.window_mean(2) == pytest.approx(r1.per_frame[:, :2].mean())
    assert motion_rmse(a[0], a[0]).mean == 0.0


def test_replay_of_source_is_exact():
    src = SourceSpec(rows=5, cols=5, width=1.0, height=1.0, damping=0.5, duration=0.3)
    model = build_source(src)
    ro = generate_rollouts(src, RolloutSpec(count=1, seed=4), model=model)[0]
    tgt = resample_rollout(ro, src.grid)
    pred = replay_target(model.net, model.params, tgt)
    assert pred.shape == tgt.xhat.shape
    assert motion_rmse(pred, tgt.xhat).per_frame.max() < 1e-12
    wrong = MaterialParams(model.params.k * 0.5, model.params.b)
    assert motion_rmse(replay_target(model.net, wrong, tgt), tgt.xhat).mean > 1e-4


def test_csv_outputs(tmp_path, rng):
    rep = motion_rmse([rng.random((4, 3, 3))] * 2, [rng.random((4, 3, 3))] * 2)
    path = tmp_path / "motion.csv"
    write_motion_csv(path, rep, 0.01, rollout_ids=[7, 9])
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["rollout", "frame", "time", "rmse"]
    assert len(rows) == 1 + 8 + 2
    assert rows[1][:3] == ["7", "0", "0.0"] and rows[5][:2] == ["9", "0"]
    assert float(rows[-2][3]) == rep.mean and rows[-1][1] == "std"
    t = MaterialParams(np.arange(1.0, 6.0), np.ones(5))
    ppath = tmp_path / "params.csv"
    write_params_csv(ppath, rmse_params(MaterialParams(t.k + 1, t.b), t, bins=4))
    prow = list(csv.reader(ppath.open()))
    assert prow[1][:3] == ["all", "1.0", "0.0"]
    assert sum(1 for r in prow if r[0] == "hist_k") == 4
