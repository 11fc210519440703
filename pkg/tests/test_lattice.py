import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clothid.lattice import (BENDING, SHEAR, STRUCTURAL, GridSpec, TopologyFlags,
                             accumulate_particle_forces, build_lattice, expected_spring_count,
                             from_springs, rest_layout, spring_extension_map)

ALL = TopologyFlags()
STRUCT_ONE_DIAG = TopologyFlags(shear_anti=False, bending=False)


def test_32x32_all_springs_count():
    assert build_lattice(GridSpec(32, 32, 15.5, 15.5), ALL).n_springs == 5826


def test_32x32_structural_single_diagonal_parameter_count():
    net = build_lattice(GridSpec(32, 32, 15.5, 15.5), STRUCT_ONE_DIAG)
    assert net.n_springs == 2945
    assert 2 * net.n_springs == 5890


def test_2x2_structural_only():
    spec = GridSpec(2, 2, 0.7, 0.7)
    net = build_lattice(spec, TopologyFlags(shear_main=False, shear_anti=False, bending=False))
    assert net.n_springs == 4
    np.testing.assert_allclose(net.rest_length, 0.7)


def test_rejects_small_grid_and_missing_structural():
    with pytest.raises(ValueError):
        GridSpec(1, 4, 1.0, 1.0)
    with pytest.raises(ValueError):
        GridSpec(3, 3, 0.0, 1.0)
    with pytest.raises(ValueError):
        TopologyFlags(structural=False)
    with pytest.raises(ValueError):
        TopologyFlags(bending_stride=0)


def test_rest_layout_spans_rectangle():
    x = rest_layout(GridSpec(3, 4, 3.0, 2.0))
    assert x.shape == (12, 3)
    np.testing.assert_allclose(x[0], [0, 0, 0])
    np.testing.assert_allclose(x[3], [3.0, 0, 0])  # end of first row
    np.testing.assert_allclose(x[-1], [3.0, 2.0, 0])


@settings(max_examples=40, deadline=None)
@given(rows=st.integers(2, 9), cols=st.integers(2, 9), main=st.booleans(), anti=st.booleans(),
       bend=st.booleans(), stride=st.integers(1, 3))
def test_network_invariants(rows, cols, main, anti, bend, stride):
    spec = GridSpec(rows, cols, 1.3, 0.9)
    flags = TopologyFlags(True, main, anti, bend, stride)
    net = build_lattice(spec, flags)
    assert net.n_springs == expected_spring_count(spec, flags)
    assert np.all(net.a != net.b)
    key = np.minimum(net.a, net.b) * net.n_particles + np.maximum(net.a, net.b)
    assert len(np.unique(key)) == net.n_springs
    x = rest_layout(spec)
    np.testing.assert_allclose(net.rest_length, np.linalg.norm(x[net.b] - x[net.a], axis=1), rtol=0, atol=0)
    assert np.all(net.rest_length > 0)
    A = net.incidence.toarray()
    assert np.all(np.sort(A, axis=1)[:, 0] == -1) and np.all(np.sort(A, axis=1)[:, -1] == 1)
    assert np.all(np.count_nonzero(A, axis=1) == 2)
    assert np.all(A[np.arange(net.n_springs), net.a] == -1)
    assert np.all(A[np.arange(net.n_springs), net.b] == 1)


def test_closed_form_class_counts():
    R, C = 7, 5
    net = build_lattice(GridSpec(R, C, 1.0, 1.0), ALL)
    counts = net.class_counts()
    assert counts["structural"] == R * (C - 1) + C * (R - 1)
    assert counts["shear"] == 2 * (R - 1) * (C - 1)
    assert counts["bending"] == R * (C - 2) + C * (R - 2)


def test_ordering_structural_then_shear_then_bending():
    net = build_lattice(GridSpec(5, 5, 1.0, 1.0), ALL)
    cls = net.spring_class
    assert np.all(np.diff(cls) >= 0)
    assert cls[0] == STRUCTURAL and SHEAR in cls and cls[-1] == BENDING


def test_bending_springs_skip_one_vertex():
    spec = GridSpec(4, 4, 3.0, 3.0)
    net = build_lattice(spec, ALL)
    np.testing.assert_allclose(net.rest_length[net.spring_class == BENDING], 2.0)


def test_deterministic_ordering():
    spec = GridSpec(6, 5, 1.0, 2.0)
    a, b = build_lattice(spec, ALL), build_lattice(spec, ALL)
    assert a.a.tobytes() == b.a.tobytes() and a.b.tobytes() == b.b.tobytes()
    assert a.rest_length.tobytes() == b.rest_length.tobytes()


def test_from_springs_validation():
    spec = GridSpec(2, 2, 1.0, 1.0)
    with pytest.raises(ValueError):
        from_springs(spec, ALL, [[0, 0]], [0])
    with pytest.raises(ValueError):
        from_springs(spec, ALL, [[0, 1], [1, 0]], [0, 0])
    with pytest.raises(ValueError):
        from_springs(spec, ALL, [[0, 4]], [0])


def test_extension_map_examples():
    net = build_lattice(GridSpec(3, 3, 2.0, 2.0), TopologyFlags(shear_main=False, shear_anti=False,
                                                                bending=False))
    np.testing.assert_array_equal(spring_extension_map(net, np.tile([1.0, -2.0, 3.0], (9, 1))), 0.0)
    d = spring_extension_map(net, net.rest_positions)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), net.rest_length, rtol=1e-15)
    with pytest.raises(ValueError):
        spring_extension_map(net, np.zeros((8, 3)))


def test_extension_map_two_particles():
    net = from_springs(GridSpec(2, 2, 1.0, 1.0), ALL, [[0, 1]], [0])
    x = np.zeros((4, 3))
    x[1] = [1.0, 0.0, 0.0]
    np.testing.assert_array_equal(spring_extension_map(net, x)[0], [1.0, 0.0, 0.0])


def test_accumulate_examples(rng):
    net = from_springs(GridSpec(2, 2, 1.0, 1.0), ALL, [[0, 3]], [1])
    out = accumulate_particle_forces(net, np.array([[0.0, 0.0, 5.0]]))
    np.testing.assert_array_equal(out[0], [0, 0, -5])
    np.testing.assert_array_equal(out[3], [0, 0, 5])
    np.testing.assert_array_equal(out[[1, 2]], 0)
    big = build_lattice(GridSpec(5, 5, 1.0, 1.0), ALL)
    np.testing.assert_array_equal(accumulate_particle_forces(big, np.zeros((big.n_springs, 3))), 0)
    f = rng.standard_normal((big.n_springs, 3)) * 100
    tot = accumulate_particle_forces(big, f).sum(axis=0)
    assert np.all(np.abs(tot) <= 1e-12 * np.abs(f).sum())
    with pytest.raises(ValueError):
        accumulate_particle_forces(big, np.zeros((3, 3)))


@pytest.mark.parametrize("rows,cols", [(2, 2), (3, 4), (4, 4)])
def test_gather_scatter_matches_dense_oracle(rows, cols, rng):
    net = build_lattice(GridSpec(rows, cols, 1.0, 1.0), ALL)
    P, S = net.n_particles, net.n_springs
    A = np.zeros((S, P))  # dense incidence built independently from the endpoint lists
    for s in range(S):
        A[s, net.a[s]] -= 1.0
        A[s, net.b[s]] += 1.0
    u = rng.standard_normal((P, 3))
    np.testing.assert_allclose(accumulate_particle_forces(net, spring_extension_map(net, u)),
                               A.T @ A @ u, rtol=1e-13, atol=1e-13)
