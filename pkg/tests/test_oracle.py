import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dcnet.imaging import HsiCube, Psf, default_srf, simulate_pair, synth_scene
from dcnet.oracle import (
    SpatialOperator,
    abundance_cube,
    compare_to_network,
    csu_solve,
    endmembers_csv,
    mutual_psnr,
    objective,
    project_simplex,
    project_simplex_columns,
    spread_sample,
)
from dcnet.tensor import DimensionError


def test_project_simplex_examples():
    np.testing.assert_allclose(project_simplex([0.5, 0.5]), [0.5, 0.5])
    np.testing.assert_allclose(project_simplex([2.0, 0.0]), [1.0, 0.0])
    np.testing.assert_allclose(project_simplex([0.4, 0.2]), [0.6, 0.4], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-5, 5)))
def test_project_simplex_properties(v):
    p = project_simplex(v)
    assert p.min() >= 0 and abs(p.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(project_simplex(p), p, atol=1e-12)
    # optimality: (v - p) . (q - p) <= 0 for every vertex q
    for q in np.eye(5):
        assert np.dot(v - p, q - p) <= 1e-9


def test_columns_match_single_projection():
    M = np.random.default_rng(0).normal(size=(4, 50))
    ref = np.stack([project_simplex(c) for c in M.T], axis=1)
    np.testing.assert_allclose(project_simplex_columns(M), ref, atol=1e-14)


def test_spatial_operator_adjoint():
    rng = np.random.default_rng(1)
    op = SpatialOperator(Psf.gaussian(4), 8, 8)
    M = rng.normal(size=(3, 64))
    N = rng.normal(size=(3, 4))
    assert abs(np.sum(op.apply(M) * N) - np.sum(M * op.adjoint(N))) < 1e-12


def small_pair(seed=0):
    truth, S, A = synth_scene(seed, 16, 16, 31, 3)
    return simulate_pair(truth, default_srf(), Psf.box(4), seed=seed, true_factors=(S, A))


def test_planted_factors_are_a_fixed_point():
    pair = small_pair()
    S, A = pair.true_factors
    state = csu_solve(pair.lrhs, pair.hrms, pair.true_srf, pair.true_psf, 3, iters=2, init=(S, A))
    assert state.history[0] < 1e-18
    np.testing.assert_allclose(state.zhat.data, pair.truth.data, atol=1e-9)


def test_history_non_increasing_and_simplex():
    pair = small_pair(1)
    state = csu_solve(pair.lrhs, pair.hrms, pair.true_srf, pair.true_psf, 3, iters=30)
    h = np.array(state.history)
    assert len(h) == 31
    assert np.all(np.diff(h) <= 0)
    np.testing.assert_allclose(state.A.sum(axis=0), 1.0, atol=1e-9)
    assert state.S.min() >= 0 and state.A.min() >= 0


def test_solver_is_deterministic():
    pair = small_pair(2)
    a = csu_solve(pair.lrhs, pair.hrms, pair.true_srf, pair.true_psf, 3, iters=5, seed=4)
    b = csu_solve(pair.lrhs, pair.hrms, pair.true_srf, pair.true_psf, 3, iters=5, seed=4)
    np.testing.assert_array_equal(a.S, b.S)
    np.testing.assert_array_equal(a.A, b.A)


def test_shape_validation():
    pair = small_pair()
    with pytest.raises(DimensionError):
        csu_solve(pair.lrhs, pair.hrms, pair.true_srf, Psf.box(2), 3, iters=1)


def test_spread_sample_distinct():
    X = np.random.default_rng(0).uniform(size=(5, 40))
    picks = spread_sample(X, 6, np.random.default_rng(1))
    assert len(set(picks.tolist())) == 6


def test_objective_value():
    pair = small_pair()
    S, A = pair.true_factors
    op = SpatialOperator(pair.true_psf, 16, 16)
    assert objective(pair.lrhs.matrix, pair.hrms.matrix, pair.true_srf.weights, op, S, A) < 1e-20
    assert objective(pair.lrhs.matrix, pair.hrms.matrix, pair.true_srf.weights, op, 0 * S, A) > 0


def test_compare_to_network():
    pair = small_pair()
    rows = compare_to_network(pair.truth, pair.truth, pair.truth, 4)
    assert len(rows) == 3
    assert mutual_psnr(pair.truth, pair.truth) == 99.0


def test_factor_exports():
    S = np.array([[1.0, 0.5], [0.25, 2.0]])
    lines = endmembers_csv(S).splitlines()
    assert lines == ["1.0,0.5", "0.25,2.0"]
    cube = abundance_cube(np.arange(8.0).reshape(2, 4), 2, 2)
    assert isinstance(cube, HsiCube) and cube.shape == (2, 2, 2)
