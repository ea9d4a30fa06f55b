import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vflsim.numeric import (
    NumericError,
    as_mat,
    clip_norms,
    rank_tolerance_check,
    sample_continuous,
    solve_linear_combination,
)


def test_identity_system():
    rep = solve_linear_combination(np.eye(2), [2.0, -1.0])
    assert rep.unique and rep.rank == 2
    np.testing.assert_allclose(rep.solution, [2.0, -1.0])


def test_collinear_columns_not_unique():
    rep = solve_linear_combination(np.array([[1.0, 2.0], [1.0, 2.0]]), [3.0, 3.0])
    assert not rep.unique and rep.rank == 1
    assert rep.residual_norm < 1e-12


def test_random_round_trip():
    cols = sample_continuous(5, 3, 0)
    rep = solve_linear_combination(cols, cols @ np.array([1.0, 2.0, 3.0]))
    assert rep.unique
    np.testing.assert_allclose(rep.solution, [1.0, 2.0, 3.0], atol=1e-9)


def test_more_unknowns_than_equations():
    cols = sample_continuous(3, 4, 1)
    assert not solve_linear_combination(cols, np.ones(3)).unique


def test_dimension_mismatch():
    with pytest.raises(NumericError, match="dimension mismatch"):
        solve_linear_combination(np.eye(3), np.ones(2))


def test_non_finite_rejected():
    with pytest.raises(NumericError):
        as_mat([[1.0, np.nan]])
    with pytest.raises(NumericError):
        solve_linear_combination(np.eye(2), [np.inf, 0.0])


def test_rank_examples():
    assert rank_tolerance_check(np.eye(3)) == 3
    assert rank_tolerance_check(np.zeros((3, 3))) == 0
    assert rank_tolerance_check(np.array([[1.0, 1.0], [0.0, 1e-14]]), rtol=1e-10) == 1
    with pytest.raises(NumericError):
        rank_tolerance_check(np.zeros((0, 2)))


def test_sample_continuous_deterministic_and_bounded():
    a = sample_continuous(3, 2, 7)
    np.testing.assert_array_equal(a, sample_continuous(3, 2, 7))
    big = sample_continuous(50, 50, 1)
    assert np.all(np.linalg.norm(big, axis=0) <= 1 + 1e-12)
    assert rank_tolerance_check(big) == 50


def test_clip_norms_preserves_short_vectors():
    m = np.array([[0.3, 0.4], [3.0, 4.0]])
    out = clip_norms(m, axis=1)
    np.testing.assert_array_equal(out[0], m[0])
    np.testing.assert_allclose(out[1], [0.6, 0.8])


def test_unique_almost_surely():
    fails = 0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 9))
        s = int(rng.integers(1, d + 1))
        if not solve_linear_combination(sample_continuous(d, s, seed), np.ones(d)).unique:
            fails += 1
    assert fails <= 1


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_residual_small_when_unique(d, s, seed):
    cols = sample_continuous(d, s, seed)
    target = cols @ np.random.default_rng(seed).standard_normal(s)
    rep = solve_linear_combination(cols, target)
    if rep.unique:
        assert rep.residual_norm <= 1e-8 * max(np.linalg.norm(target), 1e-300)
