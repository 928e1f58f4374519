import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clewi.lsap import solve_lsap


def brute_force(c, maximize=False):
    """Best total and the lexicographically smallest permutation attaining it."""
    n = c.shape[0]
    best, best_perm = None, None
    for perm in itertools.permutations(range(n)):
        v = c[np.arange(n), perm].sum()
        better = best is None or (v > best if maximize else v < best)
        if better and (best is None or not np.isclose(v, best, rtol=0, atol=1e-9)):
            best, best_perm = v, perm
    return best, np.array(best_perm)


def test_identity_and_singleton():
    assert solve_lsap(np.eye(4), maximize=True).perm.tolist() == [0, 1, 2, 3]
    assert solve_lsap(np.eye(4)).value == 0.0
    a = solve_lsap([[3.5]])
    assert a.perm.tolist() == [0] and a.value == 3.5


def test_lexicographic_tie_break():
    # every permutation has the same total
    assert solve_lsap(np.ones((4, 4))).perm.tolist() == [0, 1, 2, 3]
    c = np.array([[1, 1, 0], [1, 1, 0], [0, 0, 5]], dtype=float)
    # four optima of cost 1: [0,2,1], [1,2,0], [2,0,1], [2,1,0]
    out = solve_lsap(c)
    assert out.value == 1.0 and out.perm.tolist() == [0, 2, 1]


@pytest.mark.parametrize("n", [2, 3, 4, 5, 6, 7])
def test_matches_brute_force(n):
    rng = np.random.default_rng(n)
    for _ in range(60):
        c = rng.normal(size=(n, n))
        for maximize in (False, True):
            best, perm = brute_force(c, maximize)
            out = solve_lsap(c, maximize)
            assert out.value == pytest.approx(best, abs=1e-9)
            assert out.perm.tolist() == perm.tolist()


@pytest.mark.parametrize("n", [3, 5, 6])
def test_integer_ties_brute_force(n):
    rng = np.random.default_rng(100 + n)
    for _ in range(60):
        c = rng.integers(0, 3, size=(n, n)).astype(float)
        best, perm = brute_force(c, True)
        out = solve_lsap(c, maximize=True)
        assert out.value == best and out.perm.tolist() == perm.tolist()


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 7), st.integers(0, 10 ** 6))
def test_row_permutation_equivariance(n, seed):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=(n, n))
    p = rng.permutation(n)
    base = solve_lsap(c)
    moved = solve_lsap(c[p])
    # continuous costs: optimum is unique with probability one
    assert moved.perm.tolist() == base.perm[p].tolist()


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 7), st.integers(0, 10 ** 6), st.floats(0.1, 100), st.floats(-50, 50))
def test_scale_and_shift_invariance(n, seed, a, b):
    c = np.random.default_rng(seed).normal(size=(n, n))
    assert solve_lsap(a * c + b).perm.tolist() == solve_lsap(c).perm.tolist()


def test_bijection_and_errors():
    perm = solve_lsap(np.random.default_rng(0).normal(size=(30, 30))).perm
    assert sorted(perm.tolist()) == list(range(30))
    with pytest.raises(ValueError, match="square"):
        solve_lsap(np.zeros((2, 3)))
    with pytest.raises(ValueError, match="non-finite"):
        solve_lsap(np.array([[0.0, np.nan], [1.0, 2.0]]))
    assert solve_lsap(np.zeros((0, 0))).perm.size == 0
