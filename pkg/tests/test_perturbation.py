import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cocycle_lab import DomainError, check_normal_bound, holder_exponent_probe, pair_eigenvalues
from cocycle_lab.errors import InsufficientResolutionError
from cocycle_lab.perturbation import jordan_block, phase_distance


def test_swap_example():
    pr = pair_eigenvalues([1, 2], [2.1, 1.05])
    assert pr.permutation == (1, 0)
    assert pr.total_cost == pytest.approx(math.sqrt(0.05**2 + 0.1**2))


def test_identical_lists():
    lam = [1 + 1j, -2, 0.5j]
    pr = pair_eigenvalues(lam, lam)
    assert pr.permutation == (0, 1, 2)
    assert pr.total_cost == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 6))
def test_optimal_against_brute_force(seed, m):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=m) + 1j * rng.normal(size=m)
    b = rng.normal(size=m) + 1j * rng.normal(size=m)
    best = min(sum(abs(a[i] - b[p[i]]) ** 2 for i in range(m)) for p in itertools.permutations(range(m)))
    assert pair_eigenvalues(a, b).total_cost ** 2 == pytest.approx(best, rel=1e-10, abs=1e-14)


def test_tie_is_flagged_and_broken():
    # 0 and 1 are equidistant from 0.5 twice over
    pr = pair_eigenvalues([0.0, 1.0], [0.5, 0.5])
    assert pr.ambiguous
    assert pr.permutation == (0, 1)


def test_phase_metric_wraps():
    assert phase_distance(0.99, 0.01) == pytest.approx(0.02)
    pr = pair_eigenvalues([0.99, 0.5], [0.5, 0.01], metric="phase")
    assert pr.permutation == (1, 0)


def test_length_mismatch():
    with pytest.raises(DomainError):
        pair_eigenvalues([1, 2], [1])


def test_normal_bound_examples():
    nb = check_normal_bound(np.diag([1.0, 2.0]), np.diag([1.1, 2.1]))
    assert nb.cost == pytest.approx(math.sqrt(0.02))
    assert nb.bound == pytest.approx(math.sqrt(2) * math.sqrt(0.02))
    assert nb.ok
    same = check_normal_bound(np.eye(3), np.eye(3))
    assert same.cost == 0 and same.bound == 0 and same.ok


def test_normal_bound_rejects_non_normal():
    with pytest.raises(DomainError):
        check_normal_bound(jordan_block(2), np.eye(2))


@pytest.mark.parametrize("m,expected,tol", [(1, 1.0, 0.02), (2, 0.5, 0.02), (3, 1 / 3, 0.03)])
def test_jordan_probe(m, expected, tol):
    deltas = np.logspace(-2, -8, 13)
    assert holder_exponent_probe(jordan_block(m), deltas) == pytest.approx(expected, abs=tol)


def test_jordan_probe_needs_range():
    with pytest.raises(InsufficientResolutionError):
        holder_exponent_probe(jordan_block(2), [1e-3, 1e-4])
