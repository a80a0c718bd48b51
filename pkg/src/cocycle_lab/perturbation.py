"""Eigenvalue pairing and perturbation bounds.

Optimal matchings between two spectra along with the Hoffman-Wielandt type
bound for normal matrices.  A separate probe measures the ``1/m`` eigenvalue
sensitivity of a Jordan block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DomainError, InsufficientResolutionError

__all__ = [
    "PairingResult",
    "pair_eigenvalues",
    "phase_distance",
    "check_normal_bound",
    "NormalBound",
    "holder_exponent_probe",
    "jordan_block",
]

TIE_RTOL = 1e-12


def phase_distance(a, b):
    """``||Re(a-b)||_{R/Z} + |Im(a-b)|`` for eigenphases (broadcasting)."""
    diff = np.asarray(a) - np.asarray(b)
    re = np.real(diff)
    return np.abs(re - np.round(re)) + np.abs(np.imag(diff))


def _distance_matrix(lams, mus, metric):
    if metric == "euclidean":
        return np.abs(lams[:, None] - mus[None, :])
    if metric == "phase":
        return phase_distance(lams[:, None], mus[None, :])
    raise DomainError(f"unknown metric {metric!r}")


@dataclass(frozen=True)
class PairingResult:
    """Optimal bijection ``j -> permutation[j]`` between two spectra.

    ``total_cost`` is ``sqrt(sum_j d(lam_j, mu_pi(j))^2)``.
    """

    permutation: tuple
    total_cost: float
    distances: tuple
    ambiguous: bool = False
    alternatives: tuple = field(default=(), compare=False)


def pair_eigenvalues(lams, mus, metric="euclidean"):
    """Minimize ``sum_j d(lam_j, mu_pi(j))^2`` over permutations.

    A tie with a distinct permutation (within a relative ``1e-12``) marks the
    result ambiguous; the returned permutation is then the lexicographically
    smallest optimal one.
    """
    lams = np.asarray(lams, dtype=complex).ravel()
    mus = np.asarray(mus, dtype=complex).ravel()
    if lams.size != mus.size:
        raise DomainError("spectra must have equal length")
    m = lams.size
    if m == 0:
        return PairingResult((), 0.0, ())
    dist = _distance_matrix(lams, mus, metric)
    cost = dist**2
    _, perm = linear_sum_assignment(cost)
    best = cost[np.arange(m), perm].sum()
    tol = TIE_RTOL * max(best, 1.0) + 1e-300

    # Tie detection: forbid each chosen edge in turn; an alternative optimum
    # must avoid at least one of them.
    alternatives = []
    big = cost.max() * (m + 1) + 1.0
    for j in range(m):
        c2 = cost.copy()
        c2[j, perm[j]] = big
        _, p2 = linear_sum_assignment(c2)
        val = cost[np.arange(m), p2].sum()
        if val <= best + tol and not np.array_equal(p2, perm):
            alt = tuple(int(v) for v in p2)
            if alt not in alternatives:
                alternatives.append(alt)
    if alternatives:
        candidates = sorted({tuple(int(v) for v in perm), *alternatives})
        chosen = candidates[0]
    else:
        chosen = tuple(int(v) for v in perm)
    d = dist[np.arange(m), list(chosen)]
    return PairingResult(
        permutation=chosen,
        total_cost=float(np.sqrt((d**2).sum())),
        distances=tuple(float(v) for v in d),
        ambiguous=bool(alternatives),
        alternatives=tuple(alternatives),
    )


@dataclass(frozen=True)
class NormalBound:
    cost: float
    bound: float
    ok: bool


def check_normal_bound(A, B):
    """Compare the optimal eigenvalue matching cost with ``sqrt(m) |B - A|_F``.

    ``A`` must be normal up to ``|AA* - A*A|_F <= 1e-10 |A|_F^2``.
    """
    A = np.asarray(A, dtype=complex)
    B = np.asarray(B, dtype=complex)
    if A.shape != B.shape or A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DomainError("A and B must be square of equal size")
    fro = np.linalg.norm(A, "fro")
    comm = np.linalg.norm(A @ A.conj().T - A.conj().T @ A, "fro")
    if comm > 1e-10 * max(fro**2, np.finfo(float).tiny):
        raise DomainError(f"A is not normal (commutator {comm:.3e})")
    pr = pair_eigenvalues(np.linalg.eigvals(A), np.linalg.eigvals(B))
    bound = float(np.sqrt(A.shape[0]) * np.linalg.norm(B - A, "fro"))
    return NormalBound(pr.total_cost, bound, pr.total_cost <= bound + 1e-10)


def jordan_block(m, eigenvalue=0.0):
    return eigenvalue * np.eye(m, dtype=complex) + np.eye(m, k=1, dtype=complex)


def holder_exponent_probe(A, deltas):
    """Fitted slope of ``log max|eigenvalue shift|`` against ``log delta``.

    The bottom-left entry of ``A`` is perturbed by ``delta``; for a single
    Jordan block of size m the displacement scales like ``delta^(1/m)``.

    Returns
    -------
    slope : float
    """
    A = np.asarray(A, dtype=complex)
    deltas = np.asarray(deltas, dtype=float)
    if np.any(deltas <= 0):
        raise DomainError("deltas must be positive")
    if np.log10(deltas.max() / deltas.min()) < 4 - 1e-9:
        raise InsufficientResolutionError("deltas must span at least 4 decades")
    m = A.shape[0]
    base = np.linalg.eigvals(A)
    shifts = []
    for dl in deltas:
        P = A.copy()
        P[m - 1, 0] += dl
        pr = pair_eigenvalues(base, np.linalg.eigvals(P))
        shifts.append(max(pr.distances))
    slope, _ = np.polyfit(np.log(deltas), np.log(shifts), 1)
    return float(slope)
