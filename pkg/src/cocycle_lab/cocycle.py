"""Quasi-periodic linear cocycles and their Lyapunov spectra.

A cocycle ``(alpha, A)`` acts by ``(x, v) -> (x + alpha, A(x) v)`` on
``T^d x C^m``.  Lyapunov exponents are obtained by iterating along sampled
orbits with QR re-orthogonalization after every step.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ConditioningError, ConfigError, DegenerateHoppingError, DomainError, IterationError
from .fourier import (
    FourierMap,
    FrequencyVector,
    TrigPolynomial,
    cosine_potential,
    pointwise_map,
)

__all__ = [
    "Cocycle",
    "LyapunovSpectrum",
    "OperatorSpec",
    "build_transfer",
    "transfer_cocycle",
    "lyapunov_spectrum",
    "conjugate",
    "iterate_block",
    "group_multiplicities",
    "sample_phases",
    "torus_grid",
    "mean_log_det",
]

DET_FLOOR = 1e-12
_CHUNK = 2048
# offsets for the second and later torus coordinates of the phase grid
_KRONECKER = (math.sqrt(2.0), math.sqrt(3.0), math.sqrt(5.0), math.sqrt(7.0), math.sqrt(11.0))


def torus_grid(d, size):
    """Uniform grid on T^d with ``size`` points per axis, shape (size**d, d)."""
    t = np.arange(size) / size
    g = np.meshgrid(*([t] * d), indexing="ij")
    return np.stack([a.ravel() for a in g], axis=-1)


def _grid_size(d):
    return {1: 64, 2: 24}.get(d, 8)


@dataclass(frozen=True)
class Cocycle:
    """Pair ``(alpha, A)`` with ``A`` invertible on the real torus."""

    alpha: FrequencyVector
    A: FourierMap
    check: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self):
        alpha = FrequencyVector.coerce(self.alpha)
        object.__setattr__(self, "alpha", alpha)
        if alpha.d != self.A.d:
            raise DomainError("frequency and base dimension disagree")
        if self.check:
            vals = self.A.grid_values(max(_grid_size(self.A.d), 2 * self.A.radius + 1))
            dets = np.abs(np.linalg.det(vals))
            if dets.min() <= DET_FLOOR:
                raise DomainError(f"cocycle not invertible on the torus (min |det| = {dets.min():.2e})")

    @property
    def m(self):
        return self.A.m

    @property
    def d(self):
        return self.A.d

    @classmethod
    def constant(cls, matrix, alpha="golden"):
        alpha = FrequencyVector.coerce(alpha)
        return cls(alpha, FourierMap.constant(matrix, d=alpha.d))


def mean_log_det(c, size=None):
    """Torus average of ``ln|det A(x)|`` on a uniform grid."""
    size = size or max(_grid_size(c.d), 4 * c.A.radius + 1)
    return float(np.mean(np.log(np.abs(np.linalg.det(c.A.grid_values(size))))))


# ---------------------------------------------------------------------------
# Lyapunov exponents


@numba.njit(cache=True, nogil=True)
def _qr_steps(mats, Q, logs, record):
    """Advance orthonormal frames ``Q`` through ``mats``; accumulate log |R_jj|.

    Returns -1 on success, otherwise the offending step index within the chunk.
    """
    P, K, m, _ = mats.shape
    M = np.empty((m, m), dtype=np.complex128)
    for p in range(P):
        for k in range(K):
            for i in range(m):
                for j in range(m):
                    s = 0j
                    for ll in range(m):
                        s += mats[p, k, i, ll] * Q[p, ll, j]
                    M[i, j] = s
            for j in range(m):
                # modified Gram-Schmidt, applied twice for stability
                for _ in range(2):
                    for i in range(j):
                        c = 0j
                        for ll in range(m):
                            c += np.conj(Q[p, ll, i]) * M[ll, j]
                        for ll in range(m):
                            M[ll, j] -= c * Q[p, ll, i]
                r = 0.0
                for ll in range(m):
                    r += M[ll, j].real ** 2 + M[ll, j].imag ** 2
                r = math.sqrt(r)
                if not (r > 0.0) or not math.isfinite(r):
                    return k
                for ll in range(m):
                    Q[p, ll, j] = M[ll, j] / r
                if record:
                    logs[p, j] += math.log(r)
    return -1


def _orbit_values(A, X0, alpha, k0, K):
    """``A(X0 + k alpha)`` for ``k = k0 .. k0+K-1``, shape (P, K, m, m)."""
    ns = A.modes()
    coeffs = A.flat()
    if ns.shape[0] == 1 and not ns.any():
        return np.broadcast_to(coeffs[0], (X0.shape[0], K, A.m, A.m))
    base = np.mod(X0 @ ns.T, 1.0)
    step = np.mod(ns @ alpha, 1.0)
    ks = np.arange(k0, k0 + K, dtype=float)
    # (k * <n,alpha>) mod 1 first, to keep the phase argument small
    ph = np.mod(base[:, None, :] + np.mod(ks[:, None] * step[None, :], 1.0)[None], 1.0)
    return np.einsum("pkj,jab->pkab", np.exp(2j * np.pi * ph), coeffs)


def sample_phases(d, count, seed=None):
    """Deterministic phase grid on T^d, optionally shifted by a seeded random vector."""
    p = np.arange(count, dtype=float)
    cols = [p / count]
    for i in range(1, d):
        cols.append(np.mod(p / count + p * _KRONECKER[(i - 1) % len(_KRONECKER)], 1.0))
    X = np.stack(cols, axis=-1)
    if seed is not None:
        X = np.mod(X + np.random.default_rng(seed).random(d), 1.0)
    return X


@dataclass
class LyapunovSpectrum:
    """Lyapunov exponents ``L_1 >= ... >= L_m`` (natural log per step)."""

    values: np.ndarray
    stderr: np.ndarray
    n_iters: int
    phase_samples: int
    seed: int | None = None
    burn_in: int = 0
    phases: np.ndarray | None = None
    per_phase: np.ndarray | None = None

    def to_json(self):
        def clean(a):
            return [None if not np.isfinite(v) else float(v) for v in np.asarray(a).ravel()]

        return {
            "values": clean(self.values),
            "stderr": clean(self.stderr),
            "n_iters": int(self.n_iters),
            "phase_samples": int(self.phase_samples),
            "seed": self.seed,
            "burn_in": int(self.burn_in),
            "phases": None if self.phases is None else np.asarray(self.phases).tolist(),
        }

    @classmethod
    def from_json(cls, doc):
        def arr(v):
            return np.array([np.nan if x is None else x for x in v], dtype=float)

        return cls(
            values=arr(doc["values"]),
            stderr=arr(doc["stderr"]),
            n_iters=int(doc["n_iters"]),
            phase_samples=int(doc["phase_samples"]),
            seed=doc.get("seed"),
            burn_in=int(doc.get("burn_in", 0)),
            phases=None if doc.get("phases") is None else np.asarray(doc["phases"], dtype=float),
        )


def _run_phases(c, X0, n_iters, burn_in):
    P, m = X0.shape[0], c.m
    Q = np.broadcast_to(np.eye(m, dtype=complex), (P, m, m)).copy()
    logs = np.zeros((P, m))
    alpha = c.alpha.array
    total = burn_in + n_iters
    k = 0
    while k < total:
        K = min(_CHUNK, total - k)
        # split the chunk at the burn-in boundary so discarded steps are not logged
        if k < burn_in:
            K = min(K, burn_in - k)
        mats = np.ascontiguousarray(_orbit_values(c.A, X0, alpha, k, K), dtype=complex)
        bad = _qr_steps(mats, Q, logs, k >= burn_in)
        if bad >= 0:
            raise IterationError(f"QR iteration broke down at step {k + bad}", step=k + bad)
        if not np.all(np.isfinite(logs)):
            raise IterationError(f"non-finite log growth by step {k + K}", step=k + K)
        k += K
    return logs / n_iters


def lyapunov_spectrum(c, n_iters=100_000, phase_samples=8, seed=None, burn_in=None, threads=1):
    """Phase-averaged Lyapunov spectrum of a cocycle.

    Parameters
    ----------
    c : Cocycle
    n_iters : int
        Logged iterations per phase.
    phase_samples : int
        Number of starting phases.
    seed : int, optional
        Random shift of the deterministic phase grid.
    burn_in : int, optional
        Leading steps used only to align the frame; default ``n_iters // 10``.
    threads : int
        Phase batches processed concurrently; results do not depend on it.
    """
    if n_iters < 1:
        raise DomainError("n_iters must be >= 1")
    if phase_samples < 1:
        raise DomainError("phase_samples must be >= 1")
    burn_in = n_iters // 10 if burn_in is None else int(burn_in)
    X0 = sample_phases(c.d, phase_samples, seed)
    threads = max(1, min(int(threads), phase_samples))
    if threads == 1:
        per = _run_phases(c, X0, n_iters, burn_in)
    else:
        parts = np.array_split(np.arange(phase_samples), threads)
        with ThreadPoolExecutor(max_workers=threads) as ex:
            res = list(ex.map(lambda idx: _run_phases(c, X0[idx], n_iters, burn_in), parts))
        per = np.concatenate(res, axis=0)
    per = -np.sort(-per, axis=1)
    values = per.mean(axis=0)
    if phase_samples > 1:
        stderr = per.std(axis=0, ddof=1) / math.sqrt(phase_samples)
    else:
        stderr = np.full(c.m, np.nan)
    return LyapunovSpectrum(values, stderr, n_iters, phase_samples, seed, burn_in, X0, per)


def group_multiplicities(spec, threshold=None):
    """Sizes of runs of nearly equal exponents.

    Consecutive exponents are merged when they differ by less than
    ``max(10 * stderr, 1e-4)`` unless ``threshold`` is given.
    """
    v = np.asarray(spec.values)
    se = np.nan_to_num(np.asarray(spec.stderr), nan=0.0)
    sizes = [1]
    for i in range(len(v) - 1):
        thr = threshold if threshold is not None else max(10 * max(se[i], se[i + 1]), 1e-4)
        if abs(v[i] - v[i + 1]) < thr:
            sizes[-1] += 1
        else:
            sizes.append(1)
    return sizes


# ---------------------------------------------------------------------------
# conjugation and products


def _inverse_adaptive(B, tol=1e-13, max_radius=512):
    """Fourier map of ``B(x)^{-1}``, oversampling until the band edge is negligible."""
    r = max(4 * B.radius, 16)
    while True:
        inv = pointwise_map(np.linalg.inv, [B], r)
        flat = np.linalg.norm(inv.flat(), axis=(-2, -1))
        lev = np.abs(inv.modes()).max(axis=1)
        edge = flat[lev > r // 2].sum()
        if edge <= tol * flat.sum() or r >= max_radius:
            return inv.trim(tol)
        r *= 2


def conjugate(c, B, tol=1e-13):
    """The cocycle ``(alpha, B(x + alpha) A(x) B(x)^{-1})``."""
    if B.m != c.m or B.d != c.d:
        raise DomainError("conjugacy has wrong shape")
    vals = B.grid_values(max(_grid_size(B.d), 4 * B.radius + 1))
    sv = np.linalg.svd(vals, compute_uv=False)
    if sv[..., -1].min() < 1e-12 * max(sv[..., 0].max(), 1.0):
        raise ConditioningError("conjugacy is numerically singular on the torus", where="conjugate")
    Binv = _inverse_adaptive(B, tol)
    Bs = B.shift(c.alpha)
    r = Bs.radius + c.A.radius + Binv.radius
    out = pointwise_map(lambda b, a, bi: b @ a @ bi, [Bs, c.A, Binv], r).trim(tol)
    return Cocycle(c.alpha, out)


def iterate_block(c, x, n):
    """``A_n(x) = A(x+(n-1)alpha) ... A(x)``; negative ``n`` uses inverse products."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    a = c.alpha.array
    out = np.eye(c.m, dtype=complex)
    if n >= 0:
        for k in range(n):
            out = c.A(x + k * a) @ out
    else:
        for k in range(1, -n + 1):
            out = np.linalg.solve(c.A(x - k * a), out)
    return out


# ---------------------------------------------------------------------------
# operator families


@dataclass(frozen=True)
class OperatorSpec:
    """Data of the dual operator pair.

    ``W`` is the hopping symbol of the finite-range operator on Z and the
    potential of the long-range operator; ``V`` is a scalar map on T^d playing
    the opposite roles.  ``lam`` couples ``W`` on the long-range side and
    ``lambda_inv`` couples ``V`` on the finite-range side.
    """

    W: TrigPolynomial
    V: FourierMap
    alpha: FrequencyVector
    lambda_inv: float = 0.0
    lam: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "alpha", FrequencyVector.coerce(self.alpha))
        if self.V.m != 1:
            raise ConfigError("V must be scalar")
        if self.V.d != self.alpha.d:
            raise ConfigError("V and alpha have different dimensions")
        if self.lambda_inv < 0:
            raise ConfigError("lambda_inv must be nonnegative")
        lam = self.lam
        if lam is None and self.lambda_inv > 0:
            lam = 1.0 / self.lambda_inv
        object.__setattr__(self, "lam", None if lam is None else float(lam))

    @property
    def d(self):
        return self.alpha.d

    @property
    def coupling(self):
        if self.lam is None:
            raise ConfigError("long-range side needs a coupling lambda")
        return self.lam

    @classmethod
    def almost_mathieu(cls, lam, alpha="golden"):
        """Cosine hopping and cosine potential, ``lambda_inv = 1/lam``."""
        alpha = FrequencyVector.coerce(alpha)
        return cls(TrigPolynomial.cosine(), cosine_potential(alpha.d), alpha, 1.0 / lam, lam)


def build_transfer(spec, E, x):
    """One-step transfer matrix of ``sum_k W_k u_{n-k} + lambda_inv V(x) u_n = E u_n``.

    Acts on ``(u_{n+m-1}, ..., u_{n-m})`` and returns the
    ``2m x 2m`` companion matrix; for real-symmetric ``W`` its first row is
    ``(-W_{m-1}, ..., -W_1, E - lambda_inv V(x) - W_0, -W_{-1}, ..., -W_{-m}) / W_m``.
    """
    W = spec.W
    m = W.degree
    if m < 1:
        raise DegenerateHoppingError("hopping must have half-bandwidth >= 1")
    lead = W.hat(-m)
    if abs(lead) < 1e-12:
        raise DegenerateHoppingError("|W(m)| < 1e-12")
    v = spec.V(np.atleast_1d(x))[0, 0]
    T = np.zeros((2 * m, 2 * m), dtype=complex)
    # entry j multiplies u_{n+m-1-j} = u_{n-k} with k = j - m + 1
    for j in range(2 * m):
        k = j - m + 1
        T[0, j] = -W.hat(k)
    T[0, m - 1] += E - spec.lambda_inv * v
    T[0] /= lead
    T[1:, :-1] = np.eye(2 * m - 1)
    return T


def transfer_cocycle(spec, E):
    """The transfer cocycle ``x -> build_transfer(spec, E, x)`` as a Fourier map."""
    W = spec.W
    m = W.degree
    if m < 1 or abs(W.hat(-m)) < 1e-12:
        raise DegenerateHoppingError("|W(m)| < 1e-12")
    lead = W.hat(-m)
    R = spec.V.radius
    c = np.zeros((2 * R + 1,) * spec.d + (2 * m, 2 * m), dtype=complex)
    centre = (R,) * spec.d
    row = np.array([-W.hat(j - m + 1) for j in range(2 * m)], dtype=complex)
    row[m - 1] += E
    c[centre][0, :] = row / lead
    c[centre][1:, :-1] = np.eye(2 * m - 1)
    c[..., 0, m - 1] += -spec.lambda_inv * spec.V.coeffs[..., 0, 0] / lead
    return Cocycle(spec.alpha, FourierMap(c, strip=spec.V.strip), check=False)
