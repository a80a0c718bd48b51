"""Quantitative KAM almost-reducibility iteration for ``GL(m, C)`` cocycles.

A cocycle is carried in the form ``A e^{f(x)}`` with ``A`` constant.  One step

1. block-diagonalizes ``A`` by eigenphase clusters,
2. removes the non-resonant Fourier modes of ``f`` with a conjugation ``e^{Y}``,
3. locates resonant sites ``n`` with ``rho_k - rho_l ~ <n, alpha>`` and
4. rotates them to the constant part with ``Q(x) = diag(e^{-2 pi i <m_l, x>})``.

The result is an exact conjugacy ``Bbar(x+alpha) A e^{f(x)} Bbar(x)^{-1} =
A_+ e^{f_+(x)}`` with a much smaller ``f_+``.  Phases follow the convention
``mu = e^{-2 pi i rho}`` so that ``Im rho = ln|mu| / (2 pi)``.
"""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from .cocycle import LyapunovSpectrum, torus_grid
from .errors import (
    ConditioningError,
    ConfigError,
    DataError,
    DivergenceError,
    DomainError,
    NumericalError,
    StateError,
)
from .fourier import FourierMap, FrequencyVector, logm_batched, modes, norm_h
from .perturbation import pair_eigenvalues, phase_distance

__all__ = [
    "EigenPhase",
    "BlockStructure",
    "ResonanceSite",
    "ResonanceScan",
    "NonresonantResult",
    "Rotation",
    "KamSchedule",
    "KamState",
    "KamTrace",
    "block_diagonalize",
    "scan_resonances",
    "solve_homological",
    "remove_nonresonant",
    "build_rotation",
    "kam_step",
    "kam_iterate",
    "lyapunov_from_phases",
    "sylvester_lower_bound",
    "sylvester_bound_check",
    "phases_of",
]

RESIDUAL_GRID = 64
NOISE_FLOOR = 1e-14
SCAN_CAP = 4096


# ---------------------------------------------------------------------------
# eigenphases


@dataclass(frozen=True)
class EigenPhase:
    """``rho`` with ``e^{-2 pi i rho} = mu``, ``Re rho`` in [0, 1)."""

    rho: complex
    mu: complex

    @classmethod
    def from_eigenvalue(cls, mu):
        mu = complex(mu)
        if mu == 0:
            raise DomainError("zero eigenvalue has no phase")
        re = (-np.angle(mu) / (2 * np.pi)) % 1.0
        if re >= 1.0:
            re = 0.0
        rho = complex(re, math.log(abs(mu)) / (2 * np.pi))
        rec = np.exp(-2j * np.pi * rho)
        if abs(rec - mu) >= 1e-10 * max(1.0, abs(mu)):
            raise NumericalError("eigenphase reconstruction failed")
        return cls(rho, mu)

    def shifted(self, s):
        """Phase of ``mu e^{-2 pi i s}`` for real ``s``."""
        return EigenPhase.from_eigenvalue(self.mu * np.exp(-2j * np.pi * s))


def phases_of(A):
    return [EigenPhase.from_eigenvalue(mu) for mu in np.linalg.eigvals(np.asarray(A, dtype=complex))]


# ---------------------------------------------------------------------------
# block diagonalization


@dataclass
class BlockStructure:
    """Clusters of eigenphases and a conjugacy ``P`` with ``P A P^{-1}`` block diagonal."""

    groups: list
    sizes: list
    P: np.ndarray
    Pinv: np.ndarray
    blocks: list
    phases: list
    gap: float
    cond: float
    retries: int = 0

    @property
    def r(self):
        return len(self.blocks)

    @property
    def slices(self):
        out, start = [], 0
        for s in self.sizes:
            out.append(slice(start, start + s))
            start += s
        return out

    def matrix(self):
        return scipy.linalg.block_diag(*self.blocks)


def _group_phases(rhos, gap):
    """Transitive closure of ``phase distance <= gap`` (union-find)."""
    n = len(rhos)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    dist = phase_distance(np.array(rhos)[:, None], np.array(rhos)[None, :])
    for i in range(n):
        for j in range(i + 1, n):
            if dist[i, j] <= gap:
                parent[find(i)] = find(j)
    roots = {}
    for i in range(n):
        roots.setdefault(find(i), []).append(i)
    groups = list(roots.values())
    # outermost (largest Im rho) first, then by real part
    groups.sort(key=lambda g: (-max(rhos[i].imag for i in g), min(rhos[i].real for i in g), g[0]))
    return groups


def _reorder_schur(T, Z, groups, eig):
    """Bring the Schur form to the group order with cumulative ``trsen`` swaps."""
    n = T.shape[0]
    member = np.empty(n, dtype=int)
    for gi, g in enumerate(groups):
        member[g] = gi
    for gi in range(len(groups) - 1):
        diag = np.diag(T)
        # identify each diagonal entry with the nearest original eigenvalue
        owner = member[np.argmin(np.abs(diag[:, None] - eig[None, :]), axis=1)]
        select = (owner <= gi).astype(np.int32)
        T, Z, _, _, _, _, info = lapack.ztrsen(select, T, Z, job="N")
        if info != 0:
            raise ConditioningError(f"Schur reordering failed (info={info})", where="block_diagonalize")
    return T, Z


def _decouple(T, sizes):
    """Similarity ``S`` (unit upper triangular) with ``S^{-1} T S`` block diagonal."""
    n = T.shape[0]
    S = np.eye(n, dtype=complex)
    D = T.copy()
    start = 0
    for s in sizes[:-1]:
        a, b = slice(start, start + s), slice(start + s, n)
        T11, T12, T22 = D[a, a], D[a, b], D[b, b]
        sep = np.min(np.abs(np.diag(T11)[:, None] - np.diag(T22)[None, :]))
        if sep < 1e-12:
            raise ConditioningError("inter-group eigenvalue gap below 1e-12", where="block_diagonalize")
        X = scipy.linalg.solve_sylvester(T11, -T22, -T12)
        Sk = np.eye(n, dtype=complex)
        Sk[a, b] = X
        D = np.linalg.solve(Sk, D @ Sk)
        D[a, b] = 0.0
        D[b, a] = 0.0
        S = S @ Sk
        start += s
    return D, S


def block_diagonalize(A, gap, max_cond=1e8, max_retries=8):
    """Group the eigenphases of ``A`` and block-diagonalize accordingly.

    Phases within ``gap`` of each other (``||Re||_{R/Z} + |Im|``, transitive
    closure) share a group.  If ``cond(P)`` exceeds ``max_cond`` the gap is
    doubled and the grouping repeated.
    """
    A = np.asarray(A, dtype=complex)
    if abs(np.linalg.det(A)) == 0:
        raise DomainError("A must be invertible")
    T0, Z0 = scipy.linalg.schur(A, output="complex")
    eig = np.diag(T0).copy()
    rhos = [EigenPhase.from_eigenvalue(mu).rho for mu in eig]
    retries = 0
    g = float(gap)
    while True:
        groups = _group_phases(rhos, g)
        sizes = [len(gr) for gr in groups]
        if len(groups) == 1:
            D, S, Z = T0, np.eye(A.shape[0], dtype=complex), Z0
        else:
            T, Z = _reorder_schur(T0.copy(), Z0.copy(), groups, eig)
            D, S = _decouple(T, sizes)
        Pinv = Z @ S
        P = np.linalg.solve(S, Z.conj().T)
        cond = float(np.linalg.cond(Pinv))
        if cond <= max_cond or len(groups) == 1 or retries >= max_retries:
            break
        g *= 2
        retries += 1
    blocks, start = [], 0
    for s in sizes:
        blk = D[start:start + s, start:start + s].copy()
        blocks.append(np.triu(blk))
        start += s
    phases = [[EigenPhase.from_eigenvalue(mu) for mu in np.diag(b)] for b in blocks]
    return BlockStructure(groups, sizes, P, Pinv, blocks, phases, g, cond, retries)


# ---------------------------------------------------------------------------
# resonances


@dataclass(frozen=True)
class ResonanceSite:
    """``rho_k - rho_l ~ <n, alpha>`` for groups ``k < l``."""

    pair: tuple
    n: tuple
    margin: float


@dataclass
class ResonanceScan:
    sites: list
    i0: int
    windows: list
    uniqueness_violations: list
    all_hits: dict = field(default_factory=dict)

    @property
    def unique(self):
        return not self.uniqueness_violations


def _l1_modes(d, radius):
    ns = modes(d, radius)
    return ns[np.abs(ns).sum(axis=1) <= radius]


def _pair_distance(blocks, k, l, shifts):
    """``min_{i in k, j in l} d(rho_i - rho_j - s)`` for each shift ``s``."""
    rk = np.array([p.rho for p in blocks.phases[k]])
    rl = np.array([p.rho for p in blocks.phases[l]])
    diff = (rk[:, None] - rl[None, :]).ravel()
    return phase_distance(diff[None, :] - np.asarray(shifts)[:, None], 0.0).min(axis=1)


def scan_resonances(blocks, alpha, N, threshold, cap=None, uniqueness_radius=None):
    """Resonant sites between distinct groups and a resonance-free window.

    Sites with ``0 < |n|_1 <= min(N^{m^2+1}, cap)`` are scanned (``cap``
    defaults to ``SCAN_CAP``); the window index ``i0`` in ``1..m^2`` is the
    first with no site in ``[N^i, N^{i+1})``.
    For each pair the site of smallest ``|n|_1`` (then smallest margin) is kept;
    a second hit within ``uniqueness_radius`` is reported as a violation.
    """
    if N < 1:
        raise ConfigError("N must be >= 1")
    alpha = FrequencyVector.coerce(alpha).array
    m = sum(blocks.sizes)
    top = float(N) ** (m * m + 1)
    radius = int(min(top, SCAN_CAP if cap is None else cap))
    ns = _l1_modes(len(alpha), radius)
    l1 = np.abs(ns).sum(axis=1)
    keep = l1 > 0
    ns, l1 = ns[keep], l1[keep]
    shifts = ns @ alpha
    sites, hits, violations = [], {}, []
    for k in range(blocks.r):
        for l in range(k + 1, blocks.r):
            dist = _pair_distance(blocks, k, l, shifts)
            idx = np.nonzero(dist < threshold)[0]
            if idx.size == 0:
                continue
            order = idx[np.lexsort((dist[idx], l1[idx]))]
            hits[(k, l)] = [(tuple(int(v) for v in ns[i]), float(dist[i])) for i in order]
            best = order[0]
            sites.append(ResonanceSite((k, l), tuple(int(v) for v in ns[best]), float(dist[best])))
            if uniqueness_radius is not None:
                near = [i for i in order[1:] if l1[i] <= uniqueness_radius]
                for i in near:
                    violations.append(((k, l), tuple(int(v) for v in ns[best]), tuple(int(v) for v in ns[i])))
    site_l1 = [sum(abs(v) for v in s.n) for s in sites]
    windows, i0 = [], None
    for i in range(1, m * m + 1):
        lo, hi = float(N) ** i, float(N) ** (i + 1)
        occupied = any(lo <= v < hi for v in site_l1)
        windows.append((lo, hi, occupied))
        if i0 is None and not occupied:
            i0 = i
    if i0 is None:
        raise ConfigError("every resonance window is occupied; use a smaller threshold")
    return ResonanceScan(sites, i0, windows, violations, hits)


def nonresonant_mask(blocks, alpha, radius, threshold, shape_radius=None):
    """Boolean mask over (mode, block-pair): eliminable modes.

    A mode ``n`` of block ``(k, l)`` is eliminable when ``|n|_1 <= radius`` and
    ``rho_i - rho_j + <n, alpha>`` stays ``threshold`` away from the integers.
    Returns a dict ``(k, l) -> bool array`` aligned with ``modes(d, shape_radius)``.
    """
    alpha = FrequencyVector.coerce(alpha).array
    R = radius if shape_radius is None else shape_radius
    ns = modes(len(alpha), R)
    l1 = np.abs(ns).sum(axis=1)
    shifts = ns @ alpha
    mask = {}
    for k in range(blocks.r):
        for l in range(blocks.r):
            dist = _pair_distance(blocks, k, l, -shifts)
            mask[(k, l)] = (l1 <= radius) & (dist >= threshold)
    return mask


def _apply_mask(F, blocks, mask):
    """Keep only masked coefficients of ``F`` (block-wise)."""
    c = F.flat().copy()
    out = np.zeros_like(c)
    for (k, l), mk in mask.items():
        sk, sl = blocks.slices[k], blocks.slices[l]
        out[mk, sk, sl] = c[mk, sk, sl]
    return FourierMap(out.reshape(F.coeffs.shape), strip=F.strip)


# ---------------------------------------------------------------------------
# homological equation


def solve_homological(blocks, alpha, f, mask, rtol=1e-8):
    """Solve ``A_k^{-1} Y(n) A_l e^{2 pi i <n, alpha>} - Y(n) = -f(n)`` on the mask.

    Parameters
    ----------
    blocks : BlockStructure
    f : FourierMap
        Coefficients in the block basis.
    mask : dict
        ``(k, l) -> bool array`` over ``f.modes()``.
    """
    alpha = FrequencyVector.coerce(alpha).array
    ns = f.modes()
    ph = np.exp(2j * np.pi * (ns @ alpha))
    c = f.flat()
    Y = np.zeros_like(c)
    for (k, l), mk in mask.items():
        idx = np.nonzero(mk)[0]
        if idx.size == 0:
            continue
        sk, sl = blocks.slices[k], blocks.slices[l]
        Ak_inv = np.linalg.inv(blocks.blocks[k])
        Al = blocks.blocks[l]
        nk, nl = Ak_inv.shape[0], Al.shape[0]
        # column-major vec: vec(X Y Z) = (Z^T kron X) vec(Y)
        K = np.kron(Al.T, Ak_inv)
        eye = np.eye(nk * nl)
        systems = ph[idx, None, None] * K[None] - eye[None]
        rhs = -c[idx][:, sk, sl].transpose(0, 2, 1).reshape(idx.size, nk * nl)
        try:
            sol = np.linalg.solve(systems, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise ConditioningError(f"singular homological system in block {(k, l)}", where=(k, l)) from exc
        res = np.abs(np.einsum("kij,kj->ki", systems, sol) - rhs).max(axis=1)
        scale = np.abs(rhs).max(axis=1)
        bad = np.nonzero(res > rtol * np.maximum(scale, 1e-300))[0]
        if bad.size and scale[bad].max() > 0:
            n_bad = tuple(int(v) for v in ns[idx[bad[0]]])
            raise ConditioningError(f"homological residual too large at block {(k, l)}, mode {n_bad}",
                                    where=((k, l), n_bad))
        Y[idx, sk.start:sk.stop, sl.start:sl.stop] = sol.reshape(idx.size, nl, nk).transpose(0, 2, 1)
    return FourierMap(Y.reshape(f.coeffs.shape), strip=f.strip)


def sylvester_lower_bound(A, B, eta):
    """``eta (1 + max(m, n)(|A| + |B|)/eta)^{-(m+n)}`` for ``A`` (m x m), ``B`` (n x n)."""
    m, n = np.shape(A)[0], np.shape(B)[0]
    s = np.linalg.norm(A, 2) + np.linalg.norm(B, 2)
    return float(eta * (1 + max(m, n) * s / eta) ** (-(m + n)))


def sylvester_bound_check(A, B, alpha, Y):
    """Evaluate ``|Y(.+alpha) A - B Y(.)|_0`` against ``bound * |Y|_0``.

    ``A`` (n x n) and ``B`` (m x m) are upper triangular; ``Y`` is a
    :class:`FourierMap` or a coefficient array of shape ``(2R+1,)*d + (m, n)``.
    ``eta`` is the smallest ``|a_ii e^{+-2 pi i <k, alpha>} - b_jj|`` over the
    modes of ``Y``.

    Returns
    -------
    lhs, rhs, eta
    """
    A, B = np.asarray(A, dtype=complex), np.asarray(B, dtype=complex)
    alpha = FrequencyVector.coerce(alpha).array
    if isinstance(Y, FourierMap):
        ns, c = Y.modes(), Y.flat()
    else:
        c = np.asarray(Y, dtype=complex)
        d = c.ndim - 2
        if d != alpha.size:
            raise DomainError("coefficient array and alpha disagree in dimension")
        ns = modes(d, (c.shape[0] - 1) // 2)
        c = c.reshape((-1,) + c.shape[-2:])
    if c.shape[1:] != (B.shape[0], A.shape[0]):
        raise DomainError("Y must be (size of B) x (size of A)")
    ph = np.exp(2j * np.pi * (ns @ alpha))
    a, b = np.diag(A), np.diag(B)
    gaps = np.abs(a[None, :, None] * np.concatenate([ph, np.conj(ph)])[:, None, None] - b[None, None, :])
    eta = float(gaps.min())
    lhs_coeff = c * ph[:, None, None] @ A - B[None] @ c
    lhs = float(np.linalg.svd(lhs_coeff, compute_uv=False)[:, 0].sum())
    y_norm = float(np.linalg.svd(c, compute_uv=False)[:, 0].sum())
    rhs = sylvester_lower_bound(A, B, eta) * y_norm
    return lhs, rhs, eta


# ---------------------------------------------------------------------------
# non-resonant elimination


@dataclass
class NonresonantResult:
    Y: FourierMap
    U: FourierMap
    f_re: FourierMap
    sweeps: int
    masked_norms: list
    tail: float


def _block_const(blocks):
    return blocks.matrix()


def remove_nonresonant(A_tilde, g, blocks, alpha, mask, tol=1e-12, atol=1e-17, grid_radius=None,
                       u_radius=None, max_sweeps=50):
    """Conjugate away the masked modes of ``g``: ``U(x+alpha) A e^{g} U(x)^{-1} = A e^{f_re}``.

    Each sweep solves the homological equation for the current masked part
    ``Y`` and replaces ``g`` by ``log(A^{-1} e^{Y(x+alpha)} A e^{g} e^{-Y(x)})``.
    Iteration stops once the masked norm drops below ``max(tol * initial, atol)``;
    a sweep contracting by less than a factor 2 above the round-off floor
    raises :class:`DivergenceError`.
    """
    alpha_v = FrequencyVector.coerce(alpha)
    R = g.radius
    G = grid_radius or 4 * R
    UR = u_radius or 2 * R
    size = 2 * G + 1
    A_tilde = np.asarray(A_tilde, dtype=complex)
    A_inv = np.linalg.inv(A_tilde)
    m = g.m
    eye = np.eye(m, dtype=complex)
    masked = _apply_mask(g, blocks, mask)
    norms = [norm_h(masked, 0.0)]
    U_vals = np.broadcast_to(eye, (size,) * g.d + (m, m)).copy()
    cur = g
    sweeps = 0
    tail = 0.0
    target = max(tol * norms[0], atol)
    while norms[-1] > target:
        if sweeps >= max_sweeps:
            raise DivergenceError(f"non-resonant elimination did not converge in {max_sweeps} sweeps")
        Y = solve_homological(blocks, alpha_v, masked, mask)
        eY = scipy.linalg.expm(Y.grid_values(size))
        eYs = scipy.linalg.expm(Y.shift(alpha_v).grid_values(size))
        emY = scipy.linalg.expm(-Y.grid_values(size))
        vals = A_inv @ eYs @ A_tilde @ scipy.linalg.expm(cur.grid_values(size)) @ emY
        full = FourierMap.from_grid_values(logm_batched(vals), G, strip=g.strip)
        cur = full.truncate(R)
        tail += cur.tail
        U_vals = eY @ U_vals
        masked = _apply_mask(cur, blocks, mask)
        norms.append(norm_h(masked, 0.0))
        sweeps += 1
        ratio = norms[-1] / norms[-2] if norms[-2] > 0 else 0.0
        if ratio >= 0.5 and norms[-1] > target:
            if norms[-1] < NOISE_FLOOR:
                break
            raise DivergenceError(f"non-resonant sweep contracted only by {ratio:.3f}")
    U = FourierMap.from_grid_values(U_vals, G, strip=g.strip).truncate(UR)
    Ytot = FourierMap.from_grid_values(logm_batched(U_vals), G, strip=g.strip).truncate(UR) if sweeps else \
        FourierMap.zeros(g.d, m, 0, strip=g.strip)
    if sweeps == 0:
        U = FourierMap.constant(eye, d=g.d, strip=g.strip)
    return NonresonantResult(Ytot, U, cur, sweeps, norms, tail + U.tail)


# ---------------------------------------------------------------------------
# rotations


@dataclass
class Rotation:
    """Integer vectors ``m_l`` and the block-diagonal rotation ``Q(x)``."""

    m_vectors: list
    sizes: list
    bound_ok: bool = True

    def Q(self, strip=1.0):
        d = len(self.m_vectors[0])
        R = max([max(abs(v) for v in mv) for mv in self.m_vectors] + [0])
        n = sum(self.sizes)
        entries = {}
        start = 0
        for mv, s in zip(self.m_vectors, self.sizes):
            key = tuple(-v for v in mv)
            mat = entries.setdefault(key, np.zeros((n, n), dtype=complex))
            mat[start:start + s, start:start + s] += np.eye(s)
            start += s
        return FourierMap.from_modes(entries, d, n, radius=R, strip=strip)

    def Q_inv(self, strip=1.0):
        return Rotation([tuple(-v for v in mv) for mv in self.m_vectors], self.sizes).Q(strip)

    @property
    def trivial(self):
        return all(not any(mv) for mv in self.m_vectors)


def build_rotation(sites, blocks, d=None, N_window=None):
    """Assign ``m_l`` with ``m_k - m_l = -n_kl`` along a spanning forest of the sites.

    Each component is rooted at its smallest group index with ``m = 0``.  Every
    non-tree edge must close consistently, otherwise :class:`DataError`.
    """
    r = blocks.r
    if d is None:
        d = len(sites[0].n) if sites else 1
    adj = {k: [] for k in range(r)}
    for s in sites:
        k, l = s.pair
        n = np.array(s.n, dtype=int)
        adj[k].append((l, n))  # m_l = m_k + n
        adj[l].append((k, -n))  # m_k = m_l - n
    mvec = [None] * r
    for root in range(r):
        if mvec[root] is not None:
            continue
        mvec[root] = np.zeros(d, dtype=int)
        queue = deque([root])
        while queue:
            k = queue.popleft()
            for l, n in adj[k]:
                want = mvec[k] + n
                if mvec[l] is None:
                    mvec[l] = want
                    queue.append(l)
                elif not np.array_equal(mvec[l], want):
                    raise DataError(f"resonance cycle through groups {k}, {l} does not close")
    bound_ok = True
    if N_window is not None:
        bound_ok = all(np.abs(mv).sum() <= r * N_window for mv in mvec)
    return Rotation([tuple(int(v) for v in mv) for mv in mvec], list(blocks.sizes), bound_ok)


# ---------------------------------------------------------------------------
# schedule, state


@dataclass(frozen=True)
class KamSchedule:
    """Step parameters ``eps_{j+1} = eps_j^2``, ``h_j - h_{j+1} = (h - h')/4^{j+1}``.

    ``N_j = 2|ln eps_j| / (h_j - h_{j+1})``.  Thresholds are ``eps_j^sigma``.
    ``max_radius`` caps both the Fourier working radius and the resonance scan.
    """

    eps0: float | None = None
    sigma: float = 0.4
    h: float = 0.2
    h_prime: float = 0.1
    tau: float = 1.0
    max_radius: int = 16
    stop_tol: float = 1e-12
    gate_multiple: float = 1e3
    eps_max: float = 0.2
    nonres_ratio: float = 0.5
    trim_atol: float = 1e-14
    max_cond: float = 1e8

    def __post_init__(self):
        if not 0 < self.sigma < 1:
            raise ConfigError("sigma must lie in (0, 1)")
        if not 0 < self.h_prime < self.h:
            raise ConfigError("need 0 < h' < h")
        if self.max_radius < 1:
            raise ConfigError("max_radius must be >= 1")

    def with_eps0(self, eps0):
        return KamSchedule(**{**self.__dict__, "eps0": float(eps0)})

    def eps(self, j):
        e = self.eps0
        for _ in range(j):
            e = e * e
        return e

    def strip(self, j):
        h = self.h
        for i in range(1, j + 1):
            h = h - (self.h - self.h_prime) / 4.0**i
        return h

    def N(self, j):
        drop = (self.h - self.h_prime) / 4.0 ** (j + 1)
        e = self.eps(j)
        return 2 * abs(math.log(e)) / drop if e > 0 else math.inf

    def threshold(self, j):
        return self.eps(j) ** self.sigma

    def to_json(self):
        return dict(self.__dict__)


@dataclass
class KamState:
    """One stage ``B_j(x+alpha) A_0 e^{f_0} B_j(x)^{-1} = A_j e^{f_j(x)}``."""

    j: int
    A: np.ndarray
    f: FourierMap
    B: FourierMap
    phases: list
    alpha: FrequencyVector
    A0: np.ndarray
    f0: FourierMap
    schedule: tuple = ()
    diagnostics: dict = field(default_factory=dict)

    def norm(self, h=None):
        return norm_h(self.f, self.f.strip if h is None else h)

    def residual(self, size=RESIDUAL_GRID):
        """Max over a uniform grid of ``|B(x+a) A0 e^{f0} B(x)^{-1} - A e^{f}|`` and ``|B|_0``."""
        X = torus_grid(self.alpha.d, size)
        Bx = self.B.values_at(X)
        Bs = self.B.values_at(X + self.alpha.array[None, :])
        lhs = Bs @ self.A0 @ scipy.linalg.expm(self.f0.values_at(X)) @ np.linalg.inv(Bx)
        rhs = self.A @ scipy.linalg.expm(self.f.values_at(X))
        res = float(np.linalg.norm(lhs - rhs, 2, axis=(-2, -1)).max())
        bnorm = float(np.linalg.norm(Bx, 2, axis=(-2, -1)).max())
        return res, bnorm

    def log_det_mean(self):
        """``ln|det A| + Re tr f(0)``, the torus mean of ``ln|det(A e^{f})|``."""
        return float(np.log(abs(np.linalg.det(self.A))) + np.real(np.trace(self.f.mean())))


def _pad_radius(F, R):
    return F.padded(R) if F.radius < R else F.truncate(R)


def _trim(F, rtol, atol, min_radius=0):
    """Shrink while the dropped mass is below ``max(rtol * mass, atol)``."""
    weights = np.linalg.norm(F.flat(), 2, axis=(-2, -1))
    level = np.abs(F.modes()).max(axis=1)
    budget = max(rtol * weights.sum(), atol)
    r = F.radius
    while r > min_radius and weights[level >= r].sum() <= budget:
        r -= 1
    return F.truncate(r)


def kam_step(state, schedule):
    """One KAM step; returns the next :class:`KamState`.

    Raises :class:`DivergenceError` when the input violates the gates.
    """
    j = state.j
    alpha = state.alpha
    d, m = state.f.d, state.f.m
    eps, h_j, h_next = schedule.eps(j), schedule.strip(j), schedule.strip(j + 1)
    N = schedule.N(j)
    norm_in = norm_h(state.f, h_j)
    diag = {"j": j, "eps": eps, "h": h_j, "h_next": h_next, "N": N, "norm_in": norm_in, "warnings": []}
    if norm_in > schedule.eps_max or norm_in > schedule.gate_multiple * eps:
        raise DivergenceError(
            f"step {j}: |f|={norm_in:.3e} exceeds the gate (eps_j={eps:.3e}, eps_max={schedule.eps_max})"
        )
    Rf = schedule.max_radius
    G = 4 * Rf
    size = 2 * G + 1
    eye = np.eye(m, dtype=complex)
    thr = schedule.threshold(j)
    diag["threshold"] = thr

    if norm_in == 0.0:
        new = KamState(j + 1, state.A.copy(), state.f, state.B, list(state.phases), alpha, state.A0, state.f0,
                       (schedule.eps(j + 1), h_next, schedule.N(j + 1)), diag)
        res, bnorm = new.residual()
        diag.update(norm_out=0.0, sites=[], rotation=[], drift_im=[0.0] * m, residual=res, B_sup=bnorm)
        return new

    # 1. block structure
    blocks = block_diagonalize(state.A, thr, max_cond=schedule.max_cond)
    diag.update(groups=[list(map(int, g)) for g in blocks.groups], cond_P=blocks.cond, gap=blocks.gap,
                gap_retries=blocks.retries)
    At = blocks.matrix()
    g = _pad_radius(state.f.left(blocks.P).right(blocks.Pinv), Rf)

    # 2. non-resonant elimination
    Rw = int(min(N, Rf))
    mask = nonresonant_mask(blocks, alpha, Rw, thr, shape_radius=Rf)
    masked0 = norm_h(_apply_mask(g, blocks, mask), 0.0)
    analytic_gate = 13 * np.linalg.norm(At, 2) ** 2 * math.sqrt(norm_in)
    diag.update(masked_norm=masked0, analytic_eta_gate=analytic_gate, analytic_gate_ok=bool(thr >= analytic_gate))
    if masked0 > schedule.nonres_ratio * thr:
        raise DivergenceError(f"step {j}: masked norm {masked0:.3e} above {schedule.nonres_ratio} x threshold")
    nr = remove_nonresonant(At, g, blocks, alpha, mask, grid_radius=G, u_radius=2 * Rf)
    f_re = nr.f_re
    diag.update(sweeps=nr.sweeps, Y_norm=norm_h(nr.Y, 0.0), nonres_tail=nr.tail, masked_history=nr.masked_norms)

    # 3. resonances and window
    uniq = eps ** (-schedule.sigma / (2 * schedule.tau))
    scan = scan_resonances(blocks, alpha, max(2, int(N)), thr, cap=Rw, uniqueness_radius=uniq)
    if scan.uniqueness_violations:
        diag["warnings"].append(f"resonance uniqueness violated: {scan.uniqueness_violations[:3]}")
    diag.update(sites=[{"pair": list(s.pair), "n": list(s.n), "margin": s.margin} for s in scan.sites], i0=scan.i0)

    # 4. rotation
    N_i0 = float(max(2, int(N))) ** scan.i0
    rot = build_rotation(scan.sites, blocks, d=d, N_window=N_i0)
    diag.update(rotation=[list(mv) for mv in rot.m_vectors], rotation_bound_ok=rot.bound_ok)
    Q = rot.Q(strip=state.f.strip)
    Qi = rot.Q_inv(strip=state.f.strip)
    a = alpha.array
    Ahat = At.copy()
    for sl, mv in zip(blocks.slices, rot.m_vectors):
        Ahat[sl, sl] = Ahat[sl, sl] * np.exp(-2j * np.pi * float(np.dot(mv, a)))
    # high modes beyond N^{i0+1} would stay in the perturbation; with the scan cap this band is empty
    ghat = Q.matmul(f_re).matmul(Qi)
    L = ghat.mean()
    A_plus = Ahat @ scipy.linalg.expm(L)

    # conjugacy and exact new perturbation
    Pm = FourierMap.constant(blocks.P, d=d, strip=state.f.strip)
    Bbar = Q.matmul(nr.U.matmul(Pm))
    Bbar = _trim(Bbar, 1e-16, 1e-16)
    Bb_x = Bbar.grid_values(size)
    Bb_s = Bbar.shift(alpha).grid_values(size)
    cur = _pad_radius(state.f, min(state.f.radius, G))
    vals = np.linalg.solve(A_plus, Bb_s @ state.A @ scipy.linalg.expm(cur.grid_values(size))) @ np.linalg.inv(Bb_x)
    f_full = FourierMap.from_grid_values(logm_batched(vals), G, strip=state.f.strip)
    f_plus = _trim(f_full.truncate(Rf), 1e-13, schedule.trim_atol)
    B_new = _trim(Bbar.matmul(state.B), 1e-16, 1e-16)
    diag.update(f_tail=f_full.truncate(Rf).tail + (f_plus.tail - f_full.truncate(Rf).tail),
                B_tail=B_new.tail, L_norm=float(np.linalg.norm(L, 2)))

    # phases: track through the rotation by optimal matching
    prev = state.phases
    # previous slots are mapped to groups through the nearest block eigenvalue
    blk_eigs = np.concatenate([np.diag(b) for b in blocks.blocks])
    blk_group = np.concatenate([[gi] * s for gi, s in enumerate(blocks.sizes)])
    slot_group = []
    for p in prev:
        slot_group.append(int(blk_group[np.argmin(np.abs(blk_eigs - p.mu))]))
    predicted = [prev[i].rho + float(np.dot(rot.m_vectors[slot_group[i]], a)) for i in range(m)]
    new_ph = phases_of(A_plus)
    pr = pair_eigenvalues(predicted, [p.rho for p in new_ph], metric="phase")
    if pr.ambiguous:
        diag["warnings"].append("phase pairing ambiguous; lexicographic tie-break applied")
    tracked = [new_ph[pr.permutation[i]] for i in range(m)]
    drift_im = [abs(tracked[i].rho.imag - prev[i].rho.imag) for i in range(m)]
    drift_re = [float(v) for v in pr.distances]

    new = KamState(j + 1, A_plus, f_plus, B_new, tracked, alpha, state.A0, state.f0,
                   (schedule.eps(j + 1), h_next, schedule.N(j + 1)), diag)
    res, bnorm = new.residual()
    norm_out = norm_h(f_plus, h_next)
    diag.update(norm_out=norm_out, drift_im=drift_im, drift_phase=drift_re, residual=res, B_sup=bnorm,
                residual_ok=bool(res <= 1e-8 * (1 + bnorm**2)), log_det=new.log_det_mean(),
                log_det_drift=abs(new.log_det_mean() - state.log_det_mean()),
                eps_check=bool(norm_out <= schedule.eps(j + 1)))
    if not diag["residual_ok"]:
        raise NumericalError(f"step {j}: conjugacy residual {res:.3e} exceeds 1e-8 (1 + |B|^2)")
    return new


@dataclass
class KamTrace:
    states: list
    converged: bool
    failure: str | None
    schedule: KamSchedule

    @property
    def final(self):
        return self.states[-1]

    def norms(self):
        return [norm_h(s.f, s.schedule[1] if s.schedule else self.schedule.h) for s in self.states]

    def summary(self):
        steps = [s.diagnostics for s in self.states[1:]]
        drift = [max(dg.get("drift_im", [0.0])) for dg in steps]
        return {
            "converged": self.converged,
            "failure": self.failure,
            "steps": len(self.states) - 1,
            "norms": self.norms(),
            "eps": [s.schedule[0] for s in self.states],
            "drift_im": drift,
            "drift_im_total": float(np.sum(drift)),
            "B_sup": [dg.get("B_sup") for dg in steps],
            "residuals": [dg.get("residual") for dg in steps],
        }

    def to_json(self):
        records = []
        for s in self.states:
            rec = {
                "j": s.j,
                "eps": s.schedule[0] if s.schedule else None,
                "h": s.schedule[1] if s.schedule else None,
                "N": s.schedule[2] if s.schedule else None,
                "norm": norm_h(s.f, s.schedule[1]) if s.schedule else None,
                "phases": [[float(p.rho.real), float(p.rho.imag)] for p in s.phases],
                "A": {"re": np.real(s.A).tolist(), "im": np.imag(s.A).tolist()},
            }
            for key, val in s.diagnostics.items():
                rec[key] = _jsonable(val)
            records.append(rec)
        return {"converged": self.converged, "failure": self.failure, "schedule": self.schedule.to_json(),
                "steps": records}

    def phases_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["j", "slot", "re_rho", "im_rho"])
        for s in self.states:
            for i, p in enumerate(s.phases):
                w.writerow([s.j, i, repr(float(p.rho.real)), repr(float(p.rho.imag))])
        return buf.getvalue()


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, complex):
        return [v.real, v.imag]
    return v


def kam_iterate(A0, f0, alpha, schedule=None, max_steps=8):
    """Iterate :func:`kam_step` from ``A0 e^{f0}`` until ``|f_j| < stop_tol``.

    Failures (gate violations, divergence, conditioning) end the run and are
    reported in :attr:`KamTrace.failure` together with the partial trace.
    """
    schedule = schedule or KamSchedule()
    alpha = FrequencyVector.coerce(alpha)
    A0 = np.asarray(A0, dtype=complex)
    if f0.strip < schedule.h:
        f0 = FourierMap(f0.coeffs, strip=schedule.h, real=False)
    if schedule.eps0 is None:
        schedule = schedule.with_eps0(norm_h(f0, schedule.h))
    m = A0.shape[0]
    s0 = KamState(0, A0, f0, FourierMap.constant(np.eye(m), d=alpha.d, strip=f0.strip), phases_of(A0), alpha,
                  A0, f0, (schedule.eps(0), schedule.strip(0), schedule.N(0) if schedule.eps0 > 0 else math.inf), {})
    states = [s0]
    if norm_h(f0, schedule.h) < schedule.stop_tol:
        return KamTrace(states, True, None, schedule)
    failure = None
    for _ in range(max_steps):
        try:
            nxt = kam_step(states[-1], schedule)
        except (DivergenceError, ConditioningError, NumericalError, DataError, ConfigError) as exc:
            failure = f"{type(exc).__name__}: {exc}"
            break
        states.append(nxt)
        if norm_h(nxt.f, nxt.schedule[1]) < schedule.stop_tol:
            return KamTrace(states, True, None, schedule)
    return KamTrace(states, False, failure or "max_steps reached", schedule)


def lyapunov_from_phases(state, stop_tol=1e-12):
    """Sorted ``2 pi Im rho`` of a converged state."""
    h = state.schedule[1] if state.schedule else 0.0
    if state.norm(min(h, state.f.strip)) >= stop_tol:
        raise StateError("state has not converged")
    vals = np.sort([2 * np.pi * p.rho.imag for p in state.phases])[::-1]
    return LyapunovSpectrum(vals, np.zeros_like(vals), 0, 0)
