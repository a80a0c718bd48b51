"""Matrix-valued truncated Fourier series on the torus T^d.

A :class:`FourierMap` stores the coefficients ``f(n)`` for ``|n|_inf <= R`` as a
dense array of shape ``(2R+1,)*d + (m, m)``.  Products are computed exactly on
an FFT grid large enough to avoid aliasing; transcendental maps (exp, log,
inverse) are evaluated pointwise on an oversampled grid and transformed back,
with the discarded coefficient mass recorded in :attr:`FourierMap.tail`.

Everywhere in the package ``|n|`` on Z^d means the l1 norm.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import BranchError, DomainError

__all__ = [
    "FrequencyVector",
    "DiophantineParams",
    "DiophantineCheck",
    "FourierMap",
    "TrigPolynomial",
    "evaluate",
    "norm_h",
    "matrix_exp_map",
    "matrix_log_map",
    "matrix_inv_map",
    "pointwise_map",
    "check_diophantine",
    "dist_to_integers",
    "modes",
    "GOLDEN",
    "cosine_potential",
    "logm_batched",
]

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
REAL_TOL = 1e-12
BRANCH_TOL = 1e-10


def dist_to_integers(x):
    """Distance ``||x||_{R/Z}`` to the nearest integer (elementwise)."""
    x = np.asarray(x, dtype=float)
    return np.abs(x - np.round(x))


@dataclass(frozen=True)
class FrequencyVector:
    alpha: tuple

    def __post_init__(self):
        a = tuple(float(v) for v in np.atleast_1d(self.alpha))
        if len(a) < 1:
            raise DomainError("frequency vector needs at least one component")
        object.__setattr__(self, "alpha", a)

    @property
    def d(self):
        return len(self.alpha)

    @property
    def array(self):
        return np.array(self.alpha)

    @classmethod
    def golden(cls):
        return cls((GOLDEN,))

    @classmethod
    def coerce(cls, value):
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            if value == "golden":
                return cls.golden()
            raise DomainError(f"unknown named frequency {value!r}")
        return cls(value)


@dataclass(frozen=True)
class DiophantineParams:
    kappa: float
    tau: float
    cutoff: int = 100

    def check_dimension(self, d):
        if self.kappa <= 0:
            raise DomainError("kappa must be positive")
        if self.tau <= d - 1:
            raise DomainError(f"tau must exceed d-1 = {d - 1}")
        if self.cutoff < 1:
            raise DomainError("cutoff must be >= 1")


@dataclass(frozen=True)
class DiophantineCheck:
    passed: bool
    worst_n: tuple
    margin: float


def modes(d, radius):
    """All integer vectors with ``|n|_inf <= radius``, shape (K, d), C order."""
    r = np.arange(-radius, radius + 1)
    grids = np.meshgrid(*([r] * d), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def _half_space(n):
    """True for the canonical representative of {n, -n} (first nonzero > 0)."""
    for v in n:
        if v != 0:
            return v > 0
    return False


def check_diophantine(alpha, params):
    """Brute-force test of ``||<n,alpha>|| > kappa / |n|^tau`` for ``0 < |n|_1 <= cutoff``.

    Returns the worst offender (smallest margin ``||<n,alpha>|| - kappa |n|^-tau``)
    among canonical representatives of ``{n, -n}``.
    """
    alpha = FrequencyVector.coerce(alpha)
    params.check_dimension(alpha.d)
    cutoff = int(params.cutoff)
    ns = modes(alpha.d, cutoff)
    l1 = np.abs(ns).sum(axis=1)
    keep = (l1 > 0) & (l1 <= cutoff)
    keep &= np.array([_half_space(n) for n in ns])
    ns, l1 = ns[keep], l1[keep]
    margins = dist_to_integers(ns @ alpha.array) - params.kappa / l1.astype(float) ** params.tau
    # stable ordering: smallest |n|_1 first among equal margins
    order = np.lexsort((l1, margins))
    worst = order[0]
    return DiophantineCheck(
        passed=bool(margins[worst] > 0),
        worst_n=tuple(int(v) for v in ns[worst]),
        margin=float(margins[worst]),
    )


def _opnorm(c):
    """Operator 2-norm of a stack of matrices (..., m, m)."""
    if c.shape[-1] == 1 and c.shape[-2] == 1:
        return np.abs(c[..., 0, 0])
    return np.linalg.svd(c, compute_uv=False)[..., 0]


class FourierMap:
    """Truncated matrix-valued Fourier series ``F(x) = sum_n f(n) e^{2 pi i <n,x>}``.

    Parameters
    ----------
    coeffs : array_like, shape ``(2R+1,)*d + (m, m)``
        Coefficients; index ``i`` along each torus axis is mode ``n = i - R``.
    strip : float
        Width ``h`` of the complex strip on which the map is considered analytic.
    real : bool
        Flag a real-valued map; validated as ``f(-n) = conj(f(n))``.
    tail : float
        Coefficient mass discarded by the operation that produced this map.
    """

    __slots__ = ("coeffs", "strip", "real", "tail")

    def __init__(self, coeffs, strip=1.0, real=False, tail=0.0):
        c = np.array(coeffs, dtype=complex)
        if c.ndim < 3 or c.shape[-1] != c.shape[-2]:
            raise DomainError("coefficient array must end with a square matrix axis")
        side = c.shape[0]
        if side % 2 != 1 or any(s != side for s in c.shape[:-2]):
            raise DomainError("coefficient grid must be (2R+1)^d")
        if strip < 0:
            raise DomainError("strip width must be nonnegative")
        c.setflags(write=False)
        self.coeffs = c
        self.strip = float(strip)
        self.real = bool(real)
        self.tail = float(tail)
        if self.real:
            flipped = np.conj(c[(slice(None, None, -1),) * self.d])
            if np.max(np.abs(flipped - c), initial=0.0) > REAL_TOL * (1 + np.max(np.abs(c))):
                raise DomainError("map flagged real but f(-n) != conj f(n)")

    # -- construction -------------------------------------------------
    @classmethod
    def zeros(cls, d, m, radius=0, strip=1.0):
        return cls(np.zeros((2 * radius + 1,) * d + (m, m)), strip=strip)

    @classmethod
    def constant(cls, matrix, d=1, strip=1.0):
        mat = np.atleast_2d(np.asarray(matrix, dtype=complex))
        return cls(mat.reshape((1,) * d + mat.shape), strip=strip)

    @classmethod
    def from_modes(cls, entries, d, m, radius=None, strip=1.0, real=False):
        """Build from a mapping ``n -> matrix`` (n a tuple of ints, or int when d == 1)."""
        keys = [tuple(np.atleast_1d(k).astype(int)) for k in entries]
        if radius is None:
            radius = max((max(abs(v) for v in k) for k in keys), default=0)
        c = np.zeros((2 * radius + 1,) * d + (m, m), dtype=complex)
        for key, val in zip(keys, entries.values()):
            if len(key) != d:
                raise DomainError(f"mode {key} has wrong dimension")
            if max(abs(v) for v in key) > radius:
                raise DomainError(f"mode {key} outside radius {radius}")
            c[tuple(v + radius for v in key)] += np.asarray(val, dtype=complex).reshape(m, m)
        return cls(c, strip=strip, real=real)

    # -- shape --------------------------------------------------------
    @property
    def d(self):
        return self.coeffs.ndim - 2

    @property
    def m(self):
        return self.coeffs.shape[-1]

    @property
    def radius(self):
        return (self.coeffs.shape[0] - 1) // 2

    def modes(self):
        return modes(self.d, self.radius)

    def flat(self):
        return self.coeffs.reshape(-1, self.m, self.m)

    def coefficient(self, n):
        n = tuple(np.atleast_1d(n).astype(int))
        if max(abs(v) for v in n) > self.radius:
            return np.zeros((self.m, self.m), dtype=complex)
        return self.coeffs[tuple(v + self.radius for v in n)].copy()

    def _replace(self, coeffs, **kw):
        kw.setdefault("strip", self.strip)
        return FourierMap(coeffs, **kw)

    def __repr__(self):
        return f"FourierMap(d={self.d}, m={self.m}, radius={self.radius}, strip={self.strip})"

    # -- evaluation ---------------------------------------------------
    def values_at(self, points):
        """Evaluate at a batch of points, shape (P, d) (real or complex)."""
        pts = np.atleast_2d(np.asarray(points))
        if pts.shape[-1] != self.d:
            pts = pts.reshape(-1, self.d)
        if np.any(np.abs(np.imag(pts)) > self.strip + 1e-15):
            raise DomainError("evaluation point outside the analyticity strip")
        ns = self.modes()
        phase = np.exp(2j * np.pi * (pts @ ns.T))
        return np.einsum("pk,kij->pij", phase, self.flat())

    def __call__(self, x):
        return self.values_at(np.reshape(np.asarray(x), (1, self.d)))[0]

    def grid_values(self, size):
        """Values at the uniform grid ``x_j = j/size`` (per axis), via inverse FFT."""
        if size < 2 * self.radius + 1:
            raise DomainError("grid too small for this radius")
        d = self.d
        arr = np.zeros((size,) * d + (self.m, self.m), dtype=complex)
        idx = np.arange(-self.radius, self.radius + 1) % size
        arr[np.ix_(*([idx] * d))] = self.coeffs
        return np.fft.ifftn(arr, axes=tuple(range(d))) * size**d

    @classmethod
    def from_grid_values(cls, values, radius, strip=1.0, out_radius=None):
        """Coefficients from uniform-grid samples; keeps ``|n|_inf <= radius``.

        When ``out_radius`` is smaller than ``radius`` the extra band is
        dropped and its mass stored in ``tail``.
        """
        values = np.asarray(values, dtype=complex)
        d = values.ndim - 2
        size = values.shape[0]
        radius = min(radius, (size - 1) // 2)
        c = np.fft.fftn(values, axes=tuple(range(d))) / size**d
        idx = np.arange(-radius, radius + 1) % size
        full = cls(c[np.ix_(*([idx] * d))], strip=strip)
        if out_radius is not None and out_radius < radius:
            return full.truncate(out_radius)
        return full

    # -- algebra ------------------------------------------------------
    def padded(self, radius):
        if radius < self.radius:
            raise DomainError("use truncate() to shrink")
        if radius == self.radius:
            return self
        pad = radius - self.radius
        width = [(pad, pad)] * self.d + [(0, 0), (0, 0)]
        return self._replace(np.pad(self.coeffs, width), real=self.real)

    def truncate(self, radius):
        """Drop modes with ``|n|_inf > radius``; ``tail`` records their l1 mass."""
        if radius >= self.radius:
            return self
        lo = self.radius - radius
        core = (slice(lo, lo + 2 * radius + 1),) * self.d
        kept = self.coeffs[core]
        total = float(_opnorm(self.flat()).sum())
        tail = total - float(_opnorm(kept.reshape(-1, self.m, self.m)).sum())
        return self._replace(kept, tail=self.tail + max(tail, 0.0))

    def trim(self, tol=1e-12, min_radius=0):
        """Shrink the radius while the discarded mass stays below ``tol * norm``."""
        weights = _opnorm(self.flat())
        ns = self.modes()
        level = np.abs(ns).max(axis=1) if self.d else np.zeros(len(ns))
        total = weights.sum()
        budget = tol * total
        r = self.radius
        while r > min_radius:
            dropped = weights[level >= r].sum()
            if dropped > budget:
                break
            r -= 1
        return self.truncate(r)

    def _binary(self, other, op):
        if isinstance(other, FourierMap):
            if other.d != self.d or other.m != self.m:
                raise DomainError("shape mismatch between Fourier maps")
            r = max(self.radius, other.radius)
            a, b = self.padded(r), other.padded(r)
            return FourierMap(op(a.coeffs, b.coeffs), strip=min(self.strip, other.strip),
                              real=self.real and other.real)
        mat = np.asarray(other, dtype=complex)
        out = self.coeffs.copy()
        centre = (self.radius,) * self.d
        out[centre] = op(out[centre], mat)
        return self._replace(out)

    def __add__(self, other):
        return self._binary(other, np.add)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __neg__(self):
        return self._replace(-self.coeffs, real=self.real)

    def scale(self, s):
        s = complex(s)
        return self._replace(self.coeffs * s, real=self.real and s.imag == 0)

    def __mul__(self, s):
        return self.scale(s)

    __rmul__ = __mul__

    def left(self, mat):
        """Constant matrix times the map: ``M F(x)``."""
        return self._replace(np.einsum("ij,...jk->...ik", np.asarray(mat, dtype=complex), self.coeffs))

    def right(self, mat):
        """The map times a constant matrix: ``F(x) M``."""
        return self._replace(np.einsum("...ij,jk->...ik", self.coeffs, np.asarray(mat, dtype=complex)))

    def matmul(self, other, radius=None):
        """Exact product of two trigonometric polynomials (optionally truncated)."""
        if other.d != self.d or other.m != self.m:
            raise DomainError("shape mismatch between Fourier maps")
        full = self.radius + other.radius
        size = 2 * full + 1
        vals = self.grid_values(size) @ other.grid_values(size)
        out = FourierMap.from_grid_values(vals, full, strip=min(self.strip, other.strip))
        out = FourierMap(out.coeffs, strip=out.strip, real=False)
        return out if radius is None else out.truncate(radius)

    def __matmul__(self, other):
        return self.matmul(other)

    def shift(self, alpha):
        """Coefficients of ``x -> F(x + alpha)``."""
        a = FrequencyVector.coerce(alpha).array
        if a.size != self.d:
            raise DomainError("frequency dimension mismatch")
        ph = np.exp(2j * np.pi * (self.modes() @ a)).reshape((2 * self.radius + 1,) * self.d)
        return self._replace(self.coeffs * ph[..., None, None], real=False)

    def mean(self):
        return self.coefficient((0,) * self.d)

    def conj_transpose(self):
        flipped = self.coeffs[(slice(None, None, -1),) * self.d]
        return self._replace(np.conj(np.swapaxes(flipped, -1, -2)))

    # -- norms --------------------------------------------------------
    def norm(self, h=0.0):
        return norm_h(self, h)

    def sup_on_grid(self, size=64):
        size = max(size, 2 * self.radius + 1)
        return float(_opnorm(self.grid_values(size)).max())

    # -- serialization ------------------------------------------------
    def to_json(self):
        entries = []
        for n, c in zip(self.modes(), self.flat()):
            if np.any(c != 0):
                entries.append({"n": [int(v) for v in n], "re": c.real.tolist(), "im": c.imag.tolist()})
        return {"d": self.d, "m": self.m, "radius": self.radius, "strip": self.strip, "entries": entries}

    @classmethod
    def from_json(cls, doc):
        d, m, radius = int(doc["d"]), int(doc["m"]), int(doc["radius"])
        entries = {}
        for e in doc.get("entries", []):
            mat = np.asarray(e["re"], dtype=float) + 1j * np.asarray(e.get("im", 0.0), dtype=float)
            entries[tuple(e["n"])] = np.broadcast_to(mat, (m, m))
        return cls.from_modes(entries, d, m, radius=radius, strip=float(doc.get("strip", 1.0)),
                              real=bool(doc.get("real", False)))


def evaluate(F, x):
    """Direct summation of ``F`` at a single point ``x`` (real or complex)."""
    return F(x)


def norm_h(F, h=0.0):
    """Weighted l1 surrogate ``sum_n |f(n)|_op e^{2 pi h |n|_1}``.

    This is an upper bound for the sup-norm of ``F`` on the strip ``|Im x| < h``.
    """
    if h > F.strip + 1e-15:
        raise DomainError(f"h = {h} exceeds the strip width {F.strip}")
    w = np.exp(2 * np.pi * h * np.abs(F.modes()).sum(axis=1))
    return float((_opnorm(F.flat()) * w).sum())


def pointwise_map(func, maps, radius, out_radius=None, strip=None):
    """Apply ``func`` to grid values of ``maps`` and return the Fourier map of the result.

    The grid has ``2*radius + 1`` points per axis and so resolves modes up to
    ``radius``; ``out_radius`` truncates further and records the tail.
    """
    size = 2 * radius + 1
    vals = [F.grid_values(size) for F in maps]
    out = func(*vals)
    if strip is None:
        strip = min(F.strip for F in maps)
    return FourierMap.from_grid_values(out, radius, strip=strip, out_radius=out_radius)


def _default_grid_radius(F, grid_radius):
    if grid_radius is not None:
        return grid_radius
    return 4 * F.radius


def matrix_exp_map(F, radius=None, grid_radius=None):
    """Pointwise matrix exponential ``x -> exp(F(x))``."""
    gr = _default_grid_radius(F, grid_radius)
    return pointwise_map(scipy.linalg.expm, [F], gr, out_radius=radius)


def _check_branch(X):
    w = np.linalg.eigvals(X)
    dist = np.where(w.real < 0, np.abs(w.imag), np.abs(w))
    bad = float(dist.min(initial=np.inf))
    if bad < BRANCH_TOL:
        raise BranchError(f"eigenvalue within {bad:.2e} of the branch cut (-inf, 0]")


def _sqrtm_batched(X, maxiter=60):
    """Principal square root by the Denman-Beavers iteration."""
    Y = X.copy()
    Z = np.broadcast_to(np.eye(X.shape[-1], dtype=complex), X.shape).copy()
    for _ in range(maxiter):
        Yi, Zi = np.linalg.inv(Y), np.linalg.inv(Z)
        Y_new, Z = 0.5 * (Y + Zi), 0.5 * (Z + Yi)
        delta = np.max(np.abs(Y_new - Y))
        Y = Y_new
        if delta < 1e-15 * (1 + np.max(np.abs(Y))):
            break
    return Y


def logm_batched(X):
    """Principal matrix logarithm of a stack of matrices (..., m, m).

    Inverse scaling and squaring: square roots until ``|X - I| <= 0.25``,
    then the Gregory series ``2 sum Z^{2j+1}/(2j+1)`` with ``Z = (X-I)(X+I)^-1``.
    """
    X = np.asarray(X, dtype=complex)
    shape = X.shape
    X = X.reshape(-1, shape[-2], shape[-1])
    _check_branch(X)
    eye = np.eye(shape[-1], dtype=complex)
    k = 0
    while np.max(np.linalg.norm(X - eye, ord=2, axis=(-2, -1))) > 0.25 and k < 60:
        X = _sqrtm_batched(X)
        k += 1
    Z = np.linalg.solve(np.swapaxes(X + eye, -1, -2), np.swapaxes(X - eye, -1, -2))
    Z = np.swapaxes(Z, -1, -2)
    Z2 = Z @ Z
    term = Z.copy()
    out = Z.copy()
    for j in range(1, 40):
        term = term @ Z2
        contrib = term / (2 * j + 1)
        out = out + contrib
        if np.max(np.abs(contrib)) < 1e-18:
            break
    return (2.0 ** (k + 1) * out).reshape(shape)


def matrix_log_map(F, radius=None, grid_radius=None):
    """Pointwise principal logarithm ``x -> log(F(x))``."""
    gr = _default_grid_radius(F, grid_radius)
    return pointwise_map(logm_batched, [F], gr, out_radius=radius)


def matrix_inv_map(F, radius=None, grid_radius=None):
    """Pointwise inverse ``x -> F(x)^{-1}``."""
    gr = _default_grid_radius(F, grid_radius)
    return pointwise_map(np.linalg.inv, [F], gr, out_radius=radius)


@dataclass(frozen=True)
class TrigPolynomial:
    """Scalar trigonometric polynomial ``W(t) = sum_{k=-m}^{m} W(k) e^{2 pi i k t}``.

    ``coeffs`` lists ``W(-m), ..., W(m)``.
    """

    coeffs: tuple
    check_real: bool = field(default=True, compare=False)

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.coeffs, dtype=complex))
        if c.size % 2 != 1:
            raise DomainError("need 2m+1 coefficients W(-m..m)")
        if self.check_real and np.max(np.abs(c - np.conj(c[::-1]))) > REAL_TOL * (1 + np.max(np.abs(c))):
            raise DomainError("W(-k) must equal conj(W(k)) for a real potential")
        if c.size > 1 and abs(c[-1]) == 0:
            raise DomainError("leading coefficient W(m) must be nonzero")
        object.__setattr__(self, "coeffs", tuple(complex(v) for v in c))

    @property
    def degree(self):
        return (len(self.coeffs) - 1) // 2

    @property
    def array(self):
        return np.array(self.coeffs)

    def hat(self, k):
        m = self.degree
        return self.coeffs[k + m] if -m <= k <= m else 0j

    def __call__(self, theta):
        t = np.asarray(theta, dtype=float)
        k = np.arange(-self.degree, self.degree + 1)
        return np.real(np.exp(2j * np.pi * np.multiply.outer(t, k)) @ self.array)

    def as_fourier_map(self, strip=1.0):
        c = self.array.reshape(-1, 1, 1)
        return FourierMap(c, strip=strip, real=True)

    @classmethod
    def cosine(cls, amplitude=1.0):
        """``2 * amplitude * cos(2 pi t)``."""
        return cls((amplitude, 0.0, amplitude))

    @classmethod
    def from_real_cos_sin(cls, a0, a, b):
        """``a0 + sum_k a_k cos(2 pi k t) + b_k sin(2 pi k t)``."""
        a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        pos = 0.5 * (a - 1j * b)
        return cls(tuple(np.conj(pos[::-1])) + (a0,) + tuple(pos))


def cosine_potential(d, amplitude=1.0, strip=1.0):
    """Scalar map ``sum_i 2*amplitude*cos(2 pi x_i)`` on T^d."""
    entries = {}
    for i in range(d):
        for s in (1, -1):
            n = [0] * d
            n[i] = s
            entries[tuple(n)] = [[amplitude]]
    return FourierMap.from_modes(entries, d, 1, radius=1, strip=strip, real=True)


def lattice_points(d, radius):
    """Sites of the box ``[-radius, radius]^d`` in lexicographic order."""
    return np.array(list(itertools.product(range(-radius, radius + 1), repeat=d)), dtype=int)
