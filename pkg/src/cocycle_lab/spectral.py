"""Finite-volume spectra and the integrated density of states built from them.

Operator families
-----------------
``long-range``
    ``sum_k V(k) u_{n-k} + lam W(theta + <n, alpha>) u_n`` on Z^d.
``schrodinger-zd``
    The long-range family with ``V = sum_i 2 cos 2 pi x_i`` (lattice Laplacian).
``finite-range``
    ``sum_{|k| <= m} W(k) u_{n-k} + lambda_inv V(x + n alpha) u_n`` on Z.
``schrodinger-z``
    The finite-range family with ``W = 2 cos 2 pi t``.

The long-range family with coupling ``lam`` and the finite-range family with
``lambda_inv = 1/lam`` are Aubry dual; their densities of states satisfy
``N_long(E) = N_finite(E / lam)``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .cocycle import OperatorSpec, lyapunov_spectrum, sample_phases, transfer_cocycle
from .errors import ConfigError, InsufficientResolutionError, NumericalError
from .fourier import FourierMap, TrigPolynomial, cosine_potential, lattice_points

__all__ = [
    "FAMILIES",
    "IdsCurve",
    "LevelSetReport",
    "HolderFit",
    "ThoulessResult",
    "DualityReport",
    "assemble_finite_volume",
    "finite_volume_eigenvalues",
    "ids_curve",
    "thouless_check",
    "holder_fit",
    "level_set_classify",
    "level_set_eta",
    "predicted_holder",
    "duality_gap",
    "GapReport",
    "widest_gap",
]

FAMILIES = ("long-range", "schrodinger-zd", "finite-range", "schrodinger-z")
MAX_DIM = 8000
MIN_DIM = 50
ON_CIRCLE = 1e-6


def _resolve(spec, family):
    """Return (hopping kernel, potential callable, lattice dimension, phase dimension)."""
    if family not in FAMILIES:
        raise ConfigError(f"unknown family {family!r}; expected one of {FAMILIES}")
    if family in ("finite-range", "schrodinger-z"):
        W = spec.W
        if family == "schrodinger-z":
            if W.degree != 1 or not np.allclose(W.array, [1.0, 0.0, 1.0], atol=1e-14):
                raise ConfigError("schrodinger-z requires W = 2cos")
        kernel = {(k,): W.hat(k) for k in range(-W.degree, W.degree + 1) if W.hat(k) != 0}
        c = spec.lambda_inv

        def pot(x, sites):
            pts = np.mod(np.asarray(x)[None, :] + sites[:, :1] * spec.alpha.array[None, :], 1.0)
            return c * np.real(spec.V.values_at(pts)[:, 0, 0])

        return kernel, pot, 1, spec.d
    # long-range side
    V = spec.V
    if family == "schrodinger-zd":
        V = cosine_potential(spec.d)
        if not np.allclose(spec.V.padded(max(spec.V.radius, 1)).coeffs, V.padded(max(spec.V.radius, 1)).coeffs):
            raise ConfigError("schrodinger-zd requires V = sum of 2cos")
    kernel = {tuple(int(v) for v in n): c[0, 0] for n, c in zip(V.modes(), V.flat()) if c[0, 0] != 0}
    lam = spec.coupling

    def pot(theta, sites):
        t = float(np.atleast_1d(theta)[0])
        return lam * spec.W(t + sites @ spec.alpha.array)

    return kernel, pot, spec.d, 1


def _sites(dim, box):
    if dim == 1:
        return np.arange(-box, box + 1)[:, None]
    return lattice_points(dim, box)


def assemble_finite_volume(spec, family, box, phase):
    """Dirichlet restriction of the operator to ``[-box, box]^dim``.

    Returns a dense Hermitian matrix; sites are in lexicographic order.
    """
    if box < 1:
        raise ConfigError("box must be >= 1")
    kernel, pot, dim, pdim = _resolve(spec, family)
    phase = np.atleast_1d(np.asarray(phase, dtype=float))
    if phase.size != pdim:
        raise ConfigError(f"family {family} needs a phase in T^{pdim}")
    side = 2 * box + 1
    if side**dim > MAX_DIM:
        raise ConfigError(f"finite volume of dimension {side**dim} exceeds {MAX_DIM}")
    sites = _sites(dim, box)
    N = sites.shape[0]
    vals = np.array(list(kernel.values()), dtype=complex) if kernel else np.zeros(0, complex)
    real = not np.any(np.imag(vals))
    M = np.zeros((N, N), dtype=float if real else complex)
    index = {tuple(s): i for i, s in enumerate(sites)} if dim > 1 else None
    for k, w in kernel.items():
        w = w.real if real else w
        if dim == 1:
            k0 = k[0]
            # M[n, n-k] = W(k)
            rows = np.arange(max(0, k0), min(N, N + k0))
            M[rows, rows - k0] += w
        else:
            kk = np.array(k)
            for i, s in enumerate(sites):
                j = index.get(tuple(s - kk))
                if j is not None:
                    M[i, j] += w
    M[np.diag_indices(N)] += pot(phase, sites)
    return M


def _eigvals(M, band):
    if band is not None and band < M.shape[0] // 8:
        # lower banded storage for the Hermitian band solver
        N = M.shape[0]
        ab = np.zeros((band + 1, N), dtype=M.dtype)
        for i in range(band + 1):
            ab[i, : N - i] = np.diagonal(M, -i)
        try:
            return scipy.linalg.eigvals_banded(ab, lower=True)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise NumericalError(f"banded eigensolve failed: {exc}") from exc
    try:
        return scipy.linalg.eigvalsh(M)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"eigensolve failed: {exc}") from exc


def finite_volume_eigenvalues(spec, family, box, phase_samples, seed=None):
    """Sorted eigenvalues for each sampled phase; returns (phases, list of arrays)."""
    kernel, _, dim, pdim = _resolve(spec, family)
    phases = sample_phases(pdim, phase_samples, seed)
    band = max(abs(k[0]) for k in kernel) if (dim == 1 and kernel) else None
    out = []
    for ph in phases:
        ev = np.sort(_eigvals(assemble_finite_volume(spec, family, box, ph), band))
        if not np.all(np.isfinite(ev)):
            raise NumericalError("non-finite eigenvalues")
        out.append(ev)
    return phases, out


@dataclass
class IdsCurve:
    """Sampled integrated density of states ``E -> N(E)``."""

    energies: np.ndarray
    values: np.ndarray
    box: int | None = None
    phase_samples: int | None = None
    family: str | None = None
    dimension: int | None = None
    seed: int | None = None
    eigenvalues: list | None = field(default=None, repr=False)

    def __post_init__(self):
        self.energies = np.asarray(self.energies, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.energies.shape != self.values.shape:
            raise ConfigError("energies and values differ in length")
        if np.any(np.diff(self.energies) < 0):
            raise ConfigError("energies must be sorted")

    def evaluate(self, E):
        return np.interp(E, self.energies, self.values, left=self.values[0], right=self.values[-1])

    @classmethod
    def synthetic(cls, func, energies, dimension=None):
        E = np.asarray(energies, dtype=float)
        return cls(E, func(E), family="synthetic", dimension=dimension)

    def to_json(self):
        return {
            "family": self.family,
            "box": self.box,
            "phase_samples": self.phase_samples,
            "dimension": self.dimension,
            "seed": self.seed,
            "energies": self.energies.tolist(),
            "values": self.values.tolist(),
        }

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["E", "N"])
        for e, n in zip(self.energies, self.values):
            w.writerow([repr(float(e)), repr(float(n))])
        return buf.getvalue()


def _counting(eigs, energies):
    energies = np.asarray(energies, dtype=float)
    total = np.zeros_like(energies)
    for ev in eigs:
        total += np.searchsorted(ev, energies, side="right") / ev.size
    return total / len(eigs)


def ids_curve(spec, family, energies, box, phase_samples=8, seed=None, keep_eigenvalues=False):
    """Phase-averaged eigenvalue counting function on a Dirichlet box."""
    energies = np.asarray(energies, dtype=float)
    if np.any(np.diff(energies) < 0):
        raise ConfigError("energy grid must be sorted")
    _, _, dim, _ = _resolve(spec, family)
    size = (2 * box + 1) ** dim
    if size < MIN_DIM:
        raise ConfigError(f"finite volume of dimension {size} is below {MIN_DIM}")
    _, eigs = finite_volume_eigenvalues(spec, family, box, phase_samples, seed)
    vals = _counting(eigs, energies)
    return IdsCurve(energies, vals, box, phase_samples, family, size, seed, eigs if keep_eigenvalues else None)


@dataclass(frozen=True)
class ThoulessResult:
    E: float
    lhs: float
    rhs: float
    gap: float
    exponents: tuple


def thouless_check(spec, E, box=1000, phase_samples=8, n_iters=100_000, seed=None, eigenvalues=None):
    """Both sides of the Thouless identity for the finite-range family.

    ``lhs`` is the sum of the nonnegative Lyapunov exponents of the transfer
    cocycle plus ``ln|W(m)|``; ``rhs`` is the logarithmic potential of the
    finite-volume density of states at ``E``.
    """
    m = spec.W.degree
    L = lyapunov_spectrum(transfer_cocycle(spec, E), n_iters, phase_samples, seed)
    lhs = float(np.sum(L.values[:m]) + math.log(abs(spec.W.hat(m))))
    if eigenvalues is None:
        _, eigenvalues = finite_volume_eigenvalues(spec, "finite-range", box, phase_samples, seed)
    rhs = float(np.mean([np.mean(np.log(np.maximum(np.abs(E - ev), 1e-12))) for ev in eigenvalues]))
    return ThoulessResult(float(E), lhs, rhs, lhs - rhs, tuple(float(v) for v in L.values))


@dataclass
class HolderFit:
    E: float
    scales: np.ndarray
    increments: np.ndarray
    exponent: float
    r2: float
    usable_scales: np.ndarray
    intercept: float = 0.0

    def to_json(self):
        return {
            "E": self.E,
            "scales": self.scales.tolist(),
            "increments": self.increments.tolist(),
            "exponent": self.exponent,
            "r2": self.r2,
            "usable_scales": [int(i) for i in self.usable_scales],
        }


def holder_fit(ids, E, scale_count=8, eps0=None, floor=None):
    """Log-log slope of ``N(E + eps) - N(E - eps)`` over dyadic ``eps = eps0 2^-k``.

    Scales whose increment falls below ``floor`` (default five eigenvalues'
    worth, ``5 / dimension``) are discarded; fewer than three survivors raise
    :class:`InsufficientResolutionError`.
    """
    E = float(E)
    lo, hi = ids.energies[0], ids.energies[-1]
    if eps0 is None:
        eps0 = 0.5 * min(E - lo, hi - E)
    if eps0 <= 0:
        raise InsufficientResolutionError("E must lie strictly inside the sampled range")
    scales = eps0 * 2.0 ** -np.arange(scale_count)
    inc = ids.evaluate(E + scales) - ids.evaluate(E - scales)
    if floor is None:
        floor = 5.0 / ids.dimension if ids.dimension else 0.0
    usable = np.nonzero((inc >= floor) & (inc > 0))[0]
    if usable.size < 3:
        raise InsufficientResolutionError(f"only {usable.size} scales above the resolution floor {floor:.3g}")
    x, y = np.log(scales[usable]), np.log(inc[usable])
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss if ss > 0 else 1.0
    return HolderFit(E, scales, inc, float(slope), float(r2), usable, float(icpt))


@dataclass(frozen=True)
class GapReport:
    lower: float
    upper: float
    ids_value: float
    edge: float


def widest_gap(eigenvalues, window=(0.25, 0.75)):
    """Widest spacing of the pooled spectrum inside a fraction window of its hull.

    ``edge`` is the endpoint bordering the denser side (counted within a tenth
    of the gap width), which avoids isolated boundary states of the box.
    """
    allv = np.sort(np.concatenate([np.ravel(e) for e in eigenvalues]))
    if allv.size < 3:
        raise InsufficientResolutionError("too few eigenvalues to locate a gap")
    lo, hi = allv[0], allv[-1]
    a, b = lo + window[0] * (hi - lo), lo + window[1] * (hi - lo)
    d = np.diff(allv)
    inside = (allv[:-1] >= a) & (allv[1:] <= b)
    if not inside.any():
        raise InsufficientResolutionError("no spacing inside the window")
    i = int(np.argmax(np.where(inside, d, -np.inf)))
    g_lo, g_hi = allv[i], allv[i + 1]
    reach = 0.1 * (g_hi - g_lo)
    below = np.count_nonzero((allv >= g_lo - reach) & (allv <= g_lo))
    above = np.count_nonzero((allv >= g_hi) & (allv <= g_hi + reach))
    edge = g_hi if above >= below else g_lo
    return GapReport(float(g_lo), float(g_hi), float((i + 1) / allv.size), float(edge))


# ---------------------------------------------------------------------------
# level sets of the hopping symbol


@dataclass
class LevelSetReport:
    """Roots of ``W(z) - E`` split by modulus into outer, inner and near-circle groups."""

    E: float
    zeros: np.ndarray
    z_plus: np.ndarray
    z_minus: np.ndarray
    z_zero: np.ndarray
    i0: int
    eta: float

    @property
    def card_zero(self):
        return int(self.z_zero.size)

    def to_json(self):
        def cx(a):
            return [[float(z.real), float(z.imag)] for z in a]

        return {
            "E": self.E,
            "zeros": cx(self.zeros),
            "z_plus": cx(self.z_plus),
            "z_minus": cx(self.z_minus),
            "z_zero": cx(self.z_zero),
            "i0": self.i0,
            "eta": self.eta,
            "card_zero": self.card_zero,
        }


def _roots(W, E):
    m = W.degree
    # ascending coefficients of z^m (sum_k W(k) z^k - E)
    asc = W.array.copy()
    asc[m] -= E
    z = np.roots(asc[::-1])
    if z.size != 2 * m or not np.all(np.isfinite(z)) or np.any(z == 0):
        raise NumericalError("companion root finding failed")
    return z


def level_set_classify(W, E, eta=None):
    """Partition the ``2m`` roots of ``z^m (W(z) - E)`` by ``|ln|z||``.

    Windows ``[i eta/(4m), (i+1) eta/(4m)]`` for ``i = 1 .. 2m`` are scanned and
    the first one free of roots fixes the split.  Without an explicit ``eta`` a
    local value is used that places every root off the unit circle (beyond
    ``1e-6`` in ``|ln|z||``) above all windows, so ``card_zero`` counts the
    zeros of ``W(t) - E`` on the real torus with multiplicity.
    """
    if W.degree < 1:
        raise ConfigError("level sets need a nonconstant W")
    m = W.degree
    z = _roots(W, E)
    ell = np.log(np.abs(z))
    a = np.abs(ell)
    if eta is None:
        off = a[a > ON_CIRCLE]
        delta = off.min() if off.size else 1.0
        eta = 0.999 * delta * 4 * m / (2 * m + 1)
    w = eta / (4 * m)
    i0 = None
    for i in range(1, 2 * m + 1):
        inside = (a >= i * w) & (a <= (i + 1) * w)
        if not inside.any():
            i0 = i
            break
    if i0 is None:
        raise NumericalError("no root-free window; eta is too large for this energy")
    order = np.argsort(-ell, kind="stable")
    z, ell, a = z[order], ell[order], a[order]
    return LevelSetReport(
        E=float(E),
        zeros=z,
        z_plus=z[ell > (i0 + 1) * w],
        z_minus=z[ell < -(i0 + 1) * w],
        z_zero=z[a <= i0 * w],
        i0=i0,
        eta=float(eta),
    )


def level_set_eta(W, energies, m0=None):
    """Uniform gap ``eta``: the largest value with ``|z_{m-m0}(E)| >= 1 + eta`` on the range.

    Roots are sorted by decreasing modulus; ``m0`` defaults to half the largest
    near-circle count over ``energies`` (rounded up).  Returns ``inf`` when
    ``m0 = m`` leaves no constraint.
    """
    m = W.degree
    energies = np.atleast_1d(np.asarray(energies, dtype=float))
    if m0 is None:
        m0 = max(math.ceil(level_set_classify(W, E).card_zero / 2) for E in energies)
    if m - m0 < 1:
        return math.inf
    worst = math.inf
    for E in energies:
        mods = np.sort(np.abs(_roots(W, E)))[::-1]
        worst = min(worst, mods[m - m0 - 1] - 1.0)
    return float(worst)


def predicted_holder(W, energies, window=1):
    """Level-set prediction ``1 / (2 ceil(c/2))`` per energy.

    ``c`` is the largest near-circle root count among grid energies within
    ``window`` grid steps of E.  Energies with ``c = 0`` lie outside the range
    of ``W`` and get ``None``.

    Returns
    -------
    list of (E, c, prediction)
    """
    energies = np.atleast_1d(np.asarray(energies, dtype=float))
    counts = np.array([level_set_classify(W, E).card_zero for E in energies])
    rows = []
    for i, E in enumerate(energies):
        c = int(counts[max(0, i - window): i + window + 1].max())
        rows.append((float(E), c, None if c == 0 else 1.0 / (2 * math.ceil(c / 2))))
    return rows


# ---------------------------------------------------------------------------
# duality


@dataclass
class DualityReport:
    lam: float
    sup_gap: float
    argmax: float
    box: int
    phase_samples: int
    energies: np.ndarray
    n_long: np.ndarray
    n_finite: np.ndarray

    def to_json(self):
        return {
            "lambda": self.lam,
            "sup_gap": self.sup_gap,
            "argmax": self.argmax,
            "box": self.box,
            "phase_samples": self.phase_samples,
        }


def duality_gap(spec, box=1000, phase_samples=8, seed=None, long_family="long-range", finite_family="finite-range"):
    """Sup-norm distance between the long-range IDS at E and the finite-range IDS at E/lam.

    The supremum is taken over every jump point of either step function
    (approached from both sides), so it is exact for the two finite-volume
    curves.
    """
    lam = spec.coupling
    _, ev_long = finite_volume_eigenvalues(spec, long_family, box, phase_samples, seed)
    _, ev_fin = finite_volume_eigenvalues(spec, finite_family, box, phase_samples, seed)
    ev_fin_scaled = [np.sort(lam * ev) for ev in ev_fin]
    jumps = np.unique(np.concatenate(ev_long + ev_fin_scaled))
    probe = np.concatenate([jumps, np.nextafter(jumps, -np.inf)])
    probe.sort()
    a = _counting(ev_long, probe)
    b = _counting(ev_fin_scaled, probe)
    diff = np.abs(a - b)
    k = int(np.argmax(diff))
    return DualityReport(float(lam), float(diff[k]), float(probe[k]), box, phase_samples, probe, a, b)
