import math

import numpy as np
import pytest

from cocycle_lab import (
    Cocycle,
    ConditioningError,
    DegenerateHoppingError,
    FourierMap,
    LyapunovSpectrum,
    OperatorSpec,
    TrigPolynomial,
    build_transfer,
    conjugate,
    cosine_potential,
    group_multiplicities,
    iterate_block,
    lyapunov_spectrum,
    transfer_cocycle,
)
from conftest import random_map


def free_spec(W=(1.0, 0.0, 1.0), lambda_inv=0.0):
    return OperatorSpec(TrigPolynomial(W), cosine_potential(1), "golden", lambda_inv)


class TestTransfer:
    def test_free_cosine(self):
        np.testing.assert_allclose(build_transfer(free_spec(), 0.7, 0.3), [[0.7, -1], [1, 0]])

    def test_potential_at_zero(self):
        T = build_transfer(free_spec(lambda_inv=1.0), 0.5, 0.0)
        np.testing.assert_allclose(T, [[0.5 - 2, -1], [1, 0]])

    def test_recurrence_consistency(self, rng):
        # u_{n+2} + u_{n-2} + li V(x + n a) u_n = E u_n
        spec = free_spec(W=(1.0, 0.0, 0.0, 0.0, 1.0), lambda_inv=0.7)
        E, x = 0.3, 0.21
        a = spec.alpha.array[0]
        u = list(rng.normal(size=4))  # u_{-2}, u_{-1}, u_0, u_1
        for n in range(1, 6):
            state = np.array([u[-1], u[-2], u[-3], u[-4]])  # (u_{n}, u_{n-1}, u_{n-2}, u_{n-3}) at step n-1
            T = build_transfer(spec, E, x + (n - 1) * a)
            nxt = (T @ state)[0]
            direct = (E - 0.7 * 2 * math.cos(2 * math.pi * (x + (n - 1) * a))) * u[-2] - u[-4]
            assert nxt == pytest.approx(direct, abs=1e-12)
            np.testing.assert_allclose((T @ state)[1:], state[:-1])
            u.append(nxt.real)

    def test_cocycle_matches_pointwise(self):
        spec = free_spec(W=(0.5, 0.2, 1.0, 0.2, 0.5), lambda_inv=0.4)
        c = transfer_cocycle(spec, 0.9)
        for x in (0.0, 0.4, 0.77):
            np.testing.assert_allclose(c.A(x), build_transfer(spec, 0.9, x), atol=1e-14)

    def test_degenerate(self):
        with pytest.raises(DegenerateHoppingError):
            build_transfer(free_spec(W=(1e-14, 1.0, 1e-14)), 0.0, 0.0)


class TestLyapunov:
    def test_diagonal(self):
        L = lyapunov_spectrum(Cocycle.constant(np.diag([2.0, 0.5])), 2000, 2)
        np.testing.assert_allclose(L.values, [math.log(2), -math.log(2)], atol=1e-8)

    def test_imaginary_phase_scaling(self):
        rho = np.array([1j / (2 * math.pi), 0.25])
        L = lyapunov_spectrum(Cocycle.constant(np.diag(np.exp(-2j * math.pi * rho))), 2000, 2)
        assert L.values[0] == pytest.approx(1.0, abs=1e-8)

    def test_amo_lower_bound(self):
        # supercritical coupling on the finite-range side: L >= ln(lambda_inv)
        spec = OperatorSpec.almost_mathieu(1 / 3)
        L = lyapunov_spectrum(transfer_cocycle(spec, 0.0), 100_000, 4, seed=0)
        assert L.values[0] >= math.log(3) - 0.02

    def test_amo_power_method_oracle(self):
        # coarse independent oracle: renormalized product norm growth along one orbit
        spec = OperatorSpec.almost_mathieu(1 / 3)
        a = spec.alpha.array[0]
        v, acc, x = np.array([1.0, 0.0]), 0.0, 0.1
        for n in range(20000):
            v = build_transfer(spec, 0.0, x + n * a).real @ v
            s = np.linalg.norm(v)
            acc += math.log(s)
            v /= s
        L = lyapunov_spectrum(transfer_cocycle(spec, 0.0), 20000, 4, seed=0)
        assert L.values[0] == pytest.approx(acc / 20000, abs=0.02)

    def test_threads_do_not_change_result(self):
        c = transfer_cocycle(OperatorSpec.almost_mathieu(2.0), 0.3)
        a = lyapunov_spectrum(c, 3000, 4, seed=3, threads=1)
        b = lyapunov_spectrum(c, 3000, 4, seed=3, threads=2)
        np.testing.assert_array_equal(a.values, b.values)

    def test_json_round_trip(self):
        L = lyapunov_spectrum(Cocycle.constant(np.diag([3.0, 1.0])), 500, 1)
        back = LyapunovSpectrum.from_json(L.to_json())
        np.testing.assert_array_equal(back.values, L.values)
        assert np.isnan(back.stderr).all()

    def test_multiplicities(self):
        L = LyapunovSpectrum(np.array([0.5, 0.49999, 0.0, -0.5]), np.full(4, 1e-6), 1, 2)
        assert group_multiplicities(L) == [2, 1, 1]


class TestConjugation:
    def test_identity(self, rng):
        c = Cocycle("golden", random_map(rng, radius=2) + FourierMap.constant(3 * np.eye(2)).padded(2))
        out = conjugate(c, FourierMap.constant(np.eye(2)))
        np.testing.assert_allclose(out.A(0.31), c.A(0.31), atol=1e-12)

    def test_constant_similarity(self):
        A = np.array([[1.0, 2.0], [3.0, 4.0]])
        B = np.diag([2.0, 1.0])
        out = conjugate(Cocycle.constant(A), FourierMap.constant(B))
        np.testing.assert_allclose(out.A(0.0), B @ A @ np.linalg.inv(B), atol=1e-12)

    def test_singular_conjugacy(self):
        with pytest.raises(ConditioningError):
            conjugate(Cocycle.constant(np.eye(2)), FourierMap.constant(np.diag([1.0, 0.0])))

    def test_exponents_invariant(self, rng):
        c = Cocycle("golden", random_map(rng, m=3, radius=2) + FourierMap.constant(np.diag([4.0, 1.0, 0.3])).padded(2))
        B = FourierMap.constant(np.eye(3)).padded(1) + random_map(rng, m=3, radius=1).scale(0.1)
        L0 = lyapunov_spectrum(c, 100_000, 2, seed=1)
        L1 = lyapunov_spectrum(conjugate(c, B), 100_000, 2, seed=1)
        np.testing.assert_allclose(L1.values, L0.values, atol=5e-3)


class TestIterate:
    def test_base_cases(self, rng):
        c = Cocycle("golden", random_map(rng, radius=2) + FourierMap.constant(2 * np.eye(2)).padded(2))
        np.testing.assert_allclose(iterate_block(c, 0.2, 0), np.eye(2))
        np.testing.assert_allclose(iterate_block(c, 0.2, 1), c.A(0.2))

    def test_cocycle_identity(self, rng):
        c = Cocycle("golden", random_map(rng, radius=2) + FourierMap.constant(2 * np.eye(2)).padded(2))
        a = c.alpha.array[0]
        for n, k in [(3, 4), (5, 2), (-2, 3)]:
            lhs = iterate_block(c, 0.15, n + k)
            rhs = iterate_block(c, 0.15 + k * a, n) @ iterate_block(c, 0.15, k)
            np.testing.assert_allclose(lhs, rhs, rtol=1e-8, atol=1e-8 * np.abs(lhs).max())
