import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import solve_continuous_lyapunov

from tubecbf.errors import (ConfigurationError, InfeasibleTighteningError, NoSolutionError,
                            SynthesisError, TubeInfeasibleError)
from tubecbf.tube import (Ellipsoid, ancillary_gains, best_decay_margin, box_tighten,
                          closed_loop, contains, gains_from_vector, decay_margin,
                          lyapunov_residual, lyapunov_solve, rpi_radius, sprocedure_tube,
                          support, support_maximizer, synthesize_tube)

GAIN_VECTOR = (15.0, 4.0, 15.0, 8.0, 6.0, 8.0)


def _spd(rng, m, cond=50.0):
    Qm, _ = np.linalg.qr(rng.standard_normal((m, m)))
    return Qm @ np.diag(np.geomspace(1.0, cond, m)) @ Qm.T


class TestGains:
    def test_vieta(self):
        K = ancillary_gains((-1.0, -2.0, -3.0), 3, 1)
        np.testing.assert_allclose(K, [[6.0, 11.0, 6.0]], rtol=1e-14)

    def test_single_pole_identity(self):
        np.testing.assert_allclose(ancillary_gains((-1.0,), 1, 2), np.eye(2))

    def test_nonnegative_pole_rejected(self):
        with pytest.raises(ConfigurationError):
            ancillary_gains((-1.0, 0.0, -2.0), 3, 2)

    def test_placed_poles(self):
        K = ancillary_gains((-2.0, -3.0, -5.0), 3, 2)
        eig = np.sort(np.linalg.eigvals(closed_loop(K, 3, 2)).real)
        np.testing.assert_allclose(eig, [-5, -5, -3, -3, -2, -2], rtol=1e-9)

    def test_gain_vector_hurwitz(self):
        K = gains_from_vector(GAIN_VECTOR, 3, 2)
        eig = np.linalg.eigvals(closed_loop(K, 3, 2))
        assert np.all(eig.real < 0)
        # characteristic polynomials per axis, read independently of the package
        ref = np.concatenate([np.roots([1, 15, 4, 15]), np.roots([1, 8, 6, 8])])
        np.testing.assert_allclose(np.sort_complex(eig), np.sort_complex(ref), atol=1e-10)

    def test_position_major_convention(self):
        K = gains_from_vector((1, 2, 3, 4, 5, 6), 3, 2, "position-major")
        np.testing.assert_array_equal(K[0, 0::2], [1, 3, 5])
        np.testing.assert_array_equal(K[1, 1::2], [2, 4, 6])

    def test_zero_vector_rejected(self):
        with pytest.raises(SynthesisError, match="eigenvalues"):
            gains_from_vector(np.zeros(6), 3, 2)

    def test_wrong_length(self):
        with pytest.raises(ConfigurationError):
            gains_from_vector((1.0, 2.0), 3, 2)


class TestLyapunov:
    def test_identity(self):
        np.testing.assert_allclose(lyapunov_solve(-np.eye(4), 2 * np.eye(4)), np.eye(4),
                                   atol=1e-15)

    def test_diagonal(self):
        np.testing.assert_allclose(lyapunov_solve(np.diag([-1.0, -2.0]), np.eye(2)),
                                   np.diag([0.5, 0.25]), atol=1e-15)

    def test_non_hurwitz(self):
        with pytest.raises(NoSolutionError):
            lyapunov_solve(np.diag([-1.0, 0.5]), np.eye(2))

    def test_q_not_pd(self):
        with pytest.raises(ConfigurationError):
            lyapunov_solve(-np.eye(2), np.diag([1.0, -1.0]))

    def test_against_scipy(self, rng):
        A = closed_loop(gains_from_vector(GAIN_VECTOR, 3, 2), 3, 2)
        Q = _spd(rng, 6)
        P = lyapunov_solve(A, Q)
        ref = solve_continuous_lyapunov(A.T, -Q)
        np.testing.assert_allclose(P, ref, rtol=1e-9, atol=1e-12)
        assert lyapunov_residual(A, P, Q) <= 1e-8
        assert np.linalg.eigvalsh(P).min() > 0

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-20.0, -0.1), min_size=3, max_size=3), st.integers(0, 2 ** 31))
    def test_residual_property(self, poles, seed):
        rng = np.random.default_rng(seed)
        A = closed_loop(ancillary_gains(poles, 3, 2), 3, 2)
        Q = _spd(rng, 6, cond=10.0)
        P = lyapunov_solve(A, Q)
        assert lyapunov_residual(A, P, Q) <= 1e-8
        assert np.allclose(P, P.T)


class TestRadius:
    def test_substitution(self):
        assert rpi_radius(np.eye(3), 4 * np.eye(3), 1.0, 1.0) == pytest.approx(1.0, rel=1e-15)

    def test_zero_lipschitz(self):
        assert rpi_radius(np.eye(3), 2 * np.eye(3), 0.0, 0.5) == pytest.approx(0.5, rel=1e-15)

    def test_infeasible_reports_gap(self):
        with pytest.raises(TubeInfeasibleError) as exc:
            rpi_radius(np.eye(3), 2 * np.eye(3), 1.0, 1.0)
        assert exc.value.decay_margin == pytest.approx(1.0)
        assert exc.value.gap == pytest.approx(0.0)

    def test_q_scaling_leaves_margin(self, rng):
        A = closed_loop(ancillary_gains((-2.0, -3.0, -4.0), 3, 2), 3, 2)
        Q = _spd(rng, 6)
        m1 = decay_margin(lyapunov_solve(A, Q), Q)
        m2 = decay_margin(lyapunov_solve(A, 7.5 * Q), 7.5 * Q)
        assert m1 == pytest.approx(m2, rel=1e-10)

    def test_synthesize_closed_form_tube(self):
        K = ancillary_gains((-1.5, -1.5, -1.5), 3, 2)
        tube = synthesize_tube(K, 3, 2, 0.0, 0.1)
        tube.validate(3, 2)
        assert tube.rho == pytest.approx(rpi_radius(tube.P, tube.Q, 0.0, 0.1))

    def test_best_margin_dominates_identity_q(self):
        A = closed_loop(gains_from_vector(GAIN_VECTOR, 3, 2), 3, 2)
        best, P, Q = best_decay_margin(A)
        ident = decay_margin(lyapunov_solve(A, np.eye(6)), np.eye(6))
        assert best >= ident * (1 - 1e-6)
        assert lyapunov_residual(A, P, Q) <= 1e-6


class TestEllipsoid:
    def test_support_sphere(self):
        assert support(Ellipsoid(np.eye(2), 1.0), (3.0, 4.0)) == pytest.approx(5.0, rel=1e-15)

    def test_support_diag(self):
        e = Ellipsoid(np.diag([4.0, 1.0]), 2.0)
        assert support(e, (1.0, 0.0)) == pytest.approx(1.0, rel=1e-15)

    def test_support_zero(self):
        assert support(Ellipsoid(np.eye(3), 2.0), np.zeros(3)) == 0.0

    def test_contains(self):
        e = Ellipsoid(np.diag([4.0, 1.0, 0.5]), 0.7)
        g = np.array([0.3, -1.0, 2.0])
        z = support_maximizer(e, g)
        assert contains(e, np.zeros(3))
        assert contains(e, z)
        assert not contains(e, 1.01 * z)
        assert g @ z == pytest.approx(support(e, g), rel=1e-14)

    def test_bad_matrices(self):
        with pytest.raises(ConfigurationError):
            Ellipsoid(np.array([[1.0, 0.5], [0.0, 1.0]]), 1.0)
        with pytest.raises(ConfigurationError):
            Ellipsoid(-np.eye(2), 1.0)
        with pytest.raises(ConfigurationError):
            Ellipsoid(np.eye(2), -1.0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 31), st.floats(0.0, 5.0), st.floats(0.0, 10.0))
    def test_support_sublinear(self, seed, rho, scale):
        rng = np.random.default_rng(seed)
        e = Ellipsoid(_spd(rng, 6), rho)
        g1, g2 = rng.standard_normal((2, 6))
        assert support(e, scale * g1) == pytest.approx(scale * support(e, g1), rel=1e-12,
                                                       abs=1e-14)
        assert support(e, g1 + g2) <= support(e, g1) + support(e, g2) + 1e-12
        # no random point of the ellipsoid beats the support value
        s = rng.standard_normal((200, 6))
        s /= np.linalg.norm(s, axis=1, keepdims=True)
        L = np.linalg.cholesky(e.P)
        z = rho * np.linalg.solve(L.T, s.T).T
        assert np.all(z @ g1 <= support(e, g1) * (1 + 1e-12) + 1e-14)


class TestBoxTighten:
    def test_unit_sphere(self):
        lo, hi = box_tighten((-np.ones(2), np.ones(2)), Ellipsoid(np.eye(2), 0.25))
        np.testing.assert_allclose(lo, [-0.75, -0.75])
        np.testing.assert_allclose(hi, [0.75, 0.75])

    def test_zero_radius(self):
        box = (np.array([-1.0, -2.0]), np.array([3.0, 4.0]))
        lo, hi = box_tighten(box, Ellipsoid(np.eye(2), 0.0))
        np.testing.assert_array_equal(lo, box[0])
        np.testing.assert_array_equal(hi, box[1])

    def test_infeasible(self):
        with pytest.raises(InfeasibleTighteningError):
            box_tighten((np.array([-1.0]), np.array([1.0])), Ellipsoid(np.eye(1), 1.5))

    def test_infinite_bounds_untouched(self):
        lo, hi = box_tighten((np.array([-np.inf]), np.array([1.0])), Ellipsoid(np.eye(1), 0.5))
        assert lo[0] == -np.inf and hi[0] == 0.5

    def test_input_map(self):
        K = np.array([[2.0, 0.0], [0.0, 3.0]])
        lo, hi = box_tighten((-10 * np.ones(2), 10 * np.ones(2)), Ellipsoid(np.eye(2), 1.0), K)
        np.testing.assert_allclose(hi, [8.0, 7.0])


class TestSProcedure:
    def test_linear_case_certificate(self):
        K = ancillary_gains((-2.0, -2.0, -2.0), 3, 2)
        tube = sprocedure_tube(K, 3, 2, L_f=0.5, w_bar=0.1)
        tube.validate(3, 2)
        assert tube.certificate == "s-procedure"

    def test_infeasible_lipschitz(self):
        K = ancillary_gains((-1.0, -1.0, -1.0), 3, 2)
        with pytest.raises(TubeInfeasibleError):
            sprocedure_tube(K, 3, 2, L_f=50.0, w_bar=0.1, alphas=[1e-2, 1e-1])

    def test_preset_tubes_validate(self, five_tubes):
        for tb in five_tubes:
            tb.validate(3, 2)
            assert tb.rho > 0
