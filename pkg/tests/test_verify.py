from dataclasses import replace

import numpy as np
import pytest

from tubecbf.barrier import ObstacleBarrier, PairBarrier
from tubecbf.errors import ConfigurationError, NumericError
from tubecbf.model import DriftSpec
from tubecbf.simulator import run
from tubecbf.tube import Ellipsoid, ancillary_gains, support, synthesize_tube
from tubecbf.verify import (OracleReport, forward_invariance_report, lie_fd_oracle,
                            rpi_monte_carlo, support_oracle, tighten_bound_check,
                            tube_containment_report)

ZERO = DriftSpec("custom-polynomial", {"coefficients": [[0.0]]}, 3, 2)


def _tube(w_bar):
    return synthesize_tube(ancillary_gains((-2.0, -2.5, -3.0), 3, 2), 3, 2, 0.0, w_bar)


class TestReport:
    def test_pass_rule(self):
        r = OracleReport("x", 1, -1e-7, 1e-6, True)
        assert "PASS" in r.line() or "pass" in r.line().lower()
        assert r.as_dict()["worst"] == -1e-7


class TestSupportOracle:
    def test_maximizer_makes_it_exact(self, rng):
        for _ in range(20):
            A = rng.standard_normal((6, 6))
            e = Ellipsoid(A @ A.T + 0.1 * np.eye(6), rng.uniform(0.1, 2))
            g = rng.standard_normal(6)
            assert support_oracle(e, g) == pytest.approx(support(e, g), rel=1e-12)

    def test_sphere(self):
        e = Ellipsoid(np.eye(3), 0.5)
        assert support_oracle(e, (1.0, 2.0, 2.0)) == pytest.approx(1.5, rel=1e-14)

    def test_zero_direction(self):
        assert support_oracle(Ellipsoid(np.eye(2), 1.0), np.zeros(2)) == 0.0

    def test_random_never_exceeds(self, rng):
        A = rng.standard_normal((6, 6))
        e = Ellipsoid(A @ A.T + np.eye(6), 1.3)
        g = rng.standard_normal(6)
        est = support_oracle(e, g, samples=5000, include_maximizer=False)
        assert est <= support(e, g) * (1 + 1e-12)

    def test_deterministic(self):
        e = Ellipsoid(np.diag([1.0, 2.0, 3.0]), 1.0)
        a = support_oracle(e, (1.0, -1.0, 0.5), seed=7, include_maximizer=False)
        b = support_oracle(e, (1.0, -1.0, 0.5), seed=7, include_maximizer=False)
        assert a == b


class TestRpi:
    def test_degenerate_tube(self):
        r = rpi_monte_carlo(_tube(0.0).with_rho(0.0), ZERO, trials=10, w_bar=0.0)
        assert r.passed and r.details["max_ratio"] == 0.0

    def test_linear_drift_at_bound(self):
        tube = _tube(0.1)
        r = rpi_monte_carlo(tube, ZERO, trials=200, horizon=2.0, seed=3)
        assert r.passed, r.details
        assert r.details["max_ratio"] <= 1 + 1e-6

    def test_undersized_tube_fails(self):
        # the closed-form radius is conservative, so shrink it well below the true extent
        tube = _tube(0.1)
        r = rpi_monte_carlo(tube.with_rho(0.02 * tube.rho), ZERO, trials=50, horizon=5.0)
        assert not r.passed

    def test_preset_follower_one(self, five_cfg, five_tubes):
        a = five_cfg.agents[0]
        r = rpi_monte_carlo(five_tubes[0], a.drift, trials=200, horizon=0.5,
                            box=a.tube.lipschitz_box)
        assert r.passed, r.details

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigurationError):
            rpi_monte_carlo(_tube(0.1), DriftSpec("custom-polynomial", {}, 2, 2), trials=2)


class TestLieOracle:
    def test_static_configuration(self):
        ob = ObstacleBarrier((0.0, 0.0), 0.5)
        x = np.array([1.0, 1.0, 0, 0, 0, 0])
        for q in (1, 2, 3):
            assert abs(lie_fd_oracle(ob, x, ZERO, q)) <= 1e-9

    def test_first_order_closed_form(self, rng):
        b = PairBarrier(0.5)
        xi, xj = rng.standard_normal((2, 6))
        dp, dv = xi[:2] - xj[:2], xi[2:4] - xj[2:4]
        got = lie_fd_oracle(b, (xi, xj), (DriftSpec("follower1"), DriftSpec("follower4")), 1)
        assert got == pytest.approx(2 * dp @ dv, abs=1e-6)

    def test_bad_order_and_step(self):
        ob = ObstacleBarrier((0.0, 0.0), 0.5)
        with pytest.raises(ConfigurationError):
            lie_fd_oracle(ob, np.zeros(6), ZERO, 4)
        with pytest.raises(NumericError):
            lie_fd_oracle(ob, np.zeros(6), ZERO, 1, h=1e-9)


class TestTightenCheck:
    def test_zero_radius_is_equality(self):
        e = Ellipsoid(np.eye(6), 0.0)
        r = tighten_bound_check(PairBarrier(0.5), [e, e], samples=300)
        assert r.worst == pytest.approx(0.0, abs=1e-12)

    def test_sphere_minimizer_tight(self):
        # the linear term is matched exactly; what is left is |z_i - z_j|^2 >= 0
        e = Ellipsoid(np.eye(6), 0.2)
        r = tighten_bound_check(ObstacleBarrier((0.0, 0.0), 0.5), e, samples=3000)
        assert r.passed and r.worst >= -1e-12
        assert r.worst <= 0.2 ** 2 + 1e-12

    def test_preset_tubes(self, five_tubes):
        r = tighten_bound_check(PairBarrier(0.5), five_tubes[:2], samples=3000)
        assert r.passed

    def test_wrong_number_of_tubes(self):
        with pytest.raises(ConfigurationError):
            tighten_bound_check(PairBarrier(0.5), [Ellipsoid(np.eye(6), 0.1)], samples=10)


@pytest.fixture(scope="module")
def log(two_cfg):
    return run(replace(two_cfg, steps=6))


class TestLogReports:
    def test_clean_log_passes(self, log):
        r = forward_invariance_report(log)
        assert r.passed and r.details["hypothesis_ok"]
        assert tube_containment_report(log).passed

    def test_negative_value_flagged(self, log):
        bad = log.slice(0, log.steps)
        bad.h_obs = bad.h_obs.copy()
        bad.h_obs[4, 1, 0] = -0.3
        r = forward_invariance_report(bad)
        assert not r.passed
        assert r.details["worst_at"] == {"kind": "obstacle", "agent": 1, "obstacle": 0, "step": 4}

    def test_hypothesis_flagged_separately(self, log):
        bad = log.slice(0, log.steps)
        bad.initial_pair_stacks = bad.initial_pair_stacks.copy()
        bad.initial_pair_stacks[0, 1] = -1.0
        r = forward_invariance_report(bad)
        assert r.passed
        assert not r.details["hypothesis_ok"]
        assert r.details["hypothesis_violations"] == [{"kind": "pair", "pair": [0, 1]}]

    def test_containment_breach(self, log):
        bad = log.slice(0, log.steps)
        bad.V_max = bad.V_max.copy()
        bad.V_max[2, 0] = 1.5 * log.rho[0] ** 2
        r = tube_containment_report(bad)
        assert not r.passed and r.details["max_ratio"] == pytest.approx(1.5)
