from dataclasses import replace

import numpy as np
import pytest

from tubecbf.barrier import ObstacleBarrier
from tubecbf.errors import ConfigurationError
from tubecbf.simulator import (TrajectoryLog, ancillary_input, metrics, run, synthesize_tubes,
                               with_overrides)


@pytest.fixture(scope="module")
def short_log(two_cfg):
    return run(replace(two_cfg, steps=12))


class TestAncillary:
    def test_zero_error(self, rng):
        ub = rng.standard_normal(2)
        x = rng.standard_normal(6)
        np.testing.assert_array_equal(ancillary_input(ub, x, x, rng.standard_normal((2, 6))), ub)

    def test_position_gain(self):
        K = np.zeros((2, 6))
        K[:, :2] = np.eye(2)
        z = np.zeros(6)
        z[0] = 1.0
        np.testing.assert_array_equal(ancillary_input(np.zeros(2), z, np.zeros(6), K), [-1, 0])

    def test_random_matches_product(self, rng):
        ub, x, xb = rng.standard_normal(2), rng.standard_normal(6), rng.standard_normal(6)
        K = rng.standard_normal((2, 6))
        ref = ub - np.array([sum(K[r, c] * (x[c] - xb[c]) for c in range(6)) for r in range(2)])
        np.testing.assert_allclose(ancillary_input(ub, x, xb, K), ref, rtol=1e-13, atol=1e-14)


class TestRun:
    def test_shapes_and_safety(self, short_log):
        assert short_log.steps == 12
        assert short_log.x.shape == (12, 2, 6)
        assert metrics(short_log).min_h >= -1e-9
        np.testing.assert_allclose(short_log.t, 0.1 * np.arange(12), atol=1e-12)

    def test_determinism(self, two_cfg, short_log):
        again = run(replace(two_cfg, steps=12))
        assert again.digest() == short_log.digest()
        np.testing.assert_array_equal(again.x, short_log.x)

    def test_zero_disturbance_lockstep(self, two_cfg):
        log = run(replace(two_cfg, steps=8, disturbances=False))
        np.testing.assert_array_equal(log.x, log.x_bar)
        np.testing.assert_array_equal(log.final_x, log.final_x_bar)

    def test_initial_error_outside_tube(self, two_cfg):
        a = two_cfg.agents[0]
        xb = a.x0.copy()
        xb[0] += 5.0
        agents = (replace(a, x_bar0=xb),) + two_cfg.agents[1:]
        with pytest.raises(ConfigurationError):
            run(replace(two_cfg, agents=agents, steps=2))

    def test_nominal_convergence(self, two_cfg):
        lead = two_cfg.leader.x0
        agents = []
        for a, off, kick in zip(two_cfg.agents, [(0.0, 0.6), (0.0, -0.6)], [(0.2, 0.1), (-0.1, 0.2)]):
            x0 = lead.copy()
            x0[:2] += np.add(off, kick)
            agents.append(replace(a, x0=x0, x_bar0=x0))
        cfg = replace(two_cfg, agents=tuple(agents), tighten=False, disturbances=False,
                      obstacles=(ObstacleBarrier((30.0, 30.0), 0.3, 0.1),), steps=300)
        log = run(cfg)
        assert log.formation_error[-1].max() <= 1e-2

    def test_with_overrides(self, two_cfg):
        cfg = with_overrides(two_cfg, ecbf_mode="first-node", steps=3)
        assert cfg.ocp.ecbf_mode == "first-node" and cfg.steps == 3

    def test_tubes_are_cached(self, five_cfg):
        a, b = synthesize_tubes(five_cfg), synthesize_tubes(five_cfg)
        assert all(x is y for x, y in zip(a, b))


class TestMetrics:
    def test_single_step(self, short_log):
        one = short_log.slice(3, 4)
        m = metrics(one)
        np.testing.assert_array_equal(
            m.min_h_pair, np.minimum(one.h_pair[0], one.h_pair_min[0]))
        np.testing.assert_array_equal(m.formation_max, one.formation_error[0])
        np.testing.assert_array_equal(m.formation_final, one.formation_error[0])

    def test_concatenation(self, short_log):
        a, b, full = metrics(short_log.slice(0, 5)), metrics(short_log.slice(5, 12)), \
            metrics(short_log)
        np.testing.assert_array_equal(full.min_h_pair, np.minimum(a.min_h_pair, b.min_h_pair))
        np.testing.assert_array_equal(full.min_h_obs, np.minimum(a.min_h_obs, b.min_h_obs))
        np.testing.assert_array_equal(full.max_tube_ratio,
                                      np.maximum(a.max_tube_ratio, b.max_tube_ratio))
        np.testing.assert_array_equal(full.formation_max,
                                      np.maximum(a.formation_max, b.formation_max))

    def test_recomputation(self, two_cfg, short_log):
        # row-by-row recomputation of the logged barrier and tube values
        tubes = synthesize_tubes(two_cfg)
        ob = two_cfg.obstacles[0]
        for k in range(10):
            x, xb = short_log.x[k], short_log.x_bar[k]
            dp = x[0, :2] - x[1, :2]
            assert short_log.h_pair[k, 0] == pytest.approx(dp @ dp - two_cfg.d_min ** 2,
                                                           rel=1e-12, abs=1e-14)
            for i in range(2):
                c = x[i, :2] - np.asarray(ob.center)
                assert short_log.h_obs[k, i, 0] == pytest.approx(
                    c @ c - ob.effective_radius ** 2, rel=1e-12, abs=1e-14)
                z = x[i] - xb[i]
                assert short_log.V[k, i] == pytest.approx(z @ tubes[i].P @ z, rel=1e-12,
                                                          abs=1e-300)

    def test_empty_log(self, short_log):
        with pytest.raises(ConfigurationError):
            metrics(short_log.slice(0, 0))


class TestLogIO:
    def test_roundtrip(self, tmp_path, short_log):
        path = tmp_path / "log.npz"
        short_log.save(path)
        back = TrajectoryLog.load(path)
        assert back.digest() == short_log.digest()
        assert back.pairs == short_log.pairs
        assert list(back.status.ravel()) == list(short_log.status.ravel())

    def test_table(self, short_log):
        tab = short_log.table()
        assert tab.shape == (12 * 3 * 6, 7)
        leader_rows = tab[tab[:, 1] == -1]
        np.testing.assert_array_equal(leader_rows[:, 4], leader_rows[:, 5])
