"""
Tests for synthetic trajectory generation.
"""
import math
import os
import sys

import numpy as np
import pytest
from scipy import stats

# Add the lab directory to the path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from metarate.config import LabConfig
from metarate.errors import TrajectoryGenerationError
from metarate.models import NetTrace, NetworkState, StateRanges
from metarate.tracegen import (
    TaskEnvironment, beta_parameters, draw_pool, find_segments, generate_trajectory, sample_center,
    switching_trajectory, trajectory_fits, uses_gaussian,
)


def _task(mu=1.0, sigma=0.2, omega=2.0, d_prop=40.0, delta=(0.2, 0.2, 2.0, 3.0)):
    return NetworkState(mu=mu, sigma=sigma, omega=omega, d_prop=d_prop, delta=StateRanges(*delta))


class TestSampleCenter:
    def test_zero_ranges_give_center(self):
        task = _task(delta=(0.0, 0.0, 0.0, 0.0))
        assert sample_center(task, np.random.default_rng(0)) == (1.0, 0.2, 40.0)

    def test_draws_stay_in_range(self):
        task = _task(mu=0.1, sigma=0.05)
        rng = np.random.default_rng(1)
        for _ in range(500):
            mu, sigma, d_prop = sample_center(task, rng)
            assert 0.0 <= mu <= 0.1 + 0.2 + 1e-12
            assert 0.0 <= sigma <= 0.05 + 0.2 + 1e-12
            assert abs(d_prop - 40.0) <= 3.0 + 1e-12

    def test_each_attribute_has_its_own_bounds(self):
        task = _task(mu=3.9, sigma=1.95, d_prop=1.0, delta=(0.5, 0.5, 2.0, 3.0))
        rng = np.random.default_rng(3)
        draws = np.array([sample_center(task, rng, max_bw=4.0) for _ in range(500)])
        assert draws[:, 0].max() <= 4.0
        assert draws[:, 0].min() >= 3.4 - 1e-12
        assert draws[:, 1].max() <= 2.0
        assert draws[:, 2].min() >= 0.0
        assert draws[:, 2].max() <= 4.0 + 1e-12

    def test_center_is_most_likely(self):
        task = _task()
        rng = np.random.default_rng(2)
        mus = np.array([sample_center(task, rng)[0] for _ in range(4000)])
        near = np.mean(np.abs(mus - 1.0) < 0.05)
        edge = np.mean(np.abs(mus - 1.15) < 0.05)
        assert near > edge


class TestDistributions:
    def test_three_sigma_rule(self):
        assert uses_gaussian(1.0, 0.2, 4.0)
        assert not uses_gaussian(0.1, 0.5, 3.0)
        assert not uses_gaussian(3.8, 0.1, 4.0)

    def test_beta_moments(self):
        a, b, mu, sigma = beta_parameters(0.1, 0.5, 3.0)
        assert (mu, sigma) == (0.1, 0.5)
        dist = stats.beta(a, b, scale=3.0)
        assert dist.mean() == pytest.approx(0.1, abs=1e-9)
        assert dist.std() == pytest.approx(0.5, abs=1e-9)

    def test_infeasible_sigma_is_clamped(self):
        _, _, mu, sigma = beta_parameters(0.1, 1.0, 3.0)
        assert mu == 0.1
        assert sigma == pytest.approx(math.sqrt(0.99 * 0.1 * 2.9))

    def test_beta_pool_within_bounds(self):
        pool = draw_pool(0.1, 0.5, 1000, 3.0, np.random.default_rng(4))
        assert pool.min() >= 0.0
        assert pool.max() <= 3.0

    def test_zero_sigma_pool_is_constant(self):
        assert np.all(draw_pool(1.3, 0.0, 20, 4.0, np.random.default_rng(0)) == 1.3)


class TestGenerate:
    def test_constant_task(self):
        task = _task(sigma=0.0, omega=0.0, delta=(0.2, 0.0, 2.0, 3.0))
        trace = generate_trajectory(task, 30, 4.0, np.random.default_rng(0))
        assert len(trace) == 30
        assert len(set(trace.bandwidths)) == 1
        assert abs(trace.bandwidths[0] - 1.0) <= 0.2

    def test_every_trajectory_fits_the_box(self):
        cfg = LabConfig()
        task = _task()
        rng = np.random.default_rng(9)
        for i in range(5):
            trace = generate_trajectory(task, 30, 4.0, rng, cfg, trace_id=f"t{i}")
            assert trajectory_fits(np.asarray(trace.bandwidths), task, cfg.window_s)
            assert np.all(trace.bandwidths >= 0) and np.all(trace.bandwidths <= 4.0)
            # Constant propagation delay, stored one-way.
            assert len(set(trace.prop_delays)) == 1
            assert abs(2 * trace.prop_delays[0] - 40.0) <= 3.0 + 1e-9

    def test_deterministic(self):
        task = _task()
        a = generate_trajectory(task, 30, 4.0, np.random.default_rng(42))
        b = generate_trajectory(task, 30, 4.0, np.random.default_rng(42))
        assert a == b

    def test_infeasible_task_raises(self):
        cfg = LabConfig(pools_per_task=2, orderings_per_pool=3)
        task = _task(mu=1.0, sigma=1.0, omega=5.0, delta=(0.0, 0.0, 0.0, 0.0))
        with pytest.raises(TrajectoryGenerationError) as err:
            generate_trajectory(task, 20, 4.0, np.random.default_rng(0), cfg)
        assert "mu=1.000" in str(err.value)

    def test_too_short(self):
        with pytest.raises(ValueError):
            generate_trajectory(_task(), 5, 4.0, np.random.default_rng(0))


def test_find_segments_matches_constant_trace():
    cfg = LabConfig()
    corpus = [NetTrace.from_arrays([1.0] * 40, 20.0, id="flat"),
              NetTrace.from_arrays([3.0] * 40, 20.0, id="high")]
    task = _task(sigma=0.0, omega=0.0)
    segments = find_segments(corpus, task, 20, cfg)
    assert [s.id for s in segments] == ["flat@0", "flat@20"]


def test_task_environment_uses_real_segments():
    cfg = LabConfig(real_fraction=0.5, episodes_per_task=4, episode_s=20)
    corpus = [NetTrace.from_arrays([1.0] * 80, 20.0, id="flat")]
    env = TaskEnvironment.build(_task(sigma=0.0, omega=0.0), cfg, np.random.default_rng(0), corpus=corpus)
    assert len(env.traces) == 4
    assert sum(t.id.startswith("flat@") for t in env.traces) == 2
    assert all(len(t) == 20 for t in env.traces)


def test_switching_trajectory_concatenates_segments():
    tasks = [_task(mu=0.5, sigma=0.0, omega=0.0), _task(mu=2.0, sigma=0.0, omega=0.0)]
    trace = switching_trajectory(tasks, 20, 4.0, np.random.default_rng(0))
    assert len(trace) == 40
    assert abs(np.mean(trace.bandwidths[:20]) - 0.5) <= 0.2
    assert abs(np.mean(trace.bandwidths[20:]) - 2.0) <= 0.2
