"""
Tests for window statistics, task construction, activation and the task distribution.
"""
import math
import os
import sys

import numpy as np
import pytest
from scipy.stats import chi2_contingency

# Add the lab directory to the path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from metarate.config import LabConfig
from metarate.errors import DistributionError
from metarate.models import NetTrace, NetworkState, StateRanges, WindowStats
from metarate.taskspace import (
    TaskDistribution, continuity_report, fit_distribution, make_task, sample_task, should_activate,
    trace_series, window_stats,
)

FLOORS = (0.2, 0.2, 2.0, 3.0)


def _task(mu=1.0, sigma=0.0, omega=0.0, d_prop=40.0, delta=(0.2, 0.2, 2.0, 3.0)):
    return NetworkState(mu=mu, sigma=sigma, omega=omega, d_prop=d_prop, delta=StateRanges(*delta))


def _stats(mu=1.0, sigma=0.0, omega=0.0, d_prop=40.0):
    return WindowStats(mu=mu, sigma=sigma, omega=omega, d_prop=d_prop, window_len=8)


class TestWindowStats:
    def test_constant(self):
        stats = window_stats([1.0] * 8, 40.0)
        assert (stats.mu, stats.sigma, stats.omega) == (1.0, 0.0, 0.0)

    def test_alternating(self):
        stats = window_stats([1, 2] * 4, 40.0)
        assert stats.mu == pytest.approx(1.5)
        assert stats.sigma == pytest.approx(0.5)
        assert stats.omega == pytest.approx(7.0)

    def test_warming_up(self):
        assert window_stats([1.0] * 7, 40.0) is None

    def test_uses_last_window(self):
        stats = window_stats([5.0] * 4 + [1.0] * 8, 40.0)
        assert stats.mu == 1.0

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            seq = list(rng.uniform(0, 5, 8))
            stats = window_stats(seq, 30.0)
            mean = sum(seq) / 8
            std = math.sqrt(sum((x - mean) ** 2 for x in seq) / 8)
            omega = sum(abs(seq[i] - seq[i - 1]) for i in range(1, 8))
            assert stats.mu == pytest.approx(mean, rel=1e-12)
            assert stats.sigma == pytest.approx(std, rel=1e-9)
            assert stats.omega == pytest.approx(omega, rel=1e-12)
            assert stats.sigma >= 0 and stats.omega >= 0


class TestMakeTask:
    def test_no_predecessor_uses_floors(self):
        task = make_task(_stats(), None, FLOORS)
        assert task.delta.as_tuple() == FLOORS
        assert task.center() == (1.0, 0.0, 0.0, 40.0)

    def test_same_stats_uses_floors(self):
        assert make_task(_stats(), _stats(), FLOORS).delta.as_tuple() == FLOORS

    def test_large_change_widens_range(self):
        task = make_task(_stats(mu=1.5, sigma=0.25, omega=1.0), _stats(mu=1.0, sigma=0.2, omega=0.5), FLOORS)
        assert task.delta.mu == pytest.approx(0.5)
        assert task.delta.sigma == pytest.approx(0.2)
        assert task.delta.omega == 2.0
        assert task.delta.dprop == 3.0


class TestShouldActivate:
    def test_drift_beyond_half_range(self):
        assert should_activate(_stats(mu=1.11), _task())

    def test_boundary_is_strict(self):
        assert not should_activate(_stats(mu=1.10), _task())

    def test_at_center(self):
        assert not should_activate(_stats(), _task())

    def test_dprop_drift(self):
        assert should_activate(_stats(d_prop=41.6), _task())
        assert not should_activate(_stats(d_prop=41.4), _task())


def _constant_trace(bw, prop, n=40, id="c"):
    return NetTrace.from_arrays([bw] * n, prop, id=id)


class TestDistribution:
    def test_point_mass(self):
        cfg = LabConfig()
        dist = fit_distribution([_constant_trace(1.0, 20.0)], cfg, source="trace")
        assert dist.n_joint_bins == 1
        rng = np.random.default_rng(0)
        for _ in range(20):
            task = sample_task(dist, rng)
            assert task.center() == (1.0, 0.0, 0.0, 40.0)
            assert task.delta.as_tuple() == cfg.min_delta

    def test_corpus_too_small(self):
        with pytest.raises(DistributionError):
            fit_distribution([_constant_trace(1.0, 20.0, n=10)], LabConfig(), source="trace")
        with pytest.raises(DistributionError):
            fit_distribution([], LabConfig(), source="trace")

    def test_save_load(self, tmp_path):
        cfg = LabConfig()
        corpus = [_constant_trace(1.0, 20.0, id="a"),
                  NetTrace.from_arrays([1.0, 2.0] * 20, 40.0, id="b")]
        dist = fit_distribution(corpus, cfg, source="trace")
        loaded = TaskDistribution.load(dist.save(tmp_path / "dist.json"))
        rng_a, rng_b = np.random.default_rng(5), np.random.default_rng(5)
        assert [sample_task(dist, rng_a) for _ in range(10)] == [sample_task(loaded, rng_b) for _ in range(10)]

    def test_load_rejects_bad_file(self, tmp_path):
        path = tmp_path / "dist.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(DistributionError):
            TaskDistribution.load(path)
        with pytest.raises(DistributionError):
            TaskDistribution.load(tmp_path / "missing.json")

    def test_refit_matches_bin_masses(self):
        cfg = LabConfig()
        corpus = [
            _constant_trace(1.0, 20.0, n=60, id="a"),
            _constant_trace(2.0, 40.0, n=30, id="b"),
            NetTrace.from_arrays([1.0, 2.0] * 20, 30.0, id="c"),
        ]
        dist = fit_distribution(corpus, cfg, source="trace")
        rng = np.random.default_rng(11)
        n = 10_000
        tasks = [sample_task(dist, rng) for _ in range(n)]
        obs = np.array([[t.mu, t.sigma, t.omega, t.d_prop, *t.delta.as_tuple()] for t in tasks])
        refit = TaskDistribution.from_observations(obs, cfg)
        original = {tuple(b): m for b, m in zip(dist.joint.bins, dist.joint.mass)}
        refitted = {tuple(b): m for b, m in zip(refit.joint.bins, refit.joint.mass)}
        assert set(refitted) == set(original)
        for key, p in original.items():
            tolerance = 3 * math.sqrt(p * (1 - p) / n) + 1.0 / n
            assert abs(refitted[key] - p) <= tolerance

    def test_dprop_independent_of_joint(self):
        """Sampled d_prop carries no information about the sampled bandwidth state."""
        cfg = LabConfig()
        corpus = [_constant_trace(1.0, 10.0, n=40, id="a"), _constant_trace(2.0, 40.0, n=40, id="b")]
        dist = fit_distribution(corpus, cfg, source="trace")
        rng = np.random.default_rng(2)
        table = np.zeros((2, 2))
        for _ in range(4000):
            task = sample_task(dist, rng)
            table[int(task.mu > 1.5), int(task.d_prop > 50.0)] += 1
        assert table.min() > 0
        _, p_value, _, _ = chi2_contingency(table)
        assert p_value > 1e-3


def test_trace_series_doubles_prop_delay():
    b, d = trace_series(_constant_trace(1.0, 25.0, n=3))
    assert list(b) == [1.0, 1.0, 1.0]
    assert list(d) == [50.0, 50.0, 50.0]


def test_continuity_report_constant_series():
    cfg = LabConfig()
    rows = continuity_report([trace_series(_constant_trace(1.0, 20.0))], cfg, delta_ts=(1, 4))
    assert [r.delta_t_s for r in rows] == [1, 4]
    for row in rows:
        assert row.bandwidth_covered == 1.0
        assert row.mu_covered == row.sigma_covered == row.omega_covered == row.dprop_covered == 1.0
