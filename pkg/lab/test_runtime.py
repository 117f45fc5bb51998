"""
Tests for the online runtime: parameter store, cache, monitoring and meta-test scheduling.
"""
import asyncio
import os
import sys
import threading
import time

import numpy as np
import pytest

# Add the lab directory to the path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from metarate.config import LabConfig
from metarate.models import (LinkFeedback, MetaTestResult, NetTrace, NetworkState, RuntimeEventKind,
                             StateRanges)
from metarate.policy import PolicyParams, init_params, zero_params
from metarate.runtime import (
    OnlineRuntime, ParamCache, ParamStore, quantize_key, save_events, serve_realtime,
)

CFG = LabConfig(hidden_sizes=(8, 8, 8), episode_s=10.0, episodes_per_task=2, inner_steps=1)
SIZES = CFG.layer_sizes()


def _params(seed):
    return init_params(SIZES, np.random.default_rng(seed))


def _task(mu=1.0, sigma=0.0, omega=0.0, d_prop=40.0):
    return NetworkState(mu=mu, sigma=sigma, omega=omega, d_prop=d_prop, delta=StateRanges(0.2, 0.2, 2.0, 3.0))


def _full_pipe_fb(t, eta):
    # 10% loss keeps the estimator in the full-pipe branch, so b_hat equals throughput.
    return LinkFeedback(t=float(t), throughput=eta, loss_ratio=0.1, delay=40.0)


def _feed(runtime, etas, start=1):
    activations = []
    for i, eta in enumerate(etas):
        t = start + i
        task = runtime.monitor_step(_full_pipe_fb(t, eta), float(t))
        if task is not None:
            activations.append((t, task))
    return activations


def _kinds(runtime):
    return [e.kind for e in runtime.events]


class TestCache:
    def test_lfu_eviction(self):
        cache = ParamCache(_params(0), capacity=2)
        a, b, c = (1, 0, 0, 8), (2, 0, 0, 8), (3, 0, 0, 8)
        cache.put(a, _params(1))
        cache.put(b, _params(2))
        assert cache.get(a) is not None
        assert cache.put(c, _params(3)) == b
        assert a in cache and c in cache and b not in cache
        assert cache.count(a) == 2

    def test_ties_evict_least_recent(self):
        cache = ParamCache(_params(0), capacity=2)
        cache.put((1, 0, 0, 0), _params(1))
        cache.put((2, 0, 0, 0), _params(2))
        assert cache.put((3, 0, 0, 0), _params(3)) == (1, 0, 0, 0)

    def test_theta0_is_permanent(self):
        theta0 = _params(0)
        cache = ParamCache(theta0, capacity=1)
        for i in range(5):
            cache.put((i, 0, 0, 0), _params(i + 1))
        assert cache.theta0 is theta0
        assert len(cache) == 1

    def test_miss(self):
        assert ParamCache(_params(0)).get((0, 0, 0, 0)) is None


def test_quantize_key():
    assert quantize_key(_task(mu=1.04, sigma=0.26, omega=3.4, d_prop=42.0), CFG) == (10, 3, 3, 8)
    assert quantize_key(_task(mu=1.06), CFG) == (11, 0, 0, 8)


class TestParamStore:
    def test_publish_increments_generation(self):
        store = ParamStore(_params(0))
        assert store.generation == 0
        assert store.publish(_params(1)) == 1
        assert store.read()[0] == 1

    def test_refuses_non_finite(self):
        weights = _params(1).to_dict()
        weights["W0"][0, 0] = np.inf
        with pytest.raises(ValueError):
            ParamStore(_params(0)).publish(PolicyParams(weights))

    def test_readers_always_see_matching_pairs(self):
        published = [_params(i) for i in range(101)]
        store = ParamStore(published[0])
        runtime = OnlineRuntime(published[0], CFG, meta_test=False)
        runtime.store = store
        mismatches = []
        generations = []
        state = np.random.default_rng(0).normal(size=CFG.state_dim())

        def reader():
            for _ in range(2500):
                generation, params = store.read()
                if params is not published[generation]:
                    mismatches.append(generation)
                generations.append(runtime.infer(state, 1.0).generation)

        threads = [threading.Thread(target=reader) for _ in range(4)]
        for th in threads:
            th.start()
        for params in published[1:]:
            store.publish(params)
        for th in threads:
            th.join()
        runtime.close()
        assert not mismatches
        assert len(generations) == 10_000
        assert set(generations) <= set(range(101))


class TestMonitoring:
    def test_constant_network_never_activates(self):
        runtime = OnlineRuntime(_params(0), CFG, meta_test=False)
        activations = _feed(runtime, [1.0] * 60)
        runtime.close()
        assert activations == []
        assert _kinds(runtime) == [RuntimeEventKind.TASK_FORMED]
        assert runtime.events[0].t == 8.0
        assert runtime.status.current_task.mu == pytest.approx(1.0)

    def test_step_change_activates_quickly(self):
        runtime = OnlineRuntime(_params(0), CFG, meta_test=False)
        activations = _feed(runtime, [1.0] * 15 + [1.3] * 15)
        runtime.close()
        assert activations
        first_t, task = activations[0]
        assert 16 <= first_t <= 18
        assert task.delta.mu >= 0.2
        assert runtime.status.last_activation_t is not None

    def test_frozen_never_swaps(self):
        runtime = OnlineRuntime(_params(0), CFG, meta_test=False)
        _feed(runtime, [1.0] * 15 + [2.0] * 15)
        runtime.close()
        assert runtime.store.generation == 0
        assert RuntimeEventKind.SWAP not in _kinds(runtime)
        assert RuntimeEventKind.ACTIVATION in _kinds(runtime)

    def test_cache_hit_swaps_immediately(self):
        runtime = OnlineRuntime(_params(0), CFG, meta_test=True)
        cached = _params(7)
        runtime.cache.put(quantize_key(_task(), CFG), cached)
        _feed(runtime, [1.0] * 10)
        runtime.close()
        assert _kinds(runtime) == [RuntimeEventKind.TASK_FORMED, RuntimeEventKind.CACHE_HIT,
                                   RuntimeEventKind.SWAP]
        generation, params = runtime.store.read()
        assert generation == 1
        assert params is cached
        assert not runtime.status.meta_test_in_flight

    def test_requests_while_busy_keep_only_the_newest(self):
        runtime = OnlineRuntime(_params(0), CFG, meta_test=True)
        activations = _feed(runtime, [1.0] * 15 + [1.3] * 10)
        assert runtime.status.meta_test_in_flight
        assert len(activations) >= 2
        assert _kinds(runtime).count(RuntimeEventKind.QUEUED) == len(activations)
        assert runtime._mailbox[0] is activations[-1][1]

        runtime._poll(100.0)          # first result swaps in, queued task launches
        assert runtime._mailbox is None
        assert runtime.status.meta_test_in_flight
        runtime._poll(200.0)
        runtime.close()
        assert _kinds(runtime).count(RuntimeEventKind.SWAP) == 2
        assert runtime.store.generation == 2
        assert len(runtime.cache) == 2


class TestServing:
    def test_deterministic_decisions(self):
        fb = LinkFeedback(t=0.1, throughput=0.8, loss_ratio=0.0, delay=45.0)
        bitrates = []
        for _ in range(2):
            runtime = OnlineRuntime(_params(3), CFG, meta_test=False)
            bitrates.append([runtime.serve_step(fb) for _ in range(20)])
            runtime.close()
        assert bitrates[0] == bitrates[1]

    def test_zero_policy_picks_an_action_in_range(self):
        runtime = OnlineRuntime(zero_params(SIZES), CFG, meta_test=False)
        decision = runtime.infer(np.zeros(CFG.state_dim()), 1.0)
        runtime.close()
        assert decision.generation == 0
        assert CFG.ladder_min <= decision.bitrate <= CFG.ladder_max

    def test_sim_swap_waits_for_latency(self):
        runtime = OnlineRuntime(_params(0), CFG, meta_test=True)
        _feed(runtime, [1.0] * 8)
        fb = _full_pipe_fb(9, 1.0)
        runtime.decide(fb, 9.0)
        assert runtime.store.generation == 0
        runtime.decide(fb, 8.0 + CFG.meta_test_latency_s)
        runtime.close()
        assert runtime.store.generation == 1

    def test_failed_meta_test_keeps_serving(self):
        cfg = CFG.with_overrides(pools_per_task=1, orderings_per_pool=1)
        runtime = OnlineRuntime(_params(0), cfg, meta_test=True)
        impossible = NetworkState(mu=1.0, sigma=1.0, omega=5.0, d_prop=40.0, delta=StateRanges(0.0, 0.0, 0.0, 0.0))
        result, params = runtime.meta_test(impossible, seed=0)
        runtime.close()
        assert not result.success
        assert params is None
        assert result.source == "failed"


def test_realtime_cadence():
    runtime = OnlineRuntime(_params(0), CFG, meta_test=False, realtime=True)
    trace = NetTrace.from_arrays([1.0] * 5, 20.0)
    run = asyncio.run(serve_realtime(runtime, trace, CFG, duration_s=1.0))
    runtime.close()
    assert len(run.tick_times) == 10
    assert len(run.bitrates) == 10
    assert np.median(run.cadence_errors(CFG.step_s)) < 0.5


def test_meta_test_fits_budget_with_default_network():
    cfg = LabConfig()
    runtime = OnlineRuntime(init_params(cfg.layer_sizes(), np.random.default_rng(0)), cfg, meta_test=True)
    result, params = runtime.meta_test(_task(), seed=0)
    runtime.close()
    assert result.success
    assert params is not None and params.is_finite()
    assert result.latency_s <= cfg.meta_test_budget_s


def test_meta_test_config_uses_rollout_budget():
    meta = LabConfig().meta_test_config()
    assert meta.episode_s == 10.0
    assert meta.episodes_per_task == 4
    assert meta.inner_steps == 1
    with pytest.raises(ValueError):
        LabConfig(window_s=8, meta_test_episode_s=5.0)


def test_realtime_swap_arrives_within_budget():
    """A task forms after one window; its adapted parameters are swapped in on the wall clock."""
    runtime = OnlineRuntime(_params(0), CFG, meta_test=True, realtime=True)
    trace = NetTrace.from_arrays([1.0] * 20, 20.0)
    run = asyncio.run(serve_realtime(runtime, trace, CFG, duration_s=12.0))
    runtime.drain(timeout=30.0)
    runtime.close()
    assert len(run.tick_times) == 120
    assert RuntimeEventKind.TASK_FORMED in _kinds(runtime)
    assert RuntimeEventKind.SWAP in _kinds(runtime)
    assert runtime.swap_latencies
    assert max(runtime.swap_latencies) <= CFG.meta_test_budget_s
    assert np.median(run.cadence_errors(CFG.step_s)) < 0.5


def test_ticks_continue_during_slow_meta_test(monkeypatch):
    adapted = _params(9)

    def slow_meta_test(self, task, seed):
        time.sleep(1.0)
        return MetaTestResult(True, "adapted", "adapted", 1.0), adapted

    monkeypatch.setattr(OnlineRuntime, "meta_test", slow_meta_test)
    runtime = OnlineRuntime(_params(0), CFG, meta_test=True, realtime=True)
    runtime._request(_task(), 0.0)
    run = asyncio.run(serve_realtime(runtime, NetTrace.from_arrays([1.0] * 5, 20.0), CFG, duration_s=3.0))
    runtime.close()
    assert len(run.tick_times) == 30
    elapsed = run.tick_times[-1] - run.tick_times[0]
    assert 29 * CFG.step_s / elapsed >= 0.9
    assert _kinds(runtime).count(RuntimeEventKind.SWAP) == 1
    assert runtime.store.read()[1] is adapted
    assert 1.0 <= runtime.swap_latencies[0] <= CFG.meta_test_budget_s


def test_save_events(tmp_path):
    runtime = OnlineRuntime(_params(0), CFG, meta_test=False)
    _feed(runtime, [1.0] * 10)
    runtime.close()
    lines = save_events(runtime.events, tmp_path / "events.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "t_s,kind,generation,detail"
    assert lines[1].startswith("8.000,task_formed,0,")
