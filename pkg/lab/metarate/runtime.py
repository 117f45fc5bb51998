"""
Online serve-and-adapt runtime.

The serving path decides a bitrate every step_s from an immutable parameter snapshot.
Once per second the monitoring path updates the bandwidth estimator and the window
statistics; when they drift past half the current task's ranges it forms a new task and
hands it to a single background adapter. Adapted parameters are cached by quantized task
key and published through a single-writer store.

In simulation mode a meta-test takes meta_test_latency_s of simulated time: the swap happens
at the first decision at or after activation + latency, which keeps runs deterministic.
In realtime mode the swap happens as soon as the background work finishes.
"""
import asyncio
import csv
import logging
import threading
import time
from collections import OrderedDict
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .bwest import BandwidthEstimator
from .config import LabConfig
from .errors import TrajectoryGenerationError
from .meta_rl import inner_adapt
from .models import (LinkFeedback, MetaTestResult, NetTrace, NetworkState, RuntimeEvent, RuntimeEventKind,
                     RuntimeStatus, WindowStats)
from .policy import PolicyParams, apply_action, forward, select_action
from .rollout import FeedbackHistory, merge_feedback
from .simnet import VideoSession
from .taskspace import make_task, should_activate, window_stats
from .tracegen import TaskEnvironment

logger = logging.getLogger(__name__)

CacheKey = Tuple[int, int, int, int]


class ParamStore:
    """
    Single-writer, many-reader parameter slot. The (generation, params) pair is replaced as
    one reference, so a reader always sees a matching pair.
    """

    def __init__(self, params: PolicyParams):
        self._snapshot: Tuple[int, PolicyParams] = (0, params)
        self._write_lock = threading.Lock()

    def read(self) -> Tuple[int, PolicyParams]:
        return self._snapshot

    def publish(self, params: PolicyParams) -> int:
        if not params.is_finite():
            raise ValueError("refusing to publish non-finite parameters")
        with self._write_lock:
            generation = self._snapshot[0] + 1
            self._snapshot = (generation, params)
        return generation

    @property
    def generation(self) -> int:
        return self._snapshot[0]


def quantize_key(task: NetworkState, cfg: LabConfig) -> CacheKey:
    return (int(round(task.mu / cfg.key_mu)), int(round(task.sigma / cfg.key_sigma)),
            int(round(task.omega / cfg.key_omega)), int(round(task.d_prop / cfg.key_dprop)))


@dataclass
class _CacheEntry:
    params: PolicyParams
    count: int
    last_access: int


class ParamCache:
    """Adapted parameters by task key, least-frequently-used eviction; theta_0 is permanent."""

    def __init__(self, theta0: PolicyParams, capacity: int = 64):
        if capacity < 1:
            raise ValueError("cache capacity must be at least 1")
        self.theta0 = theta0
        self.capacity = capacity
        self._entries: "OrderedDict[CacheKey, _CacheEntry]" = OrderedDict()
        self._clock = 0

    def _tick(self) -> int:
        self._clock += 1
        return self._clock

    def get(self, key: CacheKey) -> Optional[PolicyParams]:
        entry = self._entries.get(key)
        if entry is None:
            return None
        entry.count += 1
        entry.last_access = self._tick()
        return entry.params

    def put(self, key: CacheKey, params: PolicyParams) -> Optional[CacheKey]:
        """Insert or refresh; returns the evicted key, if any."""
        if key in self._entries:
            entry = self._entries[key]
            entry.params = params
            entry.count += 1
            entry.last_access = self._tick()
            return None
        evicted = None
        if len(self._entries) >= self.capacity:
            evicted = min(self._entries, key=lambda k: (self._entries[k].count, self._entries[k].last_access))
            del self._entries[evicted]
        self._entries[key] = _CacheEntry(params, 1, self._tick())
        return evicted

    def count(self, key: CacheKey) -> int:
        entry = self._entries.get(key)
        return entry.count if entry else 0

    def __contains__(self, key: CacheKey) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)


@dataclass(frozen=True)
class Decision:
    bitrate: float
    action: int
    generation: int


@dataclass
class _InFlight:
    future: Future
    task: NetworkState
    key: CacheKey
    formed_wall: float
    ready_at: Optional[float]


class OnlineRuntime:
    """Controller that serves the current parameters and adapts them online."""

    def __init__(self, theta0: PolicyParams, cfg: LabConfig, meta_test: bool = True, seed: int = 0,
                 realtime: bool = False, corpus: Optional[Sequence[NetTrace]] = None):
        self.cfg = cfg
        self.meta_test_enabled = meta_test
        self.name = "metarate" if meta_test else "metarate-frozen"
        self.realtime = realtime
        self.corpus = corpus
        self.store = ParamStore(theta0)
        self.cache = ParamCache(theta0, cfg.cache_capacity)
        self.history = FeedbackHistory(cfg.history_steps)
        self.estimator = BandwidthEstimator(cfg)
        self.status = RuntimeStatus()
        self.events: List[RuntimeEvent] = []
        self.rng = np.random.default_rng(seed)
        self.bitrate = cfg.initial_bitrate
        self.decisions = 0
        self._b_hat: List[float] = []
        self._stats: List[WindowStats] = []
        self._second_reports: List[LinkFeedback] = []
        self._per_second = max(1, int(round(1.0 / cfg.step_s)))
        self._meta_cfg = cfg.meta_test_config()
        self._mailbox: Optional[Tuple[NetworkState, float]] = None
        self._in_flight: Optional[_InFlight] = None
        # Wall seconds from task formation to the swap of its adapted parameters.
        self.swap_latencies: List[float] = []
        self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix="meta-test")

    # Serving

    def infer(self, state: np.ndarray, b_prev: float) -> Decision:
        """Decision from one consistent parameter snapshot."""
        generation, params = self.store.read()
        probs = forward(params, state)
        a = select_action(probs, self.cfg.decision_mode, self.rng)
        b = apply_action(b_prev, float(self.cfg.action_grid[a]), self.cfg.ladder_min, self.cfg.ladder_max)
        return Decision(bitrate=b, action=a, generation=generation)

    def serve_step(self, fb: LinkFeedback) -> float:
        self.history.push(fb, self.bitrate)
        decision = self.infer(self.history.state(), self.bitrate)
        self.bitrate = decision.bitrate
        self.decisions += 1
        return self.bitrate

    def decide(self, fb: LinkFeedback, now_s: float) -> float:
        self._poll(now_s)
        b = self.serve_step(fb)
        self._second_reports.append(fb)
        if len(self._second_reports) >= self._per_second:
            self.monitor_step(merge_feedback(self._second_reports), now_s)
            self._second_reports = []
        return b

    # Monitoring

    def _event(self, t: float, kind: RuntimeEventKind, detail: str = "") -> None:
        self.events.append(RuntimeEvent(t=t, kind=kind, detail=detail, generation=self.store.generation))
        logger.debug(f"[{t:.1f}s] {kind.value} {detail}")

    def monitor_step(self, fb: LinkFeedback, now_s: float) -> Optional[NetworkState]:
        """Feed one 1 s report; returns the new task when an activation fires."""
        task = self.status.current_task
        est = self.estimator.update(fb, task.delta.mu if task else None)
        self._b_hat.append(est.b_hat)
        stats = window_stats(self._b_hat, self.estimator.dprop, self.cfg.window_s)
        if stats is None:
            return None
        self._stats.append(stats)

        if task is None:
            lag = self.cfg.delta_t_s
            then = self._stats[-1 - lag] if len(self._stats) > lag else None
            new_task = make_task(stats, then, self.cfg.min_delta)
            self.status.current_task = new_task
            self._event(now_s, RuntimeEventKind.TASK_FORMED, new_task.label)
            self._request(new_task, now_s)
            return None

        if not should_activate(stats, task):
            return None
        center = WindowStats(mu=task.mu, sigma=task.sigma, omega=task.omega if task.sigma > 0 else 0.0,
                             d_prop=task.d_prop, window_len=self.cfg.window_s)
        new_task = make_task(stats, center, self.cfg.min_delta)
        self.status.current_task = new_task
        self.status.last_activation_t = now_s
        self._event(now_s, RuntimeEventKind.ACTIVATION, new_task.label)
        self._request(new_task, now_s)
        return new_task

    # Meta-testing

    def _request(self, task: NetworkState, now_s: float) -> None:
        if not self.meta_test_enabled:
            return
        formed_wall = time.monotonic()
        if self._in_flight is not None:
            self._mailbox = (task, formed_wall)
            self._event(now_s, RuntimeEventKind.QUEUED, task.label)
            return
        self._launch(task, now_s, formed_wall)

    def _launch(self, task: NetworkState, now_s: float, formed_wall: float) -> None:
        key = quantize_key(task, self.cfg)
        cached = self.cache.get(key)
        if cached is not None:
            self._event(now_s, RuntimeEventKind.CACHE_HIT, str(key))
            self.swap_params(cached, now_s)
            self.swap_latencies.append(time.monotonic() - formed_wall)
            return
        seed = int(self.rng.integers(0, 2 ** 63 - 1))
        future = self._executor.submit(self.meta_test, task, seed)
        ready_at = None if self.realtime else now_s + self.cfg.meta_test_latency_s
        self._in_flight = _InFlight(future, task, key, formed_wall, ready_at)
        self.status.meta_test_in_flight = True

    def meta_test(self, task: NetworkState, seed: int) -> Tuple[MetaTestResult, Optional[PolicyParams]]:
        """
        Adapt theta_0 to the task with the meta-test rollout budget
        (meta_test_episodes x meta_test_episode_s, meta_test_steps gradient steps).
        A failed trajectory generation is retried once.
        """
        start = time.monotonic()
        rng = np.random.default_rng(seed)
        cfg = self._meta_cfg
        for attempt in range(2):
            try:
                env = TaskEnvironment.build(task, cfg, rng, corpus=self.corpus)
                break
            except TrajectoryGenerationError as e:
                logger.warning(f"Meta-test attempt {attempt + 1} for {task.label} failed: {e}")
        else:
            return MetaTestResult(False, "trajectory generation failed twice", "failed",
                                  time.monotonic() - start), None
        params = inner_adapt(self.cache.theta0, env, cfg, rng)
        latency = time.monotonic() - start
        if latency > self.cfg.meta_test_budget_s:
            logger.warning(f"Meta-test for {task.label} took {latency:.2f}s, budget {self.cfg.meta_test_budget_s:.2f}s")
        return MetaTestResult(True, "adapted", "adapted", latency), params

    def _poll(self, now_s: float) -> None:
        flight = self._in_flight
        if flight is None:
            return
        if self.realtime:
            if not flight.future.done():
                return
        elif now_s < flight.ready_at:
            return
        self._in_flight = None
        self.status.meta_test_in_flight = False
        try:
            result, params = flight.future.result()
        except Exception as e:
            logger.error(f"Meta-test for {flight.task.label} raised: {e}")
            result, params = MetaTestResult(False, str(e), "failed"), None
        if result.success and params is not None:
            self.cache.put(flight.key, params)
            self.swap_params(params, now_s)
            self.swap_latencies.append(time.monotonic() - flight.formed_wall)
        else:
            self._event(now_s, RuntimeEventKind.META_TEST_FAILED, result.message)
        if self._mailbox is not None:
            (task, formed_wall), self._mailbox = self._mailbox, None
            self._launch(task, now_s, formed_wall)

    def swap_params(self, params: PolicyParams, now_s: float = 0.0) -> int:
        generation = self.store.publish(params)
        self.status.generation = generation
        self._event(now_s, RuntimeEventKind.SWAP, f"generation {generation}")
        return generation

    def drain(self, timeout: Optional[float] = None) -> None:
        """Wait for the in-flight meta-test, if any, without swapping."""
        if self._in_flight is not None:
            self._in_flight.future.result(timeout=timeout)

    def close(self) -> None:
        self._executor.shutdown(wait=True)


@dataclass
class RealtimeRun:
    tick_times: List[float]
    bitrates: List[float]

    def cadence_errors(self, step_s: float) -> np.ndarray:
        """Relative deviation of every tick interval from step_s."""
        gaps = np.diff(self.tick_times)
        return np.abs(gaps - step_s) / step_s


async def serve_realtime(runtime: OnlineRuntime, trace: NetTrace, cfg: LabConfig, duration_s: float,
                         seed: int = 0) -> RealtimeRun:
    """
    Serve on the wall clock: one decision per step_s, simulator advanced in lockstep.
    Meta-tests run on the runtime's executor while the loop keeps ticking.
    """
    session = VideoSession(trace, cfg, seed=seed)
    loop = asyncio.get_running_loop()
    ticks: List[float] = []
    bitrates: List[float] = []
    start = loop.time()
    for i in range(int(round(duration_s / cfg.step_s))):
        target = start + (i + 1) * cfg.step_s
        await asyncio.sleep(max(0.0, target - loop.time()))
        ticks.append(loop.time())
        session.advance(cfg.step_ms)
        fb = session.feedback(cfg.step_ms)
        b = runtime.decide(fb, session.now / 1000.0)
        session.set_target_bitrate(b)
        bitrates.append(b)
    return RealtimeRun(tick_times=ticks, bitrates=bitrates)


EVENT_HEADER = ["t_s", "kind", "generation", "detail"]


def save_events(events: Iterable[RuntimeEvent], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(EVENT_HEADER)
        for e in events:
            writer.writerow([f"{e.t:.3f}", e.kind.value, e.generation, e.detail])
    return path
