"""
Long-running acceptance checks. Deselected by default; run with `pytest -m slow`.
"""
import os
import sys

import numpy as np
import pandas as pd
import pytest

# Add the lab directory to the path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from main import main
from metarate.bwest import estimate_series
from metarate.config import LabConfig
from metarate.errors import TrajectoryGenerationError
from metarate.experiment import eval_suite, reward_gap, run_one
from metarate.meta_rl import inner_adapt, mean_episode_reward, meta_train
from metarate.models import ControllerKind, NetTrace, NetworkState, StateRanges
from metarate.policy import init_params, save_params
from metarate.rollout import simulate_feedback
from metarate.simnet import VideoSession
from metarate.taskspace import fit_distribution, make_task, sliding_stats, within_box
from metarate.tracegen import TaskEnvironment, generate_trajectory, switching_trajectory, trajectory_fits
from metarate.traces import save_trace

pytestmark = pytest.mark.slow


def _random_walk(rng, seconds=120, id="walk"):
    bw = np.clip(1.0 + np.cumsum(rng.normal(0, 0.08, seconds)), 0.2, 2.5)
    return NetTrace.from_arrays(bw, rng.uniform(15, 40), id=id)


def test_generated_trajectories_respect_their_task():
    cfg = LabConfig()
    rng = np.random.default_rng(0)
    corpus = [_random_walk(rng, id=f"walk{i}") for i in range(5)]
    dist = fit_distribution(corpus, cfg, source="trace")
    generated = 0
    for _ in range(100):
        task = dist.sample(rng)
        for i in range(10):
            try:
                trace = generate_trajectory(task, 60, cfg.max_bw_mbps, rng, cfg, f"g{i}")
            except TrajectoryGenerationError:
                continue
            generated += 1
            assert len(trace.samples) == 60
            assert trajectory_fits(trace.bandwidths, task, cfg.window_s)
            assert abs(2 * trace.samples[0].prop_delay - task.d_prop) <= task.delta.dprop + 1e-9
    assert generated > 0


def test_bytes_are_conserved_over_random_sessions():
    cfg = LabConfig(random_loss=0.01)
    rng = np.random.default_rng(1)
    for seed in range(50):
        session = VideoSession(_random_walk(rng, seconds=30, id=f"s{seed}"), cfg, seed=seed)
        for _ in range(200):
            session.advance(float(rng.uniform(1.0, 150.0)))
            if rng.random() < 0.2:
                session.set_target_bitrate(float(rng.uniform(0.1, 2.5)))
            assert session.accounting().balanced


def test_pipeline_end_to_end(tmp_path, capsys):
    rng = np.random.default_rng(2)
    corpus = tmp_path / "corpus"
    for i in range(3):
        save_trace(_random_walk(rng, seconds=60, id=f"walk{i}"), corpus / f"walk{i}.csv")
    small = ["--set", "hidden_sizes=8,8,8", "--set", "episode_s=10", "--set", "episodes_per_task=2",
             "--set", "tasks_per_round=1", "--set", "rounds=1", "--set", "inner_steps=1"]

    assert main(["fit-dist", "--corpus", str(corpus), "--out", str(tmp_path / "dist"), *small]) == 0
    dist = tmp_path / "dist" / "distribution.json"
    assert main(["gen-traces", "--dist", str(dist), "--count", "2", "--length", "20",
                 "--out", str(tmp_path / "gen"), *small]) == 0
    assert main(["train", "--dist", str(dist), "--out", str(tmp_path / "train"), *small]) == 0
    checkpoint = tmp_path / "train" / "checkpoints" / "theta0.bin"
    assert checkpoint.exists()
    assert main(["eval", "--traces", str(tmp_path / "gen" / "traces"), "--checkpoint", str(checkpoint),
                 "--jobs", "1", "--out", str(tmp_path / "eval"), *small]) == 0
    summary = (tmp_path / "eval" / "summary.csv").read_text(encoding="utf-8").splitlines()
    assert len(summary) == 4
    assert main(["plot", "--summary", str(tmp_path / "eval" / "summary.csv"),
                 "--out", str(tmp_path / "eval"), *small]) == 0


# Estimator quality

def test_estimates_track_bandwidth_closer_than_throughput():
    cfg = LabConfig()
    rng = np.random.default_rng(10)
    estimate_errors, throughput_errors = [], []
    matched = windows = 0
    for i in range(20):
        trace = _random_walk(rng, seconds=120, id=f"walk{i}")
        feedback = simulate_feedback(trace, cfg, seed=i)
        log = estimate_series(feedback, cfg, retro=True)
        truth = np.asarray(trace.bandwidths)[:len(feedback)]
        b_hat = log.b_hat()
        eta = np.array([fb.throughput for fb in feedback])
        estimate_errors.append(np.abs(b_hat - truth))
        throughput_errors.append(np.abs(eta - truth))

        # within_box leaves d_prop out: the measured delay floor includes serialization time.
        true_stats = sliding_stats(truth, 2.0 * np.asarray(trace.prop_delays)[:len(truth)], cfg.window_s)
        est_stats = sliding_stats(b_hat, np.asarray(log.dprop, dtype=float), cfg.window_s)
        for true_window, est_window in zip(true_stats, est_stats):
            windows += 1
            matched += within_box(est_window, make_task(true_window, None, cfg.min_delta))
    assert np.mean(np.concatenate(estimate_errors)) <= np.mean(np.concatenate(throughput_errors))
    assert matched / windows >= 0.8


# Learning

def test_inner_loop_improves_on_constant_bandwidth():
    cfg = LabConfig()
    task = NetworkState(mu=1.0, sigma=0.0, omega=0.0, d_prop=40.0, delta=StateRanges(0.2, 0.2, 2.0, 3.0))
    env = TaskEnvironment(task=task, traces=[NetTrace.from_arrays([1.0] * 60, 20.0, id="flat")])
    improved = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        theta0 = init_params(cfg.layer_sizes(), rng)
        adapted = inner_adapt(theta0, env, cfg, rng, steps=3)
        before = mean_episode_reward(theta0, env, cfg, np.random.default_rng(1000 + seed), k=4)
        after = mean_episode_reward(adapted, env, cfg, np.random.default_rng(1000 + seed), k=4)
        improved += after > before
    assert improved >= 16


def test_training_reward_trend_is_non_decreasing():
    cfg = LabConfig(hidden_sizes=(8, 8, 8), episode_s=10.0, episodes_per_task=2, inner_steps=1,
                    tasks_per_round=3, inner_lr=0.01, outer_lr=0.01, rounds=200)
    corpus = [NetTrace.from_arrays([bw] * 30, 20.0, id=f"flat{i}") for i, bw in enumerate((0.8, 1.0, 1.2))]
    dist = fit_distribution(corpus, cfg, source="trace")
    assert dist.n_joint_bins == 3
    _, report = meta_train(cfg, dist, seed=0, progress=False)
    trend = pd.Series([r.post_reward for r in report.rounds]).rolling(20).mean().dropna()
    assert trend.iloc[-1] >= trend.iloc[0]


TRAIN_CFG = LabConfig(episode_s=20.0, episodes_per_task=4, tasks_per_round=5, inner_steps=1,
                      inner_lr=0.01, outer_lr=0.003, rounds=100)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """theta_0 meta-trained on a random-walk corpus, with the distribution it was trained on."""
    rng = np.random.default_rng(20)
    corpus = [_random_walk(rng, seconds=120, id=f"walk{i}") for i in range(5)]
    dist = fit_distribution(corpus, TRAIN_CFG, source="trace")
    theta0, _ = meta_train(TRAIN_CFG, dist, seed=0, progress=False)
    checkpoint = save_params(theta0, tmp_path_factory.mktemp("trained") / "theta0.bin")
    return theta0, dist, checkpoint


def _environments(dist, cfg, rng, count):
    envs = []
    while len(envs) < count:
        try:
            envs.append(TaskEnvironment.build(dist.sample(rng), cfg, rng))
        except TrajectoryGenerationError:
            continue
    return envs


def test_meta_init_beats_random_inits(trained):
    theta0, dist, _ = trained
    cfg = TRAIN_CFG
    rng = np.random.default_rng(30)
    wins = 0
    envs = _environments(dist, cfg, rng, 20)
    for i, env in enumerate(envs):
        meta = mean_episode_reward(inner_adapt(theta0, env, cfg, np.random.default_rng(i)), env, cfg,
                                   np.random.default_rng(100 + i))
        random_best = max(
            mean_episode_reward(
                inner_adapt(init_params(cfg.layer_sizes(), np.random.default_rng(50 + j)), env, cfg,
                            np.random.default_rng(i)),
                env, cfg, np.random.default_rng(100 + i))
            for j in range(5)
        )
        wins += meta > random_best
    assert wins >= 0.7 * len(envs)


def _switching_traces(dist, cfg, rng, count, segments=3, segment_s=60):
    traces = []
    while len(traces) < count:
        try:
            tasks = [dist.sample(rng) for _ in range(segments)]
            traces.append(switching_trajectory(tasks, segment_s, cfg.max_bw_mbps, rng, cfg, f"switch{len(traces)}"))
        except TrajectoryGenerationError:
            continue
    return traces


def test_meta_testing_runtime_matches_or_beats_frozen(trained):
    theta0, dist, _ = trained
    cfg = TRAIN_CFG
    traces = _switching_traces(dist, cfg, np.random.default_rng(40), 20)
    at_least_as_good = 0
    stalls = {ControllerKind.METARATE: [], ControllerKind.FROZEN: []}
    for i, trace in enumerate(traces):
        rewards = {}
        for kind in stalls:
            result, _ = run_one(trace, kind, cfg, seed=i, theta0=theta0)
            rewards[kind] = result.mean_reward
            stalls[kind].append(result.metrics.stalling_rate)
        at_least_as_good += rewards[ControllerKind.METARATE] >= rewards[ControllerKind.FROZEN]
    assert at_least_as_good >= 0.75 * len(traces)
    assert np.mean(stalls[ControllerKind.METARATE]) <= np.mean(stalls[ControllerKind.FROZEN])


def test_meta_trained_controller_beats_rule_baseline(trained, tmp_path):
    _, dist, checkpoint = trained
    cfg = TRAIN_CFG
    rng = np.random.default_rng(50)
    traces = []
    while len(traces) < 10:
        try:
            traces.append(generate_trajectory(dist.sample(rng), 60, cfg.max_bw_mbps, rng, cfg, f"suite{len(traces)}"))
        except TrajectoryGenerationError:
            continue
    result = eval_suite(traces, [ControllerKind.GCC, ControllerKind.METARATE], cfg, [0], tmp_path,
                        checkpoint=checkpoint)
    assert reward_gap(result.summary, "metarate", "gcc") >= 0.05
