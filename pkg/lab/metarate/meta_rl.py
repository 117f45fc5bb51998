"""
Meta-training: the policy-gradient inner loop that adapts a copy of theta_0 to one task,
and the PPO-clipped outer loop that updates theta_0 from the adapted policies' trajectories.

The meta-gradient is first order: theta_0 is updated directly from trajectories of the
adapted policies, with the probability ratio taken between theta_0 and its pre-round
snapshot. No differentiation through the inner loop.
"""
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from .config import LabConfig
from .errors import CheckpointError, GradientError, TrajectoryGenerationError
from .models import EpisodeTrajectory, MetaTrainReport, NetTrace, NetworkState, RoundReport, TaskReport
from .policy import (PolicyParams, backward, baseline_eval, baseline_fit, discounted_returns,
                     forward_batch, init_params, load_params, save_params)
from .rollout import rollout_episode
from .taskspace import TaskDistribution
from .tracegen import TaskEnvironment

logger = logging.getLogger(__name__)

Grads = Dict[str, np.ndarray]


# Surrogates and their gradients

def _onehot(actions: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(actions), n))
    out[np.arange(len(actions)), actions] = 1.0
    return out


def logprob_surrogate(params: PolicyParams, states: np.ndarray, actions: np.ndarray,
                      advantages: np.ndarray) -> Tuple[float, Grads]:
    """L = mean(A * log pi(a|s)) and its gradient."""
    probs, cache = forward_batch(params, states)
    n = len(actions)
    chosen = probs[np.arange(n), actions]
    value = float(np.mean(advantages * np.log(chosen)))
    dlogits = advantages[:, None] * (_onehot(actions, probs.shape[1]) - probs) / n
    return value, backward(params, cache, dlogits)


def ratio_surrogate(params: PolicyParams, states: np.ndarray, actions: np.ndarray,
                    advantages: np.ndarray, old_probs: np.ndarray) -> Tuple[float, Grads]:
    """Unclipped L = mean(ratio * A), ratio = pi(a|s) / pi_old(a|s)."""
    probs, cache = forward_batch(params, states)
    n = len(actions)
    ratio = probs[np.arange(n), actions] / old_probs
    value = float(np.mean(ratio * advantages))
    coef = advantages * ratio
    dlogits = coef[:, None] * (_onehot(actions, probs.shape[1]) - probs) / n
    return value, backward(params, cache, dlogits)


def ppo_terms(ratio: np.ndarray, advantages: np.ndarray, eps: float) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample (clipped, unclipped) objective terms; clipped = min of the two."""
    unclipped = ratio * advantages
    clipped = np.minimum(unclipped, np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantages)
    return clipped, unclipped


def ppo_surrogate(params: PolicyParams, states: np.ndarray, actions: np.ndarray,
                  advantages: np.ndarray, old_probs: np.ndarray, eps: float) -> Tuple[float, Grads]:
    """
    L = mean(min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)). A sample contributes
    gradient only where the unclipped term is the minimum.
    """
    probs, cache = forward_batch(params, states)
    n = len(actions)
    ratio = probs[np.arange(n), actions] / old_probs
    clipped, unclipped = ppo_terms(ratio, advantages, eps)
    active = unclipped <= np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantages
    coef = np.where(active, advantages * ratio, 0.0)
    dlogits = coef[:, None] * (_onehot(actions, probs.shape[1]) - probs) / n
    return float(np.mean(clipped)), backward(params, cache, dlogits)


def _check_and_clip(grads: Grads, max_norm: Optional[float]) -> Grads:
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise GradientError("non-finite gradient, step aborted")
    if max_norm is not None:
        norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
        if norm > max_norm:
            grads = {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads


# Advantages

@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    probs: np.ndarray
    advantages: np.ndarray
    baseline: np.ndarray


def build_batch(trajectories: Sequence[EpisodeTrajectory], cfg: LabConfig) -> Batch:
    """Stack trajectories, compute horizon returns, fit the linear baseline, take A = R - b(s)."""
    if not trajectories:
        raise ValueError("at least one trajectory is required")
    states = np.concatenate([t.states for t in trajectories])
    actions = np.concatenate([t.actions for t in trajectories]).astype(int)
    probs = np.concatenate([t.probs for t in trajectories])
    returns = np.concatenate([discounted_returns(t.rewards, cfg.gamma, cfg.history_steps)
                              for t in trajectories])
    coef = baseline_fit(states, returns, cfg.ridge_lambda)
    advantages = returns - baseline_eval(coef, states)
    return Batch(states, actions, probs, advantages, coef)


# Inner loop

def policy_gradient_step(params: PolicyParams, trajectories: Sequence[EpisodeTrajectory], alpha: float,
                         cfg: LabConfig) -> PolicyParams:
    """One ascent step on mean(A * log pi) over the trajectories; theta + alpha * grad."""
    batch = build_batch(trajectories, cfg)
    _, grads = logprob_surrogate(params, batch.states, batch.actions, batch.advantages)
    grads = _check_and_clip(grads, cfg.max_grad_norm)
    stepped = params.add(grads, alpha).with_baseline(batch.baseline)
    if not stepped.is_finite():
        raise GradientError("parameters became non-finite after the step")
    return stepped


def collect(params: PolicyParams, env: TaskEnvironment, cfg: LabConfig, rng: np.random.Generator,
            k: Optional[int] = None) -> List[EpisodeTrajectory]:
    k = k or cfg.episodes_per_task
    label = env.task.label
    return [rollout_episode(params, env.traces[i % len(env.traces)], cfg, rng, "sample", label)
            for i in range(k)]


def inner_adapt(theta0: PolicyParams, env: TaskEnvironment, cfg: LabConfig, rng: np.random.Generator,
                k: Optional[int] = None, alpha: Optional[float] = None, steps: Optional[int] = None,
                reward_log: Optional[List[float]] = None) -> PolicyParams:
    """
    `steps` rounds of (roll out K episodes, fit baseline, policy-gradient step) starting from
    theta0. theta0 itself is never modified. Mean episode rewards before each step are
    appended to reward_log when one is given.
    """
    alpha = cfg.inner_lr if alpha is None else alpha
    steps = cfg.inner_steps if steps is None else steps
    params = theta0
    for _ in range(steps):
        trajectories = collect(params, env, cfg, rng, k)
        if reward_log is not None:
            reward_log.append(float(np.mean([t.mean_reward for t in trajectories])))
        params = policy_gradient_step(params, trajectories, alpha, cfg)
    return params


def mean_episode_reward(params: PolicyParams, env: TaskEnvironment, cfg: LabConfig,
                        rng: np.random.Generator, k: Optional[int] = None, mode: str = "argmax") -> float:
    k = k or cfg.episodes_per_task
    rewards = [rollout_episode(params, env.traces[i % len(env.traces)], cfg, rng, mode).mean_reward
               for i in range(k)]
    return float(np.mean(rewards))


# Outer loop

@dataclass
class TaskOutcome:
    label: str
    trajectories: List[EpisodeTrajectory] = field(default_factory=list)
    pre_reward: float = 0.0
    post_reward: float = 0.0
    skipped: bool = False
    reason: str = ""


def _run_task(theta0: PolicyParams, task: NetworkState, cfg: LabConfig, seed: int,
              corpus: Optional[Sequence[NetTrace]]) -> TaskOutcome:
    """Adapt to one task and collect evaluation trajectories with the adapted policy."""
    rng = np.random.default_rng(seed)
    try:
        env = TaskEnvironment.build(task, cfg, rng, corpus=corpus)
    except TrajectoryGenerationError as e:
        return TaskOutcome(label=task.label, skipped=True, reason=str(e))
    log: List[float] = []
    adapted = inner_adapt(theta0, env, cfg, rng, reward_log=log)
    evaluation = collect(adapted, env, cfg, rng)
    return TaskOutcome(label=task.label, trajectories=evaluation, pre_reward=log[0] if log else 0.0,
                       post_reward=float(np.mean([t.mean_reward for t in evaluation])))


def outer_update(theta0: PolicyParams, dist: TaskDistribution, cfg: LabConfig, rng: np.random.Generator,
                 corpus: Optional[Sequence[NetTrace]] = None, round_index: int = 0,
                 tasks: Optional[Sequence[NetworkState]] = None) -> Tuple[PolicyParams, RoundReport]:
    """
    One meta-training round: M tasks, inner adaptation per task, K evaluation trajectories
    per adapted policy, then ppo_epochs clipped ascent steps on theta_0 with advantages
    fitted per task.
    """
    start = time.time()
    if tasks is None:
        tasks = [dist.sample(rng) for _ in range(cfg.tasks_per_round)]
    seeds = [int(s) for s in rng.integers(0, 2 ** 63 - 1, size=len(tasks))]

    if cfg.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.jobs, len(tasks))) as pool:
            outcomes = list(pool.map(_run_task, [theta0] * len(tasks), tasks, [cfg] * len(tasks),
                                     seeds, [corpus] * len(tasks)))
    else:
        outcomes = [_run_task(theta0, task, cfg, seed, corpus) for task, seed in zip(tasks, seeds)]

    used = [o for o in outcomes if not o.skipped]
    for o in outcomes:
        if o.skipped:
            logger.warning(f"Round {round_index}: skipped task {o.label}: {o.reason}")
    if not used:
        logger.warning(f"Round {round_index}: every task was skipped, theta_0 unchanged")
        return theta0, RoundReport(round=round_index, outer_loss=0.0, pre_reward=0.0, post_reward=0.0,
                                   wall_time=time.time() - start, skipped_tasks=len(outcomes))

    batches = [build_batch(o.trajectories, cfg) for o in used]
    states = np.concatenate([b.states for b in batches])
    actions = np.concatenate([b.actions for b in batches])
    advantages = np.concatenate([b.advantages for b in batches])

    snapshot = theta0
    old_probs, _ = forward_batch(snapshot, states)
    old_chosen = old_probs[np.arange(len(actions)), actions]

    params = theta0
    first_value = None
    for _ in range(cfg.ppo_epochs):
        value, grads = ppo_surrogate(params, states, actions, advantages, old_chosen, cfg.clip_eps)
        if first_value is None:
            first_value = value
        grads = _check_and_clip(grads, cfg.max_grad_norm)
        params = params.add(grads, cfg.outer_lr)
    if not params.is_finite():
        raise GradientError("theta_0 became non-finite after the outer update")

    report = RoundReport(
        round=round_index,
        outer_loss=-float(first_value),
        pre_reward=float(np.mean([o.pre_reward for o in used])),
        post_reward=float(np.mean([o.post_reward for o in used])),
        wall_time=time.time() - start,
        tasks=tuple(TaskReport(o.label, o.pre_reward, o.post_reward) for o in used),
        skipped_tasks=len(outcomes) - len(used),
    )
    return params.with_baseline(batches[-1].baseline), report


# Training driver and checkpoints

CHECKPOINT_STATE = "checkpoint.json"
LATEST_PARAMS = "theta0.bin"


def round_rng(seed: int, round_index: int) -> np.random.Generator:
    """Independent stream per round so a resumed run replays identical rounds."""
    return np.random.default_rng([seed, round_index + 1])


def save_checkpoint(directory: Path, params: PolicyParams, rounds_done: int, seed: int, cfg: LabConfig) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_params(params, directory / f"round_{rounds_done:04d}.bin")
    save_params(params, directory / LATEST_PARAMS)
    state = {"rounds_done": rounds_done, "seed": seed, "config_hash": cfg.config_hash()}
    (directory / CHECKPOINT_STATE).write_text(json.dumps(state, indent=2), encoding="utf-8")
    logger.info(f"Checkpoint after round {rounds_done} written to {directory}")
    return directory / LATEST_PARAMS


def load_checkpoint(directory: Path) -> Tuple[PolicyParams, int, int]:
    """(theta_0, rounds done, seed) from a checkpoint directory."""
    directory = Path(directory)
    state_path = directory / CHECKPOINT_STATE
    if not state_path.exists():
        raise CheckpointError(f"no checkpoint in {directory}")
    try:
        state = json.loads(state_path.read_text(encoding="utf-8"))
        return load_params(directory / LATEST_PARAMS), int(state["rounds_done"]), int(state["seed"])
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"corrupt checkpoint state in {directory}: {e}") from e


def write_report(report: MetaTrainReport, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = ["round", "loss", "pre_reward", "post_reward", "wall_time", "skipped_tasks"]
    pd.DataFrame(report.as_rows(), columns=columns).to_csv(path, index=False)
    return path


def meta_train(cfg: LabConfig, dist: TaskDistribution, seed: int, out_dir: Optional[Path] = None,
               init: Optional[PolicyParams] = None, start_round: int = 0,
               corpus: Optional[Sequence[NetTrace]] = None,
               on_round: Optional[Callable[[RoundReport], None]] = None,
               progress: bool = True) -> Tuple[PolicyParams, MetaTrainReport]:
    """
    Run rounds start_round .. cfg.rounds - 1 of outer_update. Checkpoints theta_0 every
    checkpoint_every rounds (and after the last) when out_dir is given.
    """
    theta0 = init if init is not None else init_params(cfg.layer_sizes(), np.random.default_rng(seed),
                                                        cfg.activation)
    report = MetaTrainReport()
    checkpoints = Path(out_dir) / "checkpoints" if out_dir is not None else None
    rounds = range(start_round, cfg.rounds)

    for r in tqdm(rounds, desc="meta-train", unit="round", disable=not progress or not len(rounds)):
        theta0, round_report = outer_update(theta0, dist, cfg, round_rng(seed, r), corpus, round_index=r)
        report.append(round_report)
        logger.info(f"Round {r}: loss={round_report.outer_loss:.4f} pre={round_report.pre_reward:.3f} "
                    f"post={round_report.post_reward:.3f} skipped={round_report.skipped_tasks}")
        if on_round is not None:
            on_round(round_report)
        done = r + 1
        if checkpoints is not None and (done % cfg.checkpoint_every == 0 or done == cfg.rounds):
            save_checkpoint(checkpoints, theta0, done, seed, cfg)

    if out_dir is not None:
        write_report(report, Path(out_dir) / "report.csv")
        if not len(rounds):
            save_checkpoint(checkpoints, theta0, start_round, seed, cfg)
    return theta0, report
