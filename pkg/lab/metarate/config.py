"""
Configuration management for the lab.

Values come from (lowest to highest precedence): field defaults, a flat KEY=VALUE
config file, METARATE_* environment variables, and explicit overrides from the CLI.
Units: bandwidth/bitrate/throughput in Mbps, delay in ms, durations in seconds unless
the field name says otherwise. The reward converts delay to seconds (see policy.reward).
"""
import hashlib
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple

import numpy as np
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from .errors import DataError

logger = logging.getLogger(__name__)

ENV_PREFIX = "METARATE_"


class LabConfig(BaseModel):
    """Central configuration for every stage of the pipeline."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    # Windows and time units
    window_s: int = 8                 # W_r, sliding window of 1 s samples
    delta_t_s: int = 4                # Δt used for Δ_t in distribution fitting
    step_s: float = 0.1               # Δt', decision interval
    dprop_window_s: float = 10.0      # W_d, running-min window for d_prop
    history_s: float = 3.0            # state history and return horizon

    # Actions and bitrate ladder
    action_max: float = 2.0
    action_step: float = 0.2
    ladder_min: float = 0.1
    ladder_max: float = 2.5
    ladder_step: float = 0.1
    initial_bitrate: float = 0.5

    # Reward weights: throughput, loss, delay (per second of delay), smoothness
    w_throughput: float = 50.0
    w_loss: float = 50.0
    w_delay: float = 200.0
    w_smooth: float = 20.0

    # Network-state floors Δ'
    min_delta_mu: float = 0.2
    min_delta_sigma: float = 0.2
    min_delta_omega: float = 2.0
    min_delta_dprop: float = 3.0

    # Task distribution bins
    bin_mu: float = 0.1
    bin_sigma: float = 0.05
    bin_omega: float = 0.5
    bin_dprop: float = 5.0

    # Bandwidth estimator
    full_pipe_loss: float = 0.05
    probe_offset: float = 1.3
    dprop_sigma_ms: float = 5.0
    dprop_cap_ms: float = 200.0
    estimator_interval_s: float = 1.0

    # Trajectory generation
    max_bw_mbps: float = 4.0
    orderings_per_pool: int = 200
    pools_per_task: int = 50
    ordering_candidates: int = 8
    real_fraction: float = 0.0

    # Simulator
    fps: int = 30
    mtu_bytes: int = 1200
    queue_ms: float = 250.0
    random_loss: float = 0.0
    frame_jitter: float = 0.1
    pacing_factor: float = 1.25
    late_frame_ms: float = 400.0
    stall_fps: float = 12.0
    feedback_interval_ms: float = 100.0
    frame_table: Optional[str] = None

    # Policy network
    hidden_sizes: Tuple[int, ...] = (128, 64, 32)
    activation: Literal["tanh", "relu"] = "tanh"
    decision_mode: Literal["argmax", "sample"] = "argmax"

    # Meta-RL
    inner_steps: int = 3
    episodes_per_task: int = 8        # K
    tasks_per_round: int = 5          # M
    inner_lr: float = 1e-3            # α
    outer_lr: float = 3e-4            # β
    clip_eps: float = 0.2             # ε
    gamma: float = 0.99
    episode_s: float = 60.0
    ppo_epochs: int = 1
    max_grad_norm: Optional[float] = None
    ridge_lambda: float = 1e-3
    rounds: int = 200
    checkpoint_every: int = 10

    # Online runtime
    cache_capacity: int = 64
    meta_test_budget_s: float = 2.0
    meta_test_latency_s: float = 2.0
    meta_test_episode_s: float = 10.0
    meta_test_episodes: int = 4       # K during online meta-testing
    meta_test_steps: int = 1
    key_mu: float = 0.1
    key_sigma: float = 0.1
    key_omega: float = 1.0
    key_dprop: float = 5.0

    # Rule baseline
    gcc_interval_ms: float = 200.0
    gcc_decrease: float = 0.85
    gcc_increase: float = 1.05
    gcc_loss_high: float = 0.10
    gcc_loss_low: float = 0.02
    gcc_gradient_threshold: float = 2.0   # ms/s
    gcc_smoothing: float = 0.9
    gcc_holdoff_s: float = 1.0

    # Orchestration
    seed: int = 0
    jobs: int = 1

    @field_validator(
        "window_s", "delta_t_s", "step_s", "dprop_window_s", "history_s", "action_max",
        "action_step", "ladder_min", "ladder_max", "ladder_step", "initial_bitrate",
        "min_delta_mu", "min_delta_sigma", "min_delta_omega", "min_delta_dprop",
        "bin_mu", "bin_sigma", "bin_omega", "bin_dprop", "estimator_interval_s",
        "max_bw_mbps", "orderings_per_pool", "pools_per_task", "ordering_candidates",
        "fps", "mtu_bytes", "queue_ms", "pacing_factor", "late_frame_ms",
        "feedback_interval_ms", "inner_steps", "episodes_per_task", "tasks_per_round",
        "episode_s", "ppo_epochs", "ridge_lambda", "checkpoint_every", "cache_capacity",
        "meta_test_budget_s", "meta_test_episode_s", "meta_test_episodes", "meta_test_steps",
        "key_mu", "key_sigma", "key_omega", "key_dprop",
        "gcc_interval_ms", "gcc_holdoff_s", "jobs",
    )
    @classmethod
    def _positive(cls, v, info):
        if v <= 0:
            raise ValueError(f"{info.field_name} must be positive, got {v}")
        return v

    @field_validator(
        "w_throughput", "w_loss", "w_delay", "w_smooth", "dprop_sigma_ms", "dprop_cap_ms",
        "inner_lr", "outer_lr", "clip_eps", "rounds", "meta_test_latency_s",
    )
    @classmethod
    def _non_negative(cls, v, info):
        if v < 0:
            raise ValueError(f"{info.field_name} must be non-negative, got {v}")
        return v

    @field_validator("gamma", "random_loss", "real_fraction", "frame_jitter")
    @classmethod
    def _unit_interval(cls, v, info):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{info.field_name} must lie in [0, 1], got {v}")
        return v

    @field_validator("hidden_sizes", mode="before")
    @classmethod
    def _parse_sizes(cls, v):
        if isinstance(v, str):
            v = tuple(int(x) for x in v.replace(" ", "").split(",") if x)
        if not v or any(int(x) <= 0 for x in v):
            raise ValueError("hidden_sizes must be a non-empty list of positive ints")
        return tuple(int(x) for x in v)

    @model_validator(mode="after")
    def _check_grids(self):
        if self.ladder_min >= self.ladder_max:
            raise ValueError("ladder must be sorted ascending (ladder_min < ladder_max)")
        n = self.action_max / self.action_step
        if abs(n - round(n)) > 1e-9:
            raise ValueError("action_max must be a whole number of action steps so the grid is symmetric")
        steps = self.history_s / self.step_s
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("history_s must be a whole number of decision steps")
        if self.meta_test_episode_s < self.window_s:
            raise ValueError("meta_test_episode_s must cover at least one statistics window")
        return self

    def meta_test_config(self) -> "LabConfig":
        """The configuration online meta-tests adapt with: fewer, shorter rollouts."""
        return self.with_overrides(episode_s=self.meta_test_episode_s,
                                   episodes_per_task=self.meta_test_episodes,
                                   inner_steps=self.meta_test_steps)

    # Derived quantities

    @property
    def action_grid(self) -> np.ndarray:
        n = int(round(self.action_max / self.action_step))
        return np.round(np.arange(-n, n + 1) * self.action_step, 10)

    @property
    def ladder(self) -> np.ndarray:
        n = int(round((self.ladder_max - self.ladder_min) / self.ladder_step))
        return np.round(self.ladder_min + np.arange(n + 1) * self.ladder_step, 10)

    @property
    def history_steps(self) -> int:
        return int(round(self.history_s / self.step_s))

    @property
    def step_ms(self) -> float:
        return self.step_s * 1000.0

    @property
    def min_delta(self) -> Tuple[float, float, float, float]:
        return (self.min_delta_mu, self.min_delta_sigma, self.min_delta_omega, self.min_delta_dprop)

    @property
    def reward_weights(self) -> Tuple[float, float, float, float]:
        return (self.w_throughput, self.w_loss, self.w_delay, self.w_smooth)

    def state_dim(self) -> int:
        return 5 * self.history_steps

    def layer_sizes(self) -> List[int]:
        return [self.state_dim(), *self.hidden_sizes, len(self.action_grid)]

    def config_hash(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode("utf-8")).hexdigest()

    def with_overrides(self, **overrides: Any) -> "LabConfig":
        data = self.model_dump()
        data.update(overrides)
        return LabConfig(**data)


def _normalize_keys(raw: Mapping[str, Any], source: str = "", strict: bool = True) -> Dict[str, Any]:
    fields = LabConfig.model_fields
    out: Dict[str, Any] = {}
    for key, value in raw.items():
        name = key.strip().lower()
        if name not in fields:
            if strict:
                raise DataError(f"unknown configuration key: {key}")
            logger.warning(f"Ignoring unknown configuration key {key} from {source}")
            continue
        if value is None or (isinstance(value, str) and value.strip() == ""):
            continue
        out[name] = value.strip() if isinstance(value, str) else value
    return out


def load_config(path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None,
                use_env: bool = True) -> LabConfig:
    """Load configuration from a config file, the environment and explicit overrides."""
    data: Dict[str, Any] = {}

    if path is not None:
        path = Path(path)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        data.update(_normalize_keys(dotenv_values(path)))
        logger.info(f"Loaded {len(data)} configuration values from {path}")

    if use_env:
        env_values = {
            k[len(ENV_PREFIX):]: v for k, v in os.environ.items() if k.startswith(ENV_PREFIX)
        }
        data.update(_normalize_keys(env_values, source="the environment", strict=False))

    if overrides:
        data.update(_normalize_keys(overrides))

    try:
        return LabConfig(**data)
    except ValidationError as e:
        raise DataError(f"invalid configuration: {e}") from e


def save_config_values(path: Path, values: Mapping[str, Any]) -> None:
    """Write or update KEY=VALUE lines in a config file, keeping unrelated lines."""
    path = Path(path)
    lines: List[str] = path.read_text(encoding="utf-8").splitlines() if path.exists() else []
    pending = {k.upper(): v for k, v in values.items()}
    out = []
    for line in lines:
        key = line.split("=", 1)[0].strip().upper() if "=" in line and not line.lstrip().startswith("#") else None
        if key in pending:
            out.append(f"{key}={pending.pop(key)}")
        else:
            out.append(line)
    out.extend(f"{k}={v}" for k, v in pending.items())
    path.write_text("\n".join(out) + "\n", encoding="utf-8")
    logger.info(f"Wrote {len(values)} configuration values to {path}")
