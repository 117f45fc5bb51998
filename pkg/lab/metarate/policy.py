"""
Policy core: state featurization, the MLP actor with a softmax over the action grid,
exponential bitrate mapping, the QoE reward and the linear value baseline.

Reward units: throughput in Mbps, loss as a fraction, delay converted from ms to seconds,
bitrate change in Mbps. With weights (50, 50, 200, 20), 5 ms of delay costs as much as
0.02 Mbps of throughput earns.
"""
import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import LabConfig
from .errors import GradientError, ParamFileError
from .models import LinkFeedback

logger = logging.getLogger(__name__)

ETA_SCALE = 2.5       # Mbps
DELAY_SCALE = 1000.0  # ms
CHANNELS = 5

PARAM_MAGIC = b"MRPP"
PARAM_VERSION = 1
ACTIVATIONS = {"tanh": 0, "relu": 1}


@dataclass(frozen=True)
class PolicyParams:
    """
    Immutable parameter snapshot: weights W{i} (fan_in x fan_out), biases b{i}, and the
    linear baseline coefficients (state_dim + 1, intercept last).
    """
    weights: Dict[str, np.ndarray]
    activation: str = "tanh"
    baseline: Optional[np.ndarray] = None

    def __post_init__(self):
        frozen = {}
        for k, v in self.weights.items():
            arr = np.array(v, dtype=np.float64, copy=True)
            arr.flags.writeable = False
            frozen[k] = arr
        object.__setattr__(self, "weights", frozen)
        if self.baseline is not None:
            base = np.array(self.baseline, dtype=np.float64, copy=True)
            base.flags.writeable = False
            object.__setattr__(self, "baseline", base)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation: {self.activation}")

    @property
    def n_layers(self) -> int:
        return len(self.weights) // 2

    @property
    def layer_sizes(self) -> List[int]:
        sizes = [self.weights["W0"].shape[0]]
        sizes.extend(self.weights[f"W{i}"].shape[1] for i in range(self.n_layers))
        return sizes

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.weights.values())

    def to_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.weights.items()}

    def add(self, grads: Dict[str, np.ndarray], scale: float) -> "PolicyParams":
        return PolicyParams({k: v + scale * grads[k] for k, v in self.weights.items()},
                            self.activation, self.baseline)

    def with_baseline(self, baseline: Optional[np.ndarray]) -> "PolicyParams":
        return PolicyParams(self.weights, self.activation, baseline)

    def equals(self, other: "PolicyParams") -> bool:
        return (self.activation == other.activation and self.weights.keys() == other.weights.keys()
                and all(np.array_equal(v, other.weights[k]) for k, v in self.weights.items()))


def init_params(layer_sizes: Sequence[int], rng: np.random.Generator, activation: str = "tanh") -> PolicyParams:
    """Uniform initialization in +/- sqrt(6 / (fan_in + fan_out)), zero biases."""
    weights = {}
    for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights[f"W{i}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        weights[f"b{i}"] = np.zeros(fan_out)
    return PolicyParams(weights, activation)


def zero_params(layer_sizes: Sequence[int], activation: str = "tanh") -> PolicyParams:
    weights = {}
    for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        weights[f"W{i}"] = np.zeros((fan_in, fan_out))
        weights[f"b{i}"] = np.zeros(fan_out)
    return PolicyParams(weights, activation)


# Featurization

@dataclass
class StepRecord:
    """One decision interval of history: feedback over the interval plus the bitrate in force."""
    throughput: float
    bitrate: float
    loss_ratio: float
    delay: float
    jitter: float


def featurize(history: Sequence[StepRecord], steps: int = 30) -> np.ndarray:
    """
    Flatten the last `steps` records into 5 channels x steps (throughput, bitrate, loss,
    delay, jitter), oldest first, zero-padded at the front when history is short.
    """
    state = np.zeros((CHANNELS, steps))
    recent = list(history)[-steps:]
    if recent:
        block = np.array([[r.throughput / ETA_SCALE, r.bitrate / ETA_SCALE, r.loss_ratio,
                           r.delay / DELAY_SCALE, r.jitter / DELAY_SCALE] for r in recent]).T
        state[:, steps - len(recent):] = block
    return state.reshape(-1)


def step_record(fb: LinkFeedback, bitrate: float) -> StepRecord:
    return StepRecord(fb.throughput, bitrate, fb.loss_ratio, fb.delay, fb.delay_jitter)


# Network

def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    return np.tanh(z) if activation == "tanh" else np.maximum(z, 0.0)


def _activate_grad(a: np.ndarray, z: np.ndarray, activation: str) -> np.ndarray:
    return 1.0 - a ** 2 if activation == "tanh" else (z > 0).astype(float)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardCache:
    inputs: List[np.ndarray] = field(default_factory=list)
    pre: List[np.ndarray] = field(default_factory=list)
    post: List[np.ndarray] = field(default_factory=list)
    probs: Optional[np.ndarray] = None


def forward_batch(params: PolicyParams, states: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """Action probabilities for a batch of states (N x state_dim), with the backprop cache."""
    x = np.atleast_2d(np.asarray(states, dtype=np.float64))
    cache = ForwardCache()
    n = params.n_layers
    for i in range(n):
        cache.inputs.append(x)
        z = x @ params.weights[f"W{i}"] + params.weights[f"b{i}"]
        cache.pre.append(z)
        x = _activate(z, params.activation) if i < n - 1 else z
        cache.post.append(x)
    if not np.all(np.isfinite(x)):
        raise GradientError("non-finite logits: parameters are corrupted")
    cache.probs = softmax(x)
    return cache.probs, cache


def forward(params: PolicyParams, state: np.ndarray) -> np.ndarray:
    probs, _ = forward_batch(params, state)
    return probs[0]


def backward(params: PolicyParams, cache: ForwardCache, dlogits: np.ndarray) -> Dict[str, np.ndarray]:
    """Gradients of a scalar objective given its gradient with respect to the logits."""
    grads: Dict[str, np.ndarray] = {}
    delta = dlogits
    for i in reversed(range(params.n_layers)):
        grads[f"W{i}"] = cache.inputs[i].T @ delta
        grads[f"b{i}"] = delta.sum(axis=0)
        if i > 0:
            upstream = delta @ params.weights[f"W{i}"].T
            delta = upstream * _activate_grad(cache.post[i - 1], cache.pre[i - 1], params.activation)
    return grads


def select_action(probs: np.ndarray, mode: str, rng: Optional[np.random.Generator] = None) -> int:
    if mode == "argmax":
        return int(np.argmax(probs))
    if rng is None:
        raise ValueError("sampling mode needs a random generator")
    return int(rng.choice(len(probs), p=probs))


def apply_action(b_prev: float, a: float, ladder_min: float = 0.1, ladder_max: float = 2.5) -> float:
    """b_t = b_prev * exp(a), clamped to the ladder range."""
    return min(max(b_prev * math.exp(a), ladder_min), ladder_max)


def reward(eta: float, loss: float, delay_ms: float, b_t: float, b_prev: float,
           weights: Tuple[float, float, float, float] = (50.0, 50.0, 200.0, 20.0)) -> float:
    w1, w2, w3, w4 = weights
    return w1 * eta - w2 * loss - w3 * (delay_ms / 1000.0) - w4 * abs(b_t - b_prev)


def cumulative_reward(rewards: Sequence[float], t: int, gamma: float, horizon: int = 30) -> float:
    """Discounted sum of rewards over `horizon` steps from t, truncated at the episode end."""
    r = np.asarray(rewards, dtype=float)[t:t + horizon]
    return float(np.sum(r * gamma ** np.arange(len(r))))


def discounted_returns(rewards: Sequence[float], gamma: float, horizon: int = 30) -> np.ndarray:
    """cumulative_reward for every t of an episode."""
    r = np.asarray(rewards, dtype=float)
    n = len(r)
    out = np.zeros(n)
    for k in range(min(horizon, n)):
        out[:n - k] += (gamma ** k) * r[k:]
    return out


# Baseline

def _design(states: np.ndarray) -> np.ndarray:
    states = np.atleast_2d(np.asarray(states, dtype=float))
    return np.hstack([states, np.ones((len(states), 1))])


def baseline_fit(states: np.ndarray, returns: np.ndarray, ridge_lambda: float = 1e-3) -> np.ndarray:
    """
    Least-squares linear map from state to return, intercept last. A rank-deficient design
    falls back to ridge regression with the intercept left unpenalized.
    """
    X = _design(states)
    y = np.asarray(returns, dtype=float)
    if len(X) < 2:
        raise ValueError("baseline fit needs at least 2 samples")
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < X.shape[1]:
        penalty = np.full(X.shape[1], ridge_lambda)
        penalty[-1] = 0.0
        coef = np.linalg.solve(X.T @ X + np.diag(penalty), X.T @ y)
    return coef


def baseline_eval(coef: np.ndarray, states: np.ndarray) -> np.ndarray:
    return _design(states) @ coef


# Parameter files

def save_params(params: PolicyParams, path) -> Path:
    """
    Layout (little-endian): magic "MRPP", u16 version, u8 activation, u16 layer count L,
    (L + 1) x u32 layer sizes, then for each layer W (row-major float64) and b, then u32
    baseline length and its float64 values, then a 32-byte sha256 of everything before it.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sizes = params.layer_sizes
    body = bytearray()
    body += PARAM_MAGIC
    body += struct.pack("<HBH", PARAM_VERSION, ACTIVATIONS[params.activation], params.n_layers)
    body += struct.pack(f"<{len(sizes)}I", *sizes)
    for i in range(params.n_layers):
        body += params.weights[f"W{i}"].astype("<f8").tobytes(order="C")
        body += params.weights[f"b{i}"].astype("<f8").tobytes(order="C")
    baseline = params.baseline if params.baseline is not None else np.zeros(0)
    body += struct.pack("<I", len(baseline))
    body += baseline.astype("<f8").tobytes()
    body += hashlib.sha256(bytes(body)).digest()
    path.write_bytes(bytes(body))
    return path


def load_params(path) -> PolicyParams:
    path = Path(path)
    if not path.exists():
        raise ParamFileError(f"parameter file not found: {path}")
    data = path.read_bytes()
    if len(data) < 41 or data[:4] != PARAM_MAGIC:
        raise ParamFileError(f"{path}: not a parameter file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ParamFileError(f"{path}: checksum mismatch")
    version, act_code, n_layers = struct.unpack_from("<HBH", body, 4)
    if version != PARAM_VERSION:
        raise ParamFileError(f"{path}: unsupported version {version}")
    activation = {v: k for k, v in ACTIVATIONS.items()}.get(act_code)
    if activation is None:
        raise ParamFileError(f"{path}: unknown activation code {act_code}")
    try:
        offset = 9
        sizes = struct.unpack_from(f"<{n_layers + 1}I", body, offset)
        offset += 4 * (n_layers + 1)
        weights = {}
        for i in range(n_layers):
            count = sizes[i] * sizes[i + 1]
            weights[f"W{i}"] = np.frombuffer(body, "<f8", count, offset).reshape(sizes[i], sizes[i + 1])
            offset += 8 * count
            weights[f"b{i}"] = np.frombuffer(body, "<f8", sizes[i + 1], offset)
            offset += 8 * sizes[i + 1]
        (n_base,) = struct.unpack_from("<I", body, offset)
        offset += 4
        baseline = np.frombuffer(body, "<f8", n_base, offset) if n_base else None
        offset += 8 * n_base
    except (struct.error, ValueError) as e:
        raise ParamFileError(f"{path}: truncated body ({e})") from e
    if offset != len(body):
        raise ParamFileError(f"{path}: {len(body) - offset} unexpected trailing bytes")
    return PolicyParams(weights, activation, baseline)
