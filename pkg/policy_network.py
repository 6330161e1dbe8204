"""
=============================================================================
POLICY NETWORK - NUMPY MLPs WITH ANALYTIC GRADIENTS
=============================================================================

Stochastic actor and twin critics for the perching policy:
- 4 -> 10 -> 10 -> 10 -> head multilayer perceptrons, tanh hidden layers
- Reverse-mode gradients from the cached forward pass
- Squashed Gaussian action head (trigger in [-1, 1], rotation scaled to +/- rot_scale)
- Adam optimizer state
- Versioned .npz checkpoints with JSON metadata and a config digest
"""

import json
import math
import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from perch_errors import PolicyError, CheckpointError

logger = logging.getLogger(__name__)

ACTOR_LAYERS = (4, 10, 10, 10, 4)
CRITIC_LAYERS = (6, 10, 10, 10, 1)
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
ACTION_DIM = 2
OBS_SCALE = np.array([1.0, 10.0, 2.0, math.pi])
CHECKPOINT_VERSION = 1
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class MlpParams:
    """Row-major layer weights (in x out) and biases"""
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @property
    def layer_sizes(self) -> Tuple[int, ...]:
        return tuple([self.weights[0].shape[0]] + [w.shape[1] for w in self.weights])

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def arrays(self) -> List[np.ndarray]:
        return [*self.weights, *self.biases]

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def equals(self, other: "MlpParams") -> bool:
        return len(self.weights) == len(other.weights) and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


@dataclass
class ActionSample:
    a_trg: float
    a_rot: float
    log_prob: float
    normalized: np.ndarray


def init_mlp(layer_sizes: Sequence[int], rng: np.random.Generator, output_scale: float = 3e-3) -> MlpParams:
    """Xavier-uniform hidden layers, small uniform output layer"""
    weights, biases = [], []
    n_layers = len(layer_sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        if i == n_layers - 1:
            limit = output_scale
        else:
            limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out) if i < n_layers - 1 else rng.uniform(-limit, limit, size=fan_out))
    return MlpParams(weights, biases)


def check_shapes(params: MlpParams, layer_sizes: Sequence[int]):
    if params.layer_sizes != tuple(layer_sizes):
        raise PolicyError(f"shape mismatch: network {params.layer_sizes}, expected {tuple(layer_sizes)}")
    for w, b in zip(params.weights, params.biases):
        if b.shape != (w.shape[1],):
            raise PolicyError(f"bias shape {b.shape} does not match weight {w.shape}")


# ============================================================================
# FORWARD / BACKWARD
# ============================================================================

def mlp_forward(x: np.ndarray, params: MlpParams) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Batch forward pass; returns the output and the activations needed by mlp_backward"""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != params.weights[0].shape[0]:
        raise PolicyError(f"shape mismatch: input width {x.shape[1]}, network expects {params.weights[0].shape[0]}")
    cache = [x]
    a = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        a = z if i == last else np.tanh(z)
        if i != last:
            cache.append(a)
    return a, cache


def mlp_backward(d_out: np.ndarray, params: MlpParams,
                 cache: Optional[List[np.ndarray]]) -> Tuple[MlpParams, np.ndarray]:
    """Parameter gradients and input gradient for an upstream gradient at the outputs"""
    if cache is None or len(cache) != len(params.weights):
        raise PolicyError("backprop needs the cached forward pass")
    grads_w: List[np.ndarray] = [None] * len(params.weights)
    grads_b: List[np.ndarray] = [None] * len(params.weights)
    delta = np.atleast_2d(np.asarray(d_out, dtype=float))
    for i in reversed(range(len(params.weights))):
        a_in = cache[i]
        grads_w[i] = a_in.T @ delta
        grads_b[i] = delta.sum(axis=0)
        d_in = delta @ params.weights[i].T
        if i > 0:
            delta = d_in * (1.0 - cache[i] ** 2)
    return MlpParams(grads_w, grads_b), d_in


def normalize_observation(observation: Union[np.ndarray, Any]) -> np.ndarray:
    if hasattr(observation, "as_array"):
        observation = observation.as_array()
    return np.asarray(observation, dtype=float) / OBS_SCALE


def actor_forward(obs: np.ndarray, params: MlpParams) -> Tuple[np.ndarray, np.ndarray, Dict[str, Any]]:
    """Means and clipped log-stds for a batch of normalized observations"""
    out, cache = mlp_forward(obs, params)
    if out.shape[1] != 2 * ACTION_DIM:
        raise PolicyError(f"shape mismatch: actor head has {out.shape[1]} outputs")
    means = out[:, :ACTION_DIM]
    raw_log_std = out[:, ACTION_DIM:]
    log_stds = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    mask = (raw_log_std > LOG_STD_MIN) & (raw_log_std < LOG_STD_MAX)
    return means, log_stds, {"mlp": cache, "log_std_mask": mask}


def actor_backward(d_means: np.ndarray, d_log_stds: np.ndarray, params: MlpParams,
                   cache: Optional[Dict[str, Any]]) -> MlpParams:
    if cache is None:
        raise PolicyError("backprop needs the cached forward pass")
    d_out = np.concatenate([d_means, d_log_stds * cache["log_std_mask"]], axis=1)
    grads, _ = mlp_backward(d_out, params, cache["mlp"])
    return grads


def critic_forward(obs: np.ndarray, action: np.ndarray, params: MlpParams) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Q value per row of (normalized observation, normalized action)"""
    x = np.concatenate([np.atleast_2d(obs), np.atleast_2d(action)], axis=1)
    out, cache = mlp_forward(x, params)
    if out.shape[1] != 1:
        raise PolicyError(f"shape mismatch: critic head has {out.shape[1]} outputs")
    return out[:, 0], cache


def critic_backward(d_q: np.ndarray, params: MlpParams,
                    cache: Optional[List[np.ndarray]]) -> Tuple[MlpParams, np.ndarray]:
    """Parameter gradients and the gradient with respect to the action columns"""
    grads, d_x = mlp_backward(np.asarray(d_q, dtype=float).reshape(-1, 1), params, cache)
    return grads, d_x[:, -ACTION_DIM:]


# ============================================================================
# SQUASHED GAUSSIAN HEAD
# ============================================================================

def log_one_minus_tanh_sq(u: np.ndarray) -> np.ndarray:
    """log(1 - tanh(u)^2) without cancellation for large |u|"""
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def squashed_log_prob(u: np.ndarray, means: np.ndarray, log_stds: np.ndarray, rot_scale: float) -> np.ndarray:
    """Density of the scaled action (a_trg, a_rot) for pre-squash samples u, summed over dimensions"""
    std = np.exp(log_stds)
    eps = (u - means) / std
    gaussian = -0.5 * eps ** 2 - log_stds - LOG_SQRT_2PI
    return (gaussian - log_one_minus_tanh_sq(u)).sum(axis=1) - math.log(rot_scale)


def sample_action(obs: Union[np.ndarray, Any], params: MlpParams, rng: np.random.Generator,
                  rot_scale: float, deterministic: bool = False) -> ActionSample:
    """Reparameterized sample for a single observation"""
    means, log_stds, _ = actor_forward(normalize_observation(obs)[None, :], params)
    eps = np.zeros_like(means) if deterministic else rng.standard_normal(means.shape)
    u = means + np.exp(log_stds) * eps
    squashed = np.tanh(u)[0]
    log_prob = float(squashed_log_prob(u, means, log_stds, rot_scale)[0])
    return ActionSample(
        a_trg=float(squashed[0]),
        a_rot=float(squashed[1] * rot_scale),
        log_prob=log_prob,
        normalized=squashed,
    )


class GaussianPolicy:
    """Read-only actor snapshot usable as a policy handle by the env and the analysis sweeps"""

    def __init__(self, actor: MlpParams, rot_scale: float, deterministic: bool = True):
        check_shapes(actor, ACTOR_LAYERS)
        self.actor = actor.copy()
        self.rot_scale = float(rot_scale)
        self.deterministic = deterministic

    def act(self, observation: Any, rng: np.random.Generator) -> np.ndarray:
        return sample_action(observation, self.actor, rng, self.rot_scale, self.deterministic).normalized


# ============================================================================
# OPTIMIZER
# ============================================================================

class Adam:
    """Adam state for one MlpParams (or a list of plain arrays)"""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Optional[List[np.ndarray]] = None
        self.v: Optional[List[np.ndarray]] = None

    def step(self, arrays: List[np.ndarray], grads: List[np.ndarray]):
        """In-place descent step on the given arrays"""
        if self.m is None:
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def state_dict(self) -> Dict[str, Any]:
        return {"t": self.t, "m": self.m, "v": self.v}


# ============================================================================
# GRADIENT CHECK
# ============================================================================

def numeric_gradients(loss: Callable[[], float], arrays: Sequence[np.ndarray], h: float = 1e-6) -> List[np.ndarray]:
    """Central differences of loss() for every entry of arrays; entries are perturbed in place and restored"""
    result = []
    for array in arrays:
        grad = np.zeros_like(array)
        for idx in np.ndindex(array.shape):
            old = array[idx]
            array[idx] = old + h
            up = loss()
            array[idx] = old - h
            down = loss()
            array[idx] = old
            grad[idx] = (up - down) / (2.0 * h)
        result.append(grad)
    return result


def gradient_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray], floor: float = 1e-4) -> float:
    """Largest |a - n| / max(|a| + |n|, floor) over all entries"""
    if len(analytic) != len(numeric):
        raise PolicyError(f"gradient check over {len(analytic)} analytic and {len(numeric)} numeric tensors")
    worst = 0.0
    for a, n in zip(analytic, numeric):
        rel = np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)
        worst = max(worst, float(np.max(rel, initial=0.0)))
    return worst


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_checkpoint(path: str, networks: Dict[str, MlpParams], metadata: Dict[str, Any]) -> str:
    """Write every network as float64 arrays plus layer shapes and JSON metadata"""
    arrays: Dict[str, np.ndarray] = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "metadata": np.array(json.dumps({**metadata, "obs_scale": OBS_SCALE.tolist()}, sort_keys=True)),
        "networks": np.array(json.dumps(sorted(networks))),
    }
    for name, params in networks.items():
        arrays[f"{name}__layers"] = np.array(params.layer_sizes)
        for i, (w, b) in enumerate(zip(params.weights, params.biases)):
            arrays[f"{name}__W{i}"] = np.ascontiguousarray(w, dtype=np.float64)
            arrays[f"{name}__b{i}"] = np.ascontiguousarray(b, dtype=np.float64)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    logger.info(f"[Policy] checkpoint saved: {path}")
    return path


def load_checkpoint(path: str, expected_digest: Optional[str] = None) -> Tuple[Dict[str, MlpParams], Dict[str, Any]]:
    """Inverse of save_checkpoint; rejects corrupted or incompatible files"""
    try:
        with np.load(path, allow_pickle=False) as data:
            contents = {key: data[key] for key in data.files}
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e

    try:
        version = int(contents["format_version"])
        metadata = json.loads(str(contents["metadata"]))
        names = json.loads(str(contents["networks"]))
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint {path} is missing its header: {e}") from e
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")

    networks: Dict[str, MlpParams] = {}
    for name in names:
        try:
            layers = tuple(int(n) for n in contents[f"{name}__layers"])
            weights = [contents[f"{name}__W{i}"] for i in range(len(layers) - 1)]
            biases = [contents[f"{name}__b{i}"] for i in range(len(layers) - 1)]
        except KeyError as e:
            raise CheckpointError(f"checkpoint {path} is missing arrays for '{name}': {e}") from e
        params = MlpParams(weights, biases)
        try:
            check_shapes(params, layers)
        except PolicyError as e:
            raise CheckpointError(f"checkpoint {path}: {e}") from e
        networks[name] = params

    if "actor" in networks:
        try:
            check_shapes(networks["actor"], ACTOR_LAYERS)
        except PolicyError as e:
            raise CheckpointError(f"checkpoint {path}: {e}") from e
    if expected_digest is not None and metadata.get("config_digest") != expected_digest:
        logger.warning(f"[Policy] checkpoint config digest {metadata.get('config_digest')} "
                       f"differs from the current config {expected_digest}")
    return networks, metadata


def load_policy(path: str, deterministic: bool = True, expected_digest: Optional[str] = None) -> GaussianPolicy:
    networks, metadata = load_checkpoint(path, expected_digest)
    if "actor" not in networks:
        raise CheckpointError(f"checkpoint {path} holds no actor network")
    return GaussianPolicy(networks["actor"], metadata.get("rot_scale", 90.0), deterministic)
