"""
=============================================================================
SAC TRAINER - SOFT ACTOR-CRITIC FOR THE TRIGGER-AND-ROTATE POLICY
=============================================================================

Replay buffer, twin-critic / actor / temperature updates with analytic
gradients, soft target updates, and the episode loop that drives any
gymnasium environment whose terminal info carries an episode result.

Exposed pure loss-and-gradient functions are what the gradient checks test.
"""

import csv
import math
import os
import logging
import tempfile
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from perch_errors import ConfigError, TrainingDivergence
from policy_network import (
    ACTOR_LAYERS,
    CRITIC_LAYERS,
    ACTION_DIM,
    Adam,
    GaussianPolicy,
    MlpParams,
    actor_backward,
    actor_forward,
    critic_backward,
    critic_forward,
    init_mlp,
    normalize_observation,
    save_checkpoint,
    squashed_log_prob,
)

logger = logging.getLogger(__name__)

REPLAY_SCHEMES = ("per_tick", "trigger")
CURVE_COLUMNS = ["episode", "reward", "n_legs", "triggered", "plane_angle_deg", "speed_m_s", "flight_angle_deg"]


@dataclass
class SacConfig:
    discount: float = 0.99
    soft_update_rate: float = 0.005
    batch_size: int = 64
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    lr_temperature: float = 3e-4
    target_entropy: float = -2.0
    initial_temperature: float = 0.2
    buffer_capacity: int = 20000
    updates_per_episode: Optional[int] = 1  # None: one update per stored transition
    episodes: int = 1500
    warmup_episodes: int = 50
    replay_scheme: str = "trigger"
    log_every: int = 50
    plateau_window: int = 100
    plateau_span: int = 200
    plateau_tolerance: float = 0.01

    def validate(self) -> "SacConfig":
        if not (0.0 < self.discount <= 1.0):
            raise ConfigError("training.discount", "must lie in (0, 1]")
        if not (0.0 < self.soft_update_rate <= 1.0):
            raise ConfigError("training.soft_update_rate", "must lie in (0, 1]")
        for name in ("lr_actor", "lr_critic", "lr_temperature"):
            if not (getattr(self, name) >= 0):
                raise ConfigError(f"training.{name}", "must be >= 0")
        for name in ("batch_size", "buffer_capacity", "episodes"):
            if not (getattr(self, name) >= 1):
                raise ConfigError(f"training.{name}", "must be >= 1")
        if self.warmup_episodes < 0:
            raise ConfigError("training.warmup_episodes", "must be >= 0")
        if self.updates_per_episode is not None and self.updates_per_episode < 0:
            raise ConfigError("training.updates_per_episode", "must be >= 0")
        if self.replay_scheme not in REPLAY_SCHEMES:
            raise ConfigError("training.replay_scheme", f"must be one of {list(REPLAY_SCHEMES)}")
        if not (self.initial_temperature > 0):
            raise ConfigError("training.initial_temperature", "must be positive")
        return self


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)


class ReplayBuffer:
    """Ring buffer of normalized transitions with uniform sampling"""

    def __init__(self, capacity: int, obs_dim: int = 4, action_dim: int = ACTION_DIM):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.dones = np.zeros(capacity)
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def add(self, obs: np.ndarray, action: np.ndarray, reward: float, next_obs: np.ndarray, done: bool):
        i = self.inserted % self.capacity
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.dones[i] = float(done)
        self.inserted += 1

    def sample_indices(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        if len(self) == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return rng.integers(0, len(self), size=batch_size)

    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch:
        idx = self.sample_indices(rng, batch_size)
        return Batch(self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.dones[idx])


# ============================================================================
# LOSSES AND GRADIENTS
# ============================================================================

def reparameterized_actions(actor: MlpParams, obs: np.ndarray, eps: np.ndarray, rot_scale: float):
    means, log_stds, cache = actor_forward(obs, actor)
    std = np.exp(log_stds)
    u = means + std * eps
    squashed = np.tanh(u)
    log_probs = squashed_log_prob(u, means, log_stds, rot_scale)
    return squashed, log_probs, {"u": u, "std": std, "actor": cache}


def soft_bellman_targets(batch: Batch, actor: MlpParams, target1: MlpParams, target2: MlpParams,
                         temperature: float, discount: float, eps_next: np.ndarray, rot_scale: float) -> np.ndarray:
    """r + gamma (1 - done) (min Q_target(s', a') - alpha log pi(a'|s'))"""
    next_actions, next_log_probs, _ = reparameterized_actions(actor, batch.next_obs, eps_next, rot_scale)
    q1, _ = critic_forward(batch.next_obs, next_actions, target1)
    q2, _ = critic_forward(batch.next_obs, next_actions, target2)
    soft_value = np.minimum(q1, q2) - temperature * next_log_probs
    return batch.rewards + discount * (1.0 - batch.dones) * soft_value


def critic_loss_and_grads(critic: MlpParams, obs: np.ndarray, actions: np.ndarray,
                          targets: np.ndarray) -> Tuple[float, MlpParams]:
    """Mean squared error to fixed targets"""
    q, cache = critic_forward(obs, actions, critic)
    diff = q - targets
    loss = float(np.mean(diff ** 2))
    grads, _ = critic_backward(2.0 * diff / len(diff), critic, cache)
    return loss, grads


def actor_loss_and_grads(actor: MlpParams, critic1: MlpParams, critic2: MlpParams, obs: np.ndarray,
                         eps: np.ndarray, temperature: float, rot_scale: float) -> Tuple[float, MlpParams, np.ndarray]:
    """mean(alpha log pi - min Q) with the reparameterization gradient through the tanh squash"""
    n = len(obs)
    actions, log_probs, aux = reparameterized_actions(actor, obs, eps, rot_scale)
    q1, cache1 = critic_forward(obs, actions, critic1)
    q2, cache2 = critic_forward(obs, actions, critic2)
    use_first = q1 <= q2
    q_min = np.where(use_first, q1, q2)
    loss = float(np.mean(temperature * log_probs - q_min))

    _, d_a1 = critic_backward(np.where(use_first, -1.0 / n, 0.0), critic1, cache1)
    _, d_a2 = critic_backward(np.where(use_first, 0.0, -1.0 / n), critic2, cache2)
    d_actions = d_a1 + d_a2
    d_u = d_actions * (1.0 - actions ** 2) + (temperature / n) * 2.0 * actions
    d_means = d_u
    d_log_stds = d_u * aux["std"] * eps - temperature / n
    grads = actor_backward(d_means, d_log_stds, actor, aux["actor"])
    return loss, grads, log_probs


def temperature_loss_and_grad(log_temperature: float, log_probs: np.ndarray,
                              target_entropy: float) -> Tuple[float, float]:
    """-mean(log_alpha (log pi + target entropy)); gradient with respect to log_alpha"""
    shifted = log_probs + target_entropy
    return float(-np.mean(log_temperature * shifted)), float(-np.mean(shifted))


def soft_update(target: MlpParams, online: MlpParams, rate: float):
    for t, o in zip(target.arrays(), online.arrays()):
        t *= (1.0 - rate)
        t += rate * o


def detect_plateau(rewards: List[float], window: int = 100, span: int = 200,
                   tolerance: float = 0.01) -> Optional[int]:
    """First episode at which the moving-average reward improved by less than tolerance over span episodes"""
    r = np.asarray(rewards, dtype=float)
    if len(r) < window + span:
        return None
    moving = np.convolve(r, np.ones(window) / window, mode="valid")
    for i in range(span, len(moving)):
        before, now = moving[i - span], moving[i]
        if now - before < tolerance * max(abs(before), 1e-9):
            return i + window - 1
    return None


# ============================================================================
# AGENT
# ============================================================================

class SoftActorCritic:
    """Owns the single mutable copy of actor, critics, targets and temperature"""

    def __init__(self, config: SacConfig, rng: np.random.Generator, rot_scale: float,
                 dump_dir: Optional[str] = None):
        self.config = config
        self.rng = rng
        self.rot_scale = float(rot_scale)
        self.dump_dir = dump_dir
        self.actor = init_mlp(ACTOR_LAYERS, rng)
        self.critic1 = init_mlp(CRITIC_LAYERS, rng)
        self.critic2 = init_mlp(CRITIC_LAYERS, rng)
        self.target1 = self.critic1.copy()
        self.target2 = self.critic2.copy()
        self.log_temperature = np.array([math.log(config.initial_temperature)])
        self.actor_opt = Adam(config.lr_actor)
        self.critic1_opt = Adam(config.lr_critic)
        self.critic2_opt = Adam(config.lr_critic)
        self.temperature_opt = Adam(config.lr_temperature)
        self.updates = 0

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_temperature[0]))

    def policy(self, deterministic: bool = True) -> GaussianPolicy:
        return GaussianPolicy(self.actor, self.rot_scale, deterministic)

    def networks(self) -> Dict[str, MlpParams]:
        return {
            "actor": self.actor,
            "critic1": self.critic1,
            "critic2": self.critic2,
            "target1": self.target1,
            "target2": self.target2,
        }

    def update_step(self, batch: Batch) -> Dict[str, float]:
        """One critic, actor and temperature step followed by the soft target update"""
        if len(batch) < 1:
            raise ValueError("update_step needs a nonempty batch")
        cfg = self.config
        alpha = self.temperature
        eps_next = self.rng.standard_normal((len(batch), ACTION_DIM))
        eps_actor = self.rng.standard_normal((len(batch), ACTION_DIM))

        targets = soft_bellman_targets(batch, self.actor, self.target1, self.target2, alpha,
                                       cfg.discount, eps_next, self.rot_scale)
        loss_q1, grads_q1 = critic_loss_and_grads(self.critic1, batch.obs, batch.actions, targets)
        loss_q2, grads_q2 = critic_loss_and_grads(self.critic2, batch.obs, batch.actions, targets)
        loss_pi, grads_pi, log_probs = actor_loss_and_grads(self.actor, self.critic1, self.critic2, batch.obs,
                                                            eps_actor, alpha, self.rot_scale)
        loss_alpha, grad_alpha = temperature_loss_and_grad(float(self.log_temperature[0]), log_probs,
                                                           cfg.target_entropy)
        losses = {"critic1": loss_q1, "critic2": loss_q2, "actor": loss_pi, "temperature": loss_alpha}
        if not all(math.isfinite(v) for v in losses.values()):
            self._divergence(batch, losses)

        self.critic1_opt.step(self.critic1.arrays(), grads_q1.arrays())
        self.critic2_opt.step(self.critic2.arrays(), grads_q2.arrays())
        self.actor_opt.step(self.actor.arrays(), grads_pi.arrays())
        self.temperature_opt.step([self.log_temperature], [np.array([grad_alpha])])
        soft_update(self.target1, self.critic1, cfg.soft_update_rate)
        soft_update(self.target2, self.critic2, cfg.soft_update_rate)
        self.updates += 1
        return losses

    def _divergence(self, batch: Batch, losses: Dict[str, float]):
        directory = self.dump_dir or tempfile.gettempdir()
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, "divergence_dump.npz")
        np.savez(path, obs=batch.obs, actions=batch.actions, rewards=batch.rewards, next_obs=batch.next_obs,
                 dones=batch.dones, log_temperature=self.log_temperature,
                 losses=np.array([losses[k] for k in sorted(losses)]),
                 **{f"{name}__W{i}": w for name, p in self.networks().items() for i, w in enumerate(p.weights)})
        logger.error(f"[SAC] divergence after {self.updates} updates: {losses}")
        raise TrainingDivergence(f"non-finite SAC loss after {self.updates} updates", path)


# ============================================================================
# TRAINING LOOP
# ============================================================================

@dataclass
class TrainingResult:
    agent: SoftActorCritic
    curve: List[Dict[str, Any]] = field(default_factory=list)
    best_checkpoint: Optional[str] = None
    final_checkpoint: Optional[str] = None
    plateau_episode: Optional[int] = None
    replay: Optional[ReplayBuffer] = None

    @property
    def rewards(self) -> List[float]:
        return [row["reward"] for row in self.curve]

    def success_rate(self, last: int = 100) -> float:
        rows = self.curve[-last:]
        return float(np.mean([row["n_legs"] == 4 for row in rows])) if rows else 0.0


def _curve_row(episode: int, result: Any, env: Any) -> Dict[str, Any]:
    condition = getattr(env, "condition", None)
    surface = getattr(env, "surface", None)
    return {
        "episode": episode,
        "reward": float(result.scalar_reward),
        "n_legs": int(result.n_legs),
        "triggered": bool(result.triggered),
        "plane_angle_deg": math.degrees(surface.theta_plane) if surface is not None else float("nan"),
        "speed_m_s": condition.speed if condition is not None else float("nan"),
        "flight_angle_deg": math.degrees(condition.flight_angle) if condition is not None else float("nan"),
    }


def train(env: Any, config: SacConfig, seed: int, run_dir: Optional[str] = None,
          metadata: Optional[Dict[str, Any]] = None) -> TrainingResult:
    """Episode loop: rollout, replay insertion, gradient updates, logging, checkpoints"""
    config.validate()
    root = np.random.SeedSequence(seed)
    env_seq, act_seq, agent_seq = root.spawn(3)
    env_rng = np.random.default_rng(env_seq)
    act_rng = np.random.default_rng(act_seq)
    rot_scale = float(getattr(env, "rot_scale", 1.0))
    agent = SoftActorCritic(config, np.random.default_rng(agent_seq), rot_scale, dump_dir=run_dir)
    buffer = ReplayBuffer(config.buffer_capacity)
    result = TrainingResult(agent, replay=buffer)
    metadata = {**(metadata or {}), "rot_scale": rot_scale, "seed": seed, "sac": asdict(config)}
    best_average = -math.inf

    logger.info(f"[SAC] training {config.episodes} episodes, scheme={config.replay_scheme}, seed={seed}")
    for episode in range(config.episodes):
        obs, info = env.reset(seed=int(env_rng.integers(2 ** 31 - 1)))
        obs = normalize_observation(obs)
        stored = 0
        behaviour = agent.policy(deterministic=False)
        while True:
            if episode < config.warmup_episodes:
                action = act_rng.uniform(-1.0, 1.0, size=ACTION_DIM)
            else:
                action = behaviour.act(info["observation"], act_rng)
            next_obs, reward, terminated, truncated, info = env.step(action)
            next_obs = normalize_observation(next_obs)
            finished = terminated or truncated
            if config.replay_scheme == "per_tick" or finished:
                buffer.add(obs, action, reward, next_obs, terminated or config.replay_scheme == "trigger")
                stored += 1
            obs = next_obs
            if finished:
                break

        episode_result = info["result"]
        row = _curve_row(episode, episode_result, env)
        if not math.isfinite(row["reward"]):
            raise TrainingDivergence(f"non-finite episode reward at episode {episode}")
        result.curve.append(row)

        if episode >= config.warmup_episodes and len(buffer) >= config.batch_size:
            n_updates = config.updates_per_episode if config.updates_per_episode is not None else stored
            for _ in range(n_updates):
                agent.update_step(buffer.sample(agent.rng, config.batch_size))

        window = result.rewards[-config.plateau_window:]
        average = float(np.mean(window))
        if run_dir and episode >= config.warmup_episodes and len(window) == config.plateau_window \
                and average > best_average:
            best_average = average
            result.best_checkpoint = save_checkpoint(
                os.path.join(run_dir, "policy_best.npz"), agent.networks(),
                {**metadata, "episode": episode, "moving_average_reward": average})
        if config.log_every and (episode + 1) % config.log_every == 0:
            logger.info(f"[SAC] episode {episode + 1}: avg reward {average:.3f}, "
                        f"four-leg rate {result.success_rate(config.plateau_window):.2f}, "
                        f"alpha {agent.temperature:.4f}, buffer {len(buffer)}")

    result.plateau_episode = detect_plateau(result.rewards, config.plateau_window, config.plateau_span,
                                            config.plateau_tolerance)
    if run_dir:
        result.final_checkpoint = save_checkpoint(os.path.join(run_dir, "policy_final.npz"), agent.networks(),
                                                  {**metadata, "episode": config.episodes - 1})
    logger.info(f"[SAC] finished: plateau episode {result.plateau_episode}, "
                f"final four-leg rate {result.success_rate(config.plateau_window):.2f}")
    return result


def write_learning_curve(path: str, curve: List[Dict[str, Any]], config_digest: str, seed: int) -> str:
    with open(path, "w", newline="") as f:
        f.write(f"# config_digest={config_digest} seed={seed}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)
        for row in curve:
            writer.writerow([
                row["episode"],
                f"{row['reward']:.6f}",
                row["n_legs"],
                int(row["triggered"]),
                f"{row['plane_angle_deg']:.3f}",
                f"{row['speed_m_s']:.6f}",
                f"{row['flight_angle_deg']:.6f}",
            ])
    return path
