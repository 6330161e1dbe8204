"""
Toy trigger-timing task with a known optimum.

tau starts uniformly in [0, 1.5] s and falls by one policy tick (0.01 s) per step.
Triggering while tau < 0.3 s earns 1, any other trigger earns 0, and letting
tau reach zero ends the episode with 0. Used to check the SAC trainer.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np
import gymnasium as gym
from gymnasium import spaces

logger = logging.getLogger(__name__)


@dataclass
class TriggerOutcome:
    triggered: bool
    tau_at_trigger: Optional[float]
    correct: bool
    scalar_reward: float

    @property
    def n_legs(self) -> int:
        return 4 if self.correct else 0

    @property
    def four_leg(self) -> bool:
        return self.correct


class TriggerTimingEnv(gym.Env):
    metadata = {"render_modes": []}

    def __init__(self, tau_window: float = 0.3, tau_start_max: float = 1.5, tick: float = 0.01):
        super().__init__()
        self.tau_window = tau_window
        self.tau_start_max = tau_start_max
        self.tick = tick
        self.rot_scale = 1.0
        self.action_space = spaces.Box(-1.0, 1.0, shape=(2,), dtype=np.float64)
        self.observation_space = spaces.Box(0.0, tau_start_max, shape=(4,), dtype=np.float64)
        self.tau = 0.0

    def _obs(self) -> np.ndarray:
        return np.array([self.tau, 0.0, self.tau, 0.0])

    def reset(self, *, seed: Optional[int] = None, options: Optional[Dict[str, Any]] = None):
        super().reset(seed=seed)
        options = options or {}
        self.tau = float(options.get("tau", self.np_random.uniform(0.0, self.tau_start_max)))
        obs = self._obs()
        return obs, {"observation": obs}

    def step(self, action):
        if float(action[0]) > 0.0:
            correct = self.tau < self.tau_window
            outcome = TriggerOutcome(True, self.tau, correct, 1.0 if correct else 0.0)
            obs = self._obs()
            return obs, outcome.scalar_reward, True, False, {"observation": obs, "result": outcome}
        self.tau -= self.tick
        obs = self._obs()
        if self.tau <= 0.0:
            self.tau = 0.0
            obs = self._obs()
            outcome = TriggerOutcome(False, None, False, 0.0)
            return obs, 0.0, True, False, {"observation": obs, "result": outcome}
        return obs, 0.0, False, False, {"observation": obs}


def trigger_accuracy(policy: Any, episodes: int = 200, seed: int = 0, env: Optional[TriggerTimingEnv] = None) -> float:
    """Fraction of episodes whose trigger lands inside the reward window"""
    env = env or TriggerTimingEnv()
    rng = np.random.default_rng(seed)
    correct = 0
    for i in range(episodes):
        _, info = env.reset(seed=seed + i)
        while True:
            _, _, terminated, truncated, info = env.step(policy.act(info["observation"], rng))
            if terminated or truncated:
                correct += int(info["result"].correct)
                break
    accuracy = correct / episodes
    logger.info(f"[Synthetic] trigger accuracy {accuracy:.3f} over {episodes} episodes")
    return accuracy
