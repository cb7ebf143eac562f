"""Goal-conditioned desk-scale environments with sparse 0/-1 rewards.

Three tasks: a 2D point reach, a 4-joint kinematic arm reach (joint range
±1.7 rad, L1 success threshold 0.1 rad), and a planar slide where a single
impulse launches a puck that then coasts under friction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FIXED = "fixed_start_goal"
RANDOM = "random_start_goal"

ENV_NAMES = ("point-reach", "arm-reach", "planar-slide")


@dataclass
class GoalObservation:
    state: np.ndarray
    achieved_goal: np.ndarray
    desired_goal: np.ndarray

    def concat(self) -> np.ndarray:
        """state || desired_goal, the network input convention."""
        return np.concatenate([self.state, self.desired_goal])


@dataclass
class StepResult:
    observation: GoalObservation
    reward: float
    done: bool
    is_success: bool


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    goal_dim: int
    action_dim: int
    max_action: float
    episode_length: int
    mode: str

    def __post_init__(self) -> None:
        if self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")
        if self.mode not in (FIXED, RANDOM):
            raise ValueError(f"unknown mode: {self.mode}")


class GoalEnv:
    """Shared rollout bookkeeping; subclasses provide dynamics and the goal metric."""

    spec: EnvSpec

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self._state: np.ndarray | None = None
        self._goal: np.ndarray | None = None
        self._steps = 0
        self._done = True

    # -- goal metric -------------------------------------------------------

    def goal_distance(self, achieved: np.ndarray, desired: np.ndarray) -> float:
        raise NotImplementedError

    @property
    def success_threshold(self) -> float:
        raise NotImplementedError

    def is_goal_met(self, achieved: np.ndarray, desired: np.ndarray) -> bool:
        achieved = np.asarray(achieved, dtype=np.float64)
        desired = np.asarray(desired, dtype=np.float64)
        if achieved.shape != desired.shape:
            raise ValueError(f"goal shapes differ: {achieved.shape} vs {desired.shape}")
        return self.goal_distance(achieved, desired) < self.success_threshold

    def compute_reward(self, achieved: np.ndarray, desired: np.ndarray) -> float:
        """0 on success, -1 otherwise. Stateless so HER can relabel freely."""
        return 0.0 if self.is_goal_met(achieved, desired) else -1.0

    # -- episode interface -------------------------------------------------

    def achieved_from_state(self, state: np.ndarray) -> np.ndarray:
        return state.copy()

    def _sample_state(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def _sample_goal(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def _fixed_state(self) -> np.ndarray:
        raise NotImplementedError

    def _fixed_goal(self) -> np.ndarray:
        raise NotImplementedError

    def _advance(self, action: np.ndarray) -> None:
        raise NotImplementedError

    def _observation(self) -> GoalObservation:
        assert self._state is not None and self._goal is not None
        return GoalObservation(
            state=self._state.copy(),
            achieved_goal=self.achieved_from_state(self._state),
            desired_goal=self._goal.copy(),
        )

    def reset(self, rng: np.random.Generator | None = None) -> GoalObservation:
        if self.spec.mode == FIXED:
            self._state = self._fixed_state()
            self._goal = self._fixed_goal()
        else:
            if rng is None:
                raise ValueError("random mode reset needs an rng")
            self._goal = self._sample_goal(rng)
            self._state = self._sample_state(rng)
            while self.is_goal_met(self.achieved_from_state(self._state), self._goal):
                self._state = self._sample_state(rng)
        self._steps = 0
        self._done = False
        return self._observation()

    def step(self, action: np.ndarray) -> StepResult:
        if self._done:
            raise RuntimeError("step() called on a finished episode; call reset() first")
        action = np.clip(np.asarray(action, dtype=np.float64),
                         -self.spec.max_action, self.spec.max_action)
        if action.shape != (self.spec.action_dim,):
            raise ValueError(f"action shape {action.shape} != ({self.spec.action_dim},)")
        self._advance(action)
        self._steps += 1
        self._done = self._steps >= self.spec.episode_length
        obs = self._observation()
        reward = self.compute_reward(obs.achieved_goal, obs.desired_goal)
        return StepResult(observation=obs, reward=reward, done=self._done,
                          is_success=reward == 0.0)


class PointReach2D(GoalEnv):
    """Point in the [-1, 1]^2 arena moved by clipped deltas of 0.05 per unit action."""

    ARENA = 1.0
    DELTA = 0.05
    THRESHOLD = 0.05
    FIXED_START = (-0.5, -0.5)
    FIXED_GOAL = (0.5, 0.5)

    def __init__(self, mode: str = RANDOM, episode_length: int = 50):
        super().__init__(EnvSpec(state_dim=2, goal_dim=2, action_dim=2,
                                 max_action=1.0, episode_length=episode_length, mode=mode))

    def goal_distance(self, achieved, desired) -> float:
        return float(np.linalg.norm(achieved - desired))

    @property
    def success_threshold(self) -> float:
        return self.THRESHOLD

    def _fixed_state(self):
        return np.array(self.FIXED_START, dtype=np.float64)

    def _fixed_goal(self):
        return np.array(self.FIXED_GOAL, dtype=np.float64)

    def _sample_state(self, rng):
        return rng.uniform(-self.ARENA, self.ARENA, size=2)

    def _sample_goal(self, rng):
        return rng.uniform(-self.ARENA, self.ARENA, size=2)

    def _advance(self, action):
        self._state = np.clip(self._state + action * self.DELTA, -self.ARENA, self.ARENA)


class ArmReach4(GoalEnv):
    """Four joints in ±1.7 rad driven by clipped deltas of 0.1 rad; success is
    cumulative joint discrepancy below 0.1 rad."""

    JOINT_LIMIT = 1.7
    DELTA_JOINT = 0.1
    THRESHOLD = 0.1
    UPRIGHT = (0.0, 0.0, 0.0, 0.0)
    TARGET_JOINTS = (-0.503, 0.605, -1.676, 1.391)

    def __init__(self, mode: str = FIXED, episode_length: int = 50):
        super().__init__(EnvSpec(state_dim=4, goal_dim=4, action_dim=4,
                                 max_action=1.0, episode_length=episode_length, mode=mode))

    def goal_distance(self, achieved, desired) -> float:
        return float(np.sum(np.abs(achieved - desired)))

    @property
    def success_threshold(self) -> float:
        return self.THRESHOLD

    def _fixed_state(self):
        return np.array(self.UPRIGHT, dtype=np.float64)

    def _fixed_goal(self):
        return np.array(self.TARGET_JOINTS, dtype=np.float64)

    def _sample_state(self, rng):
        return rng.uniform(-self.JOINT_LIMIT, self.JOINT_LIMIT, size=4)

    def _sample_goal(self, rng):
        return rng.uniform(-self.JOINT_LIMIT, self.JOINT_LIMIT, size=4)

    def _advance(self, action):
        self._state = np.clip(self._state + action * self.DELTA_JOINT,
                              -self.JOINT_LIMIT, self.JOINT_LIMIT)


class PlanarSlide(GoalEnv):
    """Puck launched once by the first action, then coasting with velocity decay;
    later actions are ignored, so mistakes cannot be corrected."""

    ARENA = 1.0
    FRICTION = 0.95
    IMPULSE_SCALE = 0.1
    THRESHOLD = 0.05
    GOAL_BOX = 0.8
    START_BOX = 0.5
    FIXED_START = (0.0, 0.0)
    FIXED_GOAL = (0.5, 0.3)

    def __init__(self, mode: str = RANDOM, episode_length: int = 30):
        super().__init__(EnvSpec(state_dim=4, goal_dim=2, action_dim=2,
                                 max_action=1.0, episode_length=episode_length, mode=mode))

    def goal_distance(self, achieved, desired) -> float:
        return float(np.linalg.norm(achieved - desired))

    @property
    def success_threshold(self) -> float:
        return self.THRESHOLD

    def achieved_from_state(self, state):
        return state[:2].copy()

    def _fixed_state(self):
        return np.array(self.FIXED_START + (0.0, 0.0), dtype=np.float64)

    def _fixed_goal(self):
        return np.array(self.FIXED_GOAL, dtype=np.float64)

    def _sample_state(self, rng):
        pos = rng.uniform(-self.START_BOX, self.START_BOX, size=2)
        return np.concatenate([pos, np.zeros(2)])

    def _sample_goal(self, rng):
        return rng.uniform(-self.GOAL_BOX, self.GOAL_BOX, size=2)

    def _advance(self, action):
        pos, vel = self._state[:2], self._state[2:]
        if self._steps == 0:
            vel = action * self.IMPULSE_SCALE
        else:
            vel = vel * self.FRICTION
        pos = np.clip(pos + vel, -self.ARENA, self.ARENA)
        self._state = np.concatenate([pos, vel])


_ENV_CLASSES = {
    "point-reach": (PointReach2D, RANDOM),
    "arm-reach": (ArmReach4, FIXED),
    "planar-slide": (PlanarSlide, RANDOM),
}


def make_env(name: str) -> GoalEnv:
    """Build an environment from its name, e.g. "arm-reach" or "arm-reach:random".

    Default modes: point-reach and planar-slide are random-start-goal,
    arm-reach is fixed (the paper's primary arm setting).
    """
    base, _, suffix = name.partition(":")
    if base not in _ENV_CLASSES:
        raise ValueError(f"unknown environment {name!r}; expected one of {ENV_NAMES}")
    cls, default_mode = _ENV_CLASSES[base]
    if suffix == "":
        mode = default_mode
    elif suffix == "fixed":
        mode = FIXED
    elif suffix == "random":
        mode = RANDOM
    else:
        raise ValueError(f"unknown env mode suffix {suffix!r}; use 'fixed' or 'random'")
    return cls(mode=mode)
