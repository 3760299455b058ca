"""Desk-scale constrained environments.

Each step reports the task reward and a binary constraint cost (1 when the
step violates the environment's constraint predicate). Bootstrapping is
masked only by ``terminated``; ``truncated`` marks the time limit.
"""
from dataclasses import dataclass, field

import numpy as np

from saac.numerics import ConfigurationError


class EnvUsageError(RuntimeError):
    """Stepping a finished episode, or an out-of-bounds action."""


@dataclass
class StepResult:
    next_state: np.ndarray
    reward: float
    constraint_cost: float
    terminated: bool
    truncated: bool
    info: dict = field(default_factory=dict)


@dataclass
class EnvConfig:
    name: str = "hazard_point"
    horizon: int = 0  # 0 picks the environment default
    gamma: float = 0.99
    constraint_mode: str = "any"
    # HazardPoint2D
    hazard_radius: float = 0.5
    goal_radius: float = 0.3
    goal_bonus: float = 1.0
    reward_offset: float = 1.0
    speed_limit: float = 0.0  # 0 disables the optional speed constraint
    # ConstrainedPendulum
    velocity_limit: float = 4.0
    # RiskyChain
    slip_prob: float = 0.2
    seed: int = 0

    def validate(self):
        if self.name not in ENVIRONMENTS:
            raise ConfigurationError(f"env: unknown environment {self.name!r}")
        if self.horizon < 0:
            raise ConfigurationError("horizon: must be >= 1 (or 0 for the default)")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError("gamma: must lie in (0, 1]")
        if self.constraint_mode not in ("any", "all"):
            raise ConfigurationError("constraint_mode: must be 'any' or 'all'")
        if not 0.0 <= self.slip_prob <= 1.0:
            raise ConfigurationError("slip_prob: must lie in [0, 1]")
        if self.hazard_radius <= 0 or self.goal_radius <= 0 or self.velocity_limit <= 0:
            raise ConfigurationError("geometry parameters must be positive")
        return self


class ConstrainedEnv:
    """Base class: subclasses set dimensions and implement the dynamics."""

    state_dim: int
    action_dim: int
    action_bound: float = 1.0
    default_horizon: int = 200

    def __init__(self, config=None):
        self.config = (config or EnvConfig(name=self.env_name)).validate()
        self.horizon = self.config.horizon or self.default_horizon
        self.gamma = self.config.gamma
        self._t = 0
        self._done = True
        self.state = None

    def _combine(self, flags):
        flags = list(flags)
        if not flags:
            return 0
        hit = all(flags) if self.config.constraint_mode == "all" else any(flags)
        return int(hit)

    def constraint_violated(self, state, action, next_state):
        return self._combine(self.constraint_flags(state, action, next_state))

    def reset(self, rng):
        self._t = 0
        self._done = False
        self.state = self._initial_state(rng)
        return self.state.copy()

    def step(self, action, rng):
        if self._done:
            raise EnvUsageError("step() called on a finished episode; call reset()")
        action = np.asarray(action, dtype=np.float64).reshape(self.action_dim)
        if np.any(np.abs(action) > self.action_bound) or not np.all(np.isfinite(action)):
            raise EnvUsageError(f"action {action} outside bounds +-{self.action_bound}")
        state = self.state
        nxt, reward, terminated, info = self._transition(state, action, rng)
        cost = self.constraint_violated(state, action, nxt)
        self._t += 1
        truncated = (not terminated) and self._t >= self.horizon
        self._done = terminated or truncated
        self.state = nxt
        return StepResult(nxt.copy(), float(reward), float(cost), bool(terminated),
                          bool(truncated), info)


class HazardPoint2D(ConstrainedEnv):
    """Point mass driven by bounded 2-D acceleration toward a goal.

    A hazard disk sits on the straight line from start to goal; entering it is
    a terminal error. Reward is the negative (normalized) distance to the goal
    plus a bonus for every step spent inside the goal disk, shifted by
    ``reward_offset`` so that ending an episode early is never attractive.
    """

    env_name = "hazard_point"
    state_dim = 4
    action_dim = 2
    action_bound = 1.0
    default_horizon = 200

    start = np.array([0.0, 0.0])
    goal = np.array([2.0, 0.0])
    hazard = np.array([1.0, 0.0])
    dt = 0.1
    damping = 0.9
    accel = 2.0
    max_speed = 1.0
    arena = 3.0

    def _initial_state(self, rng):
        jitter = rng.uniform(-0.05, 0.05, size=2)
        return np.array([*(self.start + jitter), 0.0, 0.0])

    def in_hazard(self, state):
        return float(np.linalg.norm(state[:2] - self.hazard)) < self.config.hazard_radius

    def in_goal(self, state):
        return float(np.linalg.norm(state[:2] - self.goal)) < self.config.goal_radius

    def constraint_flags(self, state, action, next_state):
        flags = [self.in_hazard(next_state)]
        if self.config.speed_limit > 0:
            flags.append(float(np.linalg.norm(next_state[2:])) > self.config.speed_limit)
        return flags

    def _transition(self, state, action, rng):
        vel = np.clip(self.damping * state[2:] + self.accel * self.dt * action,
                      -self.max_speed, self.max_speed)
        pos = np.clip(state[:2] + self.dt * vel, -self.arena, self.arena)
        nxt = np.concatenate([pos, vel])
        dist = float(np.linalg.norm(pos - self.goal))
        reward = self.config.reward_offset - dist / float(np.linalg.norm(self.goal - self.start))
        if self.in_goal(nxt):
            reward += self.config.goal_bonus
        return nxt, reward, self.in_hazard(nxt), {}

    @property
    def reward_range(self):
        far = np.hypot(self.arena + abs(self.goal[0]), self.arena + abs(self.goal[1]))
        off = self.config.reward_offset
        return off - far / float(np.linalg.norm(self.goal - self.start)), off + self.config.goal_bonus


class ConstrainedPendulum(ConstrainedEnv):
    """Torque-limited pendulum swing-up; violation when |theta_dot| exceeds the limit.

    Violations never terminate the episode, so costs accumulate over time.
    """

    env_name = "pendulum"
    state_dim = 3
    action_dim = 1
    action_bound = 2.0
    default_horizon = 200

    g = 10.0
    m = 1.0
    length = 1.0
    dt = 0.05
    max_speed = 8.0

    def _initial_state(self, rng):
        self.theta = float(rng.uniform(-np.pi, np.pi))
        self.theta_dot = float(rng.uniform(-1.0, 1.0))
        return self._obs(self.theta, self.theta_dot)

    @staticmethod
    def _obs(theta, theta_dot):
        return np.array([np.cos(theta), np.sin(theta), theta_dot])

    def constraint_flags(self, state, action, next_state):
        return [abs(float(next_state[2])) > self.config.velocity_limit]

    def _transition(self, state, action, rng):
        th = float(np.arctan2(state[1], state[0]))
        thdot = float(state[2])
        u = float(action[0])
        norm_th = ((th + np.pi) % (2 * np.pi)) - np.pi
        reward = -(norm_th ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2)
        thdot = thdot + (3 * self.g / (2 * self.length) * np.sin(th)
                         + 3.0 / (self.m * self.length ** 2) * u) * self.dt
        thdot = float(np.clip(thdot, -self.max_speed, self.max_speed))
        th = th + thdot * self.dt
        return self._obs(th, thdot), reward, False, {}

    reward_range = (-(np.pi ** 2 + 0.1 * 64.0 + 0.004), 0.0)


class RiskyChain(ConstrainedEnv):
    """Seven-state chain: positions 0-4, goal 5, error 6 (both absorbing).

    Action a > 0 means "right", otherwise "left". With probability ``slip_prob``
    the executed move is the opposite one. Moving left from position 0 falls
    into the error state. Reaching the goal pays 1.
    """

    env_name = "risky_chain"
    n_states = 7
    goal_state = 5
    error_state = 6
    state_dim = 7
    action_dim = 1
    action_bound = 1.0
    default_horizon = 20

    def _initial_state(self, rng):
        self.index = 0
        return self.encode(0)

    def encode(self, index):
        s = np.zeros(self.n_states)
        s[index] = 1.0
        return s

    @staticmethod
    def decode(state):
        return int(np.argmax(state))

    @staticmethod
    def discrete_action(action):
        return 1 if float(np.asarray(action).ravel()[0]) > 0.0 else 0

    @classmethod
    def move(cls, index, direction):
        """Deterministic successor of ``index`` for direction 1 (right) / 0 (left)."""
        if index in (cls.goal_state, cls.error_state):
            return index
        if direction == 1:
            return index + 1
        return cls.error_state if index == 0 else index - 1

    def constraint_flags(self, state, action, next_state):
        before, after = self.decode(state), self.decode(next_state)
        return [after == self.error_state and before != self.error_state]

    def _transition(self, state, action, rng):
        index = self.decode(state)
        direction = self.discrete_action(action)
        slipped = bool(rng.random() < self.config.slip_prob)
        if slipped:
            direction = 1 - direction
        nxt = self.move(index, direction)
        reward = 1.0 if nxt == self.goal_state else 0.0
        terminated = nxt in (self.goal_state, self.error_state)
        return self.encode(nxt), reward, terminated, {"slipped": slipped}

    reward_range = (0.0, 1.0)


ENVIRONMENTS = {
    "hazard_point": HazardPoint2D,
    "pendulum": ConstrainedPendulum,
    "risky_chain": RiskyChain,
}


def make_env(config):
    if isinstance(config, str):
        config = EnvConfig(name=config)
    config.validate()
    return ENVIRONMENTS[config.name](config)
