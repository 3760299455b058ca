"""Ring-buffer experience replay shared by agent and adversary updates."""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from saac.numerics import ConfigurationError


class BufferNotReady(RuntimeError):
    """Fewer stored transitions than the requested batch size."""


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    constraint_cost: float
    next_state: np.ndarray
    terminated: bool


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    next_states: np.ndarray
    terminated: np.ndarray

    @property
    def size(self):
        return self.states.shape[0]


class ReplayBuffer:
    def __init__(self, capacity, state_dim, action_dim):
        if capacity <= 0:
            raise ConfigurationError("replay capacity must be positive")
        self.capacity = int(capacity)
        self.states = np.zeros((self.capacity, state_dim))
        self.actions = np.zeros((self.capacity, action_dim))
        self.rewards = np.zeros(self.capacity)
        self.costs = np.zeros(self.capacity)
        self.next_states = np.zeros((self.capacity, state_dim))
        self.terminated = np.zeros(self.capacity)
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def push(self, tr):
        cost = float(tr.constraint_cost)
        if cost not in (0.0, 1.0):
            raise ConfigurationError(f"constraint cost must be 0 or 1, got {cost}")
        i = self._next
        self.states[i] = tr.state
        self.actions[i] = tr.action
        self.rewards[i] = tr.reward
        self.costs[i] = cost
        self.next_states[i] = tr.next_state
        self.terminated[i] = float(tr.terminated)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __getitem__(self, k):
        """k-th oldest stored transition."""
        if not 0 <= k < self.size:
            raise IndexError(k)
        i = (self._next - self.size + k) % self.capacity
        return Transition(self.states[i].copy(), self.actions[i].copy(),
                          float(self.rewards[i]), float(self.costs[i]),
                          self.next_states[i].copy(), bool(self.terminated[i]))

    def sample_indices(self, n, rng):
        if self.size < n or n <= 0:
            raise BufferNotReady(f"buffer holds {self.size} transitions, need {n}")
        return rng.integers(0, self.size, size=n)

    def sample_batch(self, n, rng):
        """Uniform sample with replacement."""
        idx = self.sample_indices(n, rng)
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx],
                     self.costs[idx], self.next_states[idx], self.terminated[idx])
