"""Small stubs shared by the tests."""
import numpy as np

from saac.policy import ActionSample
from saac.replay import Batch


class StubPolicy:
    """Deterministic policy with log pi identically zero."""

    def __init__(self, action_dim=1, action=0.0):
        self.action_dim = action_dim
        self.value = action

    def sample(self, states, noise):
        n = np.atleast_2d(states).shape[0]
        a = np.full((n, self.action_dim), self.value)
        return ActionSample(a, np.zeros(n), np.zeros_like(a), a, a, a)


def set_constant(net, value):
    net.params[...] = 0.0
    net.biases[-1][...] = value


def make_batch(rng, n=6, state_dim=2, action_dim=1, terminated=0.0, rewards=None,
               costs=None):
    return Batch(rng.normal(size=(n, state_dim)),
                 rng.uniform(-0.9, 0.9, size=(n, action_dim)),
                 rng.normal(size=n) if rewards is None else np.broadcast_to(rewards, n).copy(),
                 np.zeros(n) if costs is None else np.broadcast_to(costs, n).copy(),
                 rng.normal(size=(n, state_dim)),
                 np.full(n, float(terminated)))


class NegSquaredNorm:
    """Q(s, a) = -|a|^2 as a batch objective."""

    def mean_and_grad(self, states, actions):
        n = actions.shape[0]
        return float(-np.mean(np.sum(actions ** 2, axis=1))), -2.0 * actions / n
