"""Tanh-squashed Gaussian policies with reparameterized sampling."""
from dataclasses import dataclass

import numpy as np

from saac.numerics import ConfigurationError, Mlp, TrainingDivergence

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
_LOG2 = np.log(2.0)
# keeps stored actions strictly inside the bounds once tanh rounds to +-1
_EDGE = 1.0 - 1e-12


class ActionBoundaryError(ValueError):
    """Action on or outside the action bounds; the squashed density is undefined there."""


def log1m_tanh_sq(u):
    """Stable log(1 - tanh(u)^2)."""
    au = np.abs(u)
    return 2.0 * (_LOG2 - au - np.log1p(np.exp(-2.0 * au)))


@dataclass
class ActionSample:
    action: np.ndarray
    log_prob: np.ndarray
    noise: np.ndarray
    pre_squash: np.ndarray
    mean: np.ndarray
    log_std: np.ndarray
    cache: list = None
    clamp_mask: np.ndarray = None


class SquashedGaussianPolicy:
    """a = bound * tanh(mu(s) + sigma(s) * eps), eps ~ N(0, I)."""

    def __init__(self, state_dim, action_dim, hidden=(64, 64), action_bound=1.0,
                 rng=None, trunk=None):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.bound = np.broadcast_to(
            np.asarray(action_bound, dtype=np.float64), (self.action_dim,)).copy()
        if np.any(self.bound <= 0):
            raise ConfigurationError("action bounds must be positive")
        self.trunk = trunk or Mlp([self.state_dim, *hidden, 2 * self.action_dim], rng)
        if self.trunk.layer_sizes[0] != self.state_dim or \
                self.trunk.layer_sizes[-1] != 2 * self.action_dim:
            raise ConfigurationError("trunk shape does not match policy dimensions")
        self._log_bound = float(np.sum(np.log(self.bound)))

    @property
    def params(self):
        return self.trunk.params

    def copy(self):
        return SquashedGaussianPolicy(self.state_dim, self.action_dim,
                                      action_bound=self.bound, trunk=self.trunk.copy())

    def distribution(self, states):
        out, cache = self.trunk.forward_cached(states)
        if not np.all(np.isfinite(out)):
            raise TrainingDivergence("policy", "trunk output")
        d = self.action_dim
        mean = out[:, :d]
        raw = out[:, d:]
        mask = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std, cache, mask

    def sample(self, states, noise):
        """Reparameterized batch sample with the given standard-normal noise."""
        mean, log_std, cache, mask = self.distribution(states)
        noise = np.asarray(noise, dtype=np.float64).reshape(mean.shape)
        u = mean + np.exp(log_std) * noise
        action = self.bound * np.clip(np.tanh(u), -_EDGE, _EDGE)
        log_prob = (np.sum(-0.5 * noise ** 2 - log_std - log1m_tanh_sq(u), axis=1)
                    - self.action_dim * _HALF_LOG_2PI - self._log_bound)
        return ActionSample(action, log_prob, noise, u, mean, log_std, cache, mask)

    def sample_action(self, state, rng):
        single = np.ndim(state) == 1
        states = np.atleast_2d(state)
        s = self.sample(states, rng.standard_normal((states.shape[0], self.action_dim)))
        if single:
            return ActionSample(s.action[0], float(s.log_prob[0]), s.noise[0],
                                s.pre_squash[0], s.mean[0], s.log_std[0])
        return s

    def mean_action(self, states):
        mean, _, _, _ = self.distribution(states)
        return self.bound * np.tanh(mean)

    def log_prob_presquash(self, states, u, mean=None, log_std=None):
        """log pi(bound * tanh(u) | s) and its derivative in u (parameters fixed)."""
        if mean is None:
            mean, log_std, _, _ = self.distribution(states)
        inv_var = np.exp(-2.0 * log_std)
        z = u - mean
        lp = (np.sum(-0.5 * z * z * inv_var - log_std - log1m_tanh_sq(u), axis=1)
              - self.action_dim * _HALF_LOG_2PI - self._log_bound)
        dlp_du = -z * inv_var + 2.0 * np.tanh(u)
        return lp, dlp_du

    def log_prob(self, states, actions):
        states = np.atleast_2d(states)
        y = np.atleast_2d(np.asarray(actions, dtype=np.float64)) / self.bound
        if np.any(np.abs(y) >= 1.0) or not np.all(np.isfinite(y)):
            raise ActionBoundaryError("action on or outside the squashing bounds")
        u = np.arctanh(y)
        mean, log_std, _, _ = self.distribution(states)
        z = (u - mean) * np.exp(-log_std)
        return (np.sum(-0.5 * z * z - log_std - np.log1p(-y * y), axis=1)
                - self.action_dim * _HALF_LOG_2PI - self._log_bound)

    def reparam_backward(self, sample, d_action=None, d_log_prob=None, d_u=None):
        """Parameter gradient of a loss through a reparameterized sample.

        ``d_action`` is dL/da (B, d), ``d_log_prob`` is dL/d log pi(a|s) (B,),
        ``d_u`` an extra dL/du (B, d) for terms that see the action only through
        its pre-squash value (e.g. log-densities of frozen policies).
        """
        u = sample.pre_squash
        t = np.tanh(u)
        g_u = np.zeros_like(u) if d_u is None else np.array(d_u, dtype=np.float64)
        g_logstd = np.zeros_like(u)
        if d_action is not None:
            g_u += d_action * self.bound * (1.0 - t * t)
        if d_log_prob is not None:
            dlp = np.asarray(d_log_prob, dtype=np.float64)[:, None]
            g_u += dlp * 2.0 * t
            g_logstd -= dlp
        g_logstd += g_u * np.exp(sample.log_std) * sample.noise
        g_logstd *= sample.clamp_mask
        grad, _ = self.trunk.backward(sample.cache, np.hstack([g_u, g_logstd]),
                                      need_input_grad=False)
        return grad


def kl_samples(pi_a, pi_b, states, rng, n_samples):
    """Per-sample log-ratios log pi_a(a|s) - log pi_b(a|s), a ~ pi_a.

    Evaluated on pre-squash values: the squash Jacobian cancels in the ratio.
    """
    states = np.atleast_2d(states)
    rep = np.repeat(states, n_samples, axis=0)
    s = pi_a.sample(rep, rng.standard_normal((rep.shape[0], pi_a.action_dim)))
    lp_a, _ = pi_a.log_prob_presquash(rep, s.pre_squash, s.mean, s.log_std)
    lp_b, _ = pi_b.log_prob_presquash(rep, s.pre_squash)
    return lp_a - lp_b


def kl_estimate(pi_a, pi_b, states, rng, n_samples=1):
    """Monte-Carlo E_s KL(pi_a(.|s) || pi_b(.|s))."""
    return float(np.mean(kl_samples(pi_a, pi_b, states, rng, n_samples)))


def gaussian_kl(mu_a, std_a, mu_b, std_b):
    """Closed-form KL between diagonal Gaussians, summed over dimensions."""
    mu_a, std_a, mu_b, std_b = map(np.asarray, (mu_a, std_a, mu_b, std_b))
    return float(np.sum(np.log(std_b / std_a)
                        + (std_a ** 2 + (mu_a - mu_b) ** 2) / (2 * std_b ** 2) - 0.5))


def fixed_policy(means, log_stds, state_dim=1, action_bound=1.0):
    """State-independent policy with the given pre-squash mean and log-std."""
    means = np.atleast_1d(np.asarray(means, dtype=np.float64))
    log_stds = np.broadcast_to(np.asarray(log_stds, dtype=np.float64), means.shape)
    trunk = Mlp([state_dim, 2 * means.size])
    trunk.biases[0][:means.size] = means
    trunk.biases[0][means.size:] = log_stds
    return SquashedGaussianPolicy(state_dim, means.size, action_bound=action_bound,
                                  trunk=trunk)
