"""Risk-seeking adversary: constraint, mean-std and CVaR critics, the
adversary actor loss, and the repulsion temperature.

``Cons`` trains its own twin critic on the constraint cost. ``MSD`` and
``CVaR`` read the agent's critic: a batch mean-std functional of the twin
Q values, or a lower-tail functional of the agent's quantile critic.
"""
import numpy as np

from saac import kernels
from saac.numerics import ConfigurationError, Mlp, ScalarParam, TrainingDivergence
from saac.policy import kl_estimate
from saac.sac_core import (TwinCritic, actor_loss, critic_loss, soft_bellman_target,
                           temperature_loss)

VARIANTS = ("cons", "msd", "cvar")


# -- Cons: soft critic of the constraint cost ---------------------------------

def cons_target(batch, cons_critic, adv_policy, alpha, gamma, noise):
    return soft_bellman_target(batch.costs, batch.next_states, batch.terminated,
                               adv_policy, cons_critic, alpha, gamma, noise)


def cons_critic_loss(batch, cons_critic, adv_policy, alpha, gamma, noise):
    """Soft Bellman residual with the constraint cost as reward and next actions
    from the adversary. Returns (loss, head gradients)."""
    y = cons_target(batch, cons_critic, adv_policy, alpha, gamma, noise)
    return critic_loss(batch.states, batch.actions, cons_critic, y)


# -- MSD ----------------------------------------------------------------------

def msd_q(q_values, lam):
    """Q + lam * sqrt(population variance of the batch Q values)."""
    q = np.asarray(q_values, dtype=np.float64)
    if q.size < 2:
        raise ConfigurationError("msd_q: batch variance needs at least 2 values")
    return q + lam * np.std(q)


class MsdQ:
    """sign * mean(msd_q(min Q_phi(s, a))) with its gradient in the actions.

    The std term couples the batch, so its gradient reaches every action:
    d std / d Q_i = (Q_i - mean) / (n * std).
    """

    def __init__(self, critic, lam=-1.0, sign=1.0):
        self.critic = critic
        self.lam = lam
        self.sign = sign

    def mean_and_grad(self, states, actions):
        n = states.shape[0]
        if n < 2:
            raise ConfigurationError("msd_q: batch variance needs at least 2 values")
        q = self.critic.min_q(states, actions)
        std = float(np.std(q))
        dstd = (q - q.mean()) / (n * std) if std > 0 else np.zeros(n)
        weights = self.sign * (np.full(n, 1.0 / n) + self.lam * dstd)
        _, g = self.critic.min_q_and_action_grad(states, actions, weights)
        return self.sign * float(np.mean(q) + self.lam * std), g


# -- CVaR over quantiles ----------------------------------------------------------

def quantile_fractions(n):
    """tau_0 = 0 < tau_1 < ... < tau_N = 1 on a uniform grid."""
    return np.linspace(0.0, 1.0, n + 1)


def quantile_midpoints(n):
    t = quantile_fractions(n)
    return 0.5 * (t[:-1] + t[1:])


def distortion(tau, lam):
    """g(tau) = min(tau / lam, 1)."""
    return np.minimum(np.asarray(tau, dtype=np.float64) / lam, 1.0)


def cvar_weights(n, lam):
    """Mass of each quantile atom under the CVaR distortion: g(tau_{i+1}) - g(tau_i).

    Equals (tau_{i+1} - tau_i) g'(tau_hat_i) on every bin where g is linear; the
    single bin straddling ``lam`` gets its exact partial mass, so weights sum to 1.
    """
    if not 0.0 < lam <= 1.0:
        raise ConfigurationError("cvar lambda must lie in (0, 1]")
    g = distortion(quantile_fractions(n), lam)
    return np.diff(g)


def cvar_q(quantiles, lam):
    """Negative lower-tail CVaR of a quantile approximation (last axis = atoms)."""
    z = np.asarray(quantiles, dtype=np.float64)
    return -(z @ cvar_weights(z.shape[-1], lam))


class QuantileCritic:
    """(state ++ action) -> N quantile values at the midpoint fractions."""

    def __init__(self, state_dim, action_dim, n_quantiles=25, hidden=(64, 64), rng=None):
        if n_quantiles < 2:
            raise ConfigurationError("need at least 2 quantiles")
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.n_quantiles = n_quantiles
        self.net = Mlp([state_dim + action_dim, *hidden, n_quantiles], rng)
        self.target = self.net.copy()
        self.taus = quantile_midpoints(n_quantiles)

    @staticmethod
    def _inputs(states, actions):
        return np.hstack([np.atleast_2d(states), np.atleast_2d(actions)])

    def quantiles(self, states, actions):
        return self.net(self._inputs(states, actions))

    def target_quantiles(self, states, actions):
        return self.target(self._inputs(states, actions))

    def weighted_action_grad(self, states, actions, weights):
        """Z(s, a) and d(sum_b sum_i weights[b, i] Z_i(s_b, a_b)) / d a_b."""
        out, cache = self.net.forward_cached(self._inputs(states, actions))
        _, gx = self.net.backward(cache, weights)
        return out, gx[:, self.state_dim:]


class QuantileMeanQ:
    """Agent's scalar Q in the CVaR variant: the mean of its quantiles."""

    def __init__(self, critic):
        self.critic = critic

    def mean_and_grad(self, states, actions):
        n, k = states.shape[0], self.critic.n_quantiles
        z, g = self.critic.weighted_action_grad(states, actions,
                                                np.full((n, k), 1.0 / (n * k)))
        return float(np.mean(z)), g


class CvarQ:
    """Batch mean of cvar_q(Z(s, a)) and its gradient in the actions."""

    def __init__(self, critic, lam=0.25):
        self.critic = critic
        self.lam = lam

    def mean_and_grad(self, states, actions):
        n = states.shape[0]
        w = cvar_weights(self.critic.n_quantiles, self.lam)
        z, g = self.critic.weighted_action_grad(states, actions,
                                                np.tile(-w / n, (n, 1)))
        return float(np.mean(-(z @ w))), g


def quantile_targets(batch, qcritic, policy, alpha, gamma, noise):
    """Soft distributional targets r + gamma (1 - done)(Zbar_j(s', a') - alpha log pi)."""
    nxt = policy.sample(batch.next_states, noise)
    zbar = qcritic.target_quantiles(batch.next_states, nxt.action)
    soft = zbar - alpha * nxt.log_prob[:, None]
    t = batch.rewards[:, None] + gamma * (1.0 - batch.terminated)[:, None] * soft
    if not np.all(np.isfinite(t)):
        raise TrainingDivergence("quantile_targets")
    return t


def quantile_regression_loss(states, actions, qcritic, targets, kappa=1.0):
    """Quantile Huber loss against fixed targets; returns (loss, parameter grad)."""
    out, cache = qcritic.net.forward_cached(qcritic._inputs(states, actions))
    dpred = np.empty_like(out)
    loss = kernels.quantile_huber(out, np.ascontiguousarray(targets), qcritic.taus,
                                  float(kappa), dpred)
    g, _ = qcritic.net.backward(cache, dpred, need_input_grad=False)
    return loss, g


def quantile_critic_loss(batch, qcritic, policy, alpha, gamma, noise, kappa=1.0):
    t = quantile_targets(batch, qcritic, policy, alpha, gamma, noise)
    return quantile_regression_loss(batch.states, batch.actions, qcritic, t, kappa)


# -- adversary actor and repulsion temperature ----------------------------------

def adversary_policy_loss(states, adv_policy, adversary_q, alpha, noise):
    """mean(alpha log pi_w(a|s) - Q_psi(s, a)), a ~ pi_w; gradient into the adversary only."""
    return actor_loss(states, adv_policy, adversary_q, alpha, noise)


class BetaTemp:
    def __init__(self, target_kl, init_beta=1.0, lr=3e-4, learn=True):
        self.log_beta = ScalarParam(np.log(init_beta), lr)
        self.target_kl = float(target_kl)
        self.learn = learn

    @property
    def beta(self):
        return float(np.exp(float(self.log_beta)))


def beta_loss_from_kl(kl, temp):
    """J(beta) = log beta * (KL - target); returns (loss, dJ/dlog beta)."""
    return temperature_loss(float(temp.log_beta), kl, temp.target_kl)


def beta_loss(batch, agent_policy, adv_policy, temp, rng, n_samples=1):
    kl = kl_estimate(agent_policy, adv_policy, batch.states, rng, n_samples)
    loss, g = beta_loss_from_kl(kl, temp)
    return loss, g, kl


def make_cons_critic(state_dim, action_dim, hidden, rng):
    return TwinCritic(state_dim, action_dim, hidden, rng)
