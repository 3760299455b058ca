"""Agent-side soft actor-critic: twin critics, soft Bellman targets, policy
and temperature losses, Polyak averaging, and a standalone SAC learner."""
import numpy as np

from saac import kernels
from saac.numerics import Adam, Mlp, ScalarParam, TrainingDivergence


class TwinCritic:
    """Two Q heads on (state ++ action) with Polyak-averaged target copies."""

    def __init__(self, state_dim, action_dim, hidden=(64, 64), rng=None):
        self.state_dim = state_dim
        self.action_dim = action_dim
        sizes = [state_dim + action_dim, *hidden, 1]
        self.heads = [Mlp(sizes, rng), Mlp(sizes, rng)]
        self.targets = [h.copy() for h in self.heads]

    @staticmethod
    def _inputs(states, actions):
        return np.hstack([np.atleast_2d(states), np.atleast_2d(actions)])

    def q_values(self, states, actions):
        x = self._inputs(states, actions)
        return [h(x)[:, 0] for h in self.heads]

    def target_min(self, states, actions):
        x = self._inputs(states, actions)
        return np.minimum(self.targets[0](x)[:, 0], self.targets[1](x)[:, 0])

    def min_q(self, states, actions):
        q1, q2 = self.q_values(states, actions)
        return np.minimum(q1, q2)

    def min_q_and_action_grad(self, states, actions, weights):
        """Q_min per sample and d(sum_i weights_i * Q_min_i)/d action_i.

        Gradient is routed through whichever head attains the minimum.
        """
        x = self._inputs(states, actions)
        outs = [h.forward_cached(x) for h in self.heads]
        q1, q2 = outs[0][0][:, 0], outs[1][0][:, 0]
        pick1 = q1 <= q2
        grad_a = np.zeros((x.shape[0], self.action_dim))
        for head, (q, cache), sel in zip(self.heads, outs, (pick1, ~pick1)):
            w = np.where(sel, weights, 0.0)[:, None]
            if not np.any(w):
                continue
            _, gx = head.backward(cache, w)
            grad_a += gx[:, self.state_dim:]
        return np.where(pick1, q1, q2), grad_a


class TwinMinQ:
    """Batch-mean of min(Q1, Q2) as a differentiable function of the actions."""

    def __init__(self, critic):
        self.critic = critic

    def mean_and_grad(self, states, actions):
        n = states.shape[0]
        q, g = self.critic.min_q_and_action_grad(states, actions, np.full(n, 1.0 / n))
        return float(np.mean(q)), g


class EntropyTemp:
    def __init__(self, target_entropy, init_alpha=1.0, lr=3e-4, learn=True):
        self.log_alpha = ScalarParam(np.log(init_alpha), lr)
        self.target_entropy = float(target_entropy)
        self.learn = learn

    @property
    def alpha(self):
        return float(np.exp(float(self.log_alpha)))


def soft_bellman_target(rewards, next_states, terminated, policy, critic, alpha,
                        gamma, noise):
    """y = r + gamma * (1 - done) * (min target Q(s', a') - alpha * log pi(a'|s'))."""
    nxt = policy.sample(next_states, noise)
    soft_v = critic.target_min(next_states, nxt.action) - alpha * nxt.log_prob
    y = rewards + gamma * (1.0 - terminated) * soft_v
    if not np.all(np.isfinite(y)):
        raise TrainingDivergence("soft_target")
    return y


def soft_target(batch, policy, critic, alpha, gamma, noise):
    return soft_bellman_target(batch.rewards, batch.next_states, batch.terminated,
                               policy, critic, alpha, gamma, noise)


def critic_loss(states, actions, critic, y):
    """Mean over batch and both heads of 1/2 (Q - y)^2; grads for the online heads only."""
    x = critic._inputs(states, actions)
    n = x.shape[0]
    loss = 0.0
    grads = []
    for head in critic.heads:
        out, cache = head.forward_cached(x)
        diff = out[:, 0] - y
        loss += 0.5 * float(np.mean(0.5 * diff * diff))
        g, _ = head.backward(cache, (0.5 * diff / n)[:, None], need_input_grad=False)
        grads.append(g)
    return loss, grads


def actor_loss(states, policy, q_objective, alpha, noise):
    """mean(alpha * log pi(a|s)) - mean Q(s, a), a reparameterized from ``noise``.

    Returns (loss, policy gradient, sample).
    """
    sample = policy.sample(states, noise)
    n = states.shape[0]
    q_mean, dq_da = q_objective.mean_and_grad(states, sample.action)
    loss = alpha * float(np.mean(sample.log_prob)) - q_mean
    grad = policy.reparam_backward(sample, d_action=-dq_da,
                                   d_log_prob=np.full(n, alpha / n))
    return loss, grad, sample


def base_policy_loss(states, policy, critic, alpha, noise):
    return actor_loss(states, policy, TwinMinQ(critic), alpha, noise)


def temperature_loss(log_temp, signal, target):
    """J = log_temp * mean(signal - target); linear in log_temp.

    Returns (loss, dJ/dlog_temp).
    """
    g = float(np.mean(signal) - target)
    return float(log_temp) * g, g


def alpha_loss(log_probs, temp):
    """Entropy temperature loss: log alpha * (-log pi - H_target)."""
    return temperature_loss(float(temp.log_alpha), -np.asarray(log_probs),
                            temp.target_entropy)


def polyak_update(online, target, tau):
    """target <- tau * online + (1 - tau) * target, in place on flat buffers."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    kernels.polyak(target, online, float(tau))


class SAC:
    """Plain soft actor-critic learner built from the functions above."""

    def __init__(self, policy, critic, temp, lr_q=3e-4, lr_pi=3e-4, gamma=0.99,
                 tau=0.005):
        self.policy = policy
        self.critic = critic
        self.temp = temp
        self.gamma = gamma
        self.tau = tau
        self.q_opts = [Adam(h.n_params, lr=lr_q) for h in critic.heads]
        self.pi_opt = Adam(policy.trunk.n_params, lr=lr_pi)

    def update(self, batch, rng):
        n, d = batch.states.shape[0], self.policy.action_dim
        alpha = self.temp.alpha
        y = soft_target(batch, self.policy, self.critic, alpha, self.gamma,
                        rng.standard_normal((n, d)))
        lq, gq = critic_loss(batch.states, batch.actions, self.critic, y)
        for head, opt, g in zip(self.critic.heads, self.q_opts, gq):
            opt.step(head.params, g, "critic_loss")
        lpi, gpi, sample = base_policy_loss(batch.states, self.policy, self.critic,
                                            alpha, rng.standard_normal((n, d)))
        self.pi_opt.step(self.policy.params, gpi, "policy_loss")
        if self.temp.learn:
            _, ga = alpha_loss(sample.log_prob, self.temp)
            self.temp.log_alpha.step(ga, "alpha_loss")
        for head, tgt in zip(self.critic.heads, self.critic.targets):
            polyak_update(head.params, tgt.params, self.tau)
        return {"critic_loss": lq, "policy_loss": lpi}
