"""Exact tabular verifiers: soft value iteration, Boltzmann policies, exact
return distributions on enumerable MDPs, and MaxEnt optimality checks."""
from dataclasses import dataclass, field

import numpy as np
from scipy.special import entr, logsumexp, softmax

from saac.envs import RiskyChain
from saac.numerics import ConfigurationError


class NonConvergence(RuntimeError):
    pass


class EnumerationLimit(RuntimeError):
    pass


@dataclass
class TabularMDP:
    """Finite MDP. Rewards and costs may be given per (s, a) or per (s, a, s')."""

    P: np.ndarray
    R: np.ndarray
    C: np.ndarray = None
    gamma: float = 0.99
    horizon: int = 0
    terminal: np.ndarray = None
    start: int = 0

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        S, A, S2 = self.P.shape
        if S != S2:
            raise ConfigurationError("P must have shape (S, A, S)")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=2) - 1.0)) > 1e-12:
            raise ConfigurationError("each P[s, a, :] must be a distribution")
        self.R = self._expand(self.R)
        self.C = self._expand(np.zeros((S, A)) if self.C is None else self.C)
        if not np.all(np.isfinite(self.R)):
            raise ConfigurationError("rewards must be finite")
        if self.terminal is None:
            self.terminal = np.zeros(S, dtype=bool)
        self.terminal = np.asarray(self.terminal, dtype=bool)

    def _expand(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = np.repeat(x[:, :, None], self.P.shape[2], axis=2)
        if x.shape != self.P.shape:
            raise ConfigurationError("reward/cost array has the wrong shape")
        return x

    @property
    def n_states(self):
        return self.P.shape[0]

    @property
    def n_actions(self):
        return self.P.shape[1]

    @property
    def expected_reward(self):
        return np.sum(self.P * self.R, axis=2)


def soft_value(Q, alpha):
    """V(s) = alpha * log sum_a exp(Q(s, a) / alpha)."""
    return alpha * logsumexp(np.asarray(Q) / alpha, axis=1)


def soft_value_iteration(mdp, alpha, tol=1e-10, max_iter=100_000, history=False):
    """Fixed point of Q = R + gamma * P V_soft(Q); terminal states have V = 0.

    With gamma == 1 the finite horizon is used instead (that many backups).
    """
    if mdp.gamma >= 1.0 and mdp.horizon <= 0:
        raise ConfigurationError("undiscounted soft value iteration needs a finite horizon")
    r = mdp.expected_reward
    Q = np.zeros_like(r)
    diffs = []
    n_iter = mdp.horizon if mdp.gamma >= 1.0 else max_iter
    for _ in range(n_iter):
        V = np.where(mdp.terminal, 0.0, soft_value(Q, alpha))
        Q_new = r + mdp.gamma * mdp.P @ V
        diff = float(np.max(np.abs(Q_new - Q)))
        diffs.append(diff)
        Q = Q_new
        if mdp.gamma < 1.0 and diff < tol * (1.0 - mdp.gamma):
            break
    else:
        if mdp.gamma < 1.0:
            raise NonConvergence(f"soft value iteration did not converge in {max_iter} steps")
    return (Q, diffs) if history else Q


def hard_value_iteration(mdp, tol=1e-12, max_iter=100_000):
    r = mdp.expected_reward
    Q = np.zeros_like(r)
    for _ in range(max_iter):
        V = np.where(mdp.terminal, 0.0, Q.max(axis=1))
        Q_new = r + mdp.gamma * mdp.P @ V
        if np.max(np.abs(Q_new - Q)) < tol:
            return Q_new
        Q = Q_new
    raise NonConvergence("hard value iteration did not converge")


def boltzmann_policy(Q, alpha):
    """pi(a|s) proportional to exp(Q(s, a) / alpha)."""
    return softmax(np.asarray(Q, dtype=np.float64) / alpha, axis=1)


def soft_policy_value(mdp, pi, alpha):
    """Exact soft value of a tabular policy: V = (I - gamma P_pi)^-1 (r_pi + alpha H_pi)."""
    pi = np.asarray(pi, dtype=np.float64)
    live = ~mdp.terminal
    r_pi = np.sum(pi * mdp.expected_reward, axis=1) + alpha * np.sum(entr(pi), axis=1)
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    r_pi = np.where(live, r_pi, 0.0)
    P_pi = P_pi * live[:, None] * live[None, :]
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)


@dataclass
class ReturnDistribution:
    values: np.ndarray
    probs: np.ndarray
    error_prob: float
    expected_cost: float

    @property
    def mean(self):
        return float(np.dot(self.values, self.probs))

    @property
    def variance(self):
        return float(np.dot((self.values - self.mean) ** 2, self.probs))

    def cvar(self, lam):
        """Mean of the worst ``lam`` fraction (lower tail)."""
        if not 0.0 < lam <= 1.0:
            raise ValueError("lambda must lie in (0, 1]")
        order = np.argsort(self.values, kind="stable")
        v, p = self.values[order], self.probs[order]
        taken = np.minimum(p, np.maximum(lam - (np.cumsum(p) - p), 0.0))
        return float(np.dot(v, taken) / lam)


def return_distribution(mdp, pi, horizon=None, error_states=(), max_atoms=1_000_000):
    """Exact undiscounted return distribution over ``horizon`` steps from ``mdp.start``.

    Paths are merged on (state, return so far, cost so far), which keeps the
    enumeration exact while bounding its size. ``error_prob`` is the
    probability of ever entering one of ``error_states``.
    """
    T = horizon or mdp.horizon
    if T <= 0:
        raise ConfigurationError("return_distribution needs a finite horizon")
    pi = np.asarray(pi, dtype=np.float64)
    err = set(int(e) for e in error_states)
    atoms = {(mdp.start, 0.0, 0.0, mdp.start in err): 1.0}
    for _ in range(T):
        nxt = {}
        for (s, ret, cost, hit), p in atoms.items():
            if mdp.terminal[s]:
                nxt[(s, ret, cost, hit)] = nxt.get((s, ret, cost, hit), 0.0) + p
                continue
            for a in np.flatnonzero(pi[s] > 0):
                for s2 in np.flatnonzero(mdp.P[s, a] > 0):
                    q = p * pi[s, a] * mdp.P[s, a, s2]
                    key = (int(s2), ret + mdp.R[s, a, s2], cost + mdp.C[s, a, s2],
                           hit or int(s2) in err)
                    nxt[key] = nxt.get(key, 0.0) + q
        if len(nxt) > max_atoms:
            raise EnumerationLimit(f"more than {max_atoms} distinct outcomes")
        atoms = nxt
    by_return = {}
    error_prob = expected_cost = 0.0
    for (s, ret, cost, hit), p in atoms.items():
        by_return[ret] = by_return.get(ret, 0.0) + p
        expected_cost += p * cost
        if hit:
            error_prob += p
    values = np.array(sorted(by_return))
    probs = np.array([by_return[v] for v in values])
    return ReturnDistribution(values, probs, error_prob, expected_cost)


def risky_chain_mdp(slip_prob=0.2, horizon=20, gamma=1.0):
    """Tabular twin of the RiskyChain environment (action 0 = left, 1 = right)."""
    S, A = RiskyChain.n_states, 2
    P = np.zeros((S, A, S))
    R = np.zeros((S, A, S))
    C = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            P[s, a, RiskyChain.move(s, a)] += 1.0 - slip_prob
            P[s, a, RiskyChain.move(s, 1 - a)] += slip_prob
    terminal = np.zeros(S, dtype=bool)
    terminal[[RiskyChain.goal_state, RiskyChain.error_state]] = True
    for s in range(S):
        if not terminal[s]:
            R[s, :, RiskyChain.goal_state] = 1.0
            C[s, :, RiskyChain.error_state] = 1.0
    return TabularMDP(P, R, C, gamma=gamma, horizon=horizon, terminal=terminal, start=0)


def chain_absorption_probability(slip_prob, p_right, horizon=20):
    """Probability that RiskyChain enters its error state when 'right' is chosen w.p. p_right."""
    mdp = risky_chain_mdp(slip_prob, horizon)
    pi = np.tile([1.0 - p_right, p_right], (mdp.n_states, 1))
    return return_distribution(mdp, pi, error_states=[RiskyChain.error_state]).error_prob


@dataclass
class MaxEntReport:
    margin: float
    tolerance: float
    n_policies: int
    best_policy: np.ndarray = field(repr=False)
    boltzmann: np.ndarray = field(repr=False)

    @property
    def passed(self):
        return bool(self.margin >= -self.tolerance)


def check_maxent_equivalence(mdp, alpha, grid=51, tol=1e-3):
    """Soft-VI's Boltzmann policy against every policy on a simplex grid.

    Two-action MDPs only: the grid covers pi(a=0|s) in linspace(0, 1, grid)
    for each state. ``margin`` is the smallest V_boltz(s) - V_grid(s); a
    negative margin means some grid policy beat the Boltzmann policy.
    """
    if mdp.n_actions != 2:
        raise ConfigurationError("grid check is implemented for two actions")
    Q = soft_value_iteration(mdp, alpha)
    pb = boltzmann_policy(Q, alpha)
    vb = soft_policy_value(mdp, pb, alpha)
    probs = np.linspace(0.0, 1.0, grid)
    margin, best = np.inf, None
    n = 0
    for combo in np.array(np.meshgrid(*[probs] * mdp.n_states, indexing="ij")).reshape(
            mdp.n_states, -1).T:
        pi = np.stack([combo, 1.0 - combo], axis=1)
        gap = float(np.min(vb - soft_policy_value(mdp, pi, alpha)))
        n += 1
        if gap < margin:
            margin, best = gap, pi
    return MaxEntReport(margin, tol, n, best, pb)


def _kl(p, q):
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


@dataclass
class ReductionReport:
    identity_spread: float
    lower_bound_fraction: float
    n_samples: int


def check_rns_reduction(n_actions=4, alpha0=0.5, beta0=0.7, n_samples=200, seed=0):
    """Single-state check of the agent's objective reduction.

    With the adversary at its Boltzmann optimum, the agent objective
    E[Q_a] + alpha0 H(pi) - beta0 E[Q_w] differs from
    -alpha KL(pi || B_alpha(Q_a)) + beta KL(pi || pi_w*) by a constant in pi,
    with alpha = alpha0 (1 + beta0) and beta = alpha0 beta0; ``identity_spread``
    is the range of that difference over random policies. For non-optimal
    adversaries, ``lower_bound_fraction`` reports how often the relaxed
    objective sits below the full agent objective (report only).
    """
    rng = np.random.default_rng(seed)
    alpha, beta = alpha0 * (1.0 + beta0), alpha0 * beta0
    q_a = rng.normal(size=n_actions)
    q_w = rng.normal(size=n_actions)
    pw_star = softmax(q_w / alpha0)
    target = softmax(q_a / alpha)
    diffs, below = [], 0
    for _ in range(n_samples):
        pi = rng.dirichlet(np.ones(n_actions))
        full = pi @ q_a + alpha0 * entr(pi).sum() - beta0 * (pi @ q_w)
        reduced = -alpha * _kl(pi, target) + beta * _kl(pi, pw_star)
        diffs.append(full - reduced)
        pw = rng.dirichlet(np.ones(n_actions))
        agent_goal = full - beta0 * alpha0 * entr(pw).sum()
        relaxed = -(_kl(pi, target) - beta * _kl(pi, pw))
        below += relaxed < agent_goal
    return ReductionReport(float(np.ptp(diffs)), below / n_samples, n_samples)
