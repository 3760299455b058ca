"""Self-checks shared by the CLI and the test suite: finite-difference
gradient checks of every loss and the exact tabular oracle checks."""
from dataclasses import dataclass

import numpy as np

from saac import adversary as adv
from saac import oracle
from saac.envs import EnvConfig, RiskyChain
from saac.numerics import grad_check, make_rng
from saac.policy import SquashedGaussianPolicy
from saac.replay import Batch
from saac.sac_core import (EntropyTemp, TwinCritic, TwinMinQ, alpha_loss, base_policy_loss,
                           critic_loss, soft_target)
from saac.trainer import repulsive_policy_loss


def _flat_loss(nets, fn):
    """Wrap ``fn() -> (loss, [grad per net])`` as a loss of the concatenated parameters."""
    sizes = np.cumsum([0] + [n.n_params for n in nets])

    def loss(p):
        for net, lo, hi in zip(nets, sizes[:-1], sizes[1:]):
            net.params[...] = p[lo:hi]
        value, grads = fn()
        return value, np.concatenate([np.ravel(g) for g in grads])

    return loss, np.concatenate([n.params for n in nets])


def _check(nets, fn, tolerance):
    loss, p0 = _flat_loss(nets, fn)
    report = grad_check(loss, p0, tolerance)
    loss(p0)
    return report


def _random_batch(rng, n, state_dim, action_dim):
    return Batch(rng.normal(size=(n, state_dim)),
                 rng.uniform(-0.9, 0.9, size=(n, action_dim)),
                 rng.normal(size=n),
                 rng.integers(0, 2, size=n).astype(np.float64),
                 rng.normal(size=(n, state_dim)),
                 (rng.random(n) < 0.2).astype(np.float64))


def _policy(state_dim, action_dim, hidden, rng):
    pi = SquashedGaussianPolicy(state_dim, action_dim, hidden, 1.0, rng)
    # keep log-std well inside its clamp so the check stays on a smooth branch
    pi.trunk.weights[-1][:, action_dim:] *= 0.1
    pi.trunk.biases[-1][action_dim:] = -0.5
    return pi


def gradient_suite(seed=0, tolerance=1e-4, batch=8, hidden=(8, 8), state_dim=3,
                   action_dim=2):
    """Central-difference checks of every trainable loss with frozen noise.

    Returns a list of (name, GradCheckReport).
    """
    rng = make_rng(seed)
    n, d = batch, action_dim
    b = _random_batch(rng, n, state_dim, d)
    critic = TwinCritic(state_dim, d, hidden, rng)
    cons = TwinCritic(state_dim, d, hidden, rng)
    qcrit = adv.QuantileCritic(state_dim, d, 5, hidden, rng)
    pi = _policy(state_dim, d, hidden, rng)
    pi_adv = _policy(state_dim, d, hidden, rng)
    theta_old, omega_old = pi.copy(), pi_adv.copy()
    theta_old.params[...] += 0.05 * rng.normal(size=theta_old.params.size)
    alpha, beta, gamma = 0.3, 0.7, 0.99
    noise = [rng.standard_normal((n, d)) for _ in range(4)]
    y = soft_target(b, pi, critic, alpha, gamma, noise[0])
    yc = adv.cons_target(b, cons, pi_adv, 0.0, gamma, noise[1])
    zt = adv.quantile_targets(b, qcrit, pi, alpha, gamma, noise[2])
    eps = noise[3]
    reports = []

    def add(name, nets, fn):
        reports.append((name, _check(nets, fn, tolerance)))

    add("critic_loss", critic.heads,
        lambda: critic_loss(b.states, b.actions, critic, y))
    add("policy_loss", [pi.trunk],
        lambda: _wrap(base_policy_loss(b.states, pi, critic, alpha, eps)))
    add("repulsive_policy_loss", [pi.trunk],
        lambda: _wrap(repulsive_policy_loss(b.states, pi, TwinMinQ(critic), theta_old,
                                            omega_old, alpha, beta, eps)))
    for label, objective in (("cons", TwinMinQ(cons)), ("msd", adv.MsdQ(critic, -1.0)),
                             ("cvar", adv.CvarQ(qcrit, 0.25))):
        add(f"adversary_policy_loss[{label}]", [pi_adv.trunk],
            lambda o=objective: _wrap(adv.adversary_policy_loss(b.states, pi_adv, o,
                                                                alpha, eps)))
    add("cons_critic_loss", cons.heads,
        lambda: critic_loss(b.states, b.actions, cons, yc))
    add("quantile_critic_loss", [qcrit.net],
        lambda: _scalar(adv.quantile_regression_loss(b.states, b.actions, qcrit, zt)))

    log_probs = pi.sample(b.states, eps).log_prob
    temp = EntropyTemp(-float(d), 0.4)
    reports.append(("alpha_loss", grad_check(
        lambda p: _temp_loss(temp.log_alpha, p, lambda: alpha_loss(log_probs, temp)),
        temp.log_alpha.value.copy(), tolerance)))
    bt = adv.BetaTemp(1.0, 0.6)
    kl = 0.37
    reports.append(("beta_loss", grad_check(
        lambda p: _temp_loss(bt.log_beta, p, lambda: adv.beta_loss_from_kl(kl, bt)),
        bt.log_beta.value.copy(), tolerance)))
    return reports


def _wrap(result):
    loss, grad, _ = result
    return loss, [grad]


def _scalar(result):
    loss, grad = result
    return loss, [grad]


def _temp_loss(param, p, fn):
    param.value[...] = p
    loss, g = fn()
    return loss, np.array([g])


# -- oracle checks ----------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    report_only: bool = False


def two_state_mdp(gamma=0.9):
    """Small 2-state/2-action MDP with asymmetric rewards and stochastic moves."""
    P = np.array([[[0.9, 0.1], [0.2, 0.8]],
                  [[0.7, 0.3], [0.05, 0.95]]])
    R = np.array([[1.0, 0.0], [-0.5, 2.0]])
    return oracle.TabularMDP(P, R, gamma=gamma)


def single_state_mdp(reward=1.0, gamma=0.9):
    return oracle.TabularMDP(np.ones((1, 1, 1)), np.full((1, 1), reward), gamma=gamma)


def chain_monte_carlo(slip_prob, p_right, episodes, rng):
    """Empirical failure frequency of RiskyChain under a state-independent policy."""
    env = RiskyChain(EnvConfig(name="risky_chain", slip_prob=slip_prob))
    failures = 0
    for _ in range(episodes):
        env.reset(rng)
        while True:
            a = np.array([1.0 if rng.random() < p_right else -1.0])
            res = env.step(a, rng)
            if res.terminated or res.truncated:
                failures += int(res.constraint_cost)
                break
    return failures / episodes


def oracle_suite(seed=0, episodes=10_000):
    rng = make_rng(seed)
    out = []
    rep = oracle.check_maxent_equivalence(two_state_mdp(), alpha=1.0, grid=51, tol=1e-3)
    out.append(CheckResult("maxent_equivalence", rep.passed,
                           f"margin={rep.margin:.3e} over {rep.n_policies} policies"))
    q = float(oracle.soft_value_iteration(single_state_mdp(), 1.0)[0, 0])
    out.append(CheckResult("soft_fixed_point", abs(q - 10.0) < 1e-8, f"Q={q:.10f}"))
    slip, p_right = 0.2, 0.5
    exact = oracle.chain_absorption_probability(slip, p_right)
    freq = chain_monte_carlo(slip, p_right, episodes, rng)
    se = np.sqrt(exact * (1.0 - exact) / episodes)
    out.append(CheckResult("chain_absorption", bool(abs(freq - exact) <= 3 * se),
                           f"exact={exact:.5f} mc={freq:.5f} se={se:.5f}"))
    red = oracle.check_rns_reduction()
    out.append(CheckResult("objective_reduction", red.identity_spread < 1e-9,
                           f"spread={red.identity_spread:.2e}"))
    out.append(CheckResult("relaxed_lower_bound", True,
                           f"relaxed below full objective in "
                           f"{red.lower_bound_fraction:.0%} of {red.n_samples} samples",
                           report_only=True))
    return out
