"""SAAC training loop: update schedule, repulsive agent actor loss,
evaluation and failure accounting."""
import csv
import json
import os
import struct
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from saac import adversary as adv
from saac.envs import EnvConfig, make_env
from saac.numerics import Adam, ConfigurationError, Mlp, spawn_rngs
from saac.policy import SquashedGaussianPolicy, kl_estimate
from saac.replay import ReplayBuffer, Transition
from saac.sac_core import (EntropyTemp, TwinCritic, TwinMinQ, actor_loss, alpha_loss,
                           critic_loss, polyak_update, soft_target)

METRICS_COLUMNS = ("step", "eval_return_mean", "eval_return_std", "cum_failures",
                   "alpha", "beta", "kl_estimate")
STATES_PER_EVAL = 512


@dataclass
class TrainConfig:
    # environment
    env: str = "hazard_point"
    horizon: int = 0
    gamma: float = 0.99
    constraint_mode: str = "any"
    hazard_radius: float = 0.5
    goal_radius: float = 0.3
    goal_bonus: float = 1.0
    reward_offset: float = 1.0
    speed_limit: float = 0.0
    velocity_limit: float = 4.0
    slip_prob: float = 0.2
    # algorithm
    adversary: str = "cons"
    total_steps: int = 30000
    warmup_steps: int = 1000
    batch_size: int = 64
    updates_per_step: int = 1
    buffer_capacity: int = 100000
    hidden: tuple = (64, 64)
    tau: float = 0.005
    lr_q: float = 3e-4
    lr_pi: float = 3e-4
    lr_alpha: float = 3e-4
    lr_beta: float = 3e-4
    init_alpha: float = 1.0
    init_beta: float = 1.0
    learn_alpha: bool = True
    learn_beta: bool = True
    target_entropy: float = float("nan")  # nan -> -action_dim
    target_kl: float = float("nan")  # nan -> 1.0 per action dimension
    update_adversary: bool = True
    adversary_first: bool = True
    msd_lambda: float = -1.0
    risk_seeking_sign: float = 1.0
    cvar_lambda: float = 0.25
    n_quantiles: int = 25
    huber_kappa: float = 1.0
    kl_samples: int = 1
    cons_target_entropy: bool = False
    # evaluation / bookkeeping
    eval_interval: int = 1000
    eval_episodes: int = 5
    seed: int = 0
    out_dir: str = ""

    def env_config(self):
        return EnvConfig(name=self.env, horizon=self.horizon, gamma=self.gamma,
                         constraint_mode=self.constraint_mode,
                         hazard_radius=self.hazard_radius, goal_radius=self.goal_radius,
                         goal_bonus=self.goal_bonus,
                         reward_offset=self.reward_offset, speed_limit=self.speed_limit,
                         velocity_limit=self.velocity_limit, slip_prob=self.slip_prob,
                         seed=self.seed)

    def validate(self):
        self.env_config().validate()
        if self.adversary not in ("none", *adv.VARIANTS):
            raise ConfigurationError(f"adversary: unknown variant {self.adversary!r}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size: must be positive")
        if self.adversary == "msd" and self.batch_size < 2:
            raise ConfigurationError("batch_size: msd needs at least 2")
        if self.warmup_steps < self.batch_size:
            raise ConfigurationError("warmup_steps: must be >= batch_size")
        if self.eval_interval <= 0:
            raise ConfigurationError("eval_interval: must be positive")
        if self.total_steps < 0 or self.eval_episodes < 0 or self.updates_per_step < 0:
            raise ConfigurationError("step and episode counts must be non-negative")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigurationError("tau: must lie in (0, 1]")
        for name in ("lr_q", "lr_pi", "lr_alpha", "lr_beta", "init_alpha"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name}: must be positive")
        if self.init_beta < 0 or (self.learn_beta and self.init_beta == 0):
            raise ConfigurationError("init_beta: must be positive when beta is learned")
        if not 0.0 < self.cvar_lambda <= 1.0:
            raise ConfigurationError("cvar_lambda: must lie in (0, 1]")
        if self.n_quantiles < 2:
            raise ConfigurationError("n_quantiles: must be >= 2")
        if any(h <= 0 for h in self.hidden):
            raise ConfigurationError("hidden: sizes must be positive")
        return self


def config_fields():
    return {f.name: f for f in fields(TrainConfig)}


# -- agent actor loss with repulsion ---------------------------------------------

def repulsive_policy_loss(states, policy, q_objective, theta_old, omega_old, alpha,
                          beta, noise):
    """mean[alpha log pi(a|s) - Q(s,a) - beta (log pi_old(a|s) - log pi_adv_old(a|s))].

    The frozen snapshots see the action only through its pre-squash value, so
    the repulsion gradient reaches the policy through the sampled action path.
    Returns (loss, policy gradient, sample).
    """
    sample = policy.sample(states, noise)
    n = states.shape[0]
    q_mean, dq_da = q_objective.mean_and_grad(states, sample.action)
    lp_old, dlp_old = theta_old.log_prob_presquash(states, sample.pre_squash)
    lp_adv, dlp_adv = omega_old.log_prob_presquash(states, sample.pre_squash)
    loss = alpha * float(np.mean(sample.log_prob)) - q_mean
    loss = loss - beta * float(np.mean(lp_old - lp_adv))
    d_u = (-beta / n) * (dlp_old - dlp_adv)
    grad = policy.reparam_backward(sample, d_action=-dq_da,
                                   d_log_prob=np.full(n, alpha / n), d_u=d_u)
    return loss, grad, sample


class Learner:
    """All SAAC learners and their optimizers, updated in this order:
    adversary block (psi, omega, beta, psi-bar) then agent block
    (phi, theta, alpha, phi-bar)."""

    def __init__(self, cfg, state_dim, action_dim, action_bound, rng):
        self.cfg = cfg
        self.variant = cfg.adversary
        self.action_dim = action_dim
        hidden = tuple(cfg.hidden)
        self.policy = SquashedGaussianPolicy(state_dim, action_dim, hidden, action_bound, rng)
        if self.variant == "cvar":
            self.critic = adv.QuantileCritic(state_dim, action_dim, cfg.n_quantiles,
                                             hidden, rng)
            self.q_opts = [Adam(self.critic.net.n_params, lr=cfg.lr_q)]
        else:
            self.critic = TwinCritic(state_dim, action_dim, hidden, rng)
            self.q_opts = [Adam(h.n_params, lr=cfg.lr_q) for h in self.critic.heads]
        self.pi_opt = Adam(self.policy.trunk.n_params, lr=cfg.lr_pi)
        target_entropy = (-float(action_dim) if np.isnan(cfg.target_entropy)
                          else cfg.target_entropy)
        self.temp = EntropyTemp(target_entropy, cfg.init_alpha, cfg.lr_alpha,
                                cfg.learn_alpha)
        self.adv_policy = None
        self.cons_critic = None
        if self.variant != "none":
            self.adv_policy = SquashedGaussianPolicy(state_dim, action_dim, hidden,
                                                     action_bound, rng)
            self.adv_pi_opt = Adam(self.adv_policy.trunk.n_params, lr=cfg.lr_pi)
            target_kl = 1.0 * action_dim if np.isnan(cfg.target_kl) else cfg.target_kl
            with np.errstate(divide="ignore"):
                self.beta_temp = adv.BetaTemp(target_kl, cfg.init_beta, cfg.lr_beta,
                                              cfg.learn_beta)
        if self.variant == "cons":
            self.cons_critic = adv.make_cons_critic(state_dim, action_dim, hidden, rng)
            self.cons_opts = [Adam(h.n_params, lr=cfg.lr_q) for h in self.cons_critic.heads]
        self.hook = None
        self.last_kl = float("nan")

    @property
    def alpha(self):
        return self.temp.alpha

    @property
    def beta(self):
        return 0.0 if self.adv_policy is None else self.beta_temp.beta

    def _notify(self, name, params):
        if self.hook is not None:
            self.hook(name, params)

    def agent_q(self):
        if self.variant == "cvar":
            return adv.QuantileMeanQ(self.critic)
        return TwinMinQ(self.critic)

    def adversary_q(self):
        if self.variant == "cons":
            return TwinMinQ(self.cons_critic)
        if self.variant == "msd":
            return adv.MsdQ(self.critic, self.cfg.msd_lambda, self.cfg.risk_seeking_sign)
        return adv.CvarQ(self.critic, self.cfg.cvar_lambda)

    def adversary_update(self, batch, rng):
        cfg = self.cfg
        n, d = batch.size, self.action_dim
        alpha = self.alpha
        if self.variant == "cons":
            # the entropy bonus in the constraint target is optional: with terminal
            # error states it makes hazard entry forfeit the bonus stream
            alpha_c = alpha if cfg.cons_target_entropy else 0.0
            _, grads = adv.cons_critic_loss(batch, self.cons_critic, self.adv_policy,
                                            alpha_c, cfg.gamma, rng.standard_normal((n, d)))
            for head, opt, g in zip(self.cons_critic.heads, self.cons_opts, grads):
                opt.step(head.params, g, "cons_critic_loss")
                self._notify("psi", head.params)
        _, g, _ = adv.adversary_policy_loss(batch.states, self.adv_policy,
                                            self.adversary_q(), alpha,
                                            rng.standard_normal((n, d)))
        self.adv_pi_opt.step(self.adv_policy.params, g, "adversary_policy_loss")
        self._notify("omega", self.adv_policy.params)
        if self.beta_temp.learn:
            _, gb, kl = adv.beta_loss(batch, self.policy, self.adv_policy, self.beta_temp,
                                      rng, cfg.kl_samples)
            self.beta_temp.log_beta.step(gb, "beta_loss")
            self.last_kl = kl
            self._notify("beta", self.beta_temp.log_beta.value)
        if self.variant == "cons":
            for head, tgt in zip(self.cons_critic.heads, self.cons_critic.targets):
                polyak_update(head.params, tgt.params, cfg.tau)
                self._notify("psi_bar", tgt.params)

    def agent_update(self, batch, rng, theta_old, omega_old):
        cfg = self.cfg
        n, d = batch.size, self.action_dim
        alpha = self.alpha
        if self.variant == "cvar":
            _, g = adv.quantile_critic_loss(batch, self.critic, self.policy, alpha,
                                            cfg.gamma, rng.standard_normal((n, d)),
                                            cfg.huber_kappa)
            self.q_opts[0].step(self.critic.net.params, g, "quantile_critic_loss")
            self._notify("phi", self.critic.net.params)
        else:
            y = soft_target(batch, self.policy, self.critic, alpha, cfg.gamma,
                            rng.standard_normal((n, d)))
            _, grads = critic_loss(batch.states, batch.actions, self.critic, y)
            for head, opt, g in zip(self.critic.heads, self.q_opts, grads):
                opt.step(head.params, g, "critic_loss")
                self._notify("phi", head.params)
        noise = rng.standard_normal((n, d))
        if omega_old is None:
            _, g, sample = actor_loss(batch.states, self.policy, self.agent_q(), alpha, noise)
        else:
            _, g, sample = repulsive_policy_loss(batch.states, self.policy, self.agent_q(),
                                                 theta_old, omega_old, alpha, self.beta,
                                                 noise)
        self.pi_opt.step(self.policy.params, g, "policy_loss")
        self._notify("theta", self.policy.params)
        if self.temp.learn:
            _, ga = alpha_loss(sample.log_prob, self.temp)
            self.temp.log_alpha.step(ga, "alpha_loss")
            self._notify("alpha", self.temp.log_alpha.value)
        if self.variant == "cvar":
            polyak_update(self.critic.net.params, self.critic.target.params, cfg.tau)
            self._notify("phi_bar", self.critic.target.params)
        else:
            for head, tgt in zip(self.critic.heads, self.critic.targets):
                polyak_update(head.params, tgt.params, cfg.tau)
                self._notify("phi_bar", tgt.params)

    def train_step(self, buffer, rng):
        """One gradient step on a fresh batch; "old" policies are the
        parameters as of the start of this step."""
        batch = buffer.sample_batch(self.cfg.batch_size, rng)
        omega_old = theta_old = None
        if self.adv_policy is not None:
            omega_old = self.adv_policy.copy()
            theta_old = self.policy.copy()
        run_adv = self.adv_policy is not None and self.cfg.update_adversary
        if run_adv and self.cfg.adversary_first:
            self.adversary_update(batch, rng)
        self.agent_update(batch, rng, theta_old, omega_old)
        if run_adv and not self.cfg.adversary_first:
            self.adversary_update(batch, rng)
        return batch


def train_step(learner, buffer, rng):
    return learner.train_step(buffer, rng)


# -- evaluation -------------------------------------------------------------------

@dataclass
class EvalResult:
    returns: list
    failures: int
    states: list = field(default_factory=list)

    @property
    def empty(self):
        return not self.returns

    @property
    def mean_return(self):
        return float(np.mean(self.returns)) if self.returns else float("nan")

    @property
    def std_return(self):
        return float(np.std(self.returns)) if self.returns else float("nan")


def _actor(policy):
    if isinstance(policy, SquashedGaussianPolicy):
        return lambda s, rng: policy.mean_action(s[None, :])[0]
    return policy


def evaluate(policy, env, episodes, rng, record_states=False):
    """Undiscounted returns and total constraint violations over ``episodes``.

    ``policy`` is a SquashedGaussianPolicy (its squashed mean action is used)
    or any callable ``(state, rng) -> action``.
    """
    act = _actor(policy)
    returns, failures, states = [], 0, []
    for _ in range(episodes):
        s = env.reset(rng)
        total = 0.0
        while True:
            if record_states:
                states.append(s)
            res = env.step(act(s, rng), rng)
            total += res.reward
            failures += int(res.constraint_cost)
            s = res.next_state
            if res.terminated or res.truncated:
                break
        returns.append(total)
    return EvalResult(returns, failures, states)


# -- full run ---------------------------------------------------------------------

@dataclass
class MetricsRow:
    step: int
    eval_return_mean: float
    eval_return_std: float
    cum_failures: int
    alpha: float
    beta: float
    kl_estimate: float


@dataclass
class RunMetrics:
    rows: list
    seed: int
    wall_time: float = 0.0
    train_failures: int = 0
    final_params: dict = field(default_factory=dict, repr=False)

    @property
    def cum_failures(self):
        return self.rows[-1].cum_failures if self.rows else 0


def _format(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_metrics(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow([_format(getattr(r, c)) for c in METRICS_COLUMNS])


def read_metrics(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != METRICS_COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        return [MetricsRow(int(r[0]), float(r[1]), float(r[2]), int(r[3]), float(r[4]),
                           float(r[5]), float(r[6])) for r in reader]


def write_states(path, records):
    """``records`` is a list of (step, episode_state_index, state vector)."""
    dim = len(records[0][2]) if records else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "index", *[f"s{i}" for i in range(dim)]])
        for step, idx, s in records:
            w.writerow([str(step), str(idx), *[repr(float(v)) for v in s]])


def read_states(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = [(int(r[0]), int(r[1]), [float(v) for v in r[2:]]) for r in reader]
    steps = np.array([r[0] for r in rows], dtype=np.int64)
    states = np.array([r[2] for r in rows], dtype=np.float64)
    return steps, states


PARAM_MAGIC = b"SAACNET\x00"
PARAM_VERSION = 1


def save_params(path, net):
    """Flat little-endian float64 parameters behind a self-describing header."""
    sizes = net.layer_sizes
    with open(path, "wb") as fh:
        fh.write(PARAM_MAGIC)
        fh.write(struct.pack("<II", PARAM_VERSION, len(sizes)))
        fh.write(struct.pack(f"<{len(sizes)}I", *sizes))
        fh.write(struct.pack("<Q", net.n_params))
        fh.write(net.params.astype("<f8").tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != PARAM_MAGIC:
        raise ValueError(f"{path}: not a parameter snapshot")
    version, n = struct.unpack_from("<II", data, 8)
    if version != PARAM_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {version}")
    sizes = struct.unpack_from(f"<{n}I", data, 16)
    off = 16 + 4 * n
    (count,) = struct.unpack_from("<Q", data, off)
    net = Mlp(sizes)
    if count != net.n_params:
        raise ValueError(f"{path}: parameter count mismatch")
    net.params[...] = np.frombuffer(data, dtype="<f8", count=count, offset=off + 8)
    return net


def _snapshot_nets(learner):
    nets = {"policy": learner.policy.trunk}
    if learner.variant == "cvar":
        nets["critic"] = learner.critic.net
    else:
        nets["critic1"], nets["critic2"] = learner.critic.heads
    if learner.adv_policy is not None:
        nets["adversary_policy"] = learner.adv_policy.trunk
    if learner.cons_critic is not None:
        nets["cons_critic1"], nets["cons_critic2"] = learner.cons_critic.heads
    return nets


def run_training(cfg, out_dir=None, progress=None):
    """Run one seed of SAAC (or plain SAC with ``adversary = none``)."""
    cfg.validate()
    t0 = time.perf_counter()
    init_rng, env_rng, act_rng, update_rng, eval_rng = spawn_rngs(cfg.seed, 5)
    env = make_env(cfg.env_config())
    eval_env = make_env(cfg.env_config())
    learner = Learner(cfg, env.state_dim, env.action_dim, env.action_bound, init_rng)
    buffer = ReplayBuffer(min(cfg.buffer_capacity, max(cfg.total_steps, 1)),
                          env.state_dim, env.action_dim)
    rows, state_records = [], []
    cum_failures = 0

    def eval_point(step):
        res = evaluate(learner.policy, eval_env, cfg.eval_episodes, eval_rng,
                       record_states=True)
        kl = float("nan")
        if learner.adv_policy is not None and res.states:
            kl = kl_estimate(learner.policy, learner.adv_policy, np.array(res.states),
                             eval_rng, 1)
        rows.append(MetricsRow(step, res.mean_return, res.std_return, cum_failures,
                               learner.alpha, learner.beta, kl))
        visited = res.states
        stride = max(1, -(-len(visited) // STATES_PER_EVAL))
        for i in range(0, len(visited), stride):
            state_records.append((step, i, visited[i]))
        if progress:
            progress(rows[-1], learner)

    eval_point(0)
    s = env.reset(env_rng)
    for step in range(1, cfg.total_steps + 1):
        if step <= cfg.warmup_steps:
            a = act_rng.uniform(-env.action_bound, env.action_bound, env.action_dim)
        else:
            a = learner.policy.sample_action(s, act_rng).action
        res = env.step(a, env_rng)
        buffer.push(Transition(s, a, res.reward, res.constraint_cost, res.next_state,
                               res.terminated))
        cum_failures += int(res.constraint_cost)
        s = res.next_state
        if res.terminated or res.truncated:
            s = env.reset(env_rng)
        if step >= cfg.warmup_steps:
            for _ in range(cfg.updates_per_step):
                learner.train_step(buffer, update_rng)
        if step % cfg.eval_interval == 0:
            eval_point(step)

    metrics = RunMetrics(rows, cfg.seed, time.perf_counter() - t0, cum_failures,
                         {k: v.params.copy() for k, v in _snapshot_nets(learner).items()})
    metrics.learner = learner
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_metrics(os.path.join(out_dir, "metrics.csv"), rows)
        write_states(os.path.join(out_dir, "states.csv"), state_records)
        pdir = os.path.join(out_dir, "params")
        os.makedirs(pdir, exist_ok=True)
        for name, net in _snapshot_nets(learner).items():
            save_params(os.path.join(pdir, f"{name}.bin"), net)
        info = {"seed": cfg.seed, "wall_time": metrics.wall_time,
                "train_failures": cum_failures, "config": asdict(cfg)}
        with open(os.path.join(out_dir, "run_info.json"), "w", encoding="utf-8") as fh:
            json.dump(info, fh, indent=2, default=str)
    return metrics
