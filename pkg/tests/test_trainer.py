import numpy as np
import pytest

from saac import oracle
from saac.envs import EnvConfig, make_env
from saac.numerics import ConfigurationError, TrainingDivergence, grad_check, make_rng
from saac.policy import SquashedGaussianPolicy
from saac.replay import ReplayBuffer, Transition
from saac.sac_core import TwinMinQ, base_policy_loss
from saac.trainer import (METRICS_COLUMNS, Learner, MetricsRow, TrainConfig, evaluate,
                          load_params, read_metrics, read_states, repulsive_policy_loss,
                          run_training, save_params, write_metrics, write_states)
from saac.numerics import Mlp

SMALL = dict(hidden=(8, 8), batch_size=16, warmup_steps=50, eval_interval=50,
             eval_episodes=1, horizon=40)


def filled_buffer(env_name="hazard_point", n=200, seed=0):
    env = make_env(env_name)
    rng = make_rng(seed)
    buf = ReplayBuffer(n, env.state_dim, env.action_dim)
    s = env.reset(rng)
    while len(buf) < n:
        a = rng.uniform(-env.action_bound, env.action_bound, env.action_dim) * 0.999
        res = env.step(a, rng)
        buf.push(Transition(s, a, res.reward, res.constraint_cost, res.next_state,
                            res.terminated))
        s = env.reset(rng) if res.terminated or res.truncated else res.next_state
    return env, buf


def make_learner(variant="cons", seed=0, **kw):
    cfg = TrainConfig(adversary=variant, **{**SMALL, **kw}).validate()
    return Learner(cfg, 4, 2, 1.0, make_rng(seed))


# -- repulsive loss ---------------------------------------------------------------

def test_repulsion_vanishes_at_zero_beta(rng):
    lrn = make_learner()
    states = rng.normal(size=(8, 4))
    noise = rng.standard_normal((8, 2))
    base = base_policy_loss(states, lrn.policy, lrn.critic, 0.3, noise)
    rep = repulsive_policy_loss(states, lrn.policy, TwinMinQ(lrn.critic), lrn.policy.copy(),
                                lrn.adv_policy.copy(), 0.3, 0.0, noise)
    assert rep[0] == base[0]
    assert np.array_equal(rep[1], base[1])


def test_identical_snapshots_give_no_repulsion(rng):
    lrn = make_learner()
    states = rng.normal(size=(8, 4))
    noise = rng.standard_normal((8, 2))
    snap = lrn.adv_policy.copy()
    base = base_policy_loss(states, lrn.policy, lrn.critic, 0.3, noise)
    rep = repulsive_policy_loss(states, lrn.policy, TwinMinQ(lrn.critic), snap, snap.copy(),
                                0.3, 2.0, noise)
    assert rep[0] == pytest.approx(base[0], abs=1e-14)
    np.testing.assert_allclose(rep[1], base[1], atol=1e-14)


def test_repulsive_loss_grad_check(rng):
    lrn = make_learner()
    lrn.policy.trunk.biases[-1][2:] = -0.5
    states = rng.normal(size=(6, 4))
    noise = rng.standard_normal((6, 2))
    old, adv_old = lrn.policy.copy(), lrn.adv_policy.copy()
    old.params[...] += 0.1 * rng.normal(size=old.params.size)

    def loss(p):
        lrn.policy.params[...] = p
        v, g, _ = repulsive_policy_loss(states, lrn.policy, TwinMinQ(lrn.critic), old,
                                        adv_old, 0.3, 0.8, noise)
        return v, g

    assert grad_check(loss, lrn.policy.params.copy()).passed


def test_repulsive_loss_leaves_snapshots_untouched(rng):
    lrn = make_learner()
    old, adv_old = lrn.policy.copy(), lrn.adv_policy.copy()
    before = old.params.copy(), adv_old.params.copy()
    repulsive_policy_loss(rng.normal(size=(6, 4)), lrn.policy, TwinMinQ(lrn.critic), old,
                          adv_old, 0.3, 0.8, rng.standard_normal((6, 2)))
    assert np.array_equal(before[0], old.params) and np.array_equal(before[1], adv_old.params)


# -- train_step ---------------------------------------------------------------------

@pytest.mark.parametrize("variant", ["none", "cons", "msd", "cvar"])
def test_train_step_deterministic(variant):
    _, buf = filled_buffer()
    results = []
    for _ in range(2):
        lrn = make_learner(variant, seed=3)
        rng = make_rng(4)
        for _ in range(3):
            lrn.train_step(buf, rng)
        results.append(np.concatenate([lrn.policy.params, lrn.temp.log_alpha.value]))
    assert np.array_equal(*results)


EXPECTED_ORDER = {
    "cons": ["psi", "psi", "omega", "beta", "psi_bar", "psi_bar",
             "phi", "phi", "theta", "alpha", "phi_bar", "phi_bar"],
    "msd": ["omega", "beta", "phi", "phi", "theta", "alpha", "phi_bar", "phi_bar"],
    "cvar": ["omega", "beta", "phi", "theta", "alpha", "phi_bar"],
    "none": ["phi", "phi", "theta", "alpha", "phi_bar", "phi_bar"],
}


@pytest.mark.parametrize("variant", sorted(EXPECTED_ORDER))
def test_update_order(variant):
    _, buf = filled_buffer()
    lrn = make_learner(variant)
    seen = []
    lrn.hook = lambda name, params: seen.append((name, hash(params.tobytes())))
    lrn.train_step(buf, make_rng(0))
    assert [n for n, _ in seen] == EXPECTED_ORDER[variant]


def test_swapped_order_flag():
    _, buf = filled_buffer()
    lrn = make_learner("msd", adversary_first=False)
    seen = []
    lrn.hook = lambda name, params: seen.append(name)
    lrn.train_step(buf, make_rng(0))
    assert seen[-2:] == ["omega", "beta"]


def test_adversary_update_isolated_from_agent():
    _, buf = filled_buffer()
    lrn = make_learner("cons")
    agent = [lrn.policy.params.copy()] + [h.params.copy() for h in lrn.critic.heads]
    lrn.adversary_update(buf.sample_batch(16, make_rng(1)), make_rng(2))
    after = [lrn.policy.params] + [h.params for h in lrn.critic.heads]
    assert all(np.array_equal(a, b) for a, b in zip(agent, after))


def test_agent_update_isolated_from_adversary():
    _, buf = filled_buffer()
    lrn = make_learner("cons")
    adversary = [lrn.adv_policy.params.copy()] + [h.params.copy()
                                                  for h in lrn.cons_critic.heads]
    lrn.agent_update(buf.sample_batch(16, make_rng(1)), make_rng(2), lrn.policy.copy(),
                     lrn.adv_policy.copy())
    after = [lrn.adv_policy.params] + [h.params for h in lrn.cons_critic.heads]
    assert all(np.array_equal(a, b) for a, b in zip(adversary, after))


def test_divergence_names_the_loss():
    _, buf = filled_buffer()
    lrn = make_learner("none")
    lrn.critic.targets[0].params[...] = np.inf
    with pytest.raises(TrainingDivergence) as info:
        lrn.train_step(buf, make_rng(0))
    assert info.value.loss_name == "soft_target"


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(adversary="bogus").validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(warmup_steps=10, batch_size=64).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(eval_interval=0).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(gamma=1.5).validate()


# -- evaluation ---------------------------------------------------------------------

def test_zero_episode_evaluation(rng):
    res = evaluate(lambda s, r: np.zeros(2), make_env("hazard_point"), 0, rng)
    assert res.empty and res.failures == 0 and np.isnan(res.mean_return)


def test_still_policy_never_fails(rng):
    res = evaluate(lambda s, r: np.zeros(2), make_env("hazard_point"), 3, rng)
    assert res.failures == 0 and len(res.returns) == 3


def test_random_policy_chain_failures_match_oracle():
    rng = make_rng(5)
    env = make_env(EnvConfig(name="risky_chain", slip_prob=0.2))
    episodes = 10_000
    res = evaluate(lambda s, r: r.uniform(-1, 1, 1), env, episodes, rng)
    p = oracle.chain_absorption_probability(0.2, 0.5)
    assert abs(res.failures / episodes - p) <= 3 * np.sqrt(p * (1 - p) / episodes)


def test_evaluate_uses_mean_action(rng):
    pi = SquashedGaussianPolicy(4, 2, (4,), rng=rng)
    env = make_env(EnvConfig(horizon=5))
    a = evaluate(pi, env, 1, make_rng(1)).returns
    b = evaluate(pi, env, 1, make_rng(1)).returns
    assert a == b


# -- full runs ----------------------------------------------------------------------

def test_zero_steps_single_row():
    m = run_training(TrainConfig(total_steps=0, **SMALL))
    assert len(m.rows) == 1 and m.rows[0].step == 0


def test_no_updates_during_warmup():
    cfg = TrainConfig(total_steps=49, **SMALL)
    seen = []

    def progress(row, learner):
        learner.hook = lambda name, params: seen.append(name)

    run_training(cfg, progress=progress)
    assert seen == []


def test_failures_accounting():
    cfg = TrainConfig(adversary="none", total_steps=600, seed=1,
                      **{**SMALL, "warmup_steps": 600})
    m = run_training(cfg)
    cf = [r.cum_failures for r in m.rows]
    assert cf == sorted(cf) and cf[-1] == m.train_failures


def test_outputs_written(tmp_path):
    cfg = TrainConfig(total_steps=120, **SMALL)
    m = run_training(cfg, str(tmp_path))
    for name in ("metrics.csv", "states.csv", "run_info.json"):
        assert (tmp_path / name).is_file()
    rows = read_metrics(tmp_path / "metrics.csv")
    assert rows == m.rows
    with open(tmp_path / "metrics.csv", encoding="utf-8") as fh:
        assert fh.readline().strip() == ",".join(METRICS_COLUMNS)
    steps, states = read_states(tmp_path / "states.csv")
    assert states.shape[1] == 4 and set(steps) <= {0, 50, 100}
    net = load_params(tmp_path / "params" / "policy.bin")
    assert np.array_equal(net.params, m.final_params["policy"])


def test_metrics_round_trip(tmp_path):
    rows = [MetricsRow(0, -1.5, 0.25, 0, 1.0, 0.0, float("nan")),
            MetricsRow(1000, 1 / 3, 1e-300, 7, 0.123456789012345, 2.5, 0.1)]
    write_metrics(tmp_path / "m.csv", rows)
    back = read_metrics(tmp_path / "m.csv")
    assert back[1] == rows[1]
    assert np.isnan(back[0].kl_estimate) and back[0].eval_return_mean == -1.5


def test_states_round_trip(tmp_path):
    recs = [(0, 0, np.array([0.1, -2.0])), (5, 3, np.array([1 / 7, 3e-9]))]
    write_states(tmp_path / "s.csv", recs)
    steps, states = read_states(tmp_path / "s.csv")
    assert list(steps) == [0, 5]
    assert np.array_equal(states, np.array([r[2] for r in recs]))


def test_params_round_trip(tmp_path, rng):
    net = Mlp([3, 5, 2], rng)
    save_params(tmp_path / "n.bin", net)
    back = load_params(tmp_path / "n.bin")
    assert back.layer_sizes == net.layer_sizes and np.array_equal(back.params, net.params)
    (tmp_path / "bad.bin").write_bytes(b"nonsense")
    with pytest.raises(ValueError):
        load_params(tmp_path / "bad.bin")
