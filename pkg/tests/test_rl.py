import numpy as np
import pytest

from frbattery.harness import SimConfig
from frbattery.market import fit_price_models
from frbattery.mpc import MpcConfig
from frbattery.neural import Mlp, critic_net, init_mlp, policy_net, soft_update
from frbattery.rl import (LOG_COLUMNS, DpgAgent, DpgConfig, ReplayMemory, dpg_update, fresh_rollout, run_episode,
                          stage_reward, td_error_mae, train_rl)
from frbattery.sl import WeekStream

from lqr_toy import riccati_gain, train_toy


@pytest.fixture(scope="module")
def loop(fast_params, synth8):
    sim = SimConfig(fast_params, MpcConfig(S=synth8.S, E_bar=fast_params.E_bar), pi_cf=3e5)
    return sim, fit_price_models(synth8), synth8


def small_cfg(**kw):
    base = dict(episode_length_hours=4, batch_size=4, capacity=64, updates_per_episode=3, pi_cf=3e5)
    base.update(kw)
    return DpgConfig(**base)


# -- replay memory ----------------------------------------------------------------

def test_memory_is_fifo():
    m = ReplayMemory(capacity=5, n_x=1, n_a=1)
    for i in range(12):
        m.push([i], [-i], float(i), [i + 1], i % 4 == 0)
        assert len(m) == min(i + 1, 5)
    X, A, R, Xn, T = m.items()
    np.testing.assert_array_equal(X.ravel(), [7, 8, 9, 10, 11])
    np.testing.assert_array_equal(A.ravel(), [-7, -8, -9, -10, -11])
    np.testing.assert_array_equal(T, [False, True, False, False, False])
    assert m.n_pushed == 12


def test_memory_samples_uniformly_without_replacement():
    m = ReplayMemory(capacity=10, n_x=1, n_a=1)
    for i in range(25):
        m.push([i], [0], 0.0, [0])
    rng = np.random.default_rng(0)
    counts = np.zeros(25)
    n_batches, bs = 25_000, 4
    for _ in range(n_batches):
        X = m.sample(bs, rng)[0].ravel()
        assert len(set(X)) == bs
        counts[X.astype(int)] += 1
    assert counts[:15].sum() == 0
    expected = n_batches * bs / 10
    assert np.all(np.abs(counts[15:] / expected - 1) < 0.05)
    with pytest.raises(ValueError):
        m.sample(11, rng)


# -- DPG update --------------------------------------------------------------------

def toy_agent(rng, cfg):
    policy = init_mlp((3, 5, 2), ("relu", "tanh"), rng, out_lo=[0, -1], out_hi=[1, 1])
    critic = init_mlp((5, 6, 1), ("relu", "identity"), rng)
    return DpgAgent.from_nets(policy, critic, cfg)


def toy_batch(rng, n=32, terminal=None):
    X = rng.normal(size=(n, 3))
    A = rng.uniform(-1, 1, (n, 2))
    R = rng.normal(size=n)
    Xn = rng.normal(size=(n, 3))
    T = np.zeros(n, bool) if terminal is None else terminal
    return X, A, R, Xn, T


def test_soft_update_contracts_by_one_minus_tau(rng):
    tau = 0.3
    cfg = DpgConfig(tau=tau, batch_size=8, capacity=8)
    agent = toy_agent(rng, cfg)
    for p in agent.critic_target.params():
        p += rng.normal(size=p.shape)
    before = agent.critic_target.flat_params() - agent.critic.flat_params()
    dpg_update(agent, toy_batch(rng), cfg)
    after = agent.critic_target.flat_params() - agent.critic.flat_params()
    # the online step moves the critic too, so check the defining blend directly
    target = agent.critic_target.copy()
    online = agent.critic.copy()
    soft_update(target, online, tau)
    np.testing.assert_allclose(target.flat_params() - online.flat_params(), (1 - tau) * after, atol=1e-14)
    assert np.linalg.norm(after) < np.linalg.norm(before)


def test_tau_one_copies_online_nets(rng):
    cfg = DpgConfig(tau=1.0, batch_size=8, capacity=8)
    agent = toy_agent(rng, cfg)
    dpg_update(agent, toy_batch(rng), cfg)
    assert np.array_equal(agent.policy_target.flat_params(), agent.policy.flat_params())
    assert np.array_equal(agent.critic_target.flat_params(), agent.critic.flat_params())


def test_tau_zero_freezes_targets(rng):
    agent = toy_agent(rng, DpgConfig())
    pt, ct = agent.policy_target.flat_params(), agent.critic_target.flat_params()
    soft_update(agent.policy_target, agent.policy, 0.0)
    soft_update(agent.critic_target, agent.critic, 0.0)
    assert np.array_equal(agent.policy_target.flat_params(), pt)
    assert np.array_equal(agent.critic_target.flat_params(), ct)
    with pytest.raises(ValueError):
        DpgConfig(tau=0.0)


def test_terminal_transitions_do_not_bootstrap(rng):
    cfg = DpgConfig(batch_size=8, capacity=8)
    agent = toy_agent(rng, cfg)
    X, A, R, Xn, _ = toy_batch(rng, 16)
    XA = np.hstack([X, A])
    q = agent.critic.forward(XA).ravel()
    T = np.ones(16, bool)
    # with every transition terminal the target is r, whatever the next state
    mae = td_error_mae(agent, (X, A, R, Xn, T), cfg)
    assert mae == pytest.approx(np.mean(np.abs(q - R)), rel=1e-12)
    mae2 = td_error_mae(agent, (X, A, R, 1e3 * Xn, T), cfg)
    assert mae2 == mae
    T[:8] = False
    qn = agent.critic_target.forward(np.hstack([Xn, agent.policy_target.forward(Xn)])).ravel()
    y = R + cfg.gamma * np.where(T, 0.0, qn)
    assert td_error_mae(agent, (X, A, R, Xn, T), cfg) == pytest.approx(np.mean(np.abs(q - y)), rel=1e-12)


def test_td_mae_decreases_on_frozen_batch(rng):
    cfg = DpgConfig(batch_size=8, capacity=8, critic_lr=1e-3, actor_lr=1e-6, tau=1e-3)
    agent = toy_agent(rng, cfg)
    batch = toy_batch(rng, 64)
    start = td_error_mae(agent, batch, cfg)
    trace = [dpg_update(agent, batch, cfg)[0] for _ in range(50)]
    end = td_error_mae(agent, batch, cfg)
    assert end < start
    assert trace[-1] < trace[0]
    assert np.mean(np.diff(trace) < 0) > 0.8


# -- rewards -------------------------------------------------------------------------

def test_stage_reward_worked_example():
    Cf, E_bar = 0.0, 1.0
    E_next = 0.5 * (1 - Cf) * E_bar   # SOC term vanishes
    r = stage_reward(30.0, 2.0, 20.0, 1.0, Cf, Cf + 1e-5, E_next, E_bar, 12000.0)
    assert r == pytest.approx(60 - 20 - 0.12, abs=1e-12)
    assert stage_reward(0, 0, 0, 0, 0.1, 0.1, 0.45, 1.0, 12000.0) == 0.0
    assert stage_reward(0, 0, 0, 0, 0.1, 0.11, 0.45, 1.0, 12000.0) == pytest.approx(-120.0, abs=1e-9)
    # half-capacity deviation of 0.1 costs soc_weight * 0.01
    assert stage_reward(0, 0, 0, 0, 0.0, 0.0, 0.6, 1.0, 0.0, soc_weight=5.0) == pytest.approx(-0.05)


# -- rollouts ----------------------------------------------------------------------

def rollout(loop, cfg, seed):
    sim, models, pool = loop
    stream = WeekStream(models, pool, seed)
    rs = fresh_rollout(sim, stream)
    pol = policy_net(sim.mpc.P_max, np.random.default_rng(5))
    return run_episode(pol, sim, stream, rs, cfg, np.random.default_rng(seed))


def test_noise_free_episode_is_deterministic(loop):
    cfg = small_cfg(noise_variance=0.0)
    t1, r1, _, _ = rollout(loop, cfg, 3)
    t2, r2, _, _ = rollout(loop, cfg, 3)
    assert len(t1) == len(t2) == cfg.episode_length_hours
    for a, b in zip(t1, t2):
        assert np.array_equal(a.x, b.x) and np.array_equal(a.a, b.a) and a.r == b.r


@pytest.mark.parametrize("store_proposed", [True, False])
def test_episode_actions_and_rewards(loop, store_proposed):
    sim, _, _ = loop
    cfg = small_cfg(noise_variance=0.25, store_proposed=store_proposed)
    trans, recs, rs, eol = rollout(loop, cfg, 8)
    P = sim.mpc.P_max
    for t, rec in zip(trans, recs):
        c = rec.commitment
        assert c.F >= 0 and c.O >= 0 and c.L >= 0 and c.O * c.L == 0
        assert c.F <= P + 1e-12 and max(c.O, c.L) <= P + 1e-12
        np.testing.assert_array_equal(t.a_exec, c.action)
        ref = rec.action if not store_proposed else rec.proposed.action
        np.testing.assert_array_equal(t.a, ref)
        assert 0 <= t.a[0] <= P and abs(t.a[1]) <= P
        expected = stage_reward(rec.pi_f, c.F, rec.pi_e, c.O, rec.Cf_start, rec.Cf_end, rec.E_end,
                                sim.params.E_bar, cfg.pi_cf, cfg.soc_penalty_weight)
        assert t.r == expected
    for prev, nxt in zip(trans[:-1], trans[1:]):
        assert np.array_equal(prev.x_next[4:], nxt.x[4:])   # SOC and fade carry over
        assert prev.x_next[2] == nxt.x[2] and prev.x_next[3] == nxt.x[3]
    assert not eol
    assert rs.state.Cf == recs[-1].Cf_end


def test_episode_stops_at_eol(params, loop):
    _, models, pool = loop
    sim = SimConfig(params.with_aging(2000), MpcConfig(S=pool.S, E_bar=params.E_bar), pi_cf=0.0)
    cfg = small_cfg(episode_length_hours=40, noise_variance=0.0)
    trans, recs, _, eol = rollout((sim, models, pool), cfg, 2)
    assert eol and trans[-1].terminal
    assert recs[-1].Cf_end >= cfg.eol_threshold
    assert all(r.Cf_end < cfg.eol_threshold for r in recs[:-1])
    assert not any(t.terminal for t in trans[:-1])


# -- training loop ---------------------------------------------------------------------

def test_zero_updates_leave_policy_unchanged(loop):
    sim, models, pool = loop
    rng = np.random.default_rng(0)
    pol, cri = policy_net(sim.mpc.P_max, rng), critic_net(rng)
    res = train_rl(pol, cri, sim, models, pool, small_cfg(updates_per_episode=0), seed=1, max_episodes=2)
    assert np.array_equal(res.final_policy.flat_params(), pol.flat_params())
    assert np.array_equal(res.critic.flat_params(), cri.flat_params())
    assert len(res.log) == 2 and res.total_hours == 8


def test_train_rl_smoke(loop):
    sim, models, pool = loop
    rng = np.random.default_rng(1)
    pol, cri = policy_net(sim.mpc.P_max, rng), critic_net(rng)
    seen = []
    res = train_rl(pol, cri, sim, models, pool, small_cfg(), seed=2, max_episodes=3,
                   score_fn=lambda net: float(-np.abs(net.flat_params()).sum()), progress=seen.append)
    df = res.log_frame()
    assert list(df.columns) == LOG_COLUMNS
    assert len(df) == 3 and len(seen) == 3
    assert np.all(np.diff(df["Cf"].to_numpy()) > 0)
    assert np.isfinite(df["critic_loss"]).all()
    assert not np.array_equal(res.final_policy.flat_params(), pol.flat_params())
    # the best checkpoint is at least as good as every logged score and the initial net
    assert res.best_val_return >= df["val_return"].max()
    assert res.best_val_return >= -np.abs(pol.flat_params()).sum()
    # inputs are copied, not trained in place
    assert np.array_equal(pol.flat_params(), policy_net(sim.mpc.P_max, np.random.default_rng(1)).flat_params())


def test_train_rl_is_seeded(loop):
    sim, models, pool = loop
    rng = np.random.default_rng(3)
    pol, cri = policy_net(sim.mpc.P_max, rng), critic_net(rng)
    a = train_rl(pol, cri, sim, models, pool, small_cfg(), seed=9, max_episodes=2)
    b = train_rl(pol, cri, sim, models, pool, small_cfg(), seed=9, max_episodes=2)
    assert np.array_equal(a.policy.flat_params(), b.policy.flat_params())


def test_config_validation():
    with pytest.raises(ValueError):
        DpgConfig(gamma=1.0)
    with pytest.raises(ValueError):
        DpgConfig(batch_size=10, capacity=5)
    with pytest.raises(ValueError):
        DpgConfig(noise_variance=-1)
    with pytest.raises(ValueError):
        ReplayMemory(0)


# -- linear-quadratic toy ----------------------------------------------------------------

def test_riccati_fixed_point():
    K, P = riccati_gain()
    # P solves P = 1 + r K^2 + g P (1 - K)^2 with K = g P / (r + g P)
    g, r = 0.9, 0.1
    assert P == pytest.approx(1 + r * K * K + g * P * (1 - K) ** 2, rel=1e-13)
    assert K == pytest.approx(g * P / (r + g * P), rel=1e-13)
    # eliminating K gives g P^2 + (r - g - g r) P - r = 0
    a, b, c = g, r * (1 - g) - g, -r
    P_cf = (-b + np.sqrt(b * b - 4 * a * c)) / (2 * a)
    assert P == pytest.approx(P_cf, rel=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_toy_gain_close_to_riccati(seed):
    K_star, _ = riccati_gain()
    K, agent = train_toy(seed)
    assert abs(K / K_star - 1) < 0.10
    assert isinstance(agent.policy, Mlp)
