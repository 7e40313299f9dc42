"""End-to-end stages shared by the command line and the comparison experiments."""

from __future__ import annotations

import zlib
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import RunConfig
from .harness import EvalMetrics, FrPolicy, LfMpcPolicy, NetPolicy, ZeroPolicy, evaluate_policy, features
from .market import HistoricalDataset, PriceModels, synth_generator
from .neural import Mlp, critic_net, policy_net
from .rl import RlResult, lifetime_profit_score, train_rl
from .sl import DemoSet, PolicyDistiller, QDistiller, generate_demonstrations


def derive_seed(seed: int, tag: str) -> int:
    """Stable per-stage seed from a run seed and a stage name."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(tag.encode()),))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def make_dataset(cfg: RunConfig, seed: int, n_weeks: int | None = None) -> HistoricalDataset:
    over = {} if n_weeks is None else {"n_weeks": n_weeks}
    return synth_generator(cfg.synth_profile(**over), seed)


def fit_uq(data: HistoricalDataset, cfg: RunConfig) -> PriceModels:
    return PriceModels(min_weeks=cfg.raw["uq"]["min_weeks"]).fit(data)


def make_demos(models: PriceModels, pool: HistoricalDataset, cfg: RunConfig, seed: int,
               n_hours: int | None = None) -> DemoSet:
    n = cfg.raw["demos"]["n_hours"] if n_hours is None else n_hours
    return generate_demonstrations(n, seed, cfg.sim_config(), models, pool,
                                   metadata={"config_hash": cfg.config_hash(), "mode": cfg.mode})


def train_sl(demos: DemoSet, cfg: RunConfig, seed: int):
    """(PolicyDistiller, QDistiller) fitted on `demos`."""
    s = cfg.raw["sl"]
    X, A, R, Xn, An, T = demos.arrays()
    pol = PolicyDistiller(P_max=cfg.mpc_config().P_max, epochs=s["policy_epochs"], batch_size=s["batch_size"],
                          lr=s["lr"], holdout=s["holdout"], random_state=derive_seed(seed, "sl-policy")).fit(X, A)
    q = QDistiller(gamma=cfg.dpg_config().gamma, epochs=s["q_epochs"], batch_size=s["batch_size"], lr=s["lr"],
                   holdout=s["holdout"], random_state=derive_seed(seed, "sl-critic")).fit(X, A, R, Xn, An, T)
    return pol, q


def scratch_nets(pool: HistoricalDataset, cfg: RunConfig, seed: int):
    """Randomly initialized policy and critic with scalers set from the signal pool.

    Without demonstrations the input statistics come from pool features
    paired with SOC, fade and actions drawn uniformly over their ranges.
    """
    rng = np.random.default_rng(derive_seed(seed, "scratch"))
    mpc = cfg.mpc_config()
    dpg = cfg.dpg_config()
    n = pool.n_hours - 1
    E = rng.uniform(mpc.lambda_l, mpc.lambda_u, n) * mpc.E_bar
    Cf = rng.uniform(0.0, dpg.eol_threshold, n)
    X = np.array([features(pool.fr_signals[t - 1], pool.fr_prices[t], pool.energy_prices[t], E[t - 1], Cf[t - 1])
                  for t in range(1, n + 1)])
    A = np.column_stack([rng.uniform(0, mpc.P_max, n), rng.uniform(-mpc.P_max, mpc.P_max, n)])
    pol = policy_net(mpc.P_max, rng)
    pol.set_input_scaler(X)
    cri = critic_net(rng)
    cri.set_input_scaler(np.hstack([X, A]))
    cri.out_scale[:] = mpc.P_max * float(np.mean(pool.fr_prices)) / (1.0 - dpg.gamma)
    return pol, cri


def train_rl_stage(policy: Mlp, critic: Mlp, models: PriceModels, pool: HistoricalDataset, cfg: RunConfig,
                   seed: int, val_data: HistoricalDataset | None = None, progress=None) -> RlResult:
    r = cfg.raw["rl"]
    sim = cfg.sim_config()
    if val_data is None:
        val_data = make_dataset(cfg, derive_seed(seed, "rl-validation"), r["val_weeks"])
    score = lifetime_profit_score(sim, val_data, r["val_hours"])
    return train_rl(policy, critic, sim, models, pool, cfg.dpg_config(), derive_seed(seed, "rl"),
                    n_batteries=r["n_batteries"], max_episodes=r["max_episodes"], score_fn=score,
                    val_every=r["val_every"], progress=progress)


def make_policy(spec: str, cfg: RunConfig) -> FrPolicy:
    """Policy from a command-line spec: ``zero``, ``lfmpc`` or ``NAME=path/to/net.json``."""
    if spec == "zero":
        return ZeroPolicy()
    if spec == "lfmpc":
        return LfMpcPolicy(cfg.mpc_config())
    if "=" in spec:
        name, path = spec.split("=", 1)
        return NetPolicy(Mlp.load(path), cfg.mpc_config().P_max, name)
    raise ValueError(f"unknown policy spec {spec!r}; use zero, lfmpc or NAME=net.json")


def _eval_job(args):
    policy, data, sim, max_hours = args
    return evaluate_policy(policy, data, sim, max_hours=max_hours)


def evaluate_all(policies: list[FrPolicy], data: HistoricalDataset, cfg: RunConfig, jobs: int = 1,
                 max_hours: int | None = None) -> list[EvalMetrics]:
    """Evaluate each policy from a fresh battery; `jobs` > 1 runs them in worker processes."""
    sim = cfg.sim_config()
    mh = cfg.raw["evaluate"]["max_hours"] if max_hours is None else max_hours
    args = [(p, data, sim, mh) for p in policies]
    if jobs <= 1 or len(policies) <= 1:
        return [_eval_job(a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_eval_job, args))


def compare_seed(seed: int, cfg: RunConfig, progress=None) -> dict[str, EvalMetrics]:
    """Train SL and SL&RL from scratch for one seed and evaluate them with LF-MPC on held-out data."""
    train = make_dataset(cfg, derive_seed(seed, "train-data"))
    val = make_dataset(cfg, derive_seed(seed, "val-data"), cfg.raw["rl"]["val_weeks"])
    test = make_dataset(cfg, derive_seed(seed, "test-data"))
    models = fit_uq(train, cfg)
    demos = make_demos(models, train, cfg, derive_seed(seed, "demos"))
    pol, q = train_sl(demos, cfg, seed)
    rl = train_rl_stage(pol.policy_, q.critic_, models, train, cfg, seed, val_data=val, progress=progress)
    P = cfg.mpc_config().P_max
    policies = [LfMpcPolicy(cfg.mpc_config()), NetPolicy(pol.policy_, P, "sl"), NetPolicy(rl.policy, P, "sl_rl")]
    return {m.policy: m for m in evaluate_all(policies, test, cfg)}
