"""Deterministic policy gradient fine-tuning on the single-particle simulator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cell import initial_state
from .harness import NetPolicy, SimConfig, evaluate_policy, features, run_hour
from .market import HistoricalDataset, PriceModels
from .neural import AdamState, Mlp, actor_grad_chain, adam_step, soft_update, td_mae_grad, td_mae_loss
from .rewards import stage_reward  # noqa: F401  re-exported for callers of this module
from .sl import Transition, WeekStream

__all__ = ["DpgConfig", "ReplayMemory", "DpgAgent", "RlResult", "dpg_update", "run_episode",
           "lifetime_profit_score", "stage_reward", "train_rl", "validation_return"]


@dataclass(frozen=True)
class DpgConfig:
    gamma: float = 0.9
    tau: float = 0.01
    batch_size: int = 160
    updates_per_episode: int = 168 * 4
    noise_variance: float = 0.0025
    episode_length_hours: int = 168
    eol_threshold: float = 0.2
    pi_cf: float = 12000.0
    soc_penalty_weight: float = 5.0
    capacity: int = 1680
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    # learn Q over proposed actions, treating the repair scheme as part of the
    # environment; False stores the executed (post-repair) action instead
    store_proposed: bool = True

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0, 1)")
        if not (0.0 < self.tau <= 1.0):
            raise ValueError("tau must lie in (0, 1]")
        if not (1 <= self.batch_size <= self.capacity):
            raise ValueError("need 1 <= batch_size <= capacity")
        if self.noise_variance < 0 or self.updates_per_episode < 0 or self.episode_length_hours < 1:
            raise ValueError("noise variance, update count and episode length must be nonnegative")


class ReplayMemory:
    """Fixed-capacity FIFO buffer of (x, a, r, x', terminal) with uniform batch sampling."""

    def __init__(self, capacity: int = 1680, n_x: int = 6, n_a: int = 2):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.X = np.zeros((capacity, n_x))
        self.A = np.zeros((capacity, n_a))
        self.R = np.zeros(capacity)
        self.Xn = np.zeros((capacity, n_x))
        self.T = np.zeros(capacity, dtype=bool)
        self._next = 0
        self._size = 0
        self.n_pushed = 0

    def __len__(self):
        return self._size

    def push(self, x, a, r, x_next, terminal=False) -> None:
        i = self._next
        self.X[i], self.A[i], self.R[i], self.Xn[i], self.T[i] = x, a, r, x_next, terminal
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        self.n_pushed += 1

    def push_transition(self, t: Transition) -> None:
        self.push(t.x, t.a, t.r, t.x_next, t.terminal)

    def order(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        start = (self._next - self._size) % self.capacity
        return (start + np.arange(self._size)) % self.capacity

    def items(self):
        """Stored (x, a, r, x', terminal) arrays, oldest first."""
        o = self.order()
        return self.X[o], self.A[o], self.R[o], self.Xn[o], self.T[o]

    def sample_indices(self, batch_size: int, rng) -> np.ndarray:
        if batch_size > self._size:
            raise ValueError("batch larger than memory")
        return rng.choice(self._size, size=batch_size, replace=False)

    def sample(self, batch_size: int, rng):
        idx = self.order()[self.sample_indices(batch_size, rng)]
        return self.X[idx], self.A[idx], self.R[idx], self.Xn[idx], self.T[idx]


@dataclass
class DpgAgent:
    """Online and target actor/critic with their optimizer states."""

    policy: Mlp
    critic: Mlp
    policy_target: Mlp
    critic_target: Mlp
    actor_opt: AdamState
    critic_opt: AdamState

    @classmethod
    def from_nets(cls, policy: Mlp, critic: Mlp, cfg: DpgConfig) -> "DpgAgent":
        policy, critic = policy.copy(), critic.copy()
        return cls(policy, critic, policy.copy(), critic.copy(),
                   AdamState.for_net(policy, lr=cfg.actor_lr), AdamState.for_net(critic, lr=cfg.critic_lr))


def dpg_update(agent: DpgAgent, batch, cfg: DpgConfig):
    """One actor-critic iteration on a sampled batch; returns (critic TD-MAE, actor mean Q).

    Targets y = r + gamma Q'(x', mu'(x')) come from the target nets and
    are not differentiated; terminal transitions use y = r.
    """
    X, A, R, Xn, T = batch
    An = agent.policy_target.forward(Xn)
    q_next = agent.critic_target.forward(np.hstack([Xn, An])).ravel()
    y = R + cfg.gamma * np.where(T, 0.0, q_next)
    loss, g = td_mae_grad(agent.critic, np.hstack([X, A]), y)
    adam_step(agent.critic, agent.critic_opt, g)
    q_mean, g = actor_grad_chain(agent.policy, agent.critic, X)
    adam_step(agent.policy, agent.actor_opt, g, ascend=True)
    soft_update(agent.policy_target, agent.policy, cfg.tau)
    soft_update(agent.critic_target, agent.critic, cfg.tau)
    return float(loss), q_mean


def td_error_mae(agent: DpgAgent, batch, cfg: DpgConfig) -> float:
    """Batch TD-MAE of the online critic against the current target nets."""
    X, A, R, Xn, T = batch
    q_next = agent.critic_target.forward(np.hstack([Xn, agent.policy_target.forward(Xn)])).ravel()
    y = R + cfg.gamma * np.where(T, 0.0, q_next)
    return td_mae_loss(agent.critic, np.hstack([X, A]), y)[0]


# -- battery rollouts -----------------------------------------------------------

@dataclass
class RolloutState:
    """Battery state plus the signal of the previous hour, which serves as the next forecast."""

    state: object
    alpha_prev: np.ndarray


def fresh_rollout(sim: SimConfig, stream: WeekStream) -> RolloutState:
    alpha_prev, _, _ = stream.next()
    return RolloutState(initial_state(sim.params, sim.soc0), np.asarray(alpha_prev))


def run_episode(policy: Mlp, sim: SimConfig, stream: WeekStream, rs: RolloutState, cfg: DpgConfig, rng,
                P_max: float | None = None):
    """Roll the (noisy) policy for one episode on the simulator.

    Returns (transitions, hour records, rollout state, reached_eol). Noise
    is drawn from N(0, noise_variance) and added before the policy's last
    activation. Each transition keeps the post-repair action in
    ``a_exec``; ``a`` is the proposal when `cfg.store_proposed` is set and
    the executed action otherwise. The episode stops early when Cf
    reaches the EOL threshold, and that transition is terminal.
    """
    P_max = sim.mpc.P_max if P_max is None else P_max
    pol = NetPolicy(policy, P_max)
    sd = float(np.sqrt(cfg.noise_variance))
    trans, recs = [], []
    eol = False
    for _ in range(cfg.episode_length_hours):
        alpha, pi_f, pi_e = stream.next()
        noise = rng.normal(0.0, sd, policy.n_out) if sd > 0 else None
        new_state, rec = run_hour(pol, rs.state, sim, rs.alpha_prev, alpha, pi_f, pi_e, noise=noise)
        r = rec.reward(cfg.pi_cf, sim.params.E_bar, cfg.soc_penalty_weight)
        _, nf, ne = stream.peek()
        x_next = features(alpha, nf, ne, rec.E_end, rec.Cf_end)
        eol = rec.Cf_end >= cfg.eol_threshold
        a = rec.proposed.action if cfg.store_proposed else rec.action
        trans.append(Transition(rec.x, a, r, x_next, None, eol, 0, rec.x_realized, rec.action))
        recs.append(rec)
        rs = RolloutState(new_state, np.asarray(alpha))
        if eol:
            break
    return trans, recs, rs, eol


def validation_return(policy: Mlp, sim: SimConfig, data: HistoricalDataset, cfg: DpgConfig,
                      P_max: float | None = None, hours: int | None = None) -> float:
    """Noise-free return of a fresh battery over `data` (the first hour only seeds the forecast)."""
    P_max = sim.mpc.P_max if P_max is None else P_max
    pol = NetPolicy(policy, P_max)
    n = data.n_hours - 1 if hours is None else min(hours, data.n_hours - 1)
    state = initial_state(sim.params, sim.soc0)
    total = 0.0
    for t in range(1, n + 1):
        state, rec = run_hour(pol, state, sim, data.fr_signals[t - 1], data.fr_signals[t],
                              data.fr_prices[t], data.energy_prices[t])
        total += rec.reward(cfg.pi_cf, sim.params.E_bar, cfg.soc_penalty_weight)
    return total


def lifetime_profit_score(sim: SimConfig, data: HistoricalDataset, max_hours: int | None = None,
                          P_max: float | None = None):
    """Checkpoint score: profit of a fresh battery run to EOL (or `max_hours`) on `data`.

    Ranking by lifetime profit rather than by a short-horizon return keeps
    checkpoint selection aligned with the quantity compared across policies.
    """
    P_max = sim.mpc.P_max if P_max is None else P_max

    def score(policy: Mlp) -> float:
        m = evaluate_policy(NetPolicy(policy, P_max), data, sim, max_hours=max_hours)
        return m.profit if m.valid else float("-inf")

    return score


LOG_COLUMNS = ["episode", "battery", "hours", "return", "Cf", "critic_loss", "actor_objective", "val_return"]


@dataclass
class RlResult:
    policy: Mlp                  # best checkpoint by validation return
    final_policy: Mlp
    critic: Mlp
    log: list = field(default_factory=list)
    best_val_return: float = float("-inf")
    best_episode: int = -1
    total_hours: int = 0

    def log_frame(self):
        import pandas as pd
        return pd.DataFrame(self.log, columns=LOG_COLUMNS)


def train_rl(policy: Mlp, critic: Mlp, sim: SimConfig, models: PriceModels, pool: HistoricalDataset,
             cfg: DpgConfig, seed, n_batteries: int = 1, max_episodes: int | None = None,
             val_data: HistoricalDataset | None = None, val_hours: int | None = None,
             score_fn=None, val_every: int = 1, progress=None) -> RlResult:
    """Fine-tune `policy`/`critic` by DPG on simulated batteries run to EOL.

    Each episode samples a synthetic week, rolls the noisy policy, stores
    the transitions and performs `updates_per_episode` updates once the
    memory holds a batch. A battery that reaches EOL is replaced with a
    fresh one until `n_batteries` lifetimes have been simulated (or
    `max_episodes` is hit). With a checkpoint score, either `score_fn`
    or the noise-free return on `val_data`, the policy is scored every
    `val_every` episodes and at the end, and the best checkpoint (the
    initial policy included) is returned as ``policy``; otherwise the
    final policy is returned.
    """
    if score_fn is None and val_data is not None:
        def score_fn(net):
            return validation_return(net, sim, val_data, cfg, hours=val_hours)
    rng = np.random.default_rng(seed)
    stream = WeekStream(models, pool, rng.integers(0, 2**63 - 1))
    agent = DpgAgent.from_nets(policy, critic, cfg)
    rm = ReplayMemory(cfg.capacity, policy.n_in, policy.n_out)
    res = RlResult(agent.policy.copy(), agent.policy, agent.critic)
    if score_fn is not None:
        res.best_val_return = score_fn(agent.policy)
        res.best_episode = 0
    episode = 0
    for battery in range(n_batteries):
        rs = fresh_rollout(sim, stream)
        eol = False
        while not eol:
            if max_episodes is not None and episode >= max_episodes:
                break
            episode += 1
            trans, recs, rs, eol = run_episode(agent.policy, sim, stream, rs, cfg, rng)
            for t in trans:
                rm.push_transition(t)
            res.total_hours += len(trans)
            losses, objs = [], []
            if len(rm) >= cfg.batch_size:
                for _ in range(cfg.updates_per_episode):
                    lo, ob = dpg_update(agent, rm.sample(cfg.batch_size, rng), cfg)
                    losses.append(lo)
                    objs.append(ob)
            val = float("nan")
            last = eol and battery == n_batteries - 1 or (max_episodes is not None and episode >= max_episodes)
            if score_fn is not None and (episode % val_every == 0 or last):
                val = score_fn(agent.policy)
                if val > res.best_val_return:
                    res.best_val_return = val
                    res.best_episode = episode
                    res.policy = agent.policy.copy()
            row = [episode, battery, len(trans), float(sum(t.r for t in trans)), float(recs[-1].Cf_end),
                   float(np.mean(losses)) if losses else float("nan"),
                   float(np.mean(objs)) if objs else float("nan"), val]
            res.log.append(row)
            if progress is not None:
                progress(dict(zip(LOG_COLUMNS, row)))
        if max_episodes is not None and episode >= max_episodes:
            break
    if score_fn is None:
        res.policy = agent.policy.copy()
    res.final_policy = agent.policy
    res.critic = agent.critic
    return res
