"""Demonstrations from the LF-MPC and their distillation into policy and critic nets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .cell import initial_state
from .harness import FrPolicy, LfMpcPolicy, SimConfig, decide, repair_commitment, run_hour
from .market import HistoricalDataset, PriceModels
from .neural import AdamState, adam_step, critic_net, mae_policy_grad, mae_policy_loss, policy_net, td_mae_grad

N_FEATURES = 6
N_ACTIONS = 2


@dataclass
class Transition:
    x: np.ndarray
    a: np.ndarray
    r: float
    x_next: np.ndarray
    a_next: np.ndarray | None = None
    terminal: bool = False
    episode: int = 0
    x_realized: np.ndarray | None = None
    a_exec: np.ndarray | None = None


_XCOLS = [f"x{i}" for i in range(N_FEATURES)]
_XNCOLS = [f"xn{i}" for i in range(N_FEATURES)]
_XRCOLS = [f"xr{i}" for i in range(N_FEATURES)]


@dataclass
class DemoSet:
    transitions: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.transitions)

    def __getitem__(self, i):
        return self.transitions[i]

    def arrays(self):
        """(X, A, R, X_next, A_next, terminal) as stacked arrays."""
        T = self.transitions
        X = np.array([t.x for t in T]).reshape(-1, N_FEATURES)
        A = np.array([t.a for t in T]).reshape(-1, N_ACTIONS)
        R = np.array([t.r for t in T], dtype=float)
        Xn = np.array([t.x_next for t in T]).reshape(-1, N_FEATURES)
        An = np.array([np.zeros(N_ACTIONS) if t.a_next is None else t.a_next for t in T]).reshape(-1, N_ACTIONS)
        term = np.array([t.terminal for t in T], dtype=bool)
        return X, A, R, Xn, An, term

    def to_frame(self) -> pd.DataFrame:
        X, A, R, Xn, An, term = self.arrays()
        cols = {"episode": [t.episode for t in self.transitions]}
        for i, c in enumerate(_XCOLS):
            cols[c] = X[:, i]
        cols["a_F"], cols["a_d"] = A[:, 0], A[:, 1]
        cols["r"] = R
        for i, c in enumerate(_XNCOLS):
            cols[c] = Xn[:, i]
        cols["an_F"], cols["an_d"] = An[:, 0], An[:, 1]
        cols["terminal"] = term.astype(int)
        XR = np.array([np.full(N_FEATURES, np.nan) if t.x_realized is None else t.x_realized
                       for t in self.transitions]).reshape(-1, N_FEATURES)
        for i, c in enumerate(_XRCOLS):
            cols[c] = XR[:, i]
        return pd.DataFrame(cols)

    def save(self, path) -> None:
        """CSV of transitions plus a JSON sidecar (``<path>.meta.json``) with metadata."""
        path = Path(path)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        Path(str(path) + ".meta.json").write_text(json.dumps(self.metadata, sort_keys=True, indent=1))

    @classmethod
    def load(cls, path) -> "DemoSet":
        path = Path(path)
        df = pd.read_csv(path, float_precision="round_trip")
        meta_path = Path(str(path) + ".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        T = []
        for row in df.itertuples(index=False):
            d = row._asdict()
            xr = np.array([d[c] for c in _XRCOLS], dtype=float)
            T.append(Transition(
                x=np.array([d[c] for c in _XCOLS], dtype=float), a=np.array([d["a_F"], d["a_d"]], dtype=float),
                r=float(d["r"]), x_next=np.array([d[c] for c in _XNCOLS], dtype=float),
                a_next=np.array([d["an_F"], d["an_d"]], dtype=float), terminal=bool(d["terminal"]),
                episode=int(d["episode"]), x_realized=None if np.isnan(xr).all() else xr,
            ))
        return cls(T, meta)


class WeekStream:
    """Endless hourly stream of synthetic signals drawn week by week from the UQ models."""

    def __init__(self, models: PriceModels, pool: HistoricalDataset, rng):
        self.models = models
        self.pool = pool
        self.rng = np.random.default_rng(rng)
        self._buf = []

    def _refill(self):
        seed = int(self.rng.integers(0, 2**63 - 1))
        pe, pf, al = self.models.sample_week(self.pool, seed)
        self._buf.extend(zip(al, pf, pe))

    def next(self):
        """(alpha[S], pi_f, pi_e) for the next hour."""
        if not self._buf:
            self._refill()
        return self._buf.pop(0)

    def peek(self):
        """The hour :meth:`next` will return, without consuming it."""
        if not self._buf:
            self._refill()
        return self._buf[0]


def _lookahead(policy, state, sim, alpha_hat, pi_f, pi_e):
    x, prop = decide(policy, state, sim, alpha_hat, pi_f, pi_e)
    rep = repair_commitment(prop, state, sim.params, alpha_hat, sim.mpc)
    return x, rep.commitment.action


def generate_demonstrations(n_hours: int, seed, sim: SimConfig, models: PriceModels, pool: HistoricalDataset,
                            policy: FrPolicy | None = None, restart_on_eol: bool = True,
                            metadata: dict | None = None) -> DemoSet:
    """Closed-loop LF-MPC demonstrations on the single-particle simulator.

    Every hour a synthetic signal is drawn, the LF-MPC commitment (after
    repair) is executed, and the transition is recorded with reward
    pi_f F - pi_e O - pi_cf dCf. At EOL the transition is marked terminal
    and, with `restart_on_eol`, a fresh battery starts a new episode.
    The action for the state after the final hour is computed, not executed.
    """
    if n_hours < 1:
        raise ValueError("n_hours must be >= 1")
    policy = policy or LfMpcPolicy(sim.mpc)
    stream = WeekStream(models, pool, seed)
    alpha_prev, _, _ = stream.next()
    alpha, pi_f, pi_e = stream.next()
    state = initial_state(sim.params, sim.soc0)
    recs = []
    episode = 0
    hours = 0
    while hours < n_hours:
        state, rec = run_hour(policy, state, sim, alpha_prev, alpha, pi_f, pi_e)
        hours += 1
        alpha_prev = alpha
        alpha, pi_f, pi_e = stream.next()
        terminal = rec.Cf_end >= sim.eol_threshold
        recs.append((rec, episode, terminal))
        if terminal:
            x_next, a_next = _lookahead(policy, state, sim, alpha_prev, pi_f, pi_e)
            recs[-1] = (rec, episode, terminal, x_next, a_next)
            if not restart_on_eol:
                break
            state = initial_state(sim.params, sim.soc0)
            episode += 1
    if len(recs[-1]) == 3:
        x_next, a_next = _lookahead(policy, state, sim, alpha_prev, pi_f, pi_e)
        recs[-1] = recs[-1] + (x_next, a_next)
    T = []
    for i, item in enumerate(recs):
        rec, ep, term = item[:3]
        if len(item) == 5:
            x_next, a_next = item[3], item[4]
        else:
            x_next, a_next = recs[i + 1][0].x, recs[i + 1][0].action
        T.append(Transition(rec.x, rec.action, rec.fade_reward(sim.pi_cf), x_next, a_next, term, ep, rec.x_realized))
    meta = {"seed": seed if isinstance(seed, (int, str)) else repr(seed), "hours": hours,
            "episodes": episode + (0 if recs[-1][2] and restart_on_eol else 1)}
    meta.update(metadata or {})
    return DemoSet(T, meta)


# -- distillation ---------------------------------------------------------------

def _split(n, holdout, rng):
    perm = rng.permutation(n)
    n_hold = int(round(holdout * n))
    if n - n_hold < 1:
        raise ValueError("not enough samples for a training split")
    return perm[n_hold:], perm[:n_hold]


def _batches(idx, batch_size, rng):
    perm = rng.permutation(idx)
    for k in range(0, perm.size, batch_size):
        yield perm[k:k + batch_size]


class PolicyDistiller(BaseEstimator):
    """Supervised fit of the 6-30-15-2 policy to demonstrated actions (MAE loss).

    After :meth:`fit`, ``policy_`` is the trained net, ``holdout_mae_`` the
    per-action mean absolute holdout error and ``holdout_mae_frac_`` that
    error divided by each action's range. ``history_`` holds holdout MAE
    at evenly spaced checkpoints. The step size decays as
    ``lr / (1 + lr_decay * epoch / epochs)``; with a few hundred rows a
    constant rate keeps late checkpoints wandering by several percent.
    """

    def __init__(self, P_max=10.0, epochs=5000, batch_size=160, lr=1e-3, lr_decay=9.0, holdout=0.1,
                 n_checkpoints=10, keep_best=True, random_state=0):
        self.P_max = P_max
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.holdout = holdout
        self.n_checkpoints = n_checkpoints
        self.keep_best = keep_best
        self.random_state = random_state

    def _mae(self, net, X, A):
        if X.shape[0] == 0:
            return np.full(N_ACTIONS, np.nan)
        return np.mean(np.abs(net.forward(X) - A), axis=0)

    def fit(self, X, A):
        X = check_array(X, dtype=float)
        A = check_array(A, dtype=float)
        if X.shape[1] != N_FEATURES or A.shape != (X.shape[0], N_ACTIONS):
            raise ValueError("expected X of shape (n, 6) and A of shape (n, 2)")
        rng = np.random.default_rng(self.random_state)
        tr, ho = _split(X.shape[0], self.holdout, rng)
        if tr.size < min(self.batch_size, X.shape[0]) and self.epochs > 0:
            raise ValueError("training split smaller than one batch")
        net = policy_net(self.P_max, rng)
        net.set_input_scaler(X[tr])
        self.initial_policy_ = net.copy()
        opt = AdamState.for_net(net, lr=self.lr)
        ranges = np.array([self.P_max, 2 * self.P_max])
        checkpoints = set(np.linspace(0, self.epochs, self.n_checkpoints + 1).astype(int)[1:]) if self.epochs else set()
        history = []
        best = (np.inf, net.copy())
        for ep in range(1, self.epochs + 1):
            opt.lr = self.lr / (1.0 + self.lr_decay * ep / self.epochs)
            for b in _batches(tr, self.batch_size, rng):
                _, g = mae_policy_grad(net, X[b], A[b])
                adam_step(net, opt, g)
            if ep in checkpoints:
                h = self._mae(net, X[ho], A[ho]) if ho.size else self._mae(net, X[tr], A[tr])
                score = float(np.mean(h / ranges))
                history.append((ep, *h.tolist()))
                if score < best[0]:
                    best = (score, net.copy())
        if self.keep_best and history:
            net = best[1]
        self.policy_ = net
        self.history_ = history
        self.train_mae_ = self._mae(net, X[tr], A[tr])
        self.holdout_mae_ = self._mae(net, X[ho], A[ho])
        self.holdout_mae_frac_ = self.holdout_mae_ / ranges
        return self

    def predict(self, X):
        check_is_fitted(self, "policy_")
        return self.policy_.forward(check_array(X, dtype=float))

    def score(self, X, A):
        """Negative range-normalized MAE (higher is better)."""
        A = check_array(A, dtype=float)
        return -float(mae_policy_loss(self.policy_, check_array(X, dtype=float), A)[0])


class QDistiller(BaseEstimator):
    """Critic fit on demonstrations: MAE to detached targets r + gamma Q(x', a')."""

    def __init__(self, gamma=0.9, epochs=2000, batch_size=160, lr=1e-3, holdout=0.1, random_state=0):
        self.gamma = gamma
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.holdout = holdout
        self.random_state = random_state

    def fit(self, X, A, R, X_next, A_next, terminal=None):
        X = check_array(X, dtype=float)
        A = check_array(A, dtype=float)
        X_next = check_array(X_next, dtype=float)
        A_next = check_array(A_next, dtype=float)
        R = np.asarray(R, dtype=float).ravel()
        n = X.shape[0]
        term = np.zeros(n, dtype=bool) if terminal is None else np.asarray(terminal, dtype=bool).ravel()
        if not (A.shape[0] == R.size == X_next.shape[0] == A_next.shape[0] == term.size == n):
            raise ValueError("transition arrays disagree in length")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError("gamma must lie in [0, 1)")
        rng = np.random.default_rng(self.random_state)
        tr, ho = _split(n, self.holdout, rng)
        XA = np.hstack([X, A])
        XAn = np.hstack([X_next, A_next])
        net = critic_net(rng)
        net.set_input_scaler(XA[tr])
        # output units from the discounted return of a constant mean reward,
        # with episodes ending geometrically at the observed terminal rate
        horizon = 1.0 / (1.0 - self.gamma * (1.0 - term[tr].mean()))
        r_mean = R[tr].mean()
        net.out_shift[:] = r_mean * horizon
        net.out_scale[:] = max(R[tr].std(), abs(r_mean), 1e-6) * horizon
        self.initial_critic_ = net.copy()
        opt = AdamState.for_net(net, lr=self.lr)
        boot = self.gamma * (~term)
        for _ in range(self.epochs):
            for b in _batches(tr, self.batch_size, rng):
                y = R[b] + boot[b] * net.forward(XAn[b]).ravel()
                _, g = td_mae_grad(net, XA[b], y)
                adam_step(net, opt, g)
        self.critic_ = net

        def td(idx):
            if idx.size == 0:
                return float("nan")
            y = R[idx] + boot[idx] * net.forward(XAn[idx]).ravel()
            return float(np.mean(np.abs(net.forward(XA[idx]).ravel() - y)))

        self.train_td_mae_ = td(tr)
        self.holdout_td_mae_ = td(ho)
        return self

    def predict(self, XA):
        check_is_fitted(self, "critic_")
        return self.critic_.forward(check_array(XA, dtype=float)).ravel()


def train_policy_sl(d: DemoSet, epochs: int = 5000, P_max: float = 10.0, random_state=0, **kw) -> PolicyDistiller:
    X, A = d.arrays()[:2]
    return PolicyDistiller(P_max=P_max, epochs=epochs, random_state=random_state, **kw).fit(X, A)


def train_q_sl(d: DemoSet, epochs: int = 2000, gamma: float = 0.9, random_state=0, **kw) -> QDistiller:
    X, A, R, Xn, An, term = d.arrays()
    return QDistiller(gamma=gamma, epochs=epochs, random_state=random_state, **kw).fit(X, A, R, Xn, An, term)
