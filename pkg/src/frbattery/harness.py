"""Closed-loop operation of FR policies on the single-particle simulator.

Each executed hour runs the same sequence, shared by demonstration
generation, RL rollouts and evaluation:

1. build the decision features from the forecast (persistence: the FR signal
   forecast for the coming hour is the signal realized in the previous
   hour; prices of the committed hour are known),
2. ask the policy for a commitment,
3. repair it until a simulation of the forecast hour stays inside the SOC
   band and the rate limits,
4. inject it with the realized signal and integrate the simulator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .cell import CellParams, InfeasibleHour, SpState, initial_state, simulate_hour, soc
from .lp import LpProblem, LpStatus, solve_lp
from .market import HistoricalDataset
from .mpc import Commitment, HourForecast, MpcConfig, MpcInfeasible, lf_mpc_policy
from .rewards import market_profit, stage_reward

STEER_O_WEIGHT = 1e-3


class SimulatorFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    """Simulator-side settings of the closed loop."""

    params: CellParams
    mpc: MpcConfig = field(default_factory=MpcConfig)
    eol_threshold: float = 0.2
    soc0: float = 0.5
    guard: tuple[float, float] = (0.02, 0.98)
    pi_cf: float = 12000.0
    soc_weight: float = 5.0

    def __post_init__(self):
        if not (0 < self.eol_threshold < 1):
            raise ValueError("eol_threshold must lie in (0, 1)")
        if not (0 <= self.guard[0] < self.guard[1] <= 1):
            raise ValueError("guard must satisfy 0 <= lo < hi <= 1")
        if abs(self.mpc.E_bar - self.params.E_bar) > 1e-12:
            raise ValueError("MpcConfig.E_bar and CellParams.E_bar disagree")


def features(alpha_hat, pi_f, pi_e, E, Cf) -> np.ndarray:
    """x = [mean(alpha), var(alpha), pi_f, pi_e, E, Cf]."""
    a = np.asarray(alpha_hat, dtype=float).ravel()
    return np.array([a.mean(), a.var(), float(pi_f), float(pi_e), float(E), float(Cf)])


# -- repair scheme ---------------------------------------------------------


def commitment_check(c: Commitment, state: SpState, params: CellParams, alpha, cfg: MpcConfig):
    """Simulate `c` against forecast signal `alpha` from `state`.

    Feasible means: the hour integrates without solver failure, every
    step's energy stays in the fade-adjusted band, and |P| <= P_max.
    Returns (feasible, reason).
    """
    alpha = np.asarray(alpha, dtype=float)
    P = alpha * c.F + c.O - c.L
    if np.any(P > cfg.P_max + 1e-12) or np.any(P < cfg.P_min - 1e-12):
        return False, "rate"
    try:
        _, tr = simulate_hour(state, params, c, alpha)
    except InfeasibleHour:
        return False, "solver"
    lo, hi = cfg.band(state.Cf)
    if np.any(tr.E < lo - 1e-12) or np.any(tr.E > hi + 1e-12):
        return False, "band"
    return True, "ok"


def steer_lp(F: float, E0: float, Cf: float, alpha, cfg: MpcConfig, relax_band: bool = False):
    """One-hour LP choosing O, L for a fixed F.

    Variables z = [O, L, u+, u-]. With A_s the cumulative signal after step
    s, the low-fidelity energy is E_s = E0 + (F*A_s + s*d)/S for d = O - L,
    so the band and rate limits reduce to two bounds on d. The end-of-hour
    energy is steered to 0.5*(1 - Cf)*E_bar through the deviation pair
    u+/u-; purchases carry a small weight and L the MPC tie-break weight.
    Returns (O, L) or None when the band cannot be met.
    """
    alpha = np.asarray(alpha, dtype=float)
    S = alpha.size
    A = np.cumsum(alpha)
    s = np.arange(1, S + 1)
    EF = E0 + F * A / S
    d_hi = cfg.P_max - F * alpha.max()
    d_lo = cfg.P_min - F * alpha.min()
    if not relax_band:
        lo, hi = cfg.band(Cf)
        if not (lo - 1e-12 <= E0 <= hi + 1e-12):
            return None
        d_hi = min(d_hi, float(np.min(S * (hi - EF) / s)))
        d_lo = max(d_lo, float(np.max(S * (lo - EF) / s)))
    d_hi = min(d_hi, cfg.P_max)
    d_lo = max(d_lo, -cfg.P_max)
    if d_lo > d_hi:
        return None
    target = cfg.terminal_target(Cf)
    p = LpProblem(
        c=np.array([-STEER_O_WEIGHT, -cfg.rho, -1.0, -1.0]),
        A_eq=np.array([[1.0, -1.0, -1.0, 1.0]]),
        b_eq=np.array([target - EF[-1]]),
        A_ub=np.array([[1.0, -1.0, 0.0, 0.0], [-1.0, 1.0, 0.0, 0.0]]),
        b_ub=np.array([d_hi, -d_lo]),
        lb=np.zeros(4),
        ub=np.array([cfg.P_max, cfg.P_max, np.inf, np.inf]),
    )
    sol = solve_lp(p)
    if sol.status != LpStatus.OPTIMAL:
        return None
    z = sol.z_star
    d = float(z[0] - z[1])
    return max(d, 0.0), max(-d, 0.0)


@dataclass
class RepairResult:
    commitment: Commitment
    checks: int
    changed: bool
    relaxed: bool = False
    reasons: list = field(default_factory=list)


def repair_commitment(c: Commitment, state: SpState, params: CellParams, alpha_fc,
                      cfg: MpcConfig) -> RepairResult:
    """Lower F by dF until a forecast-hour simulation is feasible.

    After each decrement, O and L are recomputed by :func:`steer_lp`. At
    F = 0 the result is accepted even if it breaches the band (`relaxed`).
    At most ceil(F/dF) + 1 feasibility checks are made.
    """
    ok, why = commitment_check(c, state, params, alpha_fc, cfg)
    if ok:
        return RepairResult(c, 1, False)
    reasons = [why]
    E0 = soc(state, params)
    F = c.F
    checks = 1
    while True:
        F = max(F - cfg.dF, 0.0)
        if F < 1e-12:
            F = 0.0
        ol = steer_lp(F, E0, state.Cf, alpha_fc, cfg)
        if ol is None:
            if F > 0.0:
                reasons.append("lp")
                continue
            ol = steer_lp(0.0, E0, state.Cf, alpha_fc, cfg, relax_band=True)
            cand = Commitment(0.0, *ol)
            return RepairResult(cand, checks, True, True, reasons + ["relaxed"])
        cand = Commitment(F, *ol)
        checks += 1
        ok, why = commitment_check(cand, state, params, alpha_fc, cfg)
        if ok:
            return RepairResult(cand, checks, True, False, reasons)
        reasons.append(why)
        if F == 0.0:
            return RepairResult(cand, checks, True, True, reasons + ["relaxed"])


# -- policies ----------------------------------------------------------------

class FrPolicy:
    name = "policy"

    def act(self, x, E, Cf, fc: HourForecast) -> Commitment:
        raise NotImplementedError


class ZeroPolicy(FrPolicy):
    name = "zero"

    def act(self, x, E, Cf, fc):
        return Commitment(0.0, 0.0, 0.0)


class LfMpcPolicy(FrPolicy):
    """LF-MPC; on an infeasible LP it commits F = 0 and steers toward the terminal target."""

    name = "lfmpc"

    def __init__(self, cfg: MpcConfig):
        self.cfg = cfg
        self.n_fallbacks = 0

    def act(self, x, E, Cf, fc):
        try:
            return lf_mpc_policy(E, Cf, fc, self.cfg)
        except MpcInfeasible:
            self.n_fallbacks += 1
            ol = steer_lp(0.0, E, Cf, fc.alpha_hat[0], self.cfg, relax_band=True)
            return Commitment(0.0, *ol)


class NetPolicy(FrPolicy):
    """Neural policy mapping features to a = [F, O-L]."""

    def __init__(self, net, P_max: float, name: str = "net"):
        self.net = net
        self.P_max = P_max
        self.name = name

    def act(self, x, E, Cf, fc, noise=None):
        a = self.net.forward(x, noise)
        return Commitment.from_action(a[0], a[1], self.P_max)


# -- hourly stepping -----------------------------------------------------------

@dataclass
class HourRecord:
    x: np.ndarray            # decision features (forecast statistics)
    x_realized: np.ndarray   # same layout with the realized signal of the hour
    proposed: Commitment
    commitment: Commitment
    repair: RepairResult
    pi_f: float
    pi_e: float
    E_start: float
    Cf_start: float
    E_end: float
    Cf_end: float
    n_curtailed: int
    n_failed: int

    @property
    def action(self) -> np.ndarray:
        return self.commitment.action

    @property
    def profit(self) -> float:
        return market_profit(self.pi_f, self.commitment.F, self.pi_e, self.commitment.O)

    def reward(self, pi_cf, E_bar, soc_weight=5.0) -> float:
        return stage_reward(self.pi_f, self.commitment.F, self.pi_e, self.commitment.O, self.Cf_start,
                            self.Cf_end, self.E_end, E_bar, pi_cf, soc_weight)

    def fade_reward(self, pi_cf) -> float:
        return self.profit - pi_cf * (self.Cf_end - self.Cf_start)


def decide(policy: FrPolicy, state: SpState, sim: SimConfig, alpha_hat, pi_f, pi_e, **kw):
    E = soc(state, sim.params)
    x = features(alpha_hat, pi_f, pi_e, E, state.Cf)
    fc = HourForecast(np.asarray(alpha_hat, dtype=float)[None, :], [pi_f], [pi_e])
    return x, policy.act(x, E, state.Cf, fc, **kw)


def run_hour(policy: FrPolicy, state: SpState, sim: SimConfig, alpha_hat, alpha, pi_f, pi_e,
             **act_kw) -> tuple[SpState, HourRecord]:
    """Decide, repair and execute one hour; returns the new state and its record."""
    x, proposed = decide(policy, state, sim, alpha_hat, pi_f, pi_e, **act_kw)
    rep = repair_commitment(proposed, state, sim.params, alpha_hat, sim.mpc)
    c = rep.commitment
    try:
        new_state, tr = simulate_hour(state, sim.params, c, alpha, guard=sim.guard, curtail_on_failure=True)
    except InfeasibleHour as exc:
        raise SimulatorFailure(str(exc)) from exc
    rec = HourRecord(
        x=x, x_realized=features(alpha, pi_f, pi_e, x[4], x[5]), proposed=proposed, commitment=c, repair=rep,
        pi_f=float(pi_f), pi_e=float(pi_e), E_start=float(x[4]), Cf_start=float(state.Cf),
        E_end=soc(new_state, sim.params), Cf_end=float(new_state.Cf),
        n_curtailed=tr.n_curtailed, n_failed=int(np.sum(tr.failed)) if tr.failed is not None else 0,
    )
    return new_state, rec


# -- evaluation ----------------------------------------------------------------

TRACE_COLUMNS = ["hour", "F", "O", "L", "pi_f", "pi_e", "E", "Cf", "reward"]
SUMMARY_COLUMNS = ["policy", "lifetime_h", "revenue", "cost", "profit", "cum_fr_band_mw", "purchased_mwh"]


@dataclass
class EvalMetrics:
    policy: str
    lifetime_hours: int
    revenue: float
    cost: float
    profit: float
    cumulative_fr_band: float
    purchased_power: float
    reached_eol: bool
    valid: bool
    trace: pd.DataFrame
    n_repaired: int = 0
    n_relaxed: int = 0
    n_curtailed_steps: int = 0

    def summary_row(self) -> dict:
        return {
            "policy": self.policy, "lifetime_h": self.lifetime_hours, "revenue": self.revenue, "cost": self.cost,
            "profit": self.profit, "cum_fr_band_mw": self.cumulative_fr_band, "purchased_mwh": self.purchased_power,
        }

    _SCALARS = ("policy", "lifetime_hours", "revenue", "cost", "profit", "cumulative_fr_band", "purchased_power",
                "reached_eol", "valid", "n_repaired", "n_relaxed", "n_curtailed_steps")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self._SCALARS}
        d["trace"] = {c: self.trace[c].tolist() for c in TRACE_COLUMNS}
        return d

    @classmethod
    def from_dict(cls, d) -> "EvalMetrics":
        trace = pd.DataFrame({c: d["trace"][c] for c in TRACE_COLUMNS}, columns=TRACE_COLUMNS)
        trace["hour"] = trace["hour"].astype(int)
        return cls(trace=trace, **{k: d[k] for k in cls._SCALARS})

    def save(self, path) -> None:
        """JSON dump; floats round-trip exactly."""
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "EvalMetrics":
        return cls.from_dict(json.loads(Path(path).read_text()))


def evaluate_policy(policy: FrPolicy, data: HistoricalDataset, sim: SimConfig,
                    max_hours: int | None = None, start_hour: int = 0) -> EvalMetrics:
    """Run `policy` from a fresh battery until EOL (or `max_hours`).

    Data hour ``start_hour`` provides the first forecast; executed hours
    follow it and the dataset is reused cyclically when it is shorter than
    the battery's life. Lifetime counts executed hours including the hour
    whose end-of-hour fade first reaches the EOL threshold.
    """
    if data.n_hours < 1:
        raise ValueError("need at least one hour of data")
    if data.S != sim.mpc.S:
        raise ValueError(f"data has {data.S} steps per hour, MpcConfig expects {sim.mpc.S}")
    state = initial_state(sim.params, sim.soc0)
    rows = []
    revenue = cost = band = bought = 0.0
    n_rep = n_rel = n_curt = 0
    valid = True
    eol = False
    t = 0
    limit = math.inf if max_hours is None else int(max_hours)
    H = data.n_hours
    while t < limit:
        prev = (start_hour + t) % H
        cur = (start_hour + t + 1) % H
        try:
            state, rec = run_hour(policy, state, sim, data.fr_signals[prev], data.fr_signals[cur],
                                  data.fr_prices[cur], data.energy_prices[cur])
        except SimulatorFailure:
            valid = False
            break
        t += 1
        c = rec.commitment
        revenue += rec.pi_f * c.F
        cost += rec.pi_e * c.O
        band += c.F
        bought += c.O * 1.0
        n_rep += int(rec.repair.changed)
        n_rel += int(rec.repair.relaxed)
        n_curt += rec.n_curtailed
        rows.append((t, c.F, c.O, c.L, rec.pi_f, rec.pi_e, rec.E_end, rec.Cf_end,
                     rec.reward(sim.pi_cf, sim.params.E_bar, sim.soc_weight)))
        if rec.Cf_end >= sim.eol_threshold:
            eol = True
            break
    trace = pd.DataFrame(rows, columns=TRACE_COLUMNS)
    return EvalMetrics(policy.name, t, revenue, cost, revenue - cost, band, bought, eol, valid, trace,
                       n_rep, n_rel, n_curt)


def emit_report(metrics: list[EvalMetrics], out_dir) -> dict:
    """Summary CSV, per-policy trace CSVs and two-column plot data files."""
    if not metrics:
        raise ValueError("need at least one EvalMetrics")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = pd.DataFrame([m.summary_row() for m in metrics], columns=SUMMARY_COLUMNS)
    paths = {"summary": out / "summary.csv"}
    summary.to_csv(paths["summary"], index=False, float_format="%.17g")
    for m in metrics:
        tp = out / f"trace_{m.policy}.csv"
        m.trace.to_csv(tp, index=False, float_format="%.17g")
        paths[f"trace_{m.policy}"] = tp
        tr = m.trace
        profit = np.cumsum(tr["pi_f"].to_numpy() * tr["F"].to_numpy() - tr["pi_e"].to_numpy() * tr["O"].to_numpy())
        series = {"profit": profit, "cf": tr["Cf"].to_numpy(), "fr_band": tr["F"].to_numpy(),
                  "purchased": tr["O"].to_numpy()}
        for key, y in series.items():
            p = out / f"plot_{key}_{m.policy}.dat"
            np.savetxt(p, np.column_stack([tr["hour"].to_numpy(), y]), fmt="%.17g",
                       header=f"hour {key}", comments="# ")
            paths[f"plot_{key}_{m.policy}"] = p
    return paths
