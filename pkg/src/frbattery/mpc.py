"""Low-fidelity MPC: an hourly LP over an energy-balance battery model.

Variable layout for horizon N and S steps per hour (NS = N*S)::

    E[0..NS]     energy chain, E[0] fixed to the measured E0         NS + 1
    P[0..NS-1]   net charging power per step                          NS
    F[k], O[k], L[k] for k = 0..N-1                                   3N

so N=1, S=1800 gives 3604 variables. ``E[(k)*S + (s-1)]`` is the energy
at hour k+1, step s of the horizon, and ``E[i+1] = E[i] + P[i]/S``.
Every chain entry carries the fade-adjusted SOC band; the terminal window
sits on the entry for step S of the last horizon hour (index NS-1). All of
these, and the power limits, are variable bounds, so the only rows are the
NS dynamics equalities and the NS coupling equalities
``P = alpha*F + O - L``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .lp import LpProblem, LpSolution, LpStatus, solve_lp

TIE_BREAK_RHO = 1e-6


class MpcInfeasible(RuntimeError):
    """The LF-MPC has no feasible point (SOC outside the recoverable band)."""


@dataclass(frozen=True)
class MpcConfig:
    N: int = 1
    S: int = 1800
    P_max: float = 10.0
    P_min: float | None = None
    lambda_l: float = 0.1
    lambda_u: float = 0.9
    eps_l: float = 0.5
    eps_u: float = 0.5
    E_bar: float = 1.0
    dF: float = 0.5
    rho: float = TIE_BREAK_RHO

    def __post_init__(self):
        if self.P_min is None:
            object.__setattr__(self, "P_min", -float(self.P_max))
        if int(self.N) != self.N or self.N < 1:
            raise ValueError("N must be a positive integer")
        if int(self.S) != self.S or self.S < 1:
            raise ValueError("S must be a positive integer")
        if not (0 < self.lambda_l < self.lambda_u < 1):
            raise ValueError("need 0 < lambda_l < lambda_u < 1")
        if not (0 < self.eps_l <= self.eps_u < 1):
            raise ValueError("need 0 < eps_l <= eps_u < 1")
        if not (self.P_min <= 0 <= self.P_max):
            raise ValueError("need P_min <= 0 <= P_max")
        if self.E_bar <= 0 or self.dF <= 0 or self.rho < 0:
            raise ValueError("E_bar and dF must be > 0 and rho >= 0")

    @property
    def dt_frac(self) -> float:
        return 1.0 / self.S

    @property
    def n_vars(self) -> int:
        return 2 * self.N * self.S + 1 + 3 * self.N

    def band(self, Cf):
        return self.lambda_l * (1 - Cf) * self.E_bar, self.lambda_u * (1 - Cf) * self.E_bar

    def terminal_target(self, Cf):
        return 0.5 * (self.eps_l + self.eps_u) * (1 - Cf) * self.E_bar


@dataclass(frozen=True)
class Commitment:
    F: float
    O: float
    L: float

    def __post_init__(self):
        for k in ("F", "O", "L"):
            v = getattr(self, k)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"Commitment.{k} must be finite and >= 0, got {v!r}")
        if self.O > 0 and self.L > 0:
            raise ValueError("Commitment needs O*L == 0")

    @classmethod
    def from_action(cls, F, d, P_max) -> "Commitment":
        """Project an action a = [F, O-L] onto the admissible commitment set."""
        F = float(np.clip(F, 0.0, P_max))
        d = float(np.clip(d, -P_max, P_max))
        return cls(F, max(d, 0.0), max(-d, 0.0))

    @property
    def d(self) -> float:
        return self.O - self.L

    @property
    def action(self) -> np.ndarray:
        return np.array([self.F, self.O - self.L])


@dataclass
class HourForecast:
    alpha_hat: np.ndarray
    pi_f_hat: np.ndarray
    pi_e_hat: np.ndarray

    def __post_init__(self):
        self.alpha_hat = np.atleast_2d(np.asarray(self.alpha_hat, dtype=float))
        self.pi_f_hat = np.atleast_1d(np.asarray(self.pi_f_hat, dtype=float))
        self.pi_e_hat = np.atleast_1d(np.asarray(self.pi_e_hat, dtype=float))
        if np.any(np.abs(self.alpha_hat) > 1) or not np.all(np.isfinite(self.alpha_hat)):
            raise ValueError("alpha_hat must lie in [-1, 1]")
        if np.any(self.pi_f_hat < 0) or np.any(self.pi_e_hat < 0):
            raise ValueError("price forecasts must be >= 0")

    @property
    def N(self) -> int:
        return self.alpha_hat.shape[0]


@dataclass
class MpcLayout:
    N: int
    S: int

    @property
    def e(self):
        return slice(0, self.N * self.S + 1)

    @property
    def p(self):
        ns = self.N * self.S
        return slice(ns + 1, 2 * ns + 1)

    def f(self, k=0):
        return 2 * self.N * self.S + 1 + 3 * k

    def o(self, k=0):
        return self.f(k) + 1

    def l(self, k=0):
        return self.f(k) + 2

    def unpack(self, z):
        z = np.asarray(z)
        base = 2 * self.N * self.S + 1
        return {
            "E": z[self.e], "P": z[self.p],
            "F": z[base::3][: self.N], "O": z[base + 1::3][: self.N], "L": z[base + 2::3][: self.N],
        }


def _check(fc: HourForecast, cfg: MpcConfig):
    if fc.alpha_hat.shape != (cfg.N, cfg.S):
        raise ValueError(f"alpha_hat shape {fc.alpha_hat.shape} != (N, S) = {(cfg.N, cfg.S)}")
    if fc.pi_f_hat.shape != (cfg.N,) or fc.pi_e_hat.shape != (cfg.N,):
        raise ValueError("price forecasts need one entry per horizon hour")


def build_lf_mpc(E0: float, Cf0: float, fc: HourForecast, cfg: MpcConfig) -> LpProblem:
    """Assemble the LF-MPC LP (maximization) for the current hour."""
    _check(fc, cfg)
    if not (0.0 <= Cf0 < 1.0):
        raise ValueError("Cf0 must lie in [0, 1)")
    cap = (1 - Cf0) * cfg.E_bar
    if not (-1e-12 <= E0 <= cap + 1e-12):
        raise ValueError(f"E0={E0} outside the physical range [0, {cap}]")
    N, S = cfg.N, cfg.S
    ns = N * S
    lay = MpcLayout(N, S)
    n = cfg.n_vars
    c = np.zeros(n)
    lb = np.zeros(n)
    ub = np.zeros(n)
    lo, hi = cfg.band(Cf0)
    lb[lay.e], ub[lay.e] = lo, hi
    lb[0] = ub[0] = E0
    t_lo, t_hi = cfg.eps_l * cap, cfg.eps_u * cap
    lb[ns - 1] = max(lb[ns - 1], t_lo) if ns > 1 else t_lo
    ub[ns - 1] = min(ub[ns - 1], t_hi) if ns > 1 else t_hi
    if ns == 1:
        # the terminal entry coincides with the fixed measured E0
        lb[0], ub[0] = max(E0, t_lo), min(E0, t_hi)
        if lb[0] > ub[0]:
            lb[0], ub[0] = 1.0, 0.0
    lb[lay.p], ub[lay.p] = cfg.P_min, cfg.P_max
    for k in range(N):
        ub[lay.f(k)] = ub[lay.o(k)] = ub[lay.l(k)] = cfg.P_max
        c[lay.f(k)] = fc.pi_f_hat[k]
        c[lay.o(k)] = -fc.pi_e_hat[k]
        c[lay.l(k)] = -cfg.rho

    s_idx = np.arange(ns)
    e0 = 0
    p0 = ns + 1
    hour = s_idx // S
    # dynamics: E[i+1] - E[i] - P[i]/S = 0
    rows_d = np.repeat(s_idx, 3)
    cols_d = np.stack([e0 + s_idx + 1, e0 + s_idx, p0 + s_idx], axis=1).ravel()
    vals_d = np.tile([1.0, -1.0, -1.0 / S], ns)
    # coupling: P[i] - alpha*F - O + L = 0
    fcol = 2 * ns + 1 + 3 * hour
    rows_c = ns + np.repeat(s_idx, 4)
    cols_c = np.stack([p0 + s_idx, fcol, fcol + 1, fcol + 2], axis=1).ravel()
    vals_c = np.stack([np.ones(ns), -fc.alpha_hat.ravel(), -np.ones(ns), np.ones(ns)], axis=1).ravel()
    A = sp.csr_matrix(
        (np.concatenate([vals_d, vals_c]), (np.concatenate([rows_d, rows_c]), np.concatenate([cols_d, cols_c]))),
        shape=(2 * ns, n),
    )
    A.eliminate_zeros()
    names = (
        [f"E_{i}" for i in range(ns + 1)] + [f"P_{i}" for i in range(ns)]
        + [f"{v}_{k}" for k in range(N) for v in ("F", "O", "L")]
    )
    if lb[0] > ub[0]:
        return _infeasible_problem(c, A, lb, ub, names)
    return LpProblem(c=c, A_eq=A, b_eq=np.zeros(2 * ns), lb=lb, ub=ub, names=names)


def _infeasible_problem(c, A, lb, ub, names):
    # keep the LP well-formed; an impossible row reports infeasibility
    lb = lb.copy()
    ub = ub.copy()
    lb[0] = ub[0] = 0.0
    row = sp.csr_matrix(([1.0], ([0], [0])), shape=(1, A.shape[1]))
    return LpProblem(c=c, A_eq=sp.vstack([A, row]), b_eq=np.concatenate([np.zeros(A.shape[0]), [1.0]]),
                     lb=lb, ub=ub, names=names)


def solve_lf_mpc(E0, Cf0, fc: HourForecast, cfg: MpcConfig) -> tuple[LpSolution, MpcLayout]:
    p = build_lf_mpc(E0, Cf0, fc, cfg)
    sol = solve_lp(p)
    return sol, MpcLayout(cfg.N, cfg.S)


def lf_mpc_policy(E0, Cf0, fc: HourForecast, cfg: MpcConfig) -> Commitment:
    """First-hour commitment of the LF-MPC, projected so that O*L = 0."""
    sol, lay = solve_lf_mpc(E0, Cf0, fc, cfg)
    if sol.status != LpStatus.OPTIMAL:
        raise MpcInfeasible(f"LF-MPC returned {sol.status.value} for E0={E0}, Cf0={Cf0}")
    z = sol.z_star
    return Commitment.from_action(z[lay.f(0)], z[lay.o(0)] - z[lay.l(0)], cfg.P_max)


def lf_constraint_residual(z, E0, Cf0, fc: HourForecast, cfg: MpcConfig) -> float:
    """Largest violation of the LF-MPC constraints, evaluated by direct substitution."""
    lay = MpcLayout(cfg.N, cfg.S)
    v = lay.unpack(z)
    E, P = v["E"], v["P"]
    S = cfg.S
    alpha = fc.alpha_hat.ravel()
    hour = np.arange(cfg.N * S) // S
    cap = (1 - Cf0) * cfg.E_bar
    lo, hi = cfg.band(Cf0)
    viol = [
        abs(E[0] - E0),
        np.max(np.abs(E[1:] - E[:-1] - P / S)),
        np.max(np.abs(P - (alpha * v["F"][hour] + v["O"][hour] - v["L"][hour]))),
        np.max(np.maximum(lo - E, 0)), np.max(np.maximum(E - hi, 0)),
        max(cfg.eps_l * cap - E[-2 if E.size > 1 else 0], 0), max(E[-2 if E.size > 1 else 0] - cfg.eps_u * cap, 0),
        np.max(np.maximum(P - cfg.P_max, 0)), np.max(np.maximum(cfg.P_min - P, 0)),
    ]
    for k in ("F", "O", "L"):
        viol.append(np.max(np.maximum(-v[k], 0)))
        viol.append(np.max(np.maximum(v[k] - cfg.P_max, 0)))
    return float(max(viol))


def lf_energy_trajectory(E0: float, P, S: int) -> np.ndarray:
    """Energy chain of the low-fidelity model, ``E[i+1] = E[i] + P[i]/S``, from E0."""
    P = np.asarray(P, dtype=float).ravel()
    return np.concatenate([[E0], E0 + np.cumsum(P) / S])
