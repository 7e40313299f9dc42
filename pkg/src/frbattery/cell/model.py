"""Single-particle battery simulator with SEI growth, stepped under commanded power.

Sign convention: positive power and current charge the cell. All functions
that take ``P`` in watts work on the simulated representative cell; the
hourly driver :func:`simulate_hour` takes pack-level commitments in MW and
scales them by ``CellParams.cell_count_scale``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, asdict
from typing import NamedTuple

import numpy as np

from . import _kernels as K
from .params import CellParams, F_CONST, R_GAS

NEWTON_TOL = 1e-9
NEWTON_MAXIT = 50
NEWTON_HALVINGS = 8


class CellModelError(RuntimeError):
    pass


class NonConvergence(CellModelError):
    """Newton failed; the operating point is outside the model's validity."""


class SaturatedSurface(CellModelError):
    """A surface concentration left (0, c_max); the power request is too aggressive."""


class InfeasibleHour(CellModelError):
    def __init__(self, step: int, cause: CellModelError):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.cause = cause


@dataclass(frozen=True)
class SpState:
    c_n_avg: float
    c_p_avg: float
    delta_f: float = 0.0
    Cf: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.c_n_avg, self.c_p_avg, self.delta_f, self.Cf])

    @classmethod
    def from_array(cls, a) -> "SpState":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass(frozen=True)
class AlgebraicSolution:
    I_app: float
    phi_n: float
    phi_p: float
    c_n_s: float
    c_p_s: float
    J_n: float
    J_p: float
    J_sd: float
    i0_n: float
    i0_p: float
    eta_n: float
    eta_p: float
    eta_sd: float
    theta_n: float
    theta_p: float
    R_f: float
    V: float
    P: float
    iterations: int = 0
    residual: float = 0.0


class PackedParams(NamedTuple):
    prm: np.ndarray
    unx: np.ndarray
    uny: np.ndarray
    upx: np.ndarray
    upy: np.ndarray


_PACK_CACHE: dict[int, tuple[CellParams, PackedParams]] = {}


def pack_params(params: CellParams) -> PackedParams:
    key = id(params)
    hit = _PACK_CACHE.get(key)
    if hit is not None and hit[0] is params:
        return hit[1]
    prm = np.empty(K.N_PRM)
    prm[K.D_N] = params.D_n
    prm[K.D_P] = params.D_p
    prm[K.R_N] = params.R_n
    prm[K.R_P] = params.R_p
    prm[K.K_N] = params.k_n
    prm[K.K_P] = params.k_p
    prm[K.CN_MAX] = params.c_n_max
    prm[K.CP_MAX] = params.c_p_max
    prm[K.C_E] = params.c_e
    prm[K.S_N] = params.S_n
    prm[K.S_P] = params.S_p
    prm[K.R_SEI] = params.R_SEI
    prm[K.I0_SD] = params.i0_sd
    prm[K.U_REF] = params.U_ref
    prm[K.M_SD] = params.M_sd
    prm[K.RHO_SD] = params.rho_sd
    prm[K.KAPPA_SD] = params.kappa_sd
    prm[K.Q_MAX] = params.Q_max
    prm[K.TEMP] = params.T
    prm[K.FARADAY] = F_CONST
    prm[K.R_GAS] = R_GAS
    packed = PackedParams(prm, params.U_n_curve.theta, params.U_n_curve.U,
                          params.U_p_curve.theta, params.U_p_curve.U)
    if len(_PACK_CACHE) > 64:
        _PACK_CACHE.clear()
    _PACK_CACHE[key] = (params, packed)
    return packed


def initial_state(params: CellParams, soc_fraction: float = 0.5) -> SpState:
    """Fresh cell at the given stoichiometry; electrodes are capacity-matched."""
    return SpState(soc_fraction * params.c_n_max, (1.0 - soc_fraction) * params.c_p_max, 0.0, 0.0)


def soc(state: SpState, params: CellParams) -> float:
    """State of charge in MWh."""
    return state.c_n_avg / params.c_n_max * params.E_bar


def _solution(x, state, P, pk, iterations, residual) -> AlgebraicSolution:
    out = np.empty(K.N_AUX)
    K.aux(x, state.c_n_avg, state.c_p_avg, state.delta_f, P, pk.prm, pk.unx, pk.uny, pk.upx, pk.upy, out)
    return AlgebraicSolution(*(float(v) for v in out), iterations=int(iterations), residual=float(residual))


def solve_algebraic(state: SpState, params: CellParams, P: float,
                    warm_start: AlgebraicSolution | None = None,
                    tol: float = NEWTON_TOL, maxit: int = NEWTON_MAXIT) -> AlgebraicSolution:
    """Solve the algebraic part of the model at a commanded cell power `P` (W).

    Newton runs on (I_app, phi_n, phi_p). Without a warm start the iteration
    begins at the open-circuit point with I_app = P/OCV, which selects the
    small-current root on the discharge branch.
    """
    pk = pack_params(params)
    x = np.empty(3)
    if warm_start is not None:
        x[:] = (P / warm_start.V, warm_start.phi_n, warm_start.phi_p)
    else:
        K.open_circuit_guess(state.c_n_avg, state.c_p_avg, P, pk.prm, pk.unx, pk.uny, pk.upx, pk.upy, x)
    args = (state.c_n_avg, state.c_p_avg, state.delta_f, float(P), pk.prm, pk.unx, pk.uny, pk.upx, pk.upy,
            tol, maxit, NEWTON_HALVINGS)
    status, its, res = K.newton(x, *args)
    if status != K.OK and warm_start is not None:
        K.open_circuit_guess(state.c_n_avg, state.c_p_avg, P, pk.prm, pk.unx, pk.uny, pk.upx, pk.upy, x)
        status, its2, res = K.newton(x, *args)
        its += its2
    if status == K.SATURATED:
        raise SaturatedSurface(f"surface concentration saturated at P={P:g} W")
    if status != K.OK:
        raise NonConvergence(f"Newton did not converge at P={P:g} W (residual {res:.3g})")
    return _solution(x, state, float(P), pk, its, res)


def step(state: SpState, params: CellParams, P: float, dt: float,
         solution: AlgebraicSolution | None = None) -> SpState:
    """Advance one forward-Euler step of length `dt` seconds at cell power `P`."""
    sol = solution if solution is not None else solve_algebraic(state, params, P)
    F = F_CONST
    return SpState(
        state.c_n_avg - 3.0 * sol.J_n * dt / (params.R_n * F),
        state.c_p_avg - 3.0 * sol.J_p * dt / (params.R_p * F),
        state.delta_f - sol.J_sd * params.M_sd * dt / (params.rho_sd * F),
        state.Cf + abs(sol.J_sd) * params.S_n * dt / params.Q_max,
    )


def residuals(sol: AlgebraicSolution, state: SpState, params: CellParams, P: float) -> dict:
    """Scaled residual of every algebraic equation at a returned solution.

    Each entry is |lhs - rhs| divided by the natural magnitude of that
    equation, so values are relative errors.
    """
    F = F_CONST
    RT = R_GAS * params.T
    s = sol
    out = {}
    for j, cavg, R, D, cmax, k, curve, J, cs, i0, eta, th in (
        ("n", state.c_n_avg, params.R_n, params.D_n, params.c_n_max, params.k_n, params.U_n_curve,
         s.J_n, s.c_n_s, s.i0_n, s.eta_n, s.theta_n),
        ("p", state.c_p_avg, params.R_p, params.D_p, params.c_p_max, params.k_p, params.U_p_curve,
         s.J_p, s.c_p_s, s.i0_p, s.eta_p, s.theta_p),
    ):
        out[f"surface_{j}"] = abs(cs - (cavg - J * R / (5 * D * F))) / cmax
        out[f"butler_volmer_{j}"] = abs(J - 2 * i0 * math.sinh(0.5 * F / RT * eta)) / (abs(J) + i0)
        i0_ref = F * k * math.sqrt((cmax - cs) * cs * params.c_e)
        out[f"exchange_{j}"] = abs(i0 - i0_ref) / i0_ref
        out[f"theta_{j}"] = abs(th - cs / cmax)
    out["eta_p"] = abs(s.eta_p - (s.phi_p - float(params.U_p_curve(s.theta_p)))) / (1.0 + abs(s.phi_p))
    out["eta_n"] = abs(s.eta_n - (s.phi_n - float(params.U_n_curve(s.theta_n)) + s.R_f * s.I_app / params.S_n)) \
        / (1.0 + abs(s.phi_n))
    jsd_ref = -params.i0_sd * math.exp(-F * s.eta_sd / RT)
    out["side_reaction"] = abs(s.J_sd - jsd_ref) / (abs(jsd_ref) + 1e-300) if params.i0_sd > 0 else abs(s.J_sd)
    out["eta_sd"] = abs(s.eta_sd - (s.phi_n - params.U_ref + s.R_f * s.I_app / params.S_n)) / (1.0 + abs(s.phi_n))
    out["film"] = abs(s.R_f - (params.R_SEI + state.delta_f / params.kappa_sd)) / params.R_SEI
    out["voltage"] = abs(s.V - (s.phi_p - s.phi_n)) / abs(s.V)
    out["current_p"] = abs(s.J_p - s.I_app / params.S_p) / (abs(s.J_p) + s.i0_p)
    out["current_n"] = abs(s.J_n + s.J_sd + s.I_app / params.S_n) / (abs(s.J_n) + abs(s.J_sd) + s.i0_n)
    out["power"] = abs(s.I_app * s.V - P) / (abs(P) + abs(s.I_app * s.V) + abs(s.V) * s.i0_n * params.S_n)
    return out


def max_residual(sol, state, params, P) -> float:
    return max(residuals(sol, state, params, P).values())


@dataclass
class HourTrace:
    """Per-step record of one simulated hour (pack-level P and E)."""

    P: np.ndarray        # MW, after any guard curtailment
    I_app: np.ndarray    # A, representative cell
    V: np.ndarray        # V
    E: np.ndarray        # MWh, after the step
    Cf: np.ndarray       # after the step
    curtailed: np.ndarray
    residual: np.ndarray
    newton_iterations: int = 0
    failed: np.ndarray | None = None

    @property
    def n_curtailed(self) -> int:
        return int(self.curtailed.sum())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "P", "I_app", "V", "E", "Cf"])
            for i in range(self.P.size):
                w.writerow([i + 1, repr(float(self.P[i])), repr(float(self.I_app[i])), repr(float(self.V[i])),
                            repr(float(self.E[i])), repr(float(self.Cf[i]))])


def hour_power(commitment, alpha) -> np.ndarray:
    """Per-step pack power P_s = alpha_s F + O - L (MW)."""
    alpha = np.asarray(alpha, dtype=float)
    return alpha * commitment.F + commitment.O - commitment.L


def simulate_power(state: SpState, params: CellParams, P_mw, dt: float | None = None,
                   guard: tuple[float, float] | None = None,
                   curtail_on_failure: bool = False) -> tuple[SpState, HourTrace]:
    """Integrate a sequence of pack power set-points (MW), one per step.

    `guard` = (lo, hi) bounds on the average stoichiometries: a step that
    would charge with theta_n >= hi or theta_p <= 1 - hi, or discharge with
    theta_n <= lo or theta_p >= 1 - lo, is curtailed to zero power.
    With `curtail_on_failure`, a set-point the cell cannot deliver (surface
    saturation or no algebraic solution) is replaced by zero power for that
    step instead of raising :class:`InfeasibleHour`.
    """
    P_mw = np.ascontiguousarray(P_mw, dtype=float)
    S = P_mw.size
    if dt is None:
        dt = 3600.0 / S
    pk = pack_params(params)
    pcell = P_mw * (1e6 / params.cell_count_scale)
    lo, hi = (-np.inf, np.inf) if guard is None else guard
    st = state.as_array()
    out = np.zeros((S, 7))
    status, fail, itmax = K.simulate(st, pcell, float(dt), pk.prm, pk.unx, pk.uny, pk.upx, pk.upy,
                                     float(lo), float(hi), NEWTON_TOL, NEWTON_MAXIT, NEWTON_HALVINGS,
                                     bool(curtail_on_failure), out)
    if status != K.OK:
        cause = SaturatedSurface if status == K.SATURATED else NonConvergence
        raise InfeasibleHour(int(fail), cause(f"solver failure at power {P_mw[fail]:.6g} MW"))
    trace = HourTrace(
        P=out[:, 0] * params.cell_count_scale * 1e-6,
        I_app=out[:, 1].copy(),
        V=out[:, 2].copy(),
        E=out[:, 3] / params.c_n_max * params.E_bar,
        Cf=out[:, 4].copy(),
        curtailed=out[:, 5] > 0,
        failed=out[:, 5] > 1.5,
        residual=out[:, 6].copy(),
        newton_iterations=int(itmax),
    )
    return SpState.from_array(st), trace


def simulate_hour(state: SpState, params: CellParams, c, alpha,
                  guard: tuple[float, float] | None = None,
                  curtail_on_failure: bool = False) -> tuple[SpState, HourTrace]:
    """Apply P_s = alpha_s F + O - L for every step of one hour (dt = 3600/len(alpha))."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim != 1 or alpha.size == 0:
        raise ValueError("alpha must be a non-empty 1-D vector")
    if np.any(np.abs(alpha) > 1.0):
        raise ValueError("FR signal entries must lie in [-1, 1]")
    return simulate_power(state, params, hour_power(c, alpha), 3600.0 / alpha.size, guard,
                          curtail_on_failure)


def solution_dict(sol: AlgebraicSolution) -> dict:
    return asdict(sol)
