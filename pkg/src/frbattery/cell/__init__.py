from .params import CellParams, OcpCurve, F_CONST, R_GAS, default_params, load_cell_params, params_from_dict
from .model import (
    AlgebraicSolution, CellModelError, HourTrace, InfeasibleHour, NonConvergence, SaturatedSurface,
    SpState, hour_power, initial_state, max_residual, residuals, simulate_hour, simulate_power, soc,
    solve_algebraic, step,
)

__all__ = [
    "CellParams", "OcpCurve", "F_CONST", "R_GAS", "default_params", "load_cell_params", "params_from_dict",
    "AlgebraicSolution", "CellModelError", "HourTrace", "InfeasibleHour", "NonConvergence",
    "SaturatedSurface", "SpState", "hour_power", "initial_state", "max_residual", "residuals",
    "simulate_hour", "simulate_power", "soc", "solve_algebraic", "step",
]
