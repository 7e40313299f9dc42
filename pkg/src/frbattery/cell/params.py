"""Physical parameters of the single-particle cell model."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

F_CONST = 96487.0  # C/mol
R_GAS = 8.314  # J/(mol K)

_POSITIVE_FIELDS = (
    "D_n", "D_p", "R_n", "R_p", "k_n", "k_p", "c_n_max", "c_p_max", "c_e",
    "S_n", "S_p", "R_SEI", "M_sd", "rho_sd", "kappa_sd", "Q_max", "T", "E_bar",
    "cell_count_scale",
)


class OcpCurve:
    """Open-circuit potential tabulated on stoichiometry, linearly interpolated.

    Parameters
    ----------
    theta : array_like
        Strictly increasing stoichiometry grid covering [0, 1].
    U : array_like
        Potential at each grid point (V).
    """

    def __init__(self, theta, U):
        theta = np.ascontiguousarray(theta, dtype=float)
        U = np.ascontiguousarray(U, dtype=float)
        if theta.ndim != 1 or theta.shape != U.shape or theta.size < 2:
            raise ValueError("OCP table needs two equal-length 1-D columns")
        if np.any(np.diff(theta) <= 0):
            raise ValueError("OCP stoichiometry grid must be strictly increasing")
        if theta[0] > 0.0 or theta[-1] < 1.0:
            raise ValueError("OCP table must cover theta in [0, 1]")
        if not np.all(np.isfinite(U)):
            raise ValueError("OCP values must be finite")
        self.theta = theta
        self.U = U

    @classmethod
    def from_file(cls, path) -> "OcpCurve":
        data = np.loadtxt(path, comments="#", ndmin=2)
        return cls(data[:, 0], data[:, 1])

    @classmethod
    def from_function(cls, fn, n: int = 2001) -> "OcpCurve":
        theta = np.linspace(0.0, 1.0, n)
        return cls(theta, fn(theta))

    def __call__(self, theta):
        return np.interp(theta, self.theta, self.U)

    def slope(self, theta):
        i = np.clip(np.searchsorted(self.theta, theta, side="right") - 1, 0, self.theta.size - 2)
        return (self.U[i + 1] - self.U[i]) / (self.theta[i + 1] - self.theta[i])

    def __eq__(self, other):
        if not isinstance(other, OcpCurve):
            return NotImplemented
        return np.array_equal(self.theta, other.theta) and np.array_equal(self.U, other.U)

    def __repr__(self):
        return f"OcpCurve(n={self.theta.size})"


@dataclass(frozen=True)
class CellParams:
    """Constants of the single-particle model with SEI side reaction.

    The Faraday constant and the gas constant are module constants
    (:data:`F_CONST`, :data:`R_GAS`) and are deliberately not fields.
    """

    D_n: float
    D_p: float
    R_n: float
    R_p: float
    k_n: float
    k_p: float
    c_n_max: float
    c_p_max: float
    c_e: float
    S_n: float
    S_p: float
    R_SEI: float
    i0_sd: float
    U_ref: float
    M_sd: float
    rho_sd: float
    kappa_sd: float
    Q_max: float
    T: float
    E_bar: float
    cell_count_scale: float
    U_n_curve: OcpCurve = field(repr=False)
    U_p_curve: OcpCurve = field(repr=False)

    F_const = F_CONST
    R_gas = R_GAS

    def __post_init__(self):
        for name in _POSITIVE_FIELDS:
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"CellParams.{name} must be finite and > 0, got {v!r}")
        if not (np.isfinite(self.i0_sd) and self.i0_sd >= 0):
            raise ValueError("CellParams.i0_sd must be >= 0")
        if not np.isfinite(self.U_ref):
            raise ValueError("CellParams.U_ref must be finite")

    def replace(self, **changes) -> "CellParams":
        return dataclasses.replace(self, **changes)

    def with_aging(self, multiplier: float) -> "CellParams":
        """Copy with the side-reaction exchange current scaled by `multiplier`."""
        return self.replace(i0_sd=self.i0_sd * float(multiplier))

    @property
    def charge_capacity(self) -> float:
        """Lithium capacity of the negative particle, c_n_max*F*S_n*R_n/3 (C)."""
        return self.c_n_max * F_CONST * self.S_n * self.R_n / 3.0

    def ocv(self, theta_n: float) -> float:
        """Open-circuit voltage with matched electrodes (theta_p = 1 - theta_n)."""
        return float(self.U_p_curve(1.0 - theta_n) - self.U_n_curve(theta_n))

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["U_n_curve"] = {"theta": self.U_n_curve.theta.tolist(), "U": self.U_n_curve.U.tolist()}
        d["U_p_curve"] = {"theta": self.U_p_curve.theta.tolist(), "U": self.U_p_curve.U.tolist()}
        return d


def _curve(spec, base: Path | None) -> OcpCurve:
    if isinstance(spec, OcpCurve):
        return spec
    if isinstance(spec, dict):
        return OcpCurve(spec["theta"], spec["U"])
    p = Path(spec)
    if not p.is_absolute():
        if base is not None and (base / p).exists():
            p = base / p
        else:
            p = Path(str(resources.files("frbattery.data").joinpath(str(spec))))
    return OcpCurve.from_file(p)


def params_from_dict(d: dict, base: Path | None = None) -> CellParams:
    d = dict(d)
    unknown = set(d) - {f.name for f in dataclasses.fields(CellParams)}
    if unknown:
        raise ValueError(f"unknown cell parameter keys: {sorted(unknown)}")
    d["U_n_curve"] = _curve(d["U_n_curve"], base)
    d["U_p_curve"] = _curve(d["U_p_curve"], base)
    for k, v in d.items():
        if k not in ("U_n_curve", "U_p_curve"):
            d[k] = float(v)
    return CellParams(**d)


def load_cell_params(path=None, **overrides) -> CellParams:
    """Load cell parameters from a YAML file (default: shipped LFP/graphite set).

    Relative OCP table paths resolve against the YAML file's directory first,
    then against the package data directory.
    """
    if path is None:
        text = resources.files("frbattery.data").joinpath("lfp_graphite.yaml").read_text()
        base = None
    else:
        path = Path(path)
        text = path.read_text()
        base = path.parent
    d = yaml.safe_load(text)
    d.update(overrides)
    return params_from_dict(d, base)


def default_params(**overrides) -> CellParams:
    return load_cell_params(None, **overrides)
