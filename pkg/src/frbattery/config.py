"""Run configuration: one YAML file, two operating modes, a stable hash.

The `paper` mode keeps the published hyperparameters at their stated values.
The `accelerated` mode scales SEI kinetics so a battery reaches end of life
within a few hundred simulated hours and retunes the few settings that
depend on that time scale (fade price, exploration noise). Any key given
in the file overrides the mode preset.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .cell import CellParams, load_cell_params
from .harness import SimConfig
from .market import SynthProfile
from .mpc import MpcConfig
from .rl import DpgConfig

MODES = ("paper", "accelerated")

PRESETS = {
    "paper": {
        "cell": {"aging_multiplier": 1.0},
        "sim": {"pi_cf": 12000.0},
        "dpg": {"pi_cf": 12000.0},
    },
    "accelerated": {
        "cell": {"aging_multiplier": 10.0},
        "sim": {"pi_cf": 5.0e5},
        "dpg": {"pi_cf": 5.0e5, "noise_variance": 0.25},
    },
}

DEFAULTS = {
    "mode": "accelerated",
    "seed": None,
    "cell": {"params": None, "aging_multiplier": 10.0},
    "mpc": {},
    "sim": {"eol_threshold": 0.2, "soc0": 0.5, "guard": [0.02, 0.98], "pi_cf": 5.0e5, "soc_weight": 5.0},
    "dpg": {},
    "uq": {"min_weeks": 8},
    "synth": {"n_weeks": 8},
    "demos": {"n_hours": 500},
    "sl": {"policy_epochs": 5000, "q_epochs": 2000, "batch_size": 160, "lr": 1e-3, "holdout": 0.1},
    "rl": {"n_batteries": 10, "max_episodes": None, "val_every": 3, "val_hours": 1500, "val_weeks": 8},
    "evaluate": {"max_hours": 5000},
    "paths": {"workdir": "run"},
}

SECTIONS = tuple(k for k in DEFAULTS if isinstance(DEFAULTS[k], dict))


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict, where="") -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if k not in out:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(out[k], dict) and k not in ("mpc", "dpg"):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where}{k!r} must be a mapping")
            out[k] = _merge(out[k], v, f"{where}{k}.")
        elif isinstance(out[k], dict):
            out[k] = {**out[k], **(v or {})}
        else:
            out[k] = v
    return out


def _deep_update(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _deep_update(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


@dataclass
class RunConfig:
    """Resolved configuration; construct with :func:`load_config` or :meth:`from_dict`."""

    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, d: dict | None = None, base_dir=None) -> "RunConfig":
        d = d or {}
        mode = d.get("mode", DEFAULTS["mode"])
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        resolved = _deep_update(DEFAULTS, PRESETS[mode])
        resolved = _merge(resolved, d)
        cfg = cls(resolved, Path(base_dir) if base_dir is not None else Path.cwd())
        cfg.validate()
        return cfg

    # -- sections -------------------------------------------------------
    @property
    def mode(self) -> str:
        return self.raw["mode"]

    @property
    def seed(self):
        return self.raw["seed"]

    def cell_params(self) -> CellParams:
        c = self.raw["cell"]
        path = c["params"]
        if path is not None:
            path = self.resolve(path)
        return load_cell_params(path).with_aging(c["aging_multiplier"])

    def mpc_config(self) -> MpcConfig:
        return MpcConfig(**self.raw["mpc"])

    def sim_config(self) -> SimConfig:
        s = dict(self.raw["sim"])
        s["guard"] = tuple(s["guard"])
        return SimConfig(params=self.cell_params(), mpc=self.mpc_config(), **s)

    def dpg_config(self) -> DpgConfig:
        d = dict(self.raw["dpg"])
        d.setdefault("eol_threshold", self.raw["sim"]["eol_threshold"])
        d.setdefault("soc_penalty_weight", self.raw["sim"]["soc_weight"])
        return DpgConfig(**d)

    def synth_profile(self, **over) -> SynthProfile:
        return SynthProfile(**{**self.raw["synth"], **over})

    def section(self, name: str) -> dict:
        return copy.deepcopy(self.raw[name])

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def workdir(self) -> Path:
        return self.resolve(self.raw["paths"]["workdir"])

    def validate(self) -> None:
        """Build every owned object once so module invariants fire at load time."""
        if self.raw["cell"]["params"] is not None and not self.resolve(self.raw["cell"]["params"]).exists():
            raise ConfigError(f"cell parameter file not found: {self.raw['cell']['params']}")
        try:
            self.sim_config()
            self.dpg_config()
            self.synth_profile()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.raw["demos"]["n_hours"] < 1:
            raise ConfigError("demos.n_hours must be >= 1")
        if self.raw["rl"]["n_batteries"] < 1:
            raise ConfigError("rl.n_batteries must be >= 1")
        if self.raw["uq"]["min_weeks"] < 2:
            raise ConfigError("uq.min_weeks must be >= 2")

    # -- identity -------------------------------------------------------
    def hashable(self) -> dict:
        """Everything that influences results; paths are excluded."""
        d = copy.deepcopy(self.raw)
        d.pop("paths", None)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.hashable(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)

    def with_overrides(self, **sections) -> "RunConfig":
        return RunConfig.from_dict(_deep_update(self.raw, sections), self.base_dir)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML config (or defaults when `path` is None) and apply `overrides`."""
    d = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        d = yaml.safe_load(path.read_text()) or {}
        if not isinstance(d, dict):
            raise ConfigError("config file must contain a mapping")
        base = path.parent
    if overrides:
        d = _deep_update(d, overrides)
    return RunConfig.from_dict(d, base)


def dataclass_dict(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
