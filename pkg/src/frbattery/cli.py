"""Command-line pipeline: gen-synth, fit-uq, gen-demos, train-sl, train-rl, evaluate, report.

Every subcommand reads the same YAML config (``--config``), writes its
artifact under ``--workdir`` (default ``paths.workdir`` of the config) and
a ``*.manifest.json`` recording the command, seed, config hash, input and
output digests and library versions. Manifests contain no timestamps, so
repeated runs with the same seed produce identical files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .harness import EvalMetrics, emit_report
from .market import PriceModels, load_dataset, save_dataset
from .neural import Mlp
from .pipeline import (evaluate_all, fit_uq, make_dataset, make_demos, make_policy, scratch_nets,
                       train_rl_stage, train_sl)
from .sl import DemoSet

log = logging.getLogger("frbattery")

DATA_FILES = ("energy_prices.csv", "fr_prices.csv", "fr_signals.csv")


class CliError(RuntimeError):
    """User-facing failure; `module` names the contract that was violated."""

    def __init__(self, message, module="cli"):
        super().__init__(message)
        self.module = module


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> dict:
    return {"frbattery": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "pandas": pd.__version__, "python": platform.python_version()}


def write_manifest(path, command: str, cfg: RunConfig, seed, inputs: dict, outputs: dict, extra=None) -> Path:
    man = {
        "command": command,
        "seed": seed,
        "config_hash": cfg.config_hash(),
        "mode": cfg.mode,
        "config": cfg.hashable(),
        "inputs": {k: {"file": Path(p).name, "sha256": _sha256(p)} for k, p in sorted(inputs.items())},
        "outputs": {k: {"file": Path(p).name, "sha256": _sha256(p)} for k, p in sorted(outputs.items())},
        "versions": _versions(),
    }
    if extra:
        man["info"] = extra
    path = Path(path)
    path.write_text(json.dumps(man, indent=1, sort_keys=True, default=str) + "\n")
    return path


def _require(path, what, module="cli") -> Path:
    path = Path(path)
    if not path.exists():
        raise CliError(f"{what} not found: {path}", module)
    return path


def _seed(args, cfg: RunConfig) -> int:
    seed = args.seed if args.seed is not None else cfg.seed
    if seed is None:
        raise CliError(f"{args.command} requires a seed (--seed or 'seed:' in the config)")
    return int(seed)


def _data_paths(d: Path):
    return [d / f for f in DATA_FILES]


def _load_data(d):
    d = _require(d, "data directory")
    paths = _data_paths(d)
    for p in paths:
        _require(p, "data file", "market-data")
    return load_dataset(*paths)


# -- subcommands -----------------------------------------------------------------

def cmd_gen_synth(args, cfg: RunConfig, wd: Path):
    seed = _seed(args, cfg)
    out = Path(args.out) if args.out else wd / "data"
    data = make_dataset(cfg, seed, args.weeks)
    save_dataset(data, out)
    outs = dict(zip(DATA_FILES, _data_paths(out)))
    write_manifest(out / "manifest.json", "gen-synth", cfg, seed, {}, outs, {"hours": data.n_hours})
    log.info("wrote %d hours of synthetic data to %s", data.n_hours, out)


def cmd_fit_uq(args, cfg: RunConfig, wd: Path):
    d = Path(args.data) if args.data else wd / "data"
    data = _load_data(d)
    models = fit_uq(data, cfg)
    out = Path(args.out) if args.out else wd / "uq.json"
    out.write_text(json.dumps(models.to_dict()))
    write_manifest(out.with_suffix(".manifest.json"), "fit-uq", cfg, None, dict(zip(DATA_FILES, _data_paths(d))),
                   {"uq": out}, {"n_weeks": models.n_weeks_})
    log.info("fitted UQ models on %d weeks -> %s", models.n_weeks_, out)


def _load_uq(args, wd):
    p = _require(Path(args.uq) if args.uq else wd / "uq.json", "UQ model file (run fit-uq)", "market-data")
    return p, PriceModels.from_dict(json.loads(p.read_text()))


def cmd_gen_demos(args, cfg: RunConfig, wd: Path):
    seed = _seed(args, cfg)
    uq_path, models = _load_uq(args, wd)
    d = Path(args.data) if args.data else wd / "data"
    pool = _load_data(d)
    demos = make_demos(models, pool, cfg, seed, args.hours)
    out = Path(args.out) if args.out else wd / "demos.csv"
    demos.save(out)
    write_manifest(out.with_suffix(".manifest.json"), "gen-demos", cfg, seed,
                   {"uq": uq_path, **dict(zip(DATA_FILES, _data_paths(d)))},
                   {"demos": out, "demos_meta": str(out) + ".meta.json"}, demos.metadata)
    log.info("wrote %d transitions to %s", len(demos), out)


def cmd_train_sl(args, cfg: RunConfig, wd: Path):
    seed = _seed(args, cfg)
    dp = _require(Path(args.demos) if args.demos else wd / "demos.csv", "demonstration set (run gen-demos)", "sl")
    demos = DemoSet.load(dp)
    over = {}
    if args.epochs is not None:
        over["policy_epochs"] = args.epochs
    if args.q_epochs is not None:
        over["q_epochs"] = args.q_epochs
    if over:
        cfg = cfg.with_overrides(sl=over)
    if len(demos) < cfg.raw["sl"]["batch_size"]:
        raise CliError(f"demonstration set has {len(demos)} transitions, fewer than the batch size", "sl")
    pol, q = train_sl(demos, cfg, seed)
    pp, cp = wd / "policy_sl.json", wd / "critic_sl.json"
    pol.policy_.save(pp)
    q.critic_.save(cp)
    info = {"holdout_mae": pol.holdout_mae_.tolist(), "holdout_mae_frac": pol.holdout_mae_frac_.tolist(),
            "train_mae": pol.train_mae_.tolist(), "critic_holdout_td_mae": q.holdout_td_mae_,
            "history": pol.history_}
    write_manifest(wd / "sl.manifest.json", "train-sl", cfg, seed, {"demos": dp}, {"policy": pp, "critic": cp}, info)
    log.info("SL holdout MAE (fraction of range): %s", np.round(pol.holdout_mae_frac_, 4).tolist())


def cmd_train_rl(args, cfg: RunConfig, wd: Path):
    seed = _seed(args, cfg)
    uq_path, models = _load_uq(args, wd)
    d = Path(args.data) if args.data else wd / "data"
    pool = _load_data(d)
    inputs = {"uq": uq_path, **dict(zip(DATA_FILES, _data_paths(d)))}
    if args.from_scratch:
        policy, critic = scratch_nets(pool, cfg, seed)
        tag = "rl"
    else:
        pp = _require(Path(args.policy) if args.policy else wd / "policy_sl.json",
                      "SL policy checkpoint (run train-sl or pass --from-scratch)", "rl")
        cp = _require(Path(args.critic) if args.critic else wd / "critic_sl.json",
                      "SL critic checkpoint (run train-sl or pass --from-scratch)", "rl")
        policy, critic = Mlp.load(pp), Mlp.load(cp)
        inputs.update(policy=pp, critic=cp)
        tag = "sl_rl"
    if args.batteries is not None:
        cfg = cfg.with_overrides(rl={"n_batteries": args.batteries})
    if args.max_episodes is not None:
        cfg = cfg.with_overrides(rl={"max_episodes": args.max_episodes})
    val = None
    if args.val_data:
        val = _load_data(args.val_data)
        inputs.update({f"val_{k}": v for k, v in zip(DATA_FILES, _data_paths(Path(args.val_data)))})
    res = train_rl_stage(policy, critic, models, pool, cfg, seed, val_data=val,
                         progress=lambda row: log.info("episode %(episode)d Cf=%(Cf).4f return=%(return).1f", row))
    pout, cout, lout = wd / f"policy_{tag}.json", wd / f"critic_{tag}.json", wd / f"{tag}_log.csv"
    res.policy.save(pout)
    res.critic.save(cout)
    res.log_frame().to_csv(lout, index=False, float_format="%.17g")
    write_manifest(wd / f"{tag}.manifest.json", "train-rl", cfg, seed, inputs,
                   {"policy": pout, "critic": cout, "log": lout},
                   {"best_episode": res.best_episode, "best_score": res.best_val_return, "hours": res.total_hours})
    log.info("RL best checkpoint at episode %d (score %.1f)", res.best_episode, res.best_val_return)


def cmd_evaluate(args, cfg: RunConfig, wd: Path):
    d = Path(args.data) if args.data else wd / "data"
    data = _load_data(d)
    specs = args.policy or ["zero"]
    policies = []
    inputs = dict(zip(DATA_FILES, _data_paths(d)))
    for s in specs:
        try:
            policies.append(make_policy(s, cfg))
        except FileNotFoundError as exc:
            raise CliError(f"policy checkpoint not found: {exc.filename}", "harness") from exc
        if "=" in s:
            inputs[f"policy_{s.split('=', 1)[0]}"] = s.split("=", 1)[1]
    names = [p.name for p in policies]
    if len(set(names)) != len(names):
        raise CliError(f"policy names must be unique, got {names}", "harness")
    metrics = evaluate_all(policies, data, cfg, jobs=args.jobs, max_hours=args.max_hours)
    out = Path(args.out) if args.out else wd / "eval"
    out.mkdir(parents=True, exist_ok=True)
    outs = {}
    for m in metrics:
        p = out / f"metrics_{m.policy}.json"
        m.save(p)
        outs[m.policy] = p
        log.info("%s: lifetime %d h, profit %.2f, valid=%s", m.policy, m.lifetime_hours, m.profit, m.valid)
    write_manifest(out / "manifest.json", "evaluate", cfg, None, inputs, outs)


def cmd_report(args, cfg: RunConfig, wd: Path):
    src = [Path(p) for p in args.metrics] if args.metrics else sorted((wd / "eval").glob("metrics_*.json"))
    if not src:
        raise CliError("no metrics files found (run evaluate)", "harness")
    metrics = [EvalMetrics.load(_require(p, "metrics file", "harness")) for p in src]
    out = Path(args.out) if args.out else wd / "report"
    paths = emit_report(metrics, out)
    write_manifest(out / "manifest.json", "report", cfg, None, {p.name: p for p in src}, paths)
    print(pd.read_csv(paths["summary"]).to_string(index=False))


COMMANDS = {
    "gen-synth": cmd_gen_synth, "fit-uq": cmd_fit_uq, "gen-demos": cmd_gen_demos, "train-sl": cmd_train_sl,
    "train-rl": cmd_train_rl, "evaluate": cmd_evaluate, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="frbattery", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"frbattery {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults apply when omitted)")
    common.add_argument("--workdir", help="artifact directory (overrides paths.workdir)")
    common.add_argument("--mode", choices=["paper", "accelerated"], help="override the config mode")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", parents=[common], help="generate a synthetic market dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--weeks", type=int, help="number of weeks (default synth.n_weeks)")
    p.add_argument("--out", help="output directory (default WORKDIR/data)")

    p = sub.add_parser("fit-uq", parents=[common], help="fit price and signal models to a dataset")
    p.add_argument("--data", help="dataset directory (default WORKDIR/data)")
    p.add_argument("--out", help="model file (default WORKDIR/uq.json)")

    p = sub.add_parser("gen-demos", parents=[common], help="closed-loop LF-MPC demonstrations")
    p.add_argument("--seed", type=int)
    p.add_argument("--hours", type=int, help="hours to simulate (default demos.n_hours)")
    p.add_argument("--uq")
    p.add_argument("--data")
    p.add_argument("--out", help="demonstration CSV (default WORKDIR/demos.csv)")

    p = sub.add_parser("train-sl", parents=[common], help="distill demonstrations into policy and critic")
    p.add_argument("--seed", type=int)
    p.add_argument("--demos")
    p.add_argument("--epochs", type=int, help="policy epochs (default sl.policy_epochs)")
    p.add_argument("--q-epochs", type=int, help="critic epochs (default sl.q_epochs)")

    p = sub.add_parser("train-rl", parents=[common], help="DPG fine-tuning on the simulator")
    p.add_argument("--seed", type=int)
    p.add_argument("--policy", help="initial policy (default WORKDIR/policy_sl.json)")
    p.add_argument("--critic", help="initial critic (default WORKDIR/critic_sl.json)")
    p.add_argument("--from-scratch", action="store_true", help="start from random nets (RL-only baseline)")
    p.add_argument("--uq")
    p.add_argument("--data")
    p.add_argument("--val-data", help="dataset for checkpoint selection (default: synthetic, seeded)")
    p.add_argument("--batteries", type=int, help="battery lifetimes to train on (default rl.n_batteries)")
    p.add_argument("--max-episodes", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="run policies to end of life")
    p.add_argument("--policy", action="append",
                   help="zero | lfmpc | NAME=net.json; repeatable (default zero)")
    p.add_argument("--data")
    p.add_argument("--jobs", type=int, default=1, help="parallel evaluations")
    p.add_argument("--max-hours", type=int)
    p.add_argument("--out", help="metrics directory (default WORKDIR/eval)")

    p = sub.add_parser("report", parents=[common], help="summary, trace and plot files from metrics")
    p.add_argument("--metrics", nargs="*", help="metrics JSON files (default WORKDIR/eval/metrics_*.json)")
    p.add_argument("--out", help="report directory (default WORKDIR/report)")
    return ap


def _error(exc, module, code):
    msg = {"error": type(exc).__name__, "module": module, "message": str(exc)}
    print(json.dumps(msg), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        overrides = {"mode": args.mode} if args.mode else None
        cfg = load_config(args.config, overrides)
        wd = Path(args.workdir) if args.workdir else cfg.workdir
        wd.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, wd)
    except ConfigError as exc:
        return _error(exc, "config", 2)
    except CliError as exc:
        return _error(exc, exc.module, 1)
    except Exception as exc:  # surface the failing module's contract instead of a traceback
        mod = type(exc).__module__.split(".")
        module = mod[1] if len(mod) > 1 and mod[0] == "frbattery" else "unknown"
        tb = exc.__traceback__
        while tb is not None:
            name = tb.tb_frame.f_globals.get("__name__", "")
            if name.startswith("frbattery.") and name != "frbattery.cli":
                module = name.split(".")[1]
            tb = tb.tb_next
        return _error(exc, module, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
