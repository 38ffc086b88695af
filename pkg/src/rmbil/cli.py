"""Command-line entry point: ``rmbil <command> --out DIR [options]``.

Commands map onto the pipeline stages: gen-demos, train-dynamics,
train-controller, refine-robust, train-cvae, rollout, evaluate, report.
Every artifact lands in ``--out`` under a fixed name and embeds the
effective configuration. Failures print one JSON line to stderr and exit
non-zero.
"""
from __future__ import annotations

import argparse
import csv
import glob
import io
import json
import os
import sys
from dataclasses import fields, replace

import numpy as np

from . import datastore as store
from .evalkit import (BcPolicy, ExpertPolicy, NdiPolicy, RandomPolicy, RolloutCfg,
                      cvae_references, default_disturbances, evaluate, replay_references,
                      robustness_sweep, rollout, train_bc, write_trace)
from .models import CtrlModel, CvaeModel, DynModel
from .odeint import SolverConfig
from .plants import PLANTS, ExpertConfig, gen_demos, make_plant
from .train import (PhaseOrderError, TrainConfig, model_stats, refine_robust,
                    train_controller, train_cvae, train_dynamics, cvae_converged)

__all__ = ["main", "build_config", "PRESETS", "CliError"]

FILES = {
    "data": "demos.rmbil-data.json",
    "dynamics": "dynamics.rmbil-ckpt",
    "controller": "controller.rmbil-ckpt",
    "robust": "robust.rmbil-ckpt",
    "cvae": "cvae.rmbil-ckpt",
    "bc": "bc.rmbil-ckpt",
    "trace": "trace.csv",
    "rollout": "rollout.rmbil-report.json",
    "evaluate": "evaluate.rmbil-report.json",
    "fig3": "fig3-demos.csv",
    "fig4": "fig4-robustness.csv",
}

MODEL_DEFAULTS = {"hidden_dyn": 64, "hidden_ctrl": 64, "hidden_cvae": 64, "latent": 8,
                  "resolution": 0.1, "structure": "affine", "bc_epochs": 200}

PRESETS = {
    "desk": {"train": {"batch_size": 256, "grad_path": "direct"},
             "solver": {"method": "rk4"},
             "model": {}},
    # published training settings; dopri5 stands in for the adaptive multistep solver
    "paper": {"train": {"batch_size": 2048, "grad_path": "adjoint", "sigma_x": 0.25,
                        "lr_dyn": 0.01, "lr_ctrl": 0.001, "lr_cvae": 0.001},
              "solver": {"method": "dopri5", "atol": 1e-4, "rtol": 1e-4},
              "model": {"hidden_dyn": 800, "hidden_ctrl": 320, "hidden_cvae": 320,
                        "latent": 8}},
}



class CliError(RuntimeError):
    """Bad invocation or missing input artifact."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


# --- configuration ----------------------------------------------------------

def _coerce(value, current):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise CliError(f"expected a boolean, got {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def _defaults():
    out = {"train": TrainConfig().to_dict(), "model": dict(MODEL_DEFAULTS)}
    out["solver"] = {f.name: getattr(SolverConfig(), f.name) for f in fields(SolverConfig)}
    out["solver"]["h"] = None  # None: one step per sample period
    rc = RolloutCfg()
    out["rollout"] = {f.name: getattr(rc, f.name) for f in fields(RolloutCfg)
                      if f.name != "disturbance"}
    return out


def build_config(preset="desk", overrides=(), seed=0):
    """Effective configuration: defaults, then the preset, then ``section.key=value``."""
    if preset not in PRESETS:
        raise CliError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = _defaults()
    for section, values in PRESETS[preset].items():
        cfg[section].update(values)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise CliError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        if section not in cfg or name not in cfg[section]:
            raise CliError(f"unknown config key {key!r}")
        current = cfg[section][name]
        if current is None and section == "solver" and name == "h":
            current = 0.0
        cfg[section][name] = _coerce(value, current)
    cfg["train"]["seed"] = seed
    cfg["rollout"]["seed"] = seed
    cfg["preset"] = preset
    cfg["seed"] = seed
    # validate eagerly so bad values fail before any work
    TrainConfig(**cfg["train"])
    _solver(cfg, 0.05)
    return cfg


def _solver(cfg, dt):
    s = dict(cfg["solver"])
    if s["h"] is None:
        s["h"] = dt
    return SolverConfig(**s)


def _train_cfg(cfg):
    return TrainConfig(**cfg["train"])


# --- helpers ----------------------------------------------------------------

def _path(args, key):
    given = getattr(args, key, None)
    return given if given else os.path.join(args.out, FILES[key])


def _require(path, what, phase_error=False):
    if not os.path.exists(path):
        exc = PhaseOrderError if phase_error else CliError
        raise exc(f"{what} not found at {path}")
    return path


def _load_data(args, cfg):
    path = _require(_path(args, "data"), "dataset")
    ds = store.load_dataset(path)
    if getattr(args, "subset", None):
        ds = ds.subset(args.subset)
    cfg["data"] = {"path": os.path.basename(path), "N": ds.N, "T": ds.T,
                   "plant": ds.plant, "subset": getattr(args, "subset", None)}
    return ds


def _load_model(args, key, kind, what):
    path = _require(_path(args, key), what, phase_error=True)
    model, header = store.load_checkpoint(path, kind=kind)
    if not model.trained:
        raise PhaseOrderError(f"{what} at {path} has not completed training")
    return model, header


def _finish_training(args, cfg, key, model, history, extra=None):
    cfg["result"] = {"epochs": len(history), "final_loss": model.final_loss,
                     "phase": model.phase}
    store.save_checkpoint(_path(args, key), model, config=cfg, seed=cfg["seed"],
                          extra=extra)
    store.write_history(os.path.join(args.out, f"{key}-loss.csv"), history)
    return {"checkpoint": _path(args, key), **cfg["result"]}


# --- commands ---------------------------------------------------------------

def cmd_gen_demos(args, cfg):
    p = make_plant(args.plant)
    expert = ExpertConfig(gain=args.expert_gain)
    ds = gen_demos(p, expert, N=args.n, T=args.t, seed=cfg["seed"])
    cfg["demos"] = {"plant": args.plant, "N": args.n, "T": args.t,
                    "expert": expert.to_dict()}
    store.save_dataset(_path(args, "data"), ds, config=cfg)
    return {"dataset": _path(args, "data"), "expert_rms": ds.expert_rms,
            "regenerated": ds.regenerated}


def cmd_train_dynamics(args, cfg):
    ds = _load_data(args, cfg)
    m = cfg["model"]
    dm = DynModel(ds.n, ds.m, model_stats(ds), hidden=m["hidden_dyn"],
                  structure=m["structure"], seed=cfg["seed"])
    dm, hist = train_dynamics(dm, ds, _train_cfg(cfg), _solver(cfg, ds.dt))
    return _finish_training(args, cfg, "dynamics", dm, hist, {"demos": ds.N})


def cmd_train_controller(args, cfg):
    dm, _ = _load_model(args, "dynamics", "dyn", "dynamics checkpoint")
    ds = _load_data(args, cfg)
    cm = CtrlModel(ds.n, ds.m, model_stats(ds), hidden=cfg["model"]["hidden_ctrl"],
                   seed=cfg["seed"] + 100)
    cm, hist = train_controller(dm, cm, ds, _train_cfg(cfg), _solver(cfg, ds.dt))
    return _finish_training(args, cfg, "controller", cm, hist, {"demos": ds.N})


def cmd_refine_robust(args, cfg):
    dm, _ = _load_model(args, "dynamics", "dyn", "dynamics checkpoint")
    cm, _ = _load_model(args, "controller", "ctrl", "controller checkpoint")
    ds = _load_data(args, cfg)
    cm, hist = refine_robust(dm, cm, ds, _train_cfg(cfg), _solver(cfg, ds.dt))
    return _finish_training(args, cfg, "robust", cm, hist, {"demos": ds.N})


def cmd_train_cvae(args, cfg):
    ds = _load_data(args, cfg)
    m = cfg["model"]
    cv = CvaeModel(ds.n, model_stats(ds), latent=m["latent"], hidden=m["hidden_cvae"],
                   seed=cfg["seed"] + 200, resolution=m["resolution"])
    cv, hist = train_cvae(cv, ds, _train_cfg(cfg))
    out = _finish_training(args, cfg, "cvae", cv, hist,
                           {"demos": ds.N, "converged": cvae_converged(hist)})
    out["converged"] = cvae_converged(hist)
    return out


def _rollout_cfg(cfg, **kw):
    return replace(RolloutCfg(**cfg["rollout"]), **kw)


def _references(args, cfg, p, rc):
    """Test references: fresh expert demos (replay) or CVAE samples from their starts."""
    test = gen_demos(p, N=rc.episodes, T=rc.steps + 1, seed=cfg["seed"] + 1000)
    if rc.source == "replay":
        return replay_references(test, rc.episodes, rc.steps)
    cv, _ = _load_model(args, "cvae", "cvae", "cvae checkpoint")
    return cvae_references(cv, test.states[:, 0], rc.steps, seed=cfg["seed"])


def _disturbance(p, name):
    table = default_disturbances(p)
    if name not in table:
        raise CliError(f"unknown disturbance {name!r} for {p.name}; choose from {sorted(table)}")
    return table[name]


def _scale(args, cfg):
    path = _path(args, "data")
    if os.path.exists(path):
        return store.load_dataset(path).normalization()["state_std"]
    return None


def cmd_rollout(args, cfg):
    p = make_plant(args.plant)
    rc = _rollout_cfg(cfg, disturbance=_disturbance(p, args.disturbance))
    if args.policy == "expert":
        policy = ExpertPolicy(p)
    elif args.policy == "random":
        policy = RandomPolicy(p.m, cfg["seed"])
    else:
        cm, _ = _load_model(args, args.policy, "ctrl", f"{args.policy} checkpoint")
        policy = NdiPolicy(cm, rc.gain, p.dt)
    refs = _references(args, cfg, p, rc)
    scale = _scale(args, cfg)
    trace = rollout(p, policy, refs, rc, scale)
    write_trace(_path(args, "trace"), trace)
    report = evaluate(p, policy, refs, rc, scale,
                      axes={"plant": p.name, "controller": args.policy,
                            "disturbance": args.disturbance})
    cfg["rollout_effective"] = rc.to_dict()
    store.save_report(_path(args, "rollout"), [report], config=cfg)
    return {"trace": _path(args, "trace"), "report": _path(args, "rollout"),
            "score_mean": report.aggregate()["score"]["mean"]}


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_evaluate(args, cfg):
    p = make_plant(args.plant)
    rc = _rollout_cfg(cfg)
    if args.episodes:
        rc = replace(rc, episodes=args.episodes)
    refs = _references(args, cfg, p, rc)
    scale = _scale(args, cfg)
    controllers, demos = {}, {}
    for key in args.controllers.split(","):
        key = key.strip()
        if key not in ("controller", "robust"):
            raise CliError(f"unknown controller {key!r}; use controller and/or robust")
        cm, header = _load_model(args, key, "ctrl", f"{key} checkpoint")
        demos[key] = header.get("extra", {}).get("demos")
        controllers[key] = ((lambda g, c=cm: NdiPolicy(c, g, p.dt)), True)
    if args.with_bc:
        ds = _load_data(args, cfg)
        bc, hist = train_bc(ds, epochs=cfg["model"]["bc_epochs"], seed=cfg["seed"])
        store.save_checkpoint(_path(args, "bc"), bc, config=cfg, seed=cfg["seed"],
                              extra={"demos": ds.N})
        store.write_history(os.path.join(args.out, "bc-loss.csv"), hist)
        demos["bc"] = ds.N
        controllers["bc"] = ((lambda g: BcPolicy(bc)), False)
    dists = {name: _disturbance(p, name) for name in args.disturbances.split(",")}
    reports = robustness_sweep(p, controllers, refs, dists, _floats(args.gains), rc, scale)
    for r in reports:
        r.axes["demos"] = demos.get(r.axes["controller"])
    cfg["evaluate"] = {"gains": _floats(args.gains), "disturbances": sorted(dists),
                       "episodes": rc.episodes,
                       "disturbance_cfgs": {k: v.to_dict() for k, v in dists.items()}}
    store.save_report(_path(args, "evaluate"), reports, config=cfg)
    failed = sum(r.status != "ok" for r in reports)
    return {"report": _path(args, "evaluate"), "cells": len(reports), "failed": failed}


FIG_COLUMNS = ["plant", "controller", "demos", "disturbance", "gain", "episodes",
               "score_mean", "score_std", "score_min", "score_max",
               "rms_median", "rms_mean", "terminated", "status"]


def _rows(reports):
    rows = []
    for r in reports:
        a, agg = r.axes, r.aggregate()
        row = {k: a.get(k) for k in ("plant", "controller", "demos", "disturbance",
                                      "gain", "episodes")}
        if agg:
            row.update(score_mean=agg["score"]["mean"], score_std=agg["score"]["std"],
                       score_min=agg["score"]["min"], score_max=agg["score"]["max"],
                       rms_median=agg["rms"]["median"], rms_mean=agg["rms"]["mean"],
                       terminated=agg["terminated"])
        row["status"] = r.status
        rows.append(row)
    return rows


def _write_rows(path, rows, order):
    rows = sorted(rows, key=lambda r: tuple(str(r.get(k)) for k in order))
    buf = io.StringIO()
    w = csv.DictWriter(buf, FIG_COLUMNS, lineterminator="\n", restval="")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    store.atomic_write(path, buf.getvalue())


def cmd_report(args, cfg):
    paths = args.reports or sorted(glob.glob(os.path.join(args.out, "*.rmbil-report.json")))
    if not paths:
        raise CliError(f"no report files found in {args.out}")
    reports = []
    for path in paths:
        reps, _ = store.load_report(path)
        reports.extend(reps)
    rows = _rows(reports)
    # score vs demo count, nominal plant at the training gain
    fig3 = [r for r in rows if r["disturbance"] in ("nominal", None)]
    _write_rows(_path(args, "fig3"), fig3, ["plant", "controller", "demos", "gain"])
    _write_rows(_path(args, "fig4"), rows, ["plant", "disturbance", "controller", "gain",
                                            "demos"])
    return {"fig3": _path(args, "fig3"), "fig4": _path(args, "fig4"), "cells": len(rows)}


COMMANDS = {
    "gen-demos": cmd_gen_demos,
    "train-dynamics": cmd_train_dynamics,
    "train-controller": cmd_train_controller,
    "refine-robust": cmd_refine_robust,
    "train-cvae": cmd_train_cvae,
    "rollout": cmd_rollout,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def _parser():
    parser = _Parser(prog="rmbil", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--preset", default="desk", choices=sorted(PRESETS))
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a train/solver/rollout/model field")
        return sp

    def data_args(sp, subset=True):
        sp.add_argument("--data", help="dataset file (default: OUT/%s)" % FILES["data"])
        if subset:
            sp.add_argument("--subset", type=int, help="use only the first k demonstrations")

    sp = add("gen-demos", "generate expert demonstrations")
    sp.add_argument("--plant", required=True, choices=PLANTS)
    sp.add_argument("--n", type=int, default=50)
    sp.add_argument("--t", type=int, default=200)
    sp.add_argument("--expert-gain", type=float, default=5.0)
    sp.add_argument("--data", help="output dataset path")

    sp = add("train-dynamics", "phase 1: fit the dynamics network")
    data_args(sp)
    sp.add_argument("--dynamics", help="output checkpoint path")

    sp = add("train-controller", "phase 2: fit the tracking controller")
    data_args(sp)
    sp.add_argument("--dynamics")
    sp.add_argument("--controller", help="output checkpoint path")

    sp = add("refine-robust", "phase 3: noise-injection refinement")
    data_args(sp)
    sp.add_argument("--dynamics")
    sp.add_argument("--controller")
    sp.add_argument("--robust", help="output checkpoint path")

    sp = add("train-cvae", "fit the reference generator")
    data_args(sp)
    sp.add_argument("--cvae", help="output checkpoint path")

    sp = add("rollout", "closed-loop rollout with trace output")
    sp.add_argument("--plant", required=True, choices=PLANTS)
    sp.add_argument("--policy", default="robust",
                    choices=["robust", "controller", "expert", "random"])
    sp.add_argument("--disturbance", default="nominal")
    for key in ("data", "controller", "robust", "cvae"):
        sp.add_argument(f"--{key}")

    sp = add("evaluate", "robustness sweep over disturbances and gains")
    sp.add_argument("--plant", required=True, choices=PLANTS)
    sp.add_argument("--controllers", default="controller,robust")
    sp.add_argument("--bc", dest="with_bc", action="store_true",
                    help="train and include the BC baseline")
    sp.add_argument("--gains", default="0.1,1,10")
    sp.add_argument("--disturbances", default="nominal,slope,uneven")
    sp.add_argument("--episodes", type=int)
    for key in ("data", "controller", "robust", "cvae"):
        sp.add_argument(f"--{key}")

    sp = add("report", "merge reports into figure tables")
    sp.add_argument("--reports", nargs="*")
    return parser


def _limit_threads():
    n = os.environ.get("RMBIL_THREADS")
    if not n:
        return None
    try:
        n = int(n)
    except ValueError as exc:
        raise CliError(f"RMBIL_THREADS must be an integer, got {n!r}") from exc
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, n))


def main(argv=None):
    try:
        args = _parser().parse_args(argv)
        limiter = _limit_threads()
        cfg = build_config(args.preset, args.set, args.seed)
        cfg["command"] = args.command
        os.makedirs(args.out, exist_ok=True)
        result = COMMANDS[args.command](args, cfg)
        if limiter is not None:
            limiter.restore_original_limits()
    except SystemExit:
        raise
    except BaseException as exc:  # one machine-parsable line, then a non-zero exit
        if isinstance(exc, KeyboardInterrupt):
            raise
        msg = " ".join(str(exc).split())
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": msg}) + "\n")
        return 2 if isinstance(exc, CliError) else 1
    sys.stdout.write(json.dumps({"command": args.command, **_jsonable(result)}) + "\n")
    return 0


def _jsonable(d):
    out = {}
    for k, v in d.items():
        if isinstance(v, (np.floating, np.integer)):
            v = v.item()
        out[k] = v
    return out


if __name__ == "__main__":
    sys.exit(main())
