"""Command-line entry point.

Exit codes: 0 success, 1 unexpected error, 2 usage or configuration error,
3 counterexamples remain, 4 missing input file, 5 teacher premise violated,
6 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml
from pydantic import ValidationError

from . import config as C
from .coverage import CoverageTracker, GridError
from .falsify import ClosedLoop, FalsifyConfig, falsify, write_trial_log
from .loop import PremiseViolation, check_prop2_bound, empirical_deviation, run_loop
from .nn import Dataset, Net, NetController, TrainingDiverged, train
from .plant import SimulationDiverged, make_plant, simulate_batch
from .pstl import PolarityError, TraceEvaluator, classify_valuations, write_summary
from .stl import StlError

log = logging.getLogger("nncegis")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_CEX, EXIT_MISSING, EXIT_PREMISE, EXIT_DIVERGED = 0, 1, 2, 3, 4, 5, 6

ROLLUP_FIELDS = ["i", "n_T", "n_C", "n_C_hat", "n_R", "n_C_tilde", "coverage", "train_mse", "val_mse",
                 "n_matching", "n_examples"]
TIMING_FIELDS = ["i", "t_TCC", "t_R", "t_C_tilde"]


EPILOG = """exit codes:
  0  success (falsify and loop: no counterexample found within the budget)
  1  other failure (including a violated deviation bound in check-prop2)
  2  usage or configuration schema error
  3  counterexample found (falsify) or loop stopped without a clean confirmation run
  4  required input file missing
  5  teacher violates a property at a setting it must teach
  6  simulation or training diverged
"""


class MissingInput(FileNotFoundError):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment configuration")
    common.add_argument("--seed-override", type=int, default=None, help="replace the configured seed")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads (computation is sequential; recorded for reproducibility)")
    common.add_argument("--out", type=Path, default=None, help="output directory (overrides output_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="nncegis", description="Counterexample-guided training of neural controllers.",
                                epilog=EPILOG, formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, text):
        return sub.add_parser(name, parents=[common], epilog=EPILOG, formatter_class=fmt, help=text)

    g = add("gen-data", "teach on the ε-net and write the dataset")
    g.add_argument("--dry-run", action="store_true", help="report the net size without simulating")
    add("train", "train a net on the dataset in the output directory")
    f = add("falsify", "falsify the trained net (or the nominal controller)")
    f.add_argument("--nominal", action="store_true", help="falsify the nominal controller instead")
    f.add_argument("--budget", type=int, default=None, help="number of simulations")
    add("loop", "run the full retraining loop")
    add("mine-pstl", "estimate False sets of the parametric template")
    add("check-prop2", "check the Lipschitz deviation bound empirically")
    add("report", "print the iteration roll-up of a loop run")
    return p


def _load(args, write: bool = True) -> tuple[C.ExperimentConfig, Path]:
    if args.config is None:
        raise argparse.ArgumentError(None, "--config is required for this command")
    if not args.config.exists():
        raise MissingInput(f"configuration file not found: {args.config}")
    cfg = C.load_config(args.config)
    upd = {}
    if args.seed_override is not None:
        upd["seed"] = args.seed_override
    if args.out is not None:
        upd["output_dir"] = str(args.out)
    if upd:
        cfg = C.ExperimentConfig.model_validate({**cfg.model_dump(), **upd})
    out = Path(cfg.output_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        C.dump_config(cfg, out / "effective_config.yaml")
    return cfg, out


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingInput(f"required input not found: {path}")
    return path


def _setup_logging(verbose: bool, out: Path | None) -> None:
    for old in log.handlers:
        old.close()
    log.handlers.clear()
    log.setLevel(logging.DEBUG if verbose else logging.INFO)
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.addHandler(h)
    if out is not None:
        fh = logging.FileHandler(out / "run.log")
        fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
        log.addHandler(fh)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: C.ExperimentConfig, out: Path, args) -> int:
    problem = C.build_problem(cfg)
    settings = problem.space.eps_net(cfg.grid.eps)
    if args.dry_run:
        print(json.dumps({"settings": len(settings), "free_axes": int(problem.space.free.sum()),
                          "samples_per_trace": round(cfg.simulation.T_sim / cfg.simulation.h) + 1}))
        return EXIT_OK
    with open(out / "net_settings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index"] + [f"s{i}" for i in range(problem.space.dim)])
        for j, s in enumerate(settings):
            w.writerow([j] + [repr(float(c)) for c in problem.space.embed(s)])
    tracker = CoverageTracker(problem.space, cfg.grid.eps, cfg.loop.coverage_factor, seed=cfg.seed)
    tracker.record_many(settings)
    (out / "coverage.json").write_text(json.dumps({"settings": len(settings), "cells": tracker.n_cells,
                                                   "coverage": tracker.coverage_ratio()}))
    behaviours = problem.teacher.teach(settings)
    data = Dataset.empty(problem.spec).extend(behaviours, problem.spec, problem.teacher.name, 0)
    data.to_csv(out / "dataset.csv")
    skipped = len(getattr(problem.teacher, "skipped", []))
    log.info("wrote %d pairs from %d traces (%d settings skipped)", len(data), data.n_behaviours, skipped)
    return EXIT_OK


def cmd_train(cfg: C.ExperimentConfig, out: Path, args) -> int:
    spec = C.build_spec(cfg, C.build_plant(cfg))
    data = Dataset.from_csv(_require(out / "dataset.csv"), spec)
    t = cfg.training
    net, tr, va = train(Net.init(spec, cfg.seed), data, t.epochs_initial, t.batch, t.lr, t.val_fraction, cfg.seed)
    net.save(out / "net.json")
    (out / "train_metrics.json").write_text(json.dumps({"train_mse": tr, "val_mse": va, "pairs": len(data)}))
    log.info("train mse %.4g, validation mse %.4g", tr, va)
    return EXIT_OK


def cmd_falsify(cfg: C.ExperimentConfig, out: Path, args) -> int:
    problem = C.build_problem(cfg)
    sim = cfg.simulation
    if args.nominal:
        ctrl = C.build_controller(cfg.nominal, sim.h)
    else:
        ctrl = NetController(Net.load(_require(out / "net.json")))
    system = ClosedLoop(problem.plant, ctrl, sim.h, sim.substeps)
    lc = cfg.loop
    fcfg = FalsifyConfig(args.budget or lc.falsify_budget, seed=cfg.seed, init_fraction=lc.init_fraction,
                         k_best=lc.k_best, simplex_scale=lc.simplex_scale)
    tracker = CoverageTracker(problem.space, cfg.grid.eps, lc.coverage_factor, seed=cfg.seed)
    res = falsify(system, problem.phi, problem.space, fcfg, tracker)
    write_trial_log(res, out / "trials.csv")
    cex = [{"trial": v.trial, "robustness": v.robustness, "class": v.klass, "setting": v.setting.to_json()}
           for v in res.counterexamples]
    (out / "counterexamples.json").write_text(json.dumps(cex, indent=1))
    cov = tracker.coverage_ratio()
    if cex:
        print(f"cex found: {len(cex)} in {res.n_trials} trials, coverage {cov:.3f}")
    else:
        print(f"no cex found: {res.n_trials} trials, coverage {cov:.3f}")
    return EXIT_CEX if cex else EXIT_OK


def cmd_loop(cfg: C.ExperimentConfig, out: Path, args) -> int:
    problem = C.build_problem(cfg)
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)

    def save(state):
        state.net.save(ckpt / f"net_iter{state.iteration}.json")

    result = run_loop(problem, C.build_loop_config(cfg), on_iteration=save)
    result.net.save(out / "net.json")
    result.dataset.to_csv(out / "dataset.csv")
    with open(out / "rollup.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROLLUP_FIELDS)
        w.writeheader()
        for r in result.reports:
            w.writerow(r.counts())
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TIMING_FIELDS)
        for r in result.reports:
            w.writerow([r.i, f"{r.t_TCC:.6f}", f"{r.t_R:.6f}", f"{r.t_C_tilde:.6f}"])
    (out / "reports.json").write_text(json.dumps(
        {"terminated": result.terminated, "coverage": result.coverage, "summary": result.summary(),
         "iterations": [r.counts() for r in result.reports]}, indent=1, default=_json_num))
    (out / "summary.txt").write_text(result.summary() + "\n")
    print(result.summary())
    return EXIT_OK if result.terminated else EXIT_CEX


def _json_num(v):
    return float(v)


def _pstl_traces(cfg: C.ExperimentConfig, problem, controller):
    rng = np.random.default_rng(cfg.seed)
    z = rng.random((cfg.pstl.n_settings, int(problem.space.free.sum())))
    settings = [problem.space.setting(v) for v in problem.space.from_unit(z)]
    bb = simulate_batch(problem.plant, controller, settings, problem.h, problem.substeps)
    return bb.env(e=bb.r - bb.y)


def cmd_mine_pstl(cfg: C.ExperimentConfig, out: Path, args) -> int:
    problem = C.build_problem(cfg)
    template = C.build_pstl(cfg)
    h = cfg.simulation.h
    nominal = classify_valuations(
        TraceEvaluator(template, _pstl_traces(cfg, problem, C.build_controller(cfg.nominal, h)), h),
        template, cfg.pstl.grid)
    nominal.to_csv(out / "pstl_nominal.csv")
    learned = None
    if (out / "net.json").exists():
        ctrl = NetController(Net.load(out / "net.json"))
        learned = classify_valuations(TraceEvaluator(template, _pstl_traces(cfg, problem, ctrl), h),
                                      template, cfg.pstl.grid)
        learned.to_csv(out / "pstl_learned.csv")
    if learned is not None and not nominal.volume_lower_bound > 0:
        summary = write_summary(out / "pstl_summary.json", nominal, None)
        summary.update(learned=learned.summary(), sigma=None)
        (out / "pstl_summary.json").write_text(json.dumps(summary, indent=2))
        print("error: sigma is undefined because the nominal False volume estimate is zero; "
              "refine pstl.grid or widen the parameter ranges", file=sys.stderr)
        return EXIT_ERROR
    summary = write_summary(out / "pstl_summary.json", nominal, learned)
    if "sigma" in summary:
        s, thr = summary["sigma"], cfg.pstl.sigma_threshold
        retrain = s > thr if cfg.pstl.retrain_if == "sigma_above" else s < thr
        summary["retrain_recommended"] = bool(retrain)
        (out / "pstl_summary.json").write_text(json.dumps(summary, indent=2))
        print(f"sigma = {s:.4f}; retraining {'recommended' if retrain else 'not recommended'}")
    else:
        print(f"nominal False volume lower bound = {nominal.volume_lower_bound:.6g} (no trained net found)")
    return EXIT_OK


def cmd_check_prop2(cfg: C.ExperimentConfig, out: Path, args) -> int:
    pc = cfg.prop2
    plant = make_plant(pc.plant)
    h = cfg.simulation.h
    check_prop2_bound(plant, pc.eps, pc.T_h, h)
    rng = np.random.default_rng(cfg.seed)
    n = round(pc.T_h / h)
    lo, hi = plant.x0_box
    rows, ok = [], True
    for trial in range(pc.trials):
        x0 = rng.uniform(lo, hi)
        u = rng.uniform(*pc.u_range, size=(n, plant.p))
        du = rng.uniform(-pc.eps, pc.eps, size=(n, plant.p))
        chk = empirical_deviation(plant, x0, u, du, h, pc.eps)
        ok &= chk.holds
        ratio = float(np.max(chk.gap[1:] / chk.bound[1:])) if n else 0.0
        rows.append((trial, float(chk.gap.max()), float(chk.bound[-1]), ratio, chk.holds))
    with open(out / "prop2.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "max_gap", "bound_at_T_h", "max_gap_over_bound", "holds"])
        w.writerows(rows)
    print(f"bound {'holds' if ok else 'VIOLATED'} on {pc.trials} trials (plant {pc.plant})")
    return EXIT_OK if ok else EXIT_ERROR


def cmd_report(out: Path) -> int:
    with open(_require(out / "rollup.csv")) as fh:
        rows = list(csv.DictReader(fh))
    times = {}
    if (out / "timings.csv").exists():
        with open(out / "timings.csv") as fh:
            times = {r["i"]: r for r in csv.DictReader(fh)}
    cols = ["i", "n_T", "n_C", "n_C_hat", "n_R", "n_C_tilde", "coverage"]
    print(" ".join(f"{c:>9}" for c in cols + TIMING_FIELDS[1:]))
    for r in rows:
        t = times.get(r["i"], {})
        vals = [r[c] for c in cols] + [t.get(c, "") for c in TIMING_FIELDS[1:]]
        print(" ".join(f"{_short(v):>9}" for v in vals))
    if (out / "summary.txt").exists():
        print((out / "summary.txt").read_text().strip())
    return EXIT_OK


def _short(v: str) -> str:
    try:
        f = float(v)
    except ValueError:
        return v
    return str(int(f)) if f.is_integer() and "." not in v else f"{f:.3f}"


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "falsify": cmd_falsify, "loop": cmd_loop,
            "mine-pstl": cmd_mine_pstl, "check-prop2": cmd_check_prop2}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        if args.threads < 1:
            raise argparse.ArgumentError(None, "--threads must be >= 1")
        if args.command == "report":
            out = args.out
            if out is None and args.config is not None:
                out = Path(C.load_config(_require(args.config)).output_dir)
            if out is None:
                raise argparse.ArgumentError(None, "report needs --out or --config")
            _setup_logging(args.verbose, None)
            return cmd_report(out)
        dry = getattr(args, "dry_run", False)
        cfg, out = _load(args, write=not dry)
        _setup_logging(args.verbose, None if dry else out)
        return COMMANDS[args.command](cfg, out, args)
    except (ValidationError, yaml.YAMLError, argparse.ArgumentError, GridError, StlError, PolarityError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except PremiseViolation as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PREMISE
    except (SimulationDiverged, TrainingDiverged) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except Exception as e:  # noqa: BLE001 - top-level handler
        log.exception("unexpected failure")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
