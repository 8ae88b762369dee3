"""Command-line front end.

    hodgemix simulate --seed 7 --out sim/
    hodgemix fit      --data sim/data.csv --kappa 100 --alpha auto --out path.jsonl
    hodgemix cv       --data sim/data.csv --folds 5 --grid 50 --out cv.csv
    hodgemix eval     --data sim/data.csv --out eval/
    hodgemix report   --data sim/data.csv --out report/

Settings resolve as command-line flag, then ``--config`` JSON file, then
built-in default.  The config file may hold the sections ``lbi``,
``simulation``, ``cv``, ``eval`` and ``report``, plus ``threads``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from ._parallel import ENV_THREADS, resolve_jobs
from .diagnostics import (
    jump_orders,
    kendall_tau,
    l2_distances,
    position_bias_report,
    ranking_report,
    representative_annotators,
)
from .errors import ConfigError, HodgeMixError, InputError
from .io import (
    metadata,
    parse_comparisons_csv,
    read_path,
    write_comparisons_csv,
    write_path,
    write_table,
)
from .lbi import LbiConfig, interpolate, lbi_fit
from .model_selection import DEFAULT_GRID, cross_validate, holdout_eval
from .simulation import SimulationConfig, simulate

log = logging.getLogger("hodgemix")

EXIT_IO = 4
FIT_MAX_POINTS = 500  # keeps path files of long runs to a manageable size

REDUCED_PROFILE = {"n_annotators": 100, "n_min": 50, "n_max": 150}

SIM_FLAGS = {
    "n_items": int,
    "n_annotators": int,
    "p1": float,
    "p2": float,
    "sigma_gamma": float,
    "s_max": float,
    "sigma_noise": float,
    "n_min": int,
    "n_max": int,
}


def _alpha(text: str) -> float | str:
    if text == "auto":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("alpha must be 'auto' or a number") from None


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--threads", type=int, help=f"worker processes (default ${ENV_THREADS} or 1)")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_lbi(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("path")
    g.add_argument("--kappa", type=float)
    g.add_argument("--alpha", type=_alpha, help="step size or 'auto'")
    g.add_argument("--max-iter", dest="max_iterations", type=int)
    g.add_argument("--t-max", dest="t_max", type=float)
    g.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    g.add_argument("--max-points", dest="max_points", type=int, help="cap on stored iterates (fit default 500)")
    g.add_argument("--z-update", dest="z_update_theta", choices=["fresh", "stale"])
    g.add_argument("--lbi-seed", dest="rng_seed", type=int, help="seed for the power-iteration start vector")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, required=True, help="comparison CSV")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hodgemix", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hodgemix {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic dataset with planted random effects")
    _add_common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--profile", choices=["default", "reduced"], help="preset sizes (reduced: 100 annotators, 50-150 records each)")
    for name, typ in SIM_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)

    p = sub.add_parser("fit", help="compute a regularization path")
    _add_common(p)
    _add_data(p)
    _add_lbi(p)
    p.add_argument("--out", type=Path, default=Path("path.jsonl"))
    p.add_argument("--store-z", action="store_true", help="also write the dual variable (needed to reload the path)")

    p = sub.add_parser("cv", help="cross-validate the stopping time")
    _add_common(p)
    _add_data(p)
    _add_lbi(p)
    p.add_argument("--folds", type=int)
    p.add_argument("--grid", type=int, help="number of grid points")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("cv.csv"))

    p = sub.add_parser("eval", help="repeated holdout: HodgeRank vs. mixed effects")
    _add_common(p)
    _add_data(p)
    _add_lbi(p)
    p.add_argument("--split", type=float, help="training fraction")
    p.add_argument("--repeats", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("report", help="annotator and ranking reports")
    _add_common(p)
    _add_data(p)
    _add_lbi(p)
    p.add_argument("--path", type=Path, help="path file written with --store-z (otherwise a fresh fit)")
    p.add_argument("--t", type=float, help="reporting time (default: cross-validated)")
    p.add_argument("--annotators", help="comma-separated annotator ids for the ranking report")
    p.add_argument("--folds", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


# -- config resolution ---------------------------------------------------------------


def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return cfg


def _pick(args: argparse.Namespace, name: str, section: dict, default: Any) -> Any:
    v = getattr(args, name, None)
    if v is not None:
        return v
    return section.get(name, default)


def _lbi_config(args: argparse.Namespace, cfg: dict) -> LbiConfig:
    section = dict(cfg.get("lbi", {}))
    base = LbiConfig.from_dict(section)
    overrides = {
        f: getattr(args, f)
        for f in ("kappa", "alpha", "max_iterations", "t_max", "checkpoint_every", "max_points", "z_update_theta", "rng_seed")
        if getattr(args, f, None) is not None
    }
    return replace(base, **overrides)


def _sim_config(args: argparse.Namespace, cfg: dict) -> SimulationConfig:
    section = dict(cfg.get("simulation", {}))
    profile = args.profile or section.pop("profile", "default")
    values = dict(REDUCED_PROFILE) if profile == "reduced" else {}
    values.update(section)
    values.update({k: getattr(args, k) for k in SIM_FLAGS if getattr(args, k) is not None})
    if args.seed is not None:
        values["rng_seed"] = args.seed
    return SimulationConfig.from_dict(values)


# -- commands ------------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace, cfg: dict) -> int:
    sim = _sim_config(args, cfg)
    ds, truth = simulate(sim)
    args.out.mkdir(parents=True, exist_ok=True)
    meta = metadata("comparisons", {"simulation": sim.to_dict()}, sim.rng_seed)
    write_comparisons_csv(ds, args.out / "data.csv", meta)
    with open(args.out / "ground_truth.json", "w", encoding="utf-8") as fh:
        json.dump({"meta": metadata("ground_truth", {"simulation": sim.to_dict()}, sim.rng_seed), **truth.to_json()}, fh)
    print(f"simulated {ds.m} comparisons, {ds.n_annotators} annotators, {ds.n_items} items -> {args.out}")
    return 0


def cmd_fit(args: argparse.Namespace, cfg: dict) -> int:
    ds = parse_comparisons_csv(args.data)
    lbi = _lbi_config(args, cfg)
    if lbi.max_points is None and "max_points" not in cfg.get("lbi", {}):
        lbi = replace(lbi, max_points=FIT_MAX_POINTS)
    path = lbi_fit(ds, lbi)
    meta = metadata("path", {"lbi": lbi.to_dict()}, lbi.rng_seed, data=str(args.data))
    write_path(path, args.out, meta, store_z=args.store_z)
    print(
        f"path: {len(path.points)} points, {path.n_iterations} iterations ({path.stop_reason}), "
        f"t_end={path.t_end:.6g}, alpha={path.alpha:.6g}, ||X^T X||={path.spectral_norm:.6g} -> {args.out}"
    )
    return 0


def _cv_params(args: argparse.Namespace, cfg: dict) -> tuple[int, int, int]:
    section = cfg.get("cv", {})
    return (
        int(_pick(args, "folds", section, 5)),
        int(_pick(args, "grid", section, DEFAULT_GRID)),
        int(_pick(args, "seed", section, 0)),
    )


def _write_cv(cv, out: Path, meta: dict) -> None:
    header = ["t", "mean_error"] + [f"fold_{k + 1}" for k in range(cv.K)]
    rows = ([t, e, *cv.fold_errors[:, g]] for g, (t, e) in enumerate(zip(cv.t_grid, cv.mean_error)))
    write_table(out, header, rows, meta)


def cmd_cv(args: argparse.Namespace, cfg: dict) -> int:
    ds = parse_comparisons_csv(args.data)
    lbi = _lbi_config(args, cfg)
    folds, grid, seed = _cv_params(args, cfg)
    cv = cross_validate(ds, lbi, folds, grid, seed, n_jobs=args.threads)
    effective = {"lbi": lbi.to_dict(), "cv": {"folds": folds, "grid": grid, "seed": seed}}
    args.out.parent.mkdir(parents=True, exist_ok=True)
    _write_cv(cv, args.out, metadata("cv_curve", effective, seed, t_cv=cv.t_cv, data=str(args.data)))
    print(f"t_cv={cv.t_cv!r}")
    return 0


def cmd_eval(args: argparse.Namespace, cfg: dict) -> int:
    ds = parse_comparisons_csv(args.data)
    lbi = _lbi_config(args, cfg)
    section = cfg.get("eval", {})
    split = float(_pick(args, "split", section, 0.7))
    repeats = int(_pick(args, "repeats", section, 20))
    folds = int(_pick(args, "folds", section, 5))
    grid = int(_pick(args, "grid", section, DEFAULT_GRID))
    seed = int(_pick(args, "seed", section, 0))
    table = holdout_eval(ds, lbi, split, repeats, folds, seed, grid_size=grid, n_jobs=args.threads)
    effective = {
        "lbi": lbi.to_dict(),
        "eval": {"split": split, "repeats": repeats, "folds": folds, "grid": grid, "seed": seed},
    }
    args.out.mkdir(parents=True, exist_ok=True)
    meta = metadata("eval_table", effective, seed, data=str(args.data))
    write_table(
        args.out / "eval_table.csv",
        ["method", "min", "mean", "max", "std"],
        ([name, s["min"], s["mean"], s["max"], s["std"]] for name, s in table.rows()),
        meta,
    )
    write_table(
        args.out / "eval_repeats.csv",
        ["repeat", "seed", "hodgerank_error", "mixed_error", "t_cv"],
        ([r.repeat, r.seed, r.hodgerank_error, r.mixed_error, r.t_cv] for r in table.repeats),
        metadata("eval_repeats", effective, seed, data=str(args.data)),
    )
    for name, s in table.rows():
        print(f"{name:<13} min {s['min']:.4f}  mean {s['mean']:.4f}  max {s['max']:.4f}  std {s['std']:.4f}")
    return 0


def cmd_report(args: argparse.Namespace, cfg: dict) -> int:
    ds = parse_comparisons_csv(args.data)
    lbi = _lbi_config(args, cfg)
    folds, grid, seed = _cv_params(args, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    effective: dict[str, Any] = {"lbi": lbi.to_dict(), "cv": {"folds": folds, "grid": grid, "seed": seed}}

    t = args.t if args.t is not None else cfg.get("report", {}).get("t")
    if t is None:
        cv = cross_validate(ds, lbi, folds, grid, seed, n_jobs=args.threads)
        t = cv.t_cv
        _write_cv(cv, args.out / "cv.csv", metadata("cv_curve", effective, seed, t_cv=t))
    effective["report"] = {"t": t}

    if args.path is not None:
        path = read_path(args.path)
        if path.dataset_digest != ds.digest:
            raise InputError(f"{args.path} was fitted on different data")
    else:
        path = lbi_fit(ds, lbi if lbi.t_max is not None or lbi.max_iterations is not None else replace(lbi, t_max=t), record_at=[t])
    fit = interpolate(path, min(t, path.t_end))

    l2 = l2_distances(ds, lbi.solver)
    jumps = jump_orders(path)
    reports = position_bias_report(ds, fit, path, l2)
    write_table(
        args.out / "annotator_report.csv",
        ["annotator_id", "n_records", "left_clicks", "right_clicks", "jump_rank_delta", "jump_t_delta",
         "jump_rank_gamma", "jump_t_gamma", "l2_distance", "gamma", "delta_norm"],
        (
            [r.annotator_id, r.n_records, r.left_clicks, r.right_clicks, r.jump_rank_delta, r.jump_t_delta,
             r.jump_rank_gamma, r.jump_t_gamma, r.l2_distance, r.gamma_at_t, r.delta_norm_at_t]
            for r in reports
        ),
        metadata("annotator_report", effective, seed),
    )

    if args.annotators:
        index = {name: u for u, name in enumerate(ds.annotator_labels)}
        chosen = []
        for name in args.annotators.split(","):
            if name.strip() not in index:
                raise InputError(f"unknown annotator id {name.strip()!r}")
            chosen.append(index[name.strip()])
    else:
        chosen = representative_annotators(path)
    rr = ranking_report(fit, chosen)
    write_table(
        args.out / "ranking_report.csv",
        ["item_id", "common"] + [ds.annotator_labels[u] for u in rr.annotators],
        ([ds.item_labels[i], *rr.positions[i]] for i in rr.common),
        metadata(
            "ranking_report",
            effective,
            seed,
            positions="1 = best",
            extensions={
                "kendall_tau": {
                    "note": "auxiliary summary, not part of the model: tau between common and personalized scores",
                    "values": {ds.annotator_labels[u]: kendall_tau(fit, u) for u in rr.annotators},
                }
            },
        ),
    )
    n_active = int(np.count_nonzero(jumps.rank_gamma)), int(np.count_nonzero(jumps.rank_delta))
    print(f"report at t={t!r}: {n_active[0]} gamma / {n_active[1]} delta activations on the path -> {args.out}")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "cv": cmd_cv,
    "eval": cmd_eval,
    "report": cmd_report,
}


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _load_config(args.config)
        if args.threads is None and cfg.get("threads") is not None:
            args.threads = int(cfg["threads"])
        args.threads = resolve_jobs(args.threads)
        return COMMANDS[args.command](args, cfg)
    except HodgeMixError as exc:
        print(f"hodgemix: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except json.JSONDecodeError as exc:
        print(f"hodgemix: error: bad JSON: {exc}", file=sys.stderr)
        return InputError.exit_code
    except OSError as exc:
        print(f"hodgemix: error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
