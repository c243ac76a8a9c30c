"""Batch command-line frontend.

Subcommands: ``estimate`` (cells, target recoveries, summaries),
``diagnose`` (timing-confoundedness table), ``simulate`` (synthetic panels
and Monte Carlo studies). All outputs are plain CSV/JSON; every run echoes
its resolved configuration and the input file hash into the output
directory. Exit codes: 0 success, 2 data or configuration error, 3
estimation failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .diagnostics import diagnostics_table
from .errors import ConfigError, EstimationError, PanelError, TwodidError
from .inference import (
    AGGREGATIONS,
    BootstrapConfig,
    PipelineSpec,
    bootstrap,
    mc_study,
    run_pipeline,
)
from .panel import NEVER, derive_cohorts, load_panel, write_panel
from .simulate import gen_panel, implied_cohort_table, load_dgp_config


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(df: pd.DataFrame, path: Path) -> None:
    df.to_csv(path, index=False, lineterminator="\n")


def _load_file_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    if p.suffix.lower() == ".toml":
        try:
            import tomllib as toml
        except ImportError:
            import tomli as toml
        with open(p, "rb") as fh:
            return toml.load(fh)
    if p.suffix.lower() == ".json":
        return json.loads(p.read_text())
    raise ConfigError(f"unsupported config format {p.suffix!r}")


def _resolve(args: argparse.Namespace, file_config: dict) -> dict:
    """Flag values win over config-file values; None means unset."""
    merged = dict(file_config)
    for key, value in vars(args).items():
        if key in ("func", "config"):
            continue
        if value is not None:
            merged[key] = value
    return merged


def _schema_from(opts: dict) -> dict:
    schema: dict = {}
    for key, flag in (
        ("unit", "unit"),
        ("time", "time"),
        ("outcome", "outcome"),
        ("d1", "d1"),
        ("d2", "d2"),
        ("cohort1", "cohort1"),
        ("cohort2", "cohort2"),
    ):
        if opts.get(flag):
            schema[key] = opts[flag]
    if opts.get("covariates"):
        cov = opts["covariates"]
        schema["covariates"] = cov.split(",") if isinstance(cov, str) else list(cov)
    return schema


def _require(opts: dict, keys: tuple[str, ...]) -> None:
    missing = [k for k in keys if not opts.get(k)]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join('--' + m for m in missing)}")


def _attach_inference(df: pd.DataFrame, key_of, boot) -> pd.DataFrame:
    cols = {c: [] for c in ("se", "ci_lo", "ci_hi", "ci_normal_lo", "ci_normal_hi")}
    for _, row in df.iterrows():
        rec = boot.records.get(key_of(row)) if boot is not None else None
        cols["se"].append(rec.se if rec else np.nan)
        cols["ci_lo"].append(rec.ci_lo if rec else np.nan)
        cols["ci_hi"].append(rec.ci_hi if rec else np.nan)
        cols["ci_normal_lo"].append(rec.ci_normal_lo if rec else np.nan)
        cols["ci_normal_hi"].append(rec.ci_normal_hi if rec else np.nan)
    for name, values in cols.items():
        df[name] = values
    return df


def _code(g: int) -> int:
    return 0 if g == NEVER else int(g)


def _summary_frames(result, boot) -> dict[str, pd.DataFrame]:
    def rec_cols(key):
        rec = boot.records.get(("summary",) + key) if boot is not None else None
        return {
            "se": rec.se if rec else np.nan,
            "ci_lo": rec.ci_lo if rec else np.nan,
            "ci_hi": rec.ci_hi if rec else np.nan,
        }

    frames: dict[str, list[dict]] = {}
    for key, summ in result.summaries.items():
        meta = summ.scheme.meta
        base = {
            "theta": summ.theta,
            **rec_cols(key),
            "n_cells": summ.n_cells,
            "excluded_mass": meta.get("excluded_mass", 0.0),
        }
        if key[0] == "dynamic":
            frames.setdefault("dynamic", []).append({"e1": key[1], **base})
        elif key[0] == "group_time":
            frames.setdefault("group_time", []).append(
                {"g1": key[1], "t": key[2], **base}
            )
        elif key[0] == "overall":
            frames.setdefault("overall", []).append({"label": "post_average", **base})
        elif key[0] == "dynamic_staggered":
            frames.setdefault("dynamic_staggered", []).append(
                {"e1": key[1], "s12": key[2], **base}
            )
    order = {"dynamic": ["e1"], "group_time": ["g1", "t"], "dynamic_staggered": ["s12", "e1"]}
    out = {}
    for name, rows in frames.items():
        df = pd.DataFrame(rows)
        if name in order:
            df = df.sort_values(order[name]).reset_index(drop=True)
        out[name] = df
    return out


def cmd_estimate(args: argparse.Namespace) -> int:
    opts = _resolve(args, _load_file_config(args.config))
    _require(opts, ("input", "outdir", "unit", "time", "outcome"))
    b = int(opts.get("bootstrap", 0) or 0)
    if b > 0 and opts.get("seed") is None:
        raise ConfigError("--seed is required when bootstrapping")
    outdir = Path(opts["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    input_path = Path(opts["input"])
    panel = load_panel(input_path, _schema_from(opts))
    cohorts = derive_cohorts(panel)

    aggs = opts.get("agg", "dynamic")
    agg_list = tuple(a for a in (aggs.split(",") if isinstance(aggs, str) else aggs) if a)
    for a in agg_list:
        if a not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {a!r}; expected one of {AGGREGATIONS}")
    spec = PipelineSpec(
        estimator=opts.get("estimator", "unc"),
        control_type=opts.get("control", "not_yet"),
        aggregations=agg_list,
    )
    if spec.estimator not in ("unc", "ipw", "or", "dr"):
        raise ConfigError(f"unknown estimator {spec.estimator!r}")
    if spec.control_type not in ("never", "not_yet"):
        raise ConfigError(f"unknown control type {spec.control_type!r}")

    boot = None
    if b > 0:
        config = BootstrapConfig(
            replications=b,
            seed=int(opts["seed"]),
            ci_level=float(opts.get("ci_level", 0.95)),
            method=opts.get("bootstrap_method", "nonparametric_cluster"),
        )
        threads = int(opts.get("threads") or os.cpu_count() or 1)
        boot = bootstrap(panel, spec, config, cohorts=cohorts, threads=threads)
        result = boot.base
        _write_json(
            {
                "replications": config.replications,
                "seed": config.seed,
                "method": config.method,
                "ci_level": config.ci_level,
                "drop_rate": boot.drop_rate,
                "reliable": boot.reliable,
            },
            outdir / "bootstrap.json",
        )
    else:
        result = run_pipeline(panel, cohorts, spec, with_contrib=False)

    cells_df = result.cells.to_frame()
    _attach_inference(
        cells_df,
        lambda row: ("cell", NEVER if row["g1"] == 0 else row["g1"],
                     NEVER if row["g2"] == 0 else row["g2"], row["t"]),
        boot,
    )
    _write_csv(cells_df, outdir / "cells.csv")

    targets_df = result.targets.to_frame()
    _attach_inference(
        targets_df,
        lambda row: ("target", NEVER if row["g1"] == 0 else row["g1"],
                     NEVER if row["g2"] == 0 else row["g2"], row["t"]),
        boot,
    )
    _write_csv(targets_df, outdir / "targets.csv")

    components = {
        f"{_code(t.cell.g1)},{_code(t.cell.g2)},{t.cell.t}": [
            {"cell": f"{_code(c.g1)},{_code(c.g2)},{c.t}", "weight": w}
            for c, w in t.components
        ]
        for t in result.targets.ok_targets()
    }
    _write_json(components, outdir / "components.json")

    for name, df in _summary_frames(result, boot).items():
        _write_csv(df, outdir / f"summary_{name}.csv")

    echo = {k: v for k, v in sorted(opts.items())}
    echo["input_sha256"] = _sha256(input_path)
    echo["version"] = __version__
    _write_json(echo, outdir / "run_config.json")
    return 0


def cmd_diagnose(args: argparse.Namespace) -> int:
    opts = _resolve(args, _load_file_config(args.config))
    _require(opts, ("input", "outdir", "unit", "time", "outcome"))
    b = int(opts.get("bootstrap", 0) or 0)
    if b > 0 and opts.get("seed") is None:
        raise ConfigError("--seed is required when bootstrapping")
    outdir = Path(opts["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    input_path = Path(opts["input"])
    panel = load_panel(input_path, _schema_from(opts))
    cohorts = derive_cohorts(panel)
    estimator = opts.get("estimator", "unc")
    control = opts.get("control", "never")

    from .moments import estimate_all_cells

    cells = estimate_all_cells(panel, cohorts, estimator, control, with_contrib=False)
    table = diagnostics_table(panel, cohorts, cells, control)

    if b > 0:
        draws: dict[tuple, dict[str, list[float]]] = {}
        seqs = np.random.SeedSequence(int(opts["seed"])).spawn(b)
        for r in range(b):
            rng = np.random.default_rng(seqs[r])
            idx = rng.integers(0, panel.n_units, panel.n_units)
            p2, c2 = panel.take(idx), cohorts.take(idx)
            cells2 = estimate_all_cells(p2, c2, estimator, control, with_contrib=False)
            t2 = diagnostics_table(p2, c2, cells2, control)
            for _, row in t2.iterrows():
                slot = draws.setdefault((row["g1"], row["t"]), {})
                for col in ("gamma12", "naive_att", "dd_att", "gap"):
                    slot.setdefault(col, []).append(row[col])
        level = float(opts.get("ci_level", 0.95))
        qs = [(1 - level) / 2, 1 - (1 - level) / 2]
        for col in ("gamma12", "naive_att", "dd_att", "gap"):
            ses, los, his = [], [], []
            for _, row in table.iterrows():
                vals = np.asarray(draws.get((row["g1"], row["t"]), {}).get(col, []))
                vals = vals[~np.isnan(vals)]
                if len(vals) >= 2:
                    ses.append(float(np.std(vals, ddof=1)))
                    lo, hi = np.quantile(vals, qs)
                    los.append(float(lo))
                    his.append(float(hi))
                else:
                    ses.append(np.nan)
                    los.append(np.nan)
                    his.append(np.nan)
            table[f"{col}_se"] = ses
            table[f"{col}_ci_lo"] = los
            table[f"{col}_ci_hi"] = his

    _write_csv(table, outdir / "diagnostics.csv")
    echo = {k: v for k, v in sorted(opts.items())}
    echo["input_sha256"] = _sha256(input_path)
    echo["version"] = __version__
    _write_json(echo, outdir / "run_config.json")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    opts = _resolve(args, {})
    _require(opts, ("dgp", "outdir"))
    if opts.get("seed") is None:
        raise ConfigError("--seed is required for simulation")
    outdir = Path(opts["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    config = load_dgp_config(opts["dgp"])
    config = dataclasses.replace(config, seed=int(opts["seed"]))

    mc = int(opts.get("mc", 0) or 0)
    if mc > 0:
        aggs = opts.get("agg", "dynamic")
        agg_list = tuple(a for a in (aggs.split(",") if isinstance(aggs, str) else aggs) if a)
        table = mc_study(
            config,
            estimator=opts.get("estimator", "unc"),
            replications=mc,
            seed=int(opts["seed"]),
            control_type=opts.get("control", "not_yet"),
            aggregations=agg_list,
        )
        _write_csv(table, outdir / "mc_results.csv")
    else:
        panel, truth = gen_panel(config)
        write_panel(panel, outdir / "panel.csv")
        _write_json(truth.to_dict(), outdir / "truth.json")
        pairs, probs = implied_cohort_table(config)
        table = pd.DataFrame(
            {
                "g1": [_code(a) for a, _ in pairs],
                "g2": [_code(b) for _, b in pairs],
                "prob": probs,
            }
        )
        _write_csv(table, outdir / "cohort_table.csv")

    echo = {k: v for k, v in sorted(opts.items()) if k != "func"}
    echo["dgp_sha256"] = _sha256(Path(opts["dgp"]))
    echo["version"] = __version__
    _write_json(echo, outdir / "run_config.json")
    return 0


def _add_input_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", help="input panel CSV")
    p.add_argument("--outdir", help="output directory")
    p.add_argument("--unit", help="unit id column")
    p.add_argument("--time", help="period column")
    p.add_argument("--outcome", help="outcome column")
    p.add_argument("--d1", help="event-1 treatment indicator column")
    p.add_argument("--d2", help="event-2 treatment indicator column")
    p.add_argument("--cohort1", help="event-1 first-treated-period column (0/empty = never)")
    p.add_argument("--cohort2", help="event-2 first-treated-period column (0/empty = never)")
    p.add_argument("--covariates", help="comma-separated covariate columns")
    p.add_argument("--control", help="control group: never or not_yet")
    p.add_argument("--estimator", help="moment form: unc, ipw, or, dr")
    p.add_argument("--bootstrap", type=int, help="bootstrap replications (0 = off)")
    p.add_argument(
        "--bootstrap-method",
        dest="bootstrap_method",
        help="nonparametric_cluster or multiplier_rademacher",
    )
    p.add_argument("--ci-level", dest="ci_level", type=float, help="CI level (default 0.95)")
    p.add_argument("--seed", type=int, help="random seed (required with bootstrap)")
    p.add_argument("--threads", type=int, help="worker processes (default: cores)")
    p.add_argument("--config", help="TOML/JSON config file; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twodid",
        description="Staggered difference-in-differences with a confounding second event",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate cells, recoveries, and summaries")
    _add_input_flags(est)
    est.add_argument("--agg", help="comma list of: dynamic, group_time, overall, dynamic_staggered")
    est.set_defaults(func=cmd_estimate)

    dia = sub.add_parser("diagnose", help="timing-confoundedness diagnostics")
    _add_input_flags(dia)
    dia.set_defaults(func=cmd_diagnose)

    sim = sub.add_parser("simulate", help="generate synthetic panels or run a Monte Carlo study")
    sim.add_argument("--dgp", help="DGP config file (TOML/JSON)")
    sim.add_argument("--outdir", help="output directory")
    sim.add_argument("--seed", type=int, help="random seed (required)")
    sim.add_argument("--mc", type=int, help="run a Monte Carlo study with this many replications")
    sim.add_argument("--estimator", help="estimator for --mc mode")
    sim.add_argument("--control", help="control group for --mc mode")
    sim.add_argument("--agg", help="aggregations for --mc mode")
    sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (PanelError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EstimationError as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return 3
    except TwodidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
