"""End-to-end estimation pipeline and cluster-bootstrap inference.

Estimates are keyed tuples so that bootstrap replications align by cell,
target cell, or summary label. Two bootstrap modes are provided:

- ``nonparametric_cluster``: resample units with replacement and rerun the
  full pipeline, re-fitting nuisances (honest, the default),
- ``multiplier_rademacher``: perturb per-unit influence terms with +-1
  draws, holding nuisance fits fixed (fast).

Replication seeds derive from the user seed through a splittable seed
sequence, so results do not depend on scheduling or thread count.
"""

from __future__ import annotations

import multiprocessing
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import pandas as pd
from scipy.stats import norm

from .aggregate import (
    SummaryEstimate,
    evaluate,
    scheme_dynamic,
    scheme_dynamic_staggered,
    scheme_group_time,
    scheme_overall,
)
from .doubledid import Availability, TargetTable, att_dd_all, build_availability, cohort_counts
from .errors import ConfigError, EstimationError, NoAvailableCellError
from .moments import (
    MIN_CELL_SIZE,
    PROPENSITY_TRIM,
    CellTable,
    estimate_all_cells,
)
from .panel import NEVER, CellIndex, CohortMap, Panel, derive_cohorts
from .simulate import DgpConfig, gen_panel, gen_violation_panel, true_summary

AGGREGATIONS = ("dynamic", "group_time", "overall", "dynamic_staggered")


@dataclass(frozen=True)
class PipelineSpec:
    """What to estimate: moment form, control group, and summaries."""

    estimator: str = "unc"
    control_type: str = "not_yet"
    aggregations: tuple[str, ...] = ("dynamic",)
    e1_values: tuple[int, ...] | None = None
    s12_values: tuple[int, ...] | None = None
    min_cell: int = MIN_CELL_SIZE
    trim: float = PROPENSITY_TRIM


@dataclass
class PipelineResult:
    cells: CellTable
    targets: TargetTable
    summaries: dict[tuple, SummaryEstimate]
    availability: Availability
    spec: PipelineSpec


def _default_e1_range(cohorts: CohortMap, n_periods: int) -> list[int]:
    finite = [g for g in np.unique(cohorts.g1) if g != NEVER]
    if not finite:
        return []
    return list(range(2 - int(max(finite)), n_periods - int(min(finite)) + 1))


def run_pipeline(
    panel: Panel,
    cohorts: CohortMap | None = None,
    spec: PipelineSpec = PipelineSpec(),
    with_contrib: bool = False,
) -> PipelineResult:
    """Cells, target recoveries, and requested summaries for one panel."""
    if cohorts is None:
        cohorts = derive_cohorts(panel)
    cells = estimate_all_cells(
        panel,
        cohorts,
        spec.estimator,
        spec.control_type,
        min_cell=spec.min_cell,
        trim=spec.trim,
        with_contrib=with_contrib,
    )
    availability = build_availability(cohorts)
    targets = att_dd_all(cells, cohorts, availability)
    summaries: dict[tuple, SummaryEstimate] = {}
    T = panel.n_periods

    def put(key, scheme_builder):
        try:
            summaries[key] = evaluate(scheme_builder(), cells)
        except (NoAvailableCellError, EstimationError):
            pass

    for agg in spec.aggregations:
        if agg == "dynamic":
            e1s = spec.e1_values or _default_e1_range(cohorts, T)
            for e1 in e1s:
                put(
                    ("dynamic", int(e1)),
                    lambda e1=e1: scheme_dynamic(e1, cohorts, availability, T, cells),
                )
        elif agg == "group_time":
            for g1 in sorted(g for g in np.unique(cohorts.g1) if g != NEVER):
                for t in range(2, T + 1):
                    put(
                        ("group_time", int(g1), t),
                        lambda g1=g1, t=t: scheme_group_time(
                            g1, t, cohorts, availability, cells
                        ),
                    )
        elif agg == "overall":
            put(("overall",), lambda: scheme_overall(cohorts, availability, T, cells))
        elif agg == "dynamic_staggered":
            counts = cohort_counts(cohorts)
            gaps = spec.s12_values or sorted(
                {
                    g1 - g2
                    for (g1, g2) in counts.pair_counts
                    if g1 != NEVER and g2 != NEVER
                }
            )
            e1s = [e for e in (spec.e1_values or _default_e1_range(cohorts, T)) if e >= 0]
            for s12 in gaps:
                for e1 in e1s:
                    put(
                        ("dynamic_staggered", int(e1), int(s12)),
                        lambda e1=e1, s12=s12: scheme_dynamic_staggered(
                            e1, s12, cohorts, availability, T, cells
                        ),
                    )
        else:
            raise ConfigError(f"unknown aggregation {agg!r}; expected one of {AGGREGATIONS}")
    return PipelineResult(cells, targets, summaries, availability, spec)


def flatten_estimates(result: PipelineResult) -> dict[tuple, float]:
    """All reportable point estimates keyed for bootstrap alignment."""
    out: dict[tuple, float] = {}
    for est in result.cells.ok_cells():
        out[("cell", est.cell.g1, est.cell.g2, est.cell.t)] = est.att
    for tgt in result.targets.ok_targets():
        out[("target", tgt.cell.g1, tgt.cell.g2, tgt.cell.t)] = tgt.att1
    for key, summ in result.summaries.items():
        out[("summary",) + key] = summ.theta
    return out


def _influence_rows(result: PipelineResult, keys: list[tuple]) -> np.ndarray:
    rows = np.zeros((len(keys), result.cells.n_units))
    for i, key in enumerate(keys):
        if key[0] == "cell":
            rows[i] = result.cells.get(CellIndex(*key[1:])).influence
        elif key[0] == "target":
            rows[i] = result.targets.get(CellIndex(*key[1:])).influence
        else:
            rows[i] = result.summaries[key[1:]].influence
    return rows


@dataclass(frozen=True)
class BootstrapConfig:
    """Cluster-bootstrap settings; the cluster is always the unit."""

    replications: int
    seed: int
    ci_level: float = 0.95
    method: Literal["nonparametric_cluster", "multiplier_rademacher"] = (
        "nonparametric_cluster"
    )


@dataclass
class InferenceRecord:
    estimate: float
    se: float
    ci_lo: float
    ci_hi: float
    ci_normal_lo: float
    ci_normal_hi: float
    n_used: int
    n_dropped: int


@dataclass
class BootstrapResult:
    base: PipelineResult
    records: dict[tuple, InferenceRecord]
    config: BootstrapConfig
    drop_rate: float
    reliable: bool

    def record(self, key: tuple) -> InferenceRecord | None:
        return self.records.get(key)


_WORKER_STATE: dict = {}


def _init_worker(panel, cohorts, spec, seqs):
    _WORKER_STATE["args"] = (panel, cohorts, spec, seqs)


def _one_replication(r: int) -> dict[tuple, float]:
    panel, cohorts, spec, seqs = _WORKER_STATE["args"]
    rng = np.random.default_rng(seqs[r])
    idx = rng.integers(0, panel.n_units, panel.n_units)
    resampled = panel.take(idx)
    res = run_pipeline(resampled, cohorts.take(idx), spec, with_contrib=False)
    return flatten_estimates(res)


def bootstrap(
    panel: Panel,
    pipeline_spec: PipelineSpec,
    config: BootstrapConfig,
    cohorts: CohortMap | None = None,
    threads: int = 1,
) -> BootstrapResult:
    """Standard errors and confidence intervals for every pipeline estimate.

    Nonparametric mode resamples units with replacement and reruns the full
    pipeline; multiplier mode sign-perturbs the per-unit influence terms of
    the base run. Replications where an estimate degenerates (a cell loses
    its groups) are dropped for that estimate and counted; the result is
    flagged unreliable when more than 10% of replications drop anywhere.

    Percentile intervals are reported alongside normal-approximation ones.
    """
    if config.replications < 1:
        raise ConfigError("bootstrap requires at least one replication")
    if config.seed is None:
        raise ConfigError("bootstrap requires an explicit seed")
    if cohorts is None:
        cohorts = derive_cohorts(panel)
    multiplier = config.method == "multiplier_rademacher"
    base = run_pipeline(panel, cohorts, pipeline_spec, with_contrib=multiplier)
    estimates = flatten_estimates(base)
    keys = list(estimates)
    theta = np.array([estimates[k] for k in keys])
    B = config.replications
    n = panel.n_units
    seqs = np.random.SeedSequence(config.seed).spawn(B)

    if multiplier:
        psi = _influence_rows(base, keys)
        draws = np.empty((B, len(keys)))
        for r in range(B):
            eps = np.random.default_rng(seqs[r]).integers(0, 2, n) * 2 - 1
            draws[r] = theta + psi @ eps
    else:
        draws = np.full((B, len(keys)), np.nan)
        if threads > 1 and hasattr(multiprocessing, "get_context"):
            try:
                ctx = multiprocessing.get_context("fork")
            except ValueError:
                ctx = None
        else:
            ctx = None
        if ctx is not None and threads > 1:
            with ctx.Pool(
                threads, initializer=_init_worker, initargs=(panel, cohorts, pipeline_spec, seqs)
            ) as pool:
                reps = pool.map(_one_replication, range(B))
        else:
            _init_worker(panel, cohorts, pipeline_spec, seqs)
            reps = [_one_replication(r) for r in range(B)]
        for r, rep in enumerate(reps):
            for j, key in enumerate(keys):
                if key in rep:
                    draws[r, j] = rep[key]

    alpha = 1.0 - config.ci_level
    z = float(norm.ppf(1.0 - alpha / 2.0))
    records: dict[tuple, InferenceRecord] = {}
    total_dropped = 0
    worst = 0
    for j, key in enumerate(keys):
        col = draws[:, j]
        ok = col[~np.isnan(col)]
        n_used = len(ok)
        n_dropped = B - n_used
        total_dropped += n_dropped
        worst = max(worst, n_dropped)
        if n_used >= 2:
            se = float(np.std(ok, ddof=1))
            lo, hi = np.quantile(ok, [alpha / 2.0, 1.0 - alpha / 2.0])
        else:
            se, lo, hi = np.nan, np.nan, np.nan
        records[key] = InferenceRecord(
            estimate=float(theta[j]),
            se=se,
            ci_lo=float(lo),
            ci_hi=float(hi),
            ci_normal_lo=float(theta[j] - z * se),
            ci_normal_hi=float(theta[j] + z * se),
            n_used=n_used,
            n_dropped=n_dropped,
        )
    drop_rate = total_dropped / (B * max(len(keys), 1))
    return BootstrapResult(
        base=base,
        records=records,
        config=config,
        drop_rate=drop_rate,
        reliable=worst <= 0.1 * B,
    )


def mc_study(
    dgp_config: DgpConfig,
    estimator: str = "unc",
    replications: int = 100,
    seed: int = 0,
    control_type: str = "not_yet",
    aggregations: tuple[str, ...] = ("dynamic",),
    e1_values: tuple[int, ...] | None = None,
    bootstrap_config: BootstrapConfig | None = None,
    violation: str | None = None,
    violation_size: float = 0.5,
) -> pd.DataFrame:
    """Simulate and re-estimate R times; bias, MC error, RMSE, and coverage.

    Each replication draws a fresh panel (seeded from a splittable sequence),
    runs the pipeline, and compares every estimate to the generator's truth.
    Summary truths are evaluated per replication through each realized
    weighting scheme. Coverage columns are filled when a bootstrap
    configuration is supplied.
    """
    spec = PipelineSpec(
        estimator=estimator,
        control_type=control_type,
        aggregations=aggregations,
        e1_values=e1_values,
    )
    root = np.random.SeedSequence(seed)
    children = root.spawn(replications)
    per_key: dict[tuple, list[tuple[float, float, bool | None]]] = {}
    failures: dict[tuple, int] = {}
    import dataclasses as _dc

    for r in range(replications):
        sub = children[r].generate_state(2, dtype=np.uint64)
        cfg = _dc.replace(dgp_config, seed=int(sub[0]))
        if violation is None:
            panel, truth = gen_panel(cfg)
        else:
            panel, truth = gen_violation_panel(cfg, violation, violation_size)
        cohorts = derive_cohorts(panel)
        boot = None
        if bootstrap_config is not None:
            boot = bootstrap(
                panel,
                spec,
                _dc.replace(bootstrap_config, seed=int(sub[1])),
                cohorts=cohorts,
            )
            result = boot.base
        else:
            result = run_pipeline(panel, cohorts, spec, with_contrib=False)
        flat = flatten_estimates(result)
        for key, est in flat.items():
            try:
                if key[0] == "cell":
                    true = truth.true_cell(key[1], key[2], key[3])
                elif key[0] == "target":
                    true = truth.true_att1(key[1], key[2], key[3])
                else:
                    true = true_summary(truth, result.summaries[key[1:]].scheme)
            except EstimationError:
                failures[key] = failures.get(key, 0) + 1
                continue
            covered = None
            if boot is not None:
                rec = boot.records.get(key)
                if rec is not None and np.isfinite(rec.ci_lo):
                    covered = rec.ci_lo <= true <= rec.ci_hi
            per_key.setdefault(key, []).append((est, true, covered))

    rows = []
    for key in sorted(per_key):
        entries = per_key[key]
        est = np.array([e for e, _, _ in entries])
        true = np.array([t for _, t, _ in entries])
        err = est - true
        n_ok = len(entries)
        cov = [c for _, _, c in entries if c is not None]
        rows.append(
            {
                "key": "/".join(map(str, key)),
                "n_ok": n_ok,
                "n_failed": replications - n_ok + failures.get(key, 0),
                "mean_estimate": float(est.mean()),
                "mean_true": float(true.mean()),
                "bias": float(err.mean()),
                "mc_se": float(err.std(ddof=1) / np.sqrt(n_ok)) if n_ok > 1 else np.nan,
                "rmse": float(np.sqrt((err**2).mean())),
                "coverage": float(np.mean(cov)) if cov else np.nan,
            }
        )
    return pd.DataFrame(rows)
