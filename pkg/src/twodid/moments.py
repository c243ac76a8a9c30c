"""Cell-level treatment effect moments for the two-event design.

Each cell (g1, g2, t) is estimated as a long difference from the common base
period b = min(g1, g2) - 1, comparing the exact double cohort against units
not yet treated by either event (or never treated by either). Four moment
forms are provided:

- ``unc``: difference of raw group means of the long difference,
- ``ipw``: comparison units reweighted by p(X)/(1 - p(X)) from a two-event
  propensity score,
- ``or``:  long difference net of a control-sample regression function m(X),
- ``dr``:  both corrections combined (doubly robust).

With no covariates all four collapse to the unconditional moment exactly.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Iterator, Literal

import numpy as np
import pandas as pd
from scipy.special import expit

from .errors import (
    BasePeriodError,
    EmptyControlError,
    EmptyTreatedError,
    EstimationError,
    InsufficientControlsError,
    MissingCellError,
    NoVariationError,
    PerfectSeparationError,
    PropensityBoundaryError,
    RankDeficientDesignError,
)
from .panel import NEVER, CellIndex, CohortMap, ControlType, Panel

Estimator = Literal["unc", "ipw", "or", "dr"]
ESTIMATORS = ("unc", "ipw", "or", "dr")

# Finite-sample settings; fixed defaults, overridable per call.
PROPENSITY_TRIM = 0.995
MIN_CELL_SIZE = 2
MLE_TOL = 1e-8
MLE_MAX_ITER = 100

# Estimand of a cell per the ordering of (g1, g2, t): which effect the
# combined-event contrast carries in that period.
ESTIMAND_TARGET = "target_only"
ESTIMAND_CONF = "confounding_only"
ESTIMAND_COMBINED = "combined"
ESTIMAND_PRE = "pre"


def estimand_of(g1: int, g2: int, t: int) -> str:
    """Which effect a cell identifies, from the ordering of its indices alone."""
    after1 = t >= g1
    after2 = t >= g2
    if after1 and not after2:
        return ESTIMAND_TARGET
    if after2 and not after1:
        return ESTIMAND_CONF
    if after1 and after2:
        return ESTIMAND_COMBINED
    return ESTIMAND_PRE


@dataclass
class NuisanceFit:
    """Fitted nuisance values for one cell.

    Arrays are full-length (n_units,) with NaN outside the fitting sample.
    """

    propensity: np.ndarray | None = None
    outcome_reg: np.ndarray | None = None
    converged: bool = True
    max_propensity: float | None = None
    n_iterations: int = 0
    coefficients: np.ndarray | None = None


@dataclass
class CellEstimate:
    """One estimated cell with its per-unit (cluster) contributions.

    ``cluster_contrib`` holds each unit's signed share of the estimate and
    sums to ``att``. ``influence`` holds the group-demeaned version used by
    the multiplier bootstrap; it sums to zero and vanishes when outcomes are
    constant within groups.
    """

    cell: CellIndex
    att: float
    estimand: str
    n_treat: int
    n_control: int
    cluster_contrib: np.ndarray | None = None
    influence: np.ndarray | None = None
    status: str = "ok"
    note: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class CellTable:
    """Ordered collection of cell estimates keyed by (g1, g2, t)."""

    cells: dict[CellIndex, CellEstimate]
    estimator: str
    control_type: str
    n_units: int

    def get(self, cell: CellIndex) -> CellEstimate | None:
        return self.cells.get(cell)

    def att(self, cell: CellIndex) -> float:
        est = self.cells.get(cell)
        if est is None or not est.ok:
            raise MissingCellError(cell)
        return est.att

    def ok_cells(self) -> Iterator[CellEstimate]:
        return (c for c in self.cells.values() if c.ok)

    def __len__(self) -> int:
        return len(self.cells)

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "g1": 0 if c.cell.g1 == NEVER else c.cell.g1,
                "g2": 0 if c.cell.g2 == NEVER else c.cell.g2,
                "t": c.cell.t,
                "estimand": c.estimand,
                "att": c.att,
                "n_treat": c.n_treat,
                "n_control": c.n_control,
                "status": c.status if not c.note else f"{c.status};{c.note}",
            }
            for c in self.cells.values()
        ]
        return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# Estimation context: flat arrays shared by every cell of one panel
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class EstimationContext:
    y: np.ndarray
    x: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    gc: np.ndarray
    pairs: list[tuple[int, int]]
    pair_index: dict[tuple[int, int], int]
    pair_id: np.ndarray
    pair_counts: np.ndarray
    pair_min: np.ndarray
    pair_rows: list[np.ndarray]
    never_rows: np.ndarray
    n_units: int
    n_periods: int

    @property
    def k_covariates(self) -> int:
        return self.x.shape[1]


def build_context(panel: Panel, cohorts: CohortMap) -> EstimationContext:
    """Precompute double-cohort encodings used by every cell."""
    g1, g2 = cohorts.g1, cohorts.g2
    key = (g1.astype(np.int64) << 32) | g2.astype(np.int64)
    uniq, pair_id = np.unique(key, return_inverse=True)
    pairs = [(int(k >> 32), int(k & 0xFFFFFFFF)) for k in uniq]
    pair_counts = np.bincount(pair_id, minlength=len(pairs))
    pair_min = np.array([min(a, b) for a, b in pairs], dtype=np.int64)
    order = np.argsort(pair_id, kind="stable")
    bounds = np.searchsorted(pair_id[order], np.arange(len(pairs) + 1))
    pair_rows = [order[bounds[i] : bounds[i + 1]] for i in range(len(pairs))]
    pair_index = {p: i for i, p in enumerate(pairs)}
    never_idx = pair_index.get((NEVER, NEVER))
    never_rows = pair_rows[never_idx] if never_idx is not None else np.empty(0, np.int64)
    return EstimationContext(
        y=panel.outcome,
        x=panel.covariates,
        g1=g1,
        g2=g2,
        gc=cohorts.g_combined,
        pairs=pairs,
        pair_index=pair_index,
        pair_id=pair_id,
        pair_counts=pair_counts,
        pair_min=pair_min,
        pair_rows=pair_rows,
        never_rows=never_rows,
        n_units=panel.n_units,
        n_periods=panel.n_periods,
    )


_CTX_CACHE: "weakref.WeakKeyDictionary[CohortMap, EstimationContext]" = (
    weakref.WeakKeyDictionary()
)


def _ctx(panel: Panel, cohorts: CohortMap) -> EstimationContext:
    ctx = _CTX_CACHE.get(cohorts)
    if ctx is None or ctx.y is not panel.outcome:
        ctx = build_context(panel, cohorts)
        _CTX_CACHE[cohorts] = ctx
    return ctx


def _cell_rows(
    ctx: EstimationContext, cell: CellIndex, control_type: str
) -> tuple[np.ndarray, np.ndarray]:
    p = ctx.pair_index.get((cell.g1, cell.g2))
    treated = ctx.pair_rows[p] if p is not None else np.empty(0, np.int64)
    if control_type == "never":
        control = ctx.never_rows
    else:
        # untreated by either event over the whole differencing window
        mask = ctx.gc > max(cell.t, cell.base_period())
        if p is not None:
            mask = mask & (ctx.pair_id != p)
        control = np.flatnonzero(mask)
    return treated, control


def _long_diff(ctx: EstimationContext, cell: CellIndex) -> tuple[np.ndarray, int]:
    b = cell.base_period()
    if b < 1:
        raise BasePeriodError(cell)
    return ctx.y[:, cell.t - 1] - ctx.y[:, b - 1], b


def _check_cell(cell: CellIndex, treated: np.ndarray, control: np.ndarray, control_type: str):
    if len(treated) == 0:
        raise EmptyTreatedError(cell)
    if len(control) == 0:
        raise EmptyControlError(cell, control_type)


# ---------------------------------------------------------------------------
# Nuisance fits
# ---------------------------------------------------------------------------


def _newton_logit(
    design: np.ndarray, y: np.ndarray, tol: float, max_iter: int
) -> tuple[np.ndarray, np.ndarray, bool, int]:
    """Logistic MLE by Newton iterations with step-halving on non-increase."""
    beta = np.zeros(design.shape[1])
    eta = design @ beta
    loglik = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(eta)
        grad = design.T @ (y - p)
        if np.linalg.norm(grad) < tol:
            converged = True
            break
        w = np.clip(p * (1.0 - p), 1e-12, None)
        hessian = design.T @ (design * w[:, None])
        try:
            step = np.linalg.solve(hessian, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.pinv(hessian) @ grad
        # halve the step until the likelihood does not decrease
        scale = 1.0
        for _ in range(30):
            candidate = beta + scale * step
            eta_new = design @ candidate
            ll_new = float(np.sum(y * eta_new - np.logaddexp(0.0, eta_new)))
            if ll_new >= loglik - 1e-12:
                break
            scale *= 0.5
        else:
            break
        beta, eta, loglik = candidate, eta_new, ll_new
    p = expit(eta)
    # diverging fit that classifies the sample perfectly: separation
    if p[y == 1].min() > 1 - 1e-6 and p[y == 0].max() < 1e-6:
        raise PerfectSeparationError(
            "fitted propensities degenerate to class indicators"
        )
    return beta, p, converged, it


def fit_propensity(
    panel: Panel,
    cohorts: CohortMap,
    cell: CellIndex,
    control_type: ControlType = "not_yet",
    tol: float = MLE_TOL,
    max_iter: int = MLE_MAX_ITER,
) -> NuisanceFit:
    """Two-event propensity score: double-cohort membership on (1, X).

    Fit over the pooled treated + comparison sample by maximum likelihood.
    Requires at least one covariate and both classes present.

    Raises:
        NoVariationError: the pooled sample is a single class.
        PerfectSeparationError: a covariate combination separates the classes.
    """
    ctx = _ctx(panel, cohorts)
    if ctx.k_covariates < 1:
        raise EstimationError("propensity fit requires at least one covariate")
    treated, control = _cell_rows(ctx, cell, control_type)
    _check_cell(cell, treated, control, control_type)
    pooled = np.concatenate([treated, control])
    y = np.zeros(len(pooled))
    y[: len(treated)] = 1.0
    if y.min() == y.max():
        raise NoVariationError("pooled sample has a single class")
    design = np.column_stack([np.ones(len(pooled)), ctx.x[pooled]])
    beta, p, converged, it = _newton_logit(design, y, tol, max_iter)
    out = np.full(ctx.n_units, np.nan)
    out[pooled] = p
    return NuisanceFit(
        propensity=out,
        converged=converged,
        max_propensity=float(p.max()),
        n_iterations=it,
        coefficients=beta,
    )


def fit_outcome_reg(
    panel: Panel,
    cohorts: CohortMap,
    cell: CellIndex,
    control_type: ControlType = "not_yet",
) -> NuisanceFit:
    """Control-sample regression of the long difference on (1, X).

    Fitted values are produced for every unit in the cell (treated and
    control) so the ``or``/``dr`` moments can net them out.

    Raises:
        InsufficientControlsError: fewer controls than parameters.
        RankDeficientDesignError: collinear design over the control sample.
    """
    ctx = _ctx(panel, cohorts)
    treated, control = _cell_rows(ctx, cell, control_type)
    _check_cell(cell, treated, control, control_type)
    dy, _ = _long_diff(ctx, cell)
    k = ctx.k_covariates
    if len(control) < k + 1:
        raise InsufficientControlsError(
            f"{len(control)} controls for {k + 1} parameters in cell {cell}"
        )
    design = np.column_stack([np.ones(len(control)), ctx.x[control]])
    coef, _, rank, _ = np.linalg.lstsq(design, dy[control], rcond=None)
    if rank < k + 1:
        raise RankDeficientDesignError(f"rank {rank} < {k + 1} in cell {cell}")
    members = np.concatenate([treated, control])
    out = np.full(ctx.n_units, np.nan)
    out[members] = np.column_stack([np.ones(len(members)), ctx.x[members]]) @ coef
    return NuisanceFit(outcome_reg=out, coefficients=coef)


# ---------------------------------------------------------------------------
# Moments
# ---------------------------------------------------------------------------


def _assemble(
    ctx: EstimationContext,
    cell: CellIndex,
    att: float,
    treated: np.ndarray,
    control: np.ndarray,
    treat_vals: np.ndarray,
    control_vals: np.ndarray,
    control_weights: np.ndarray,
    with_contrib: bool,
    note: str = "",
) -> CellEstimate:
    contrib = influence = None
    if with_contrib:
        contrib = np.zeros(ctx.n_units)
        contrib[treated] = treat_vals
        contrib[control] -= control_vals
        influence = np.zeros(ctx.n_units)
        influence[treated] = treat_vals - treat_vals.mean()
        if len(control):
            influence[control] -= control_vals - control_weights * control_vals.sum()
    return CellEstimate(
        cell=cell,
        att=float(att),
        estimand=estimand_of(cell.g1, cell.g2, cell.t),
        n_treat=len(treated),
        n_control=len(control),
        cluster_contrib=contrib,
        influence=influence,
        note=note,
    )


def att_unc(
    panel: Panel,
    cohorts: CohortMap,
    cell: CellIndex,
    control_type: ControlType = "not_yet",
    with_contrib: bool = True,
) -> CellEstimate:
    """Unconditional moment: difference of group means of the long difference."""
    ctx = _ctx(panel, cohorts)
    treated, control = _cell_rows(ctx, cell, control_type)
    _check_cell(cell, treated, control, control_type)
    dy, _ = _long_diff(ctx, cell)
    att = dy[treated].mean() - dy[control].mean()
    n0 = len(control)
    return _assemble(
        ctx,
        cell,
        att,
        treated,
        control,
        dy[treated] / len(treated),
        dy[control] / n0,
        np.full(n0, 1.0 / n0),
        with_contrib,
    )


def _comparison_weights(
    p: np.ndarray, control: np.ndarray, trim: float
) -> tuple[np.ndarray, np.ndarray, int]:
    """Inverse-probability comparison weights p/(1-p), trimmed near 1."""
    pc = p[control]
    keep = pc <= trim
    n_trimmed = int((~keep).sum())
    kept = control[keep]
    if len(kept) == 0:
        raise PropensityBoundaryError("all comparison units above the trim threshold")
    pk = np.clip(pc[keep], 1e-12, trim)
    return kept, pk / (1.0 - pk), n_trimmed


def att_ipw(
    panel: Panel,
    cohorts: CohortMap,
    cell: CellIndex,
    control_type: ControlType = "not_yet",
    trim: float = PROPENSITY_TRIM,
    with_contrib: bool = True,
) -> CellEstimate:
    """Inverse-probability weighted moment.

    Treated units enter with equal weight; comparison units are reweighted by
    p(X)/(1 - p(X)) to match the treated covariate profile. With no
    covariates this equals the unconditional moment exactly.
    """
    ctx = _ctx(panel, cohorts)
    treated, control = _cell_rows(ctx, cell, control_type)
    _check_cell(cell, treated, control, control_type)
    dy, _ = _long_diff(ctx, cell)
    if ctx.k_covariates == 0:
        est = att_unc(panel, cohorts, cell, control_type, with_contrib)
        est.note = "no covariates"
        return est
    fit = fit_propensity(panel, cohorts, cell, control_type)
    kept, w, n_trimmed = _comparison_weights(fit.propensity, control, trim)
    w = w / w.sum()
    att = dy[treated].mean() - w @ dy[kept]
    return _assemble(
        ctx,
        cell,
        att,
        treated,
        kept,
        dy[treated] / len(treated),
        w * dy[kept],
        w,
        with_contrib,
        note=f"trimmed={n_trimmed}" if n_trimmed else "",
    )


def att_or(
    panel: Panel,
    cohorts: CohortMap,
    cell: CellIndex,
    control_type: ControlType = "not_yet",
    with_contrib: bool = True,
) -> CellEstimate:
    """Regression-adjusted moment: treated mean of dY - m(X)."""
    ctx = _ctx(panel, cohorts)
    treated, control = _cell_rows(ctx, cell, control_type)
    _check_cell(cell, treated, control, control_type)
    dy, _ = _long_diff(ctx, cell)
    if ctx.k_covariates == 0:
        mhat_t = np.full(len(treated), dy[control].mean())
    else:
        fit = fit_outcome_reg(panel, cohorts, cell, control_type)
        mhat_t = fit.outcome_reg[treated]
    att = (dy[treated] - mhat_t).mean()
    return _assemble(
        ctx,
        cell,
        att,
        treated,
        np.empty(0, np.int64),
        (dy[treated] - mhat_t) / len(treated),
        np.empty(0),
        np.empty(0),
        with_contrib,
    )


def att_dr(
    panel: Panel,
    cohorts: CohortMap,
    cell: CellIndex,
    control_type: ControlType = "not_yet",
    trim: float = PROPENSITY_TRIM,
    with_contrib: bool = True,
) -> CellEstimate:
    """Doubly robust moment combining both nuisance corrections.

    Consistent if either the propensity score or the outcome regression is
    correctly specified.
    """
    ctx = _ctx(panel, cohorts)
    treated, control = _cell_rows(ctx, cell, control_type)
    _check_cell(cell, treated, control, control_type)
    dy, _ = _long_diff(ctx, cell)
    if ctx.k_covariates == 0:
        est = att_unc(panel, cohorts, cell, control_type, with_contrib)
        est.note = "no covariates"
        return est
    pfit = fit_propensity(panel, cohorts, cell, control_type)
    ofit = fit_outcome_reg(panel, cohorts, cell, control_type)
    kept, w, n_trimmed = _comparison_weights(pfit.propensity, control, trim)
    w = w / w.sum()
    resid = dy - ofit.outcome_reg
    att = resid[treated].mean() - w @ resid[kept]
    return _assemble(
        ctx,
        cell,
        att,
        treated,
        kept,
        resid[treated] / len(treated),
        w * resid[kept],
        w,
        with_contrib,
        note=f"trimmed={n_trimmed}" if n_trimmed else "",
    )


_MOMENTS = {"unc": att_unc, "ipw": att_ipw, "or": att_or, "dr": att_dr}


def estimate_cell(
    panel: Panel,
    cohorts: CohortMap,
    cell: CellIndex,
    estimator: Estimator = "unc",
    control_type: ControlType = "not_yet",
    with_contrib: bool = True,
) -> CellEstimate:
    """Estimate one cell with the requested moment form."""
    return _MOMENTS[estimator](panel, cohorts, cell, control_type, with_contrib=with_contrib)


def _unc_table(
    ctx: EstimationContext,
    control_type: str,
    min_cell: int,
    with_contrib: bool,
) -> dict[CellIndex, CellEstimate]:
    """Vectorized unconditional cell table: one grouped pass per (t, base)."""
    n_pairs = len(ctx.pairs)
    T = ctx.n_periods
    treated_pairs = [i for i in range(n_pairs) if ctx.pair_min[i] != NEVER]
    n_never = len(ctx.never_rows)

    # group cells sharing the same (t, base) so dy is computed once per group
    by_tb: dict[tuple[int, int], list[int]] = {}
    for i in treated_pairs:
        b = int(ctx.pair_min[i]) - 1
        for t in range(2, T + 1):
            by_tb.setdefault((t, b), []).append(i)

    cells: dict[CellIndex, CellEstimate] = {}
    results: dict[CellIndex, tuple] = {}
    for (t, b), members in sorted(by_tb.items()):
        dy = ctx.y[:, t - 1] - ctx.y[:, b - 1]
        sums = np.bincount(ctx.pair_id, weights=dy, minlength=n_pairs)
        later = ctx.pair_min > max(t, b)
        later_sum = float(sums[later].sum())
        later_count = int(ctx.pair_counts[later].sum())
        never_idx = ctx.pair_index.get((NEVER, NEVER))
        for i in members:
            g1v, g2v = ctx.pairs[i]
            cell = CellIndex(g1v, g2v, t)
            n1 = int(ctx.pair_counts[i])
            own_later = bool(later[i])
            if control_type == "never":
                n0 = n_never
                c_sum = float(sums[never_idx]) if never_idx is not None else 0.0
            else:
                n0 = later_count - (n1 if own_later else 0)
                c_sum = later_sum - (float(sums[i]) if own_later else 0.0)
            results[cell] = (i, t, b, n1, n0, float(sums[i]), c_sum)

    for cell in sorted(results):
        i, t, b, n1, n0, t_sum, c_sum = results[cell]
        estimand = estimand_of(cell.g1, cell.g2, cell.t)
        if n1 == 0 or n0 == 0:
            status = "empty_treated" if n1 == 0 else f"no_{control_type}_control"
        elif n1 < min_cell or n0 < min_cell:
            status = "small_treated" if n1 < min_cell else "small_control"
        else:
            status = "ok"
        if status != "ok":
            cells[cell] = CellEstimate(cell, np.nan, estimand, n1, n0, status=status)
            continue
        att = t_sum / n1 - c_sum / n0
        contrib = influence = None
        if with_contrib:
            dy = ctx.y[:, t - 1] - ctx.y[:, b - 1]
            contrib = np.zeros(ctx.n_units)
            influence = np.zeros(ctx.n_units)
            rows = ctx.pair_rows[i]
            contrib[rows] = dy[rows] / n1
            influence[rows] = (dy[rows] - t_sum / n1) / n1
            if control_type == "never":
                crows = ctx.never_rows
            else:
                crows = np.flatnonzero((ctx.gc > max(t, b)) & (ctx.pair_id != i))
            contrib[crows] -= dy[crows] / n0
            influence[crows] -= (dy[crows] - c_sum / n0) / n0
        cells[cell] = CellEstimate(cell, float(att), estimand, n1, n0, contrib, influence)
    return cells


def estimate_all_cells(
    panel: Panel,
    cohorts: CohortMap,
    estimator: Estimator = "unc",
    control_type: ControlType = "not_yet",
    min_cell: int = MIN_CELL_SIZE,
    trim: float = PROPENSITY_TRIM,
    with_contrib: bool = True,
) -> CellTable:
    """Estimate every realized (g1, g2, t) cell, including pre-period cells.

    One cell per realized double cohort and each period t >= 2, using the
    common base period min(g1, g2) - 1 throughout. Cells without a valid
    comparison group, or below the minimum size, are recorded with a reason
    code instead of failing the run. With the ``ipw`` estimator a perfectly
    separated cell falls back to the unconditional moment and is flagged.
    """
    ctx = _ctx(panel, cohorts)
    if estimator == "unc" or ctx.k_covariates == 0:
        cells = _unc_table(ctx, control_type, min_cell, with_contrib)
        return CellTable(cells, estimator, control_type, ctx.n_units)

    cells: dict[CellIndex, CellEstimate] = {}
    T = ctx.n_periods
    for i, (g1v, g2v) in enumerate(ctx.pairs):
        if ctx.pair_min[i] == NEVER:
            continue
        for t in range(2, T + 1):
            cell = CellIndex(g1v, g2v, t)
            treated, control = _cell_rows(ctx, cell, control_type)
            estimand = estimand_of(g1v, g2v, t)
            n1, n0 = len(treated), len(control)
            if n1 == 0 or n0 == 0:
                status = "empty_treated" if n1 == 0 else f"no_{control_type}_control"
                cells[cell] = CellEstimate(cell, np.nan, estimand, n1, n0, status=status)
                continue
            if n1 < min_cell or n0 < min_cell:
                status = "small_treated" if n1 < min_cell else "small_control"
                cells[cell] = CellEstimate(cell, np.nan, estimand, n1, n0, status=status)
                continue
            kwargs = {"with_contrib": with_contrib}
            if estimator in ("ipw", "dr"):
                kwargs["trim"] = trim
            try:
                est = _MOMENTS[estimator](panel, cohorts, cell, control_type, **kwargs)
            except PerfectSeparationError:
                est = att_unc(panel, cohorts, cell, control_type, with_contrib)
                est.note = "separation_fallback"
            except EstimationError as exc:
                cells[cell] = CellEstimate(
                    cell, np.nan, estimand, n1, n0,
                    status=type(exc).__name__.removesuffix("Error"),
                )
                continue
            cells[cell] = est
    return CellTable(cells, estimator, control_type, ctx.n_units)
