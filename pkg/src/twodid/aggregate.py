"""Summary parameters as sparse weight maps over the cell estimates.

Every summary is a weighted sum of cell values. The builders here return
the weight map itself so that any summary can be audited cell by cell, and
so that bootstrap draws can reuse the per-unit contributions of the cells.

Cells whose recovery is unidentified (same-period adoption, no suitable
control cohort) are excluded and the remaining weights renormalized; the
excluded share is reported in the scheme metadata.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .doubledid import (
    Availability,
    CohortCounts,
    cohort_counts,
    did_weights,
    imp_weights,
)
from .errors import MissingCellError, NoAvailableCellError, NoControlCohortError
from .moments import CellTable
from .panel import NEVER, CellIndex, CohortMap


@dataclass
class WeightScheme:
    """Sparse map from cells to real weights defining a summary parameter."""

    weights: dict[CellIndex, float]
    label: str
    meta: dict = field(default_factory=dict)

    def total(self) -> float:
        return float(sum(self.weights.values()))


@dataclass
class SummaryEstimate:
    theta: float
    scheme: WeightScheme
    n_cells: int
    se: float | None = None
    ci: tuple[float, float] | None = None
    cluster_contrib: np.ndarray | None = None
    influence: np.ndarray | None = None


def scheme_imp(target: CellIndex, cohorts: CohortMap) -> WeightScheme:
    """Imputation weights for one treated-then-confounded target cell.

    Unit weight on the pre-confounding cell, plus/minus the control-cohort
    shares on the later-confounded trend cells; weights sum to one.
    """
    weights = imp_weights(cohort_counts(cohorts), target)
    return WeightScheme(weights, label="imp", meta={"target": target})


def scheme_did(target: CellIndex, cohorts: CohortMap) -> WeightScheme:
    """Second-difference weights for one confounded-then-treated target cell.

    Paired +1/-1 on the own-cohort cells and -share/+share on each control
    cohort's cells; weights sum to zero.
    """
    weights = did_weights(cohort_counts(cohorts), target)
    return WeightScheme(weights, label="did", meta={"target": target})


def _resolvable(weights: Mapping[CellIndex, float], cells: CellTable | None) -> bool:
    if cells is None:
        return True
    for comp in weights:
        est = cells.get(comp)
        if est is None or not est.ok:
            return False
    return True


def target_weights(
    counts: CohortCounts,
    availability: Availability,
    cell: CellIndex,
) -> dict[CellIndex, float] | None:
    """Flat cell weights recovering the target effect at one cell.

    Returns None when the cell is unidentified. Periods before the target
    event yield placebo weights (the same constructions, where the target
    effect is zero under the maintained assumptions).
    """
    g1, g2, t = cell
    if g1 == NEVER:
        return None
    if t < g2:
        return {cell: 1.0}
    if t < g1:
        # pre-treatment placebo with the confounding event already active
        try:
            return did_weights(counts, cell)
        except NoControlCohortError:
            return None
    if g1 == g2 or not availability(g1, g2, t):
        return None
    try:
        if g1 < g2:
            return imp_weights(counts, cell)
        return did_weights(counts, cell)
    except NoControlCohortError:
        return None


def scheme_group_time(
    g1: int,
    t: int,
    cohorts: CohortMap,
    availability: Availability,
    cells: CellTable | None = None,
) -> WeightScheme:
    """Cohort-level summary: the target effect of event-1 cohort g1 at t.

    Blends the per-cell recoveries over the event-2 cohorts realized within
    g1, weighted by their conditional shares among available cells.

    Raises:
        NoAvailableCellError: no event-2 cohort has an available recovery.
    """
    counts = cohort_counts(cohorts)
    by_g2 = counts.g2_by_g1.get(g1, {})
    placebo = t < g1
    candidates: dict[int, dict[CellIndex, float]] = {}
    basis: dict[int, int] = {}
    for g2, n in sorted(by_g2.items()):
        w = target_weights(counts, availability, CellIndex(g1, g2, t))
        if w is None:
            continue
        basis[g2] = n
        candidates[g2] = w
    if not basis:
        raise NoAvailableCellError(f"no available cell for cohort {g1} at t={t}")
    total = sum(basis.values())
    included = {g2: w for g2, w in candidates.items() if _resolvable(w, cells)}
    if not included:
        raise NoAvailableCellError(f"no resolvable cell for cohort {g1} at t={t}")
    kept = sum(basis[g2] for g2 in included)
    weights: dict[CellIndex, float] = {}
    for g2, w in included.items():
        share = basis[g2] / kept
        for comp, cw in w.items():
            weights[comp] = weights.get(comp, 0.0) + share * cw
    return WeightScheme(
        weights,
        label="group_time",
        meta={
            "g1": g1,
            "t": t,
            "placebo": placebo,
            "excluded_mass": 1.0 - kept / total,
            "shares": {g2: basis[g2] / kept for g2 in included},
        },
    )


def _blend(
    parts: list[tuple[float, WeightScheme]],
    label: str,
    meta: dict,
    excluded_mass: float,
) -> WeightScheme:
    weights: dict[CellIndex, float] = {}
    nested = 0.0
    for share, scheme in parts:
        nested += share * scheme.meta.get("excluded_mass", 0.0)
        for comp, cw in scheme.weights.items():
            weights[comp] = weights.get(comp, 0.0) + share * cw
    meta = dict(meta)
    meta["excluded_mass"] = excluded_mass + nested
    return WeightScheme(weights, label=label, meta=meta)


def scheme_dynamic(
    e1: int,
    cohorts: CohortMap,
    availability: Availability,
    n_periods: int,
    cells: CellTable | None = None,
) -> WeightScheme:
    """Event-study summary at horizon e1 = t - g1, cohort-share weighted.

    Negative e1 gives placebo estimates from pre-treatment periods. Note
    that e1 = -1 is the base period of every cohort and is identically zero
    by construction.
    """
    counts = cohort_counts(cohorts)
    basis = {
        g1: n
        for g1, n in sorted(counts.g1_counts.items())
        if g1 != NEVER and 2 <= g1 + e1 <= n_periods
    }
    if not basis:
        raise NoAvailableCellError(f"no cohort observed at horizon {e1}")
    total = sum(basis.values())
    parts: list[tuple[int, WeightScheme]] = []
    for g1, n in basis.items():
        try:
            parts.append((n, scheme_group_time(g1, g1 + e1, cohorts, availability, cells)))
        except NoAvailableCellError:
            continue
    if not parts:
        raise NoAvailableCellError(f"no available cohort at horizon {e1}")
    kept = sum(n for n, _ in parts)
    return _blend(
        [(n / kept, s) for n, s in parts],
        label="dynamic",
        meta={"e1": e1, "placebo": e1 < 0},
        excluded_mass=1.0 - kept / total,
    )


def scheme_dynamic_staggered(
    e1: int,
    s12: int,
    cohorts: CohortMap,
    availability: Availability,
    n_periods: int,
    cells: CellTable | None = None,
) -> WeightScheme:
    """Horizon-by-timing-gap summary over cohort pairs with g1 - g2 = s12."""
    counts = cohort_counts(cohorts)
    basis = {
        (g1, g2): n
        for (g1, g2), n in sorted(counts.pair_counts.items())
        if g1 != NEVER and g2 != NEVER and g1 - g2 == s12 and 2 <= g1 + e1 <= n_periods
    }
    if not basis:
        raise NoAvailableCellError(f"no cohort pair with gap {s12} at horizon {e1}")
    total = sum(basis.values())
    parts = []
    for (g1, g2), n in basis.items():
        w = target_weights(counts, availability, CellIndex(g1, g2, g1 + e1))
        if w is None or not _resolvable(w, cells):
            continue
        parts.append((n, WeightScheme(w, label="cell")))
    if not parts:
        raise NoAvailableCellError(f"no available pair with gap {s12} at horizon {e1}")
    kept = sum(n for n, _ in parts)
    return _blend(
        [(n / kept, s) for n, s in parts],
        label="dynamic_staggered",
        meta={"e1": e1, "s12": s12},
        excluded_mass=1.0 - kept / total,
    )


def scheme_overall(
    cohorts: CohortMap,
    availability: Availability,
    n_periods: int,
    cells: CellTable | None = None,
) -> WeightScheme:
    """Average post-treatment effect: share-weighted mean of the dynamic
    summaries over the horizons each cohort is observed at."""
    counts = cohort_counts(cohorts)
    finite = [g for g in counts.g1_counts if g != NEVER]
    if not finite:
        raise NoAvailableCellError("no treated event-1 cohort")
    horizons = range(0, n_periods - min(finite) + 1)
    basis = {}
    for e1 in horizons:
        mass = sum(
            n for g1, n in counts.g1_counts.items() if g1 != NEVER and g1 + e1 <= n_periods
        )
        if mass > 0:
            basis[e1] = mass
    total = sum(basis.values())
    parts = []
    for e1, mass in basis.items():
        try:
            parts.append((mass, scheme_dynamic(e1, cohorts, availability, n_periods, cells)))
        except NoAvailableCellError:
            continue
    if not parts:
        raise NoAvailableCellError("no available post-treatment horizon")
    kept = sum(m for m, _ in parts)
    return _blend(
        [(m / kept, s) for m, s in parts],
        label="overall",
        meta={},
        excluded_mass=1.0 - kept / total,
    )


def evaluate(scheme: WeightScheme, cells: CellTable) -> SummaryEstimate:
    """Weighted sum of cell estimates under a scheme.

    Per-unit contributions propagate as the weighted sum of the component
    contributions so bootstrap draws can reuse them.

    Raises:
        MissingCellError: the scheme references a cell with no estimate.
    """
    theta = 0.0
    have_contrib = True
    for comp, w in scheme.weights.items():
        est = cells.get(comp)
        if est is None or not est.ok:
            raise MissingCellError(comp)
        theta += w * est.att
        if est.cluster_contrib is None:
            have_contrib = False
    contrib = influence = None
    if have_contrib and scheme.weights:
        contrib = np.zeros(cells.n_units)
        influence = np.zeros(cells.n_units)
        for comp, w in scheme.weights.items():
            est = cells.get(comp)
            contrib += w * est.cluster_contrib
            influence += w * est.influence
    return SummaryEstimate(
        theta=float(theta),
        scheme=scheme,
        n_cells=len(scheme.weights),
        cluster_contrib=contrib,
        influence=influence,
    )
