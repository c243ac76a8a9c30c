"""Recovery of the target-event effect in periods confounded by the second event.

Cells with t before the confounding event carry the target effect directly.
Once the second event is active, the target effect is recovered by one of two
constructions that use same-cohort units not yet hit by the other event as
controls:

- treated-then-confounded (g1 < g2): impute the missing target effect from
  the pre-confounding level plus the trend of later-confounded cohorts,
- confounded-then-treated (g1 > g2): difference out the confounding trend
  with a second difference against later-treated cohorts.

Cohorts hit by both events in the same period are reported as unidentified.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
import pandas as pd

from .errors import (
    EstimationError,
    MissingCellError,
    MissingComponentCellError,
    NoControlCohortError,
)
from .moments import CellTable
from .panel import NEVER, CellIndex, CohortMap

METHOD_DIRECT = "direct"
METHOD_IMPUTATION = "imputation"
METHOD_DID = "did"
METHOD_UNIDENTIFIED = "unidentified"


@dataclass(frozen=True, eq=False)
class CohortCounts:
    """Full-sample cohort pair counts used for empirical share weights."""

    pair_counts: dict[tuple[int, int], int]
    g1_counts: dict[int, int]
    g2_counts: dict[int, int]
    g2_by_g1: dict[int, dict[int, int]]
    g1_by_g2: dict[int, dict[int, int]]
    n_units: int


_COUNT_CACHE: "weakref.WeakKeyDictionary[CohortMap, CohortCounts]" = (
    weakref.WeakKeyDictionary()
)


def cohort_counts(cohorts: CohortMap) -> CohortCounts:
    counts = _COUNT_CACHE.get(cohorts)
    if counts is not None:
        return counts
    pair_counts: dict[tuple[int, int], int] = {}
    key = (cohorts.g1.astype(np.int64) << 32) | cohorts.g2.astype(np.int64)
    uniq, n = np.unique(key, return_counts=True)
    for k, c in zip(uniq, n):
        pair_counts[(int(k >> 32), int(k & 0xFFFFFFFF))] = int(c)
    g1_counts: dict[int, int] = {}
    g2_counts: dict[int, int] = {}
    g2_by_g1: dict[int, dict[int, int]] = {}
    g1_by_g2: dict[int, dict[int, int]] = {}
    for (a, b), c in pair_counts.items():
        g1_counts[a] = g1_counts.get(a, 0) + c
        g2_counts[b] = g2_counts.get(b, 0) + c
        g2_by_g1.setdefault(a, {})[b] = c
        g1_by_g2.setdefault(b, {})[a] = c
    counts = CohortCounts(
        pair_counts, g1_counts, g2_counts, g2_by_g1, g1_by_g2, cohorts.n_units
    )
    _COUNT_CACHE[cohorts] = counts
    return counts


@dataclass(frozen=True)
class Availability:
    """Whether a suitable control cohort exists for a target cell.

    ``gbar2_of_g1`` maps each event-1 cohort to the latest event-2 cohort
    realized within it (NEVER acting as +infinity), and symmetrically for
    ``gbar1_of_g2``.
    """

    gbar2_of_g1: dict[int, int]
    gbar1_of_g2: dict[int, int]

    def __call__(self, g1: int, g2: int, t: int) -> bool:
        if g1 < g2:
            bound = self.gbar2_of_g1.get(g1)
            return bound is not None and g1 <= t < bound
        if g1 > g2:
            bound = self.gbar1_of_g2.get(g2)
            return bound is not None and g1 <= t < bound
        return False


def build_availability(cohorts: CohortMap) -> Availability:
    counts = cohort_counts(cohorts)
    gbar2 = {a: max(d) for a, d in counts.g2_by_g1.items()}
    gbar1 = {b: max(d) for b, d in counts.g1_by_g2.items()}
    return Availability(gbar2_of_g1=gbar2, gbar1_of_g2=gbar1)


@dataclass
class TargetEstimate:
    """The target-event effect for one cell with its component cells."""

    cell: CellIndex
    att1: float
    method: str
    components: list[tuple[CellIndex, float]]
    cluster_contrib: np.ndarray | None = None
    influence: np.ndarray | None = None
    status: str = "ok"
    placebo: bool = False

    @property
    def ok(self) -> bool:
        return self.status == "ok" and self.method != METHOD_UNIDENTIFIED


@dataclass
class TargetTable:
    targets: dict[CellIndex, TargetEstimate]

    def get(self, cell: CellIndex) -> TargetEstimate | None:
        return self.targets.get(cell)

    def ok_targets(self) -> Iterator[TargetEstimate]:
        return (t for t in self.targets.values() if t.ok)

    def __len__(self) -> int:
        return len(self.targets)

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "g1": 0 if e.cell.g1 == NEVER else e.cell.g1,
                "g2": 0 if e.cell.g2 == NEVER else e.cell.g2,
                "t": e.cell.t,
                "method": e.method,
                "att1": e.att1,
                "status": e.status,
            }
            for e in self.targets.values()
        ]
        return pd.DataFrame(rows)


def control_cohort_shares(
    counts: CohortCounts, event: int, own: int, t: int
) -> dict[int, float]:
    """Empirical share of each later-treated cohort in the control pool.

    For ``event=1`` this is P(G1 = s1 | G2 = own, G1 > t); for ``event=2``
    the symmetric quantity. Shares sum to one over the qualifying cohorts.
    """
    pool = counts.g1_by_g2 if event == 1 else counts.g2_by_g1
    by_cohort = pool.get(own, {})
    qualifying = {s: c for s, c in by_cohort.items() if s > t}
    total = sum(qualifying.values())
    if total == 0:
        raise NoControlCohortError(
            f"no event-{event} cohort beyond t={t} within cohort {own}"
        )
    return {s: c / total for s, c in qualifying.items()}


def did_weights(counts: CohortCounts, cell: CellIndex) -> dict[CellIndex, float]:
    """Second-difference weights for a confounded-then-treated cell (g1 > g2)."""
    g1, g2, t = cell
    weights: dict[CellIndex, float] = {}
    base = g1 - 1
    weights[CellIndex(g1, g2, t)] = weights.get(CellIndex(g1, g2, t), 0.0) + 1.0
    weights[CellIndex(g1, g2, base)] = weights.get(CellIndex(g1, g2, base), 0.0) - 1.0
    for s1, share in control_cohort_shares(counts, 1, g2, t).items():
        up = CellIndex(s1, g2, t)
        down = CellIndex(s1, g2, base)
        weights[up] = weights.get(up, 0.0) - share
        weights[down] = weights.get(down, 0.0) + share
    return weights


def imp_weights(counts: CohortCounts, cell: CellIndex) -> dict[CellIndex, float]:
    """Imputation weights for a treated-then-confounded cell (g1 < g2)."""
    g1, g2, t = cell
    weights: dict[CellIndex, float] = {}
    base = g2 - 1
    weights[CellIndex(g1, g2, base)] = 1.0
    for s2, share in control_cohort_shares(counts, 2, g1, t).items():
        up = CellIndex(g1, s2, t)
        down = CellIndex(g1, s2, base)
        weights[up] = weights.get(up, 0.0) + share
        weights[down] = weights.get(down, 0.0) - share
    return weights


def _combine(
    cells: CellTable, cell: CellIndex, weights: dict[CellIndex, float], method: str,
    placebo: bool = False,
) -> TargetEstimate:
    att1 = 0.0
    contrib = influence = None
    have_contrib = True
    for comp, w in weights.items():
        est = cells.get(comp)
        if est is None or not est.ok:
            raise MissingComponentCellError(comp)
        att1 += w * est.att
        if est.cluster_contrib is None:
            have_contrib = False
    if have_contrib:
        contrib = np.zeros(cells.n_units)
        influence = np.zeros(cells.n_units)
        for comp, w in weights.items():
            est = cells.get(comp)
            contrib += w * est.cluster_contrib
            influence += w * est.influence
    return TargetEstimate(
        cell=cell,
        att1=float(att1),
        method=method,
        components=sorted(weights.items()),
        cluster_contrib=contrib,
        influence=influence,
        placebo=placebo,
    )


def att_did_cell(cells: CellTable, cohorts: CohortMap, cell: CellIndex) -> TargetEstimate:
    """Target effect by second difference, for g1 > g2 and t >= g2.

    Own-cohort long difference from the pre-treatment base g1 - 1, minus the
    share-weighted long difference of cohorts treated by event 1 after t
    within the same event-2 cohort.
    """
    if not (cell.g1 > cell.g2 and cell.t >= cell.g2):
        raise EstimationError(f"cell {cell} is not in the did region")
    counts = cohort_counts(cohorts)
    return _combine(cells, cell, did_weights(counts, cell), METHOD_DID)


def att_imp_cell(cells: CellTable, cohorts: CohortMap, cell: CellIndex) -> TargetEstimate:
    """Target effect by imputation, for g1 < g2 and t >= g2.

    Pre-confounding level at g2 - 1 plus the share-weighted trend of same
    event-1 cohort units whose confounding event comes after t.
    """
    if not (cell.g1 < cell.g2 and cell.t >= cell.g2):
        raise EstimationError(f"cell {cell} is not in the imputation region")
    counts = cohort_counts(cohorts)
    return _combine(cells, cell, imp_weights(counts, cell), METHOD_IMPUTATION)


def dispatch_method(g1: int, g2: int, t: int, availability: Availability) -> str:
    """Which recovery applies to a cell; total over all index triples."""
    if t < g2:
        return METHOD_DIRECT
    if g1 == g2 or not availability(g1, g2, t):
        return METHOD_UNIDENTIFIED
    return METHOD_IMPUTATION if g1 < g2 else METHOD_DID


def att_dd(
    cells: CellTable,
    cohorts: CohortMap,
    cell: CellIndex,
    availability: Availability | None = None,
) -> TargetEstimate:
    """Target effect with automatic method dispatch.

    Before the confounding event the cell estimate is the target effect and
    is copied directly; afterwards the imputation or second-difference
    construction applies, when a suitable control cohort is available.
    """
    if availability is None:
        availability = build_availability(cohorts)
    method = dispatch_method(cell.g1, cell.g2, cell.t, availability)
    if method == METHOD_UNIDENTIFIED:
        return TargetEstimate(cell, np.nan, METHOD_UNIDENTIFIED, [])
    if method == METHOD_DIRECT:
        return _combine(cells, cell, {cell: 1.0}, METHOD_DIRECT)
    if method == METHOD_IMPUTATION:
        return att_imp_cell(cells, cohorts, cell)
    return att_did_cell(cells, cohorts, cell)


def att_dd_all(
    cells: CellTable, cohorts: CohortMap, availability: Availability | None = None
) -> TargetTable:
    """Target-effect estimates for every cell of every finite event-1 cohort.

    Failures are recorded per cell rather than raised, mirroring the cell
    table behaviour.
    """
    if availability is None:
        availability = build_availability(cohorts)
    counts = cohort_counts(cohorts)
    n_periods = max((c.t for c in cells.cells), default=1)
    out: dict[CellIndex, TargetEstimate] = {}
    pairs = sorted(p for p in counts.pair_counts if p[0] != NEVER)
    for g1, g2 in pairs:
        for t in range(2, n_periods + 1):
            cell = CellIndex(g1, g2, t)
            try:
                est = att_dd(cells, cohorts, cell, availability)
            except EstimationError as exc:
                est = TargetEstimate(
                    cell,
                    np.nan,
                    dispatch_method(g1, g2, t, availability),
                    [],
                    status=type(exc).__name__.removesuffix("Error"),
                )
            out[cell] = est
    return TargetTable(out)


def placebo_estimate(
    cells: CellTable, cohorts: CohortMap, cell: CellIndex
) -> TargetEstimate:
    """Placebo target estimate at a pre-treatment period t < g1.

    Applies the same constructions where the target effect is zero under the
    maintained assumptions: a direct copy before the confounding event, the
    second difference once it is active.
    """
    g1, g2, t = cell
    if t >= g1:
        raise EstimationError(f"cell {cell} is not a pre-treatment placebo")
    counts = cohort_counts(cohorts)
    if t < g2:
        return _combine(cells, cell, {cell: 1.0}, METHOD_DIRECT, placebo=True)
    return _combine(cells, cell, did_weights(counts, cell), METHOD_DID, placebo=True)


def pre_trend_dd(cells: CellTable, cohorts: CohortMap, g1: int, g2: int) -> list[TargetEstimate]:
    """Placebo estimates for a cohort pair over all pre-treatment periods."""
    if g1 == NEVER:
        raise EstimationError("pre-trend placebos require a finite event-1 cohort")
    out = []
    for t in range(2, g1):
        cell = CellIndex(g1, g2, t)
        try:
            out.append(placebo_estimate(cells, cohorts, cell))
        except EstimationError as exc:
            out.append(
                TargetEstimate(
                    cell,
                    np.nan,
                    METHOD_DIRECT if t < g2 else METHOD_DID,
                    [],
                    status=type(exc).__name__.removesuffix("Error"),
                    placebo=True,
                )
            )
    return out
