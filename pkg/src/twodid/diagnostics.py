"""Timing-confoundedness diagnostics and bias accounting for the naive design.

The naive estimator contrasts event-1 cohorts against units not yet (or
never) treated by event 1 alone, ignoring the second event. When the two
events are timing-correlated, the control group picks up the second event's
effect through its exposure trend; the ``gamma12`` statistic measures that
exposure-trend imbalance and, scaled by the confounding effect, the implied
bias.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .aggregate import evaluate, scheme_group_time
from .doubledid import Availability, build_availability
from .errors import (
    EmptyControlError,
    EmptyTreatedError,
    EstimationError,
    HeterogeneousTruthError,
    NoAvailableCellError,
)
from .moments import CellTable
from .panel import NEVER, CellIndex, CohortMap, ControlType, Panel


def _naive_groups(
    cohorts: CohortMap, g1: int, t: int, control_type: str
) -> tuple[np.ndarray, np.ndarray]:
    treated = np.flatnonzero(cohorts.g1 == g1)
    if control_type == "never":
        control = np.flatnonzero(cohorts.g1 == NEVER)
    else:
        control = np.flatnonzero(cohorts.g1 > t)
    cell = CellIndex(g1, NEVER, t)
    if len(treated) == 0:
        raise EmptyTreatedError(cell)
    if len(control) == 0:
        raise EmptyControlError(cell, control_type)
    return treated, control


def naive_cs_att(
    panel: Panel,
    cohorts: CohortMap,
    g1: int,
    t: int,
    control_type: ControlType = "not_yet",
) -> float:
    """One-event long-difference estimate for cohort g1 at t, ignoring event 2.

    Base period is g1 - 1. Controls are units not yet treated by event 1
    (``not_yet``) or never treated by event 1 (``never``); either way their
    event-2 exposure is unrestricted, which is what makes this naive.
    """
    if g1 - 1 < 1 or g1 == NEVER:
        raise EstimationError(f"invalid cohort {g1} for the naive contrast")
    treated, control = _naive_groups(cohorts, g1, t, control_type)
    dy = panel.outcome[:, t - 1] - panel.outcome[:, g1 - 2]
    return float(dy[treated].mean() - dy[control].mean())


def gamma12(
    panel: Panel,
    cohorts: CohortMap,
    g1: int,
    t: int,
    control_type: ControlType = "not_yet",
) -> float:
    """Exposure-trend imbalance of event 2 between cohort g1 and its controls.

    The share of units gaining event-2 treatment between the base period
    g1 - 1 and t, among the g1 cohort minus among the control group. Zero
    when event-2 timing is independent of event-1 timing; bounded in [-1, 1].
    """
    if g1 - 1 < 1 or g1 == NEVER:
        raise EstimationError(f"invalid cohort {g1} for the confoundedness diagnostic")
    treated, control = _naive_groups(cohorts, g1, t, control_type)
    gained = (cohorts.g2 > g1 - 1) & (cohorts.g2 <= t)
    return float(gained[treated].mean() - gained[control].mean())


@dataclass
class BiasDecomposition:
    """Accounting of the naive estimate into target, omitted-event, and
    interaction terms, on simulated data with known constant effects."""

    g1: int
    t: int
    control_type: str
    naive: float
    target: float
    omitted: float
    interaction: float
    gamma12: float
    p_confounded: float

    @property
    def residual(self) -> float:
        return self.naive - (self.target + self.omitted + self.interaction)


def bias_decomposition(
    sim_panel: Panel,
    sim_truth,
    g1: int,
    t: int,
    control_type: ControlType = "not_yet",
    cohorts: CohortMap | None = None,
) -> BiasDecomposition:
    """Decompose the naive estimate using the simulator's known truths.

    Requires homogeneous true effects; the omitted term is the confounding
    effect times the empirical exposure-trend imbalance, the interaction
    term the non-additive part times the cohort's confounded share.

    Raises:
        HeterogeneousTruthError: the simulated truth is not constant.
    """
    from .panel import derive_cohorts

    constants = sim_truth.constant_effects()
    if constants is None:
        raise HeterogeneousTruthError("decomposition requires constant true effects")
    att1_c, att2_c, att_c = constants
    if cohorts is None:
        cohorts = derive_cohorts(sim_panel)
    naive = naive_cs_att(sim_panel, cohorts, g1, t, control_type)
    gamma = gamma12(sim_panel, cohorts, g1, t, control_type)
    in_cohort = cohorts.g1 == g1
    p_conf = float((cohorts.g2[in_cohort] <= t).mean())
    return BiasDecomposition(
        g1=g1,
        t=t,
        control_type=control_type,
        naive=naive,
        target=att1_c,
        omitted=att2_c * gamma,
        interaction=(att_c - att1_c - att2_c) * p_conf,
        gamma12=gamma,
        p_confounded=p_conf,
    )


@dataclass
class RelativeBias:
    absolute: float
    relative_to_confounding: float | None
    relative_to_target: float | None


def relative_bias(
    gamma12_value: float, att2_estimate: float, att1_estimate: float
) -> RelativeBias:
    """Implied omitted-event bias and its size relative to each effect.

    Ratios are unavailable (None) when the reference effect is zero.
    """
    absolute = gamma12_value * att2_estimate
    rel_conf = absolute / att2_estimate if att2_estimate != 0 else None
    rel_target = absolute / att1_estimate if att1_estimate != 0 else None
    return RelativeBias(absolute, rel_conf, rel_target)


def diagnostics_table(
    panel: Panel,
    cohorts: CohortMap,
    cells: CellTable,
    control_type: ControlType = "not_yet",
    availability: Availability | None = None,
) -> pd.DataFrame:
    """Per (g1, t) comparison of the naive and the two-event designs.

    Columns: gamma12, the naive estimate, the recovered target effect
    (cohort-level summary of the cell recoveries), and their gap. The
    control group named by ``control_type`` is used on both sides.
    """
    if availability is None:
        availability = build_availability(cohorts)
    finite = sorted(g for g in np.unique(cohorts.g1) if g != NEVER)
    n_periods = panel.n_periods
    rows = []
    for g1 in finite:
        for t in range(2, n_periods + 1):
            try:
                naive = naive_cs_att(panel, cohorts, g1, t, control_type)
                gamma = gamma12(panel, cohorts, g1, t, control_type)
            except EstimationError:
                continue
            try:
                dd = evaluate(
                    scheme_group_time(g1, t, cohorts, availability, cells), cells
                ).theta
            except (NoAvailableCellError, EstimationError):
                dd = np.nan
            rows.append(
                {
                    "g1": g1,
                    "t": t,
                    "gamma12": gamma,
                    "naive_att": naive,
                    "dd_att": dd,
                    "gap": naive - dd,
                    "control_type": control_type,
                }
            )
    return pd.DataFrame(rows)
