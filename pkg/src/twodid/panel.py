"""Panel ingestion, validation, and cohort derivation.

Data is held in matrix form (units x periods) after validation. Periods are
re-indexed to contiguous 1..T in the order of the original labels, which are
retained for reporting. Never-treated units carry the ``NEVER`` sentinel,
which compares above any finite period so that ``min`` arithmetic treats it
as +infinity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Mapping, NamedTuple, Sequence

import numpy as np
import pandas as pd

from .errors import PanelError

#: Sentinel cohort value for never-treated units. Serialized as 0 in cohort
#: CSV columns and as null in JSON.
NEVER: int = 2**31 - 1

ControlType = Literal["never", "not_yet"]
SCHEMA_KEYS = {"unit", "time", "outcome", "d1", "d2", "cohort1", "cohort2", "covariates"}


class CellIndex(NamedTuple):
    """Index of a double-cohort/time cell: event-1 cohort, event-2 cohort, period."""

    g1: int
    g2: int
    t: int

    def base_period(self) -> int:
        return min(self.g1, self.g2) - 1


def cohort_label(g: int) -> str:
    """Render a cohort value for CSV output (0 denotes never-treated)."""
    return "0" if g == NEVER else str(g)


@dataclass(frozen=True, eq=False)
class Panel:
    """Balanced long panel stored as (n_units, n_periods) matrices.

    ``d1`` and ``d2`` are absorbing treatment indicators for the target and
    confounding event. Covariates are time-invariant, one row per unit.
    """

    outcome: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    covariates: np.ndarray
    unit_ids: np.ndarray
    period_labels: np.ndarray

    @property
    def n_units(self) -> int:
        return self.outcome.shape[0]

    @property
    def n_periods(self) -> int:
        return self.outcome.shape[1]

    @property
    def k_covariates(self) -> int:
        return self.covariates.shape[1]

    def take(self, rows: np.ndarray, unit_ids: np.ndarray | None = None) -> "Panel":
        """Row-subset (or resample) the panel without re-validating."""
        if unit_ids is None:
            unit_ids = np.arange(len(rows), dtype=self.unit_ids.dtype)
        return Panel(
            outcome=self.outcome[rows],
            d1=self.d1[rows],
            d2=self.d2[rows],
            covariates=self.covariates[rows],
            unit_ids=unit_ids,
            period_labels=self.period_labels,
        )

    def to_frame(self) -> pd.DataFrame:
        """Long-format view with original period labels."""
        n, T = self.outcome.shape
        k = self.k_covariates
        data = {
            "unit": np.repeat(self.unit_ids, T),
            "period": np.tile(self.period_labels, n),
            "outcome": self.outcome.ravel(),
            "d1": self.d1.ravel(),
            "d2": self.d2.ravel(),
        }
        for j in range(k):
            data[f"x{j + 1}"] = np.repeat(self.covariates[:, j], T)
        return pd.DataFrame(data)


@dataclass(frozen=True, eq=False)
class CohortMap:
    """Per-unit first-treatment periods for each event and their combination.

    ``g_combined`` is the elementwise minimum of ``g1`` and ``g2`` with NEVER
    acting as +infinity. ``cohort_lists`` maps each realized cohort value to
    the unit row indices in it, for each of the three events.
    """

    g1: np.ndarray
    g2: np.ndarray
    g_combined: np.ndarray
    cohort_lists: dict[str, dict[int, np.ndarray]] = field(repr=False)

    @property
    def n_units(self) -> int:
        return len(self.g1)

    def take(self, rows: np.ndarray) -> "CohortMap":
        g1 = self.g1[rows]
        g2 = self.g2[rows]
        return CohortMap(
            g1=g1,
            g2=g2,
            g_combined=np.minimum(g1, g2),
            cohort_lists=_cohort_lists(g1, g2),
        )


def _parse_schema(schema: Mapping[str, object]) -> dict:
    unknown = set(schema) - SCHEMA_KEYS
    if unknown:
        raise PanelError("unknown schema keys", ", ".join(sorted(map(str, unknown))))
    for key in ("unit", "time", "outcome"):
        if key not in schema:
            raise PanelError("missing schema key", key)
    for d, c in (("d1", "cohort1"), ("d2", "cohort2")):
        if d not in schema and c not in schema:
            raise PanelError("missing schema key", f"{d} or {c}")
        if d in schema and c in schema:
            raise PanelError("conflicting schema keys", f"{d} and {c}")
    covs = list(schema.get("covariates", []) or [])
    return {**schema, "covariates": covs}


def _numeric_column(df: pd.DataFrame, col: str, what: str) -> np.ndarray:
    try:
        values = pd.to_numeric(df[col], errors="raise")
    except (ValueError, TypeError) as exc:
        raise PanelError(f"non-numeric {what}", f"column '{col}'") from exc
    if values.isna().any():
        raise PanelError(f"non-numeric {what}", f"column '{col}' has missing values")
    return values.to_numpy()


def _pivot(df: pd.DataFrame, unit_col: str, time_col: str, values: np.ndarray) -> np.ndarray:
    """Reshape a validated long column to (n_units, n_periods)."""
    wide = pd.DataFrame(
        {"u": df["_u"].to_numpy(), "t": df["_t"].to_numpy(), "v": values}
    ).pivot(index="u", columns="t", values="v")
    return wide.to_numpy()


def load_panel(source, schema: Mapping[str, object]) -> Panel:
    """Read and validate a long-format CSV into a :class:`Panel`.

    Args:
        source: path or file object of a header-bearing UTF-8 CSV.
        schema: column mapping with keys ``unit``, ``time``, ``outcome``,
            treatment columns ``d1``/``d2`` (binary indicators) or
            ``cohort1``/``cohort2`` (first treated period, 0/empty = never),
            and optional ``covariates`` (list of column names).

    Raises:
        PanelError: duplicate (unit, period) rows, unbalanced units,
            non-monotone treatment indicators, non-numeric outcome, or a
            covariate that varies within unit.
    """
    spec = _parse_schema(schema)
    df = pd.read_csv(source)
    needed = [spec["unit"], spec["time"], spec["outcome"]]
    for key in ("d1", "d2", "cohort1", "cohort2"):
        if key in spec:
            needed.append(spec[key])
    needed += spec["covariates"]
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise PanelError("missing column", ", ".join(map(str, missing)))

    units = df[spec["unit"]].to_numpy()
    times = _numeric_column(df, spec["time"], "period")
    if not np.all(times == times.astype(np.int64)):
        raise PanelError("non-integer period", f"column '{spec['time']}'")
    times = times.astype(np.int64)

    unit_ids, u_codes = np.unique(units, return_inverse=True)
    period_labels, t_codes = np.unique(times, return_inverse=True)
    n, T = len(unit_ids), len(period_labels)

    key = u_codes.astype(np.int64) * T + t_codes
    if len(np.unique(key)) != len(df):
        dup = np.sort(key)
        pos = int(dup[np.flatnonzero(np.diff(dup) == 0)[0]])
        raise PanelError(
            "duplicate (unit, period)",
            f"unit={unit_ids[pos // T]!r} period={period_labels[pos % T]!r}",
        )
    if len(df) != n * T:
        counts = np.bincount(u_codes, minlength=n)
        bad = unit_ids[int(np.argmin(counts))]
        raise PanelError("unbalanced unit", f"unit={bad!r} lacks some periods")

    df = df.assign(_u=u_codes, _t=t_codes)

    outcome = _pivot(df, "_u", "_t", _numeric_column(df, spec["outcome"], "outcome"))

    d_mats = []
    for event, (d_key, c_key) in enumerate((("d1", "cohort1"), ("d2", "cohort2")), 1):
        if d_key in spec:
            vals = _numeric_column(df, spec[d_key], "treatment indicator")
            if not np.isin(vals, (0, 1)).all():
                raise PanelError(
                    "non-binary treatment indicator", f"column '{spec[d_key]}'"
                )
            mat = _pivot(df, "_u", "_t", vals).astype(np.int8)
        else:
            vals = df[spec[c_key]].fillna(0)
            vals = _numeric_column(df.assign(**{spec[c_key]: vals}), spec[c_key], "cohort")
            cmat = _pivot(df, "_u", "_t", vals)
            per_unit = cmat[:, 0]
            if not np.all(cmat == per_unit[:, None]):
                raise PanelError("cohort varies within unit", f"column '{spec[c_key]}'")
            # 0/empty denotes never; otherwise first treated period in label space
            mat = (
                (period_labels[None, :] >= per_unit[:, None]) & (per_unit[:, None] > 0)
            ).astype(np.int8)
        if np.any(np.diff(mat, axis=1) < 0):
            bad = int(np.argmax(np.any(np.diff(mat, axis=1) < 0, axis=1)))
            raise PanelError(
                "non-monotone treatment",
                f"event {event}, unit={unit_ids[bad]!r}",
            )
        if mat[:, 0].any():
            bad = int(np.argmax(mat[:, 0]))
            raise PanelError(
                "treated at first period",
                f"event {event}, unit={unit_ids[bad]!r} (pre-trim such units)",
            )
        d_mats.append(mat)

    if spec["covariates"]:
        cols = []
        for c in spec["covariates"]:
            mat = _pivot(df, "_u", "_t", _numeric_column(df, c, "covariate"))
            if not np.all(mat == mat[:, :1]):
                bad = int(np.argmax(np.any(mat != mat[:, :1], axis=1)))
                raise PanelError(
                    "covariate varies within unit", f"column '{c}', unit={unit_ids[bad]!r}"
                )
            cols.append(mat[:, 0])
        covariates = np.column_stack(cols).astype(np.float64)
    else:
        covariates = np.empty((n, 0), dtype=np.float64)

    return Panel(
        outcome=outcome.astype(np.float64),
        d1=d_mats[0],
        d2=d_mats[1],
        covariates=covariates,
        unit_ids=unit_ids,
        period_labels=period_labels,
    )


def write_panel(panel: Panel, path) -> None:
    """Write a panel back to long-format CSV (round-trips with load_panel)."""
    panel.to_frame().to_csv(path, index=False)


def from_arrays(
    outcome: np.ndarray,
    d1: np.ndarray,
    d2: np.ndarray,
    covariates: np.ndarray | None = None,
    unit_ids: np.ndarray | None = None,
    period_labels: np.ndarray | None = None,
) -> Panel:
    """Build a panel from matrices, enforcing the same invariants as load_panel."""
    outcome = np.asarray(outcome, dtype=np.float64)
    n, T = outcome.shape
    d1 = np.asarray(d1, dtype=np.int8)
    d2 = np.asarray(d2, dtype=np.int8)
    for event, mat in ((1, d1), (2, d2)):
        if mat.shape != (n, T):
            raise PanelError("shape mismatch", f"d{event}")
        if np.any(np.diff(mat, axis=1) < 0):
            raise PanelError("non-monotone treatment", f"event {event}")
        if mat[:, 0].any():
            raise PanelError("treated at first period", f"event {event}")
    if covariates is None:
        covariates = np.empty((n, 0), dtype=np.float64)
    covariates = np.asarray(covariates, dtype=np.float64)
    if unit_ids is None:
        unit_ids = np.arange(n, dtype=np.int64)
    if period_labels is None:
        period_labels = np.arange(1, T + 1, dtype=np.int64)
    return Panel(outcome, d1, d2, covariates, np.asarray(unit_ids), np.asarray(period_labels))


def _first_treated(d: np.ndarray) -> np.ndarray:
    ever = d.any(axis=1)
    first = d.argmax(axis=1) + 1  # periods are 1-based internally
    return np.where(ever, first, NEVER).astype(np.int64)


def _cohort_lists(g1: np.ndarray, g2: np.ndarray) -> dict[str, dict[int, np.ndarray]]:
    gc = np.minimum(g1, g2)
    out: dict[str, dict[int, np.ndarray]] = {}
    for name, g in (("g1", g1), ("g2", g2), ("g_combined", gc)):
        out[name] = {int(v): np.flatnonzero(g == v) for v in np.unique(g)}
    return out


def derive_cohorts(panel: Panel) -> CohortMap:
    """First-treatment period per unit for each event and the combined event.

    The combined event treats a unit once either event has; its cohort is the
    elementwise minimum of the two event cohorts.
    """
    g1 = _first_treated(panel.d1)
    g2 = _first_treated(panel.d2)
    return CohortMap(
        g1=g1,
        g2=g2,
        g_combined=np.minimum(g1, g2),
        cohort_lists=_cohort_lists(g1, g2),
    )


def cell_membership(
    cohorts: CohortMap,
    cell: CellIndex,
    role: Literal["treated", "control"],
    control_type: ControlType = "not_yet",
) -> np.ndarray:
    """Unit row indices forming a cell's treated or control group.

    Treated units are the exact double cohort (g1, g2). Never-treated controls
    are untouched by both events; not-yet controls are untreated by the
    combined event over the whole differencing window, i.e. their combined
    cohort lies beyond max(cell.t, base period), and they are not in the
    treated double cohort. For post-treatment cells the window endpoint is
    just ``cell.t``; the max only binds for pre-period placebo cells, whose
    base period comes after ``t``.
    """
    in_pair = (cohorts.g1 == cell.g1) & (cohorts.g2 == cell.g2)
    if role == "treated":
        return np.flatnonzero(in_pair)
    if control_type == "never":
        return np.flatnonzero((cohorts.g1 == NEVER) & (cohorts.g2 == NEVER))
    if control_type == "not_yet":
        horizon = max(cell.t, cell.base_period())
        return np.flatnonzero((cohorts.g_combined > horizon) & ~in_pair)
    raise ValueError(f"unknown control_type {control_type!r}")
