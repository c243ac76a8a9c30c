"""Synthetic two-event staggered panels with known effect surfaces.

The generator builds outcomes as unit effect + common trend + own-event
effects + optional interaction + noise, so the maintained identification
assumptions hold by construction. Each assumption can be broken in
isolation through ``gen_violation_panel`` to give diagnostics something to
detect.

Cohort timing follows either an explicit joint probability table over
(g1, g2) pairs or a Gaussian copula over adoption times with correlation
``rho``; the copula's implied exact table is available for tests via
``implied_cohort_table``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import multivariate_normal, norm

from .errors import ConfigError, MissingCellError
from .panel import NEVER, CellIndex, Panel, from_arrays

_PROB_TOL = 1e-8


@dataclass(frozen=True)
class EffectSurface:
    """Treatment effect as a function of event time, zero before the event.

    ``by_event_time`` overrides ``base`` with a profile over e = t - g,
    extended at its last value. ``other_cohort_trend`` adds a slope in event
    time for units that are also in a finite cohort of the other event,
    breaking the parallel-treatment-effects structure when nonzero.
    """

    base: float = 0.0
    by_event_time: tuple[float, ...] | None = None
    other_cohort_trend: float = 0.0

    def value(self, own: int, other: int, t: int) -> float:
        if own == NEVER or t < own:
            return 0.0
        e = t - own
        if self.by_event_time:
            out = self.by_event_time[min(e, len(self.by_event_time) - 1)]
        else:
            out = self.base
        if self.other_cohort_trend and other != NEVER:
            out += self.other_cohort_trend * (e + 1)
        return out


@dataclass(frozen=True)
class DgpConfig:
    """Configuration of the synthetic data generating process."""

    n_units: int
    n_periods: int
    cohort_probs: dict | None = None
    rho: float | None = None
    g1_marginal: dict | None = None
    g2_marginal: dict | None = None
    att1: EffectSurface = field(default_factory=EffectSurface)
    att2: EffectSurface = field(default_factory=EffectSurface)
    interaction: float = 0.0
    unit_fe_sd: float = 0.0
    time_trend: float = 0.0
    noise_sd: float = 0.0
    k_covariates: int = 0
    x_trend: tuple[float, ...] = ()
    x_trend_sq: tuple[float, ...] = ()
    selection: tuple[float, ...] = ()
    selection_sq: tuple[float, ...] = ()
    seed: int = 0


class SimTruth:
    """Ground-truth effect surfaces realized by one configuration."""

    def __init__(
        self,
        pairs: list[tuple[int, int]],
        att1_surface: dict,
        att2_surface: dict,
        cell_surface: dict,
        interaction: float,
        n_periods: int,
    ):
        self.pairs = pairs
        self.att1_surface = att1_surface
        self.att2_surface = att2_surface
        self.cell_surface = cell_surface
        self.interaction = interaction
        self.n_periods = n_periods

    def true_att1(self, g1: int, g2: int, t: int) -> float:
        """True target-event effect for the (g1, g2) cohort at t."""
        arr = self.att1_surface.get((g1, g2))
        if arr is None:
            raise MissingCellError(CellIndex(g1, g2, t))
        return float(arr[t - 1])

    def true_cell(self, g1: int, g2: int, t: int) -> float:
        """True value of the combined-event cell moment at (g1, g2, t)."""
        arr = self.cell_surface.get((g1, g2))
        if arr is None:
            raise MissingCellError(CellIndex(g1, g2, t))
        return float(arr[t - 1])

    def constant_effects(self) -> tuple[float, float, float] | None:
        """(target, confounding, combined) when all three are constant."""
        vals1 = [
            self.att1_surface[p][p[0] - 1 :]
            for p in self.pairs
            if p[0] != NEVER
        ]
        vals2 = [
            self.att2_surface[p][p[1] - 1 :]
            for p in self.pairs
            if p[1] != NEVER
        ]
        a1 = np.concatenate(vals1) if vals1 else np.zeros(1)
        a2 = np.concatenate(vals2) if vals2 else np.zeros(1)
        if np.ptp(a1) > 1e-12 or np.ptp(a2) > 1e-12:
            return None
        c1, c2 = float(a1[0]), float(a2[0])
        return c1, c2, c1 + c2 + self.interaction

    def to_dict(self) -> dict:
        def key(g1, g2, t):
            a = "" if g1 == NEVER else str(g1)
            b = "" if g2 == NEVER else str(g2)
            return f"{a},{b},{t}"

        out = {"interaction": self.interaction, "att1": {}, "att2": {}, "cell": {}}
        for p in self.pairs:
            for t in range(1, self.n_periods + 1):
                out["att1"][key(p[0], p[1], t)] = float(self.att1_surface[p][t - 1])
                out["att2"][key(p[0], p[1], t)] = float(self.att2_surface[p][t - 1])
                out["cell"][key(p[0], p[1], t)] = float(self.cell_surface[p][t - 1])
        return out


def _normalize_cohort(value) -> int:
    v = int(value)
    return NEVER if v in (0, NEVER) else v


def _validate_marginal(marginal: dict, n_periods: int, name: str) -> dict[int, float]:
    out = {}
    for g, p in marginal.items():
        g = _normalize_cohort(g)
        if g != NEVER and not 2 <= g <= n_periods:
            raise ConfigError(f"{name}: cohort {g} outside 2..{n_periods}")
        if p < 0:
            raise ConfigError(f"{name}: negative probability")
        out[g] = float(p)
    if abs(sum(out.values()) - 1.0) > _PROB_TOL:
        raise ConfigError(f"{name}: probabilities must sum to 1")
    return out


def _copula_table(config: DgpConfig) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Exact joint table implied by the Gaussian copula discretization.

    Cohort bins are ordered by adoption time with never-treated last, so a
    positive rho links early adoption of one event to early adoption of the
    other.
    """
    if config.g1_marginal is None or config.g2_marginal is None:
        raise ConfigError("copula mode requires g1_marginal and g2_marginal")
    m1 = _validate_marginal(config.g1_marginal, config.n_periods, "g1_marginal")
    m2 = _validate_marginal(config.g2_marginal, config.n_periods, "g2_marginal")
    rho = float(config.rho)
    if not -1.0 < rho < 1.0:
        raise ConfigError("rho must be strictly inside (-1, 1)")

    def bins(marginal):
        cohorts = sorted(marginal, key=lambda g: (g == NEVER, g))
        cum = np.cumsum([marginal[g] for g in cohorts])
        cuts = norm.ppf(np.clip(cum, 0.0, 1.0))
        lowers = np.concatenate([[-np.inf], cuts[:-1]])
        return cohorts, lowers, cuts

    c1, lo1, hi1 = bins(m1)
    c2, lo2, hi2 = bins(m2)
    cov = np.array([[1.0, rho], [rho, 1.0]])

    def rect(a1, b1, a2, b2):
        def cdf(x, y):
            if np.isinf(x) and x < 0 or np.isinf(y) and y < 0:
                return 0.0
            return float(multivariate_normal.cdf([min(x, 9.0), min(y, 9.0)], cov=cov))

        return cdf(b1, b2) - cdf(a1, b2) - cdf(b1, a2) + cdf(a1, a2)

    pairs, probs = [], []
    for i, a in enumerate(c1):
        for j, b in enumerate(c2):
            p = max(rect(lo1[i], hi1[i], lo2[j], hi2[j]), 0.0)
            if p > 0:
                pairs.append((a, b))
                probs.append(p)
    probs = np.asarray(probs)
    return pairs, probs / probs.sum()


def implied_cohort_table(config: DgpConfig) -> tuple[list[tuple[int, int]], np.ndarray]:
    """The joint cohort law the generator samples from, as an exact table."""
    if config.cohort_probs is not None:
        pairs, probs = [], []
        for key, p in config.cohort_probs.items():
            if isinstance(key, str):
                a, b = key.split(",")
                pair = (_normalize_cohort(a or 0), _normalize_cohort(b or 0))
            else:
                pair = (_normalize_cohort(key[0]), _normalize_cohort(key[1]))
            for g in pair:
                if g != NEVER and not 2 <= g <= config.n_periods:
                    raise ConfigError(f"cohort {g} outside 2..{config.n_periods}")
            if p < 0:
                raise ConfigError("negative cohort probability")
            pairs.append(pair)
            probs.append(float(p))
        probs = np.asarray(probs)
        if abs(probs.sum() - 1.0) > _PROB_TOL:
            raise ConfigError("cohort probabilities must sum to 1")
        return pairs, probs / probs.sum()
    if config.rho is not None:
        return _copula_table(config)
    raise ConfigError("specify cohort_probs or rho with marginals")


def _check_lengths(config: DgpConfig) -> None:
    k = config.k_covariates
    for name in ("x_trend", "x_trend_sq", "selection", "selection_sq"):
        coefs = getattr(config, name)
        if coefs and len(coefs) != k:
            raise ConfigError(f"{name} must have length k_covariates={k}")


def _generate(config: DgpConfig, trend_shift_treated: float = 0.0) -> tuple[Panel, SimTruth]:
    _check_lengths(config)
    pairs, probs = implied_cohort_table(config)
    rng = np.random.default_rng(config.seed)
    n, T, k = config.n_units, config.n_periods, config.k_covariates

    x = rng.standard_normal((n, k)) if k else np.empty((n, 0))

    treated_pair = np.array([min(p) != NEVER for p in pairs])
    if k and (any(config.selection) or any(config.selection_sq)):
        score = np.zeros(n)
        if config.selection:
            score += x @ np.asarray(config.selection)
        if config.selection_sq:
            score += (x**2) @ np.asarray(config.selection_sq)
        score = np.clip(score, -30.0, 30.0)
        w = probs[None, :] * np.exp(score[:, None] * treated_pair[None, :])
        w /= w.sum(axis=1, keepdims=True)
        draws = rng.random(n)
        pair_idx = (np.cumsum(w, axis=1) < draws[:, None]).sum(axis=1)
    else:
        pair_idx = rng.choice(len(pairs), size=n, p=probs)

    # per-pair effect paths over t = 1..T
    att1_rows = np.zeros((len(pairs), T))
    att2_rows = np.zeros((len(pairs), T))
    cell_rows = np.zeros((len(pairs), T))
    for j, (a, b) in enumerate(pairs):
        for t in range(1, T + 1):
            v1 = config.att1.value(a, b, t)
            v2 = config.att2.value(b, a, t)
            both = a != NEVER and b != NEVER and t >= a and t >= b
            att1_rows[j, t - 1] = v1
            att2_rows[j, t - 1] = v2
            cell_rows[j, t - 1] = v1 + v2 + (config.interaction if both else 0.0)

    g1 = np.array([pairs[j][0] for j in pair_idx], dtype=np.int64)
    g2 = np.array([pairs[j][1] for j in pair_idx], dtype=np.int64)
    t_grid = np.arange(1, T + 1, dtype=np.float64)

    fe = rng.standard_normal(n) * config.unit_fe_sd
    noise = rng.standard_normal((n, T)) * config.noise_sd
    slope = np.full(n, config.time_trend, dtype=np.float64)
    if k and config.x_trend:
        slope += x @ np.asarray(config.x_trend)
    if k and config.x_trend_sq:
        slope += (x**2) @ np.asarray(config.x_trend_sq)
    if trend_shift_treated:
        slope += trend_shift_treated * treated_pair[pair_idx]

    y = fe[:, None] + slope[:, None] * t_grid[None, :] + cell_rows[pair_idx] + noise
    d1 = (t_grid[None, :] >= g1[:, None]).astype(np.int8)
    d2 = (t_grid[None, :] >= g2[:, None]).astype(np.int8)

    panel = from_arrays(y, d1, d2, covariates=x)
    truth = SimTruth(
        pairs=list(pairs),
        att1_surface={p: att1_rows[j] for j, p in enumerate(pairs)},
        att2_surface={p: att2_rows[j] for j, p in enumerate(pairs)},
        cell_surface={p: cell_rows[j] for j, p in enumerate(pairs)},
        interaction=config.interaction,
        n_periods=T,
    )
    return panel, truth


def gen_panel(config: DgpConfig) -> tuple[Panel, SimTruth]:
    """Generate a panel satisfying every maintained assumption by construction.

    Outcomes are unit effect + common (optionally covariate-loaded) trend +
    own-event effects + interaction when both events are active + noise.
    """
    return _generate(config)


VIOLATIONS = ("nonparallel_trends", "nonparallel_treatment_effects", "nonadditive")


def gen_violation_panel(
    config: DgpConfig, violation: str, size: float = 0.5
) -> tuple[Panel, SimTruth]:
    """Generate a panel breaking exactly one assumption.

    ``nonparallel_trends`` tilts the untreated trend of treated units;
    ``nonparallel_treatment_effects`` makes the confounding effect trend
    depend on the event-1 cohort; ``nonadditive`` injects an interaction.
    """
    if violation == "nonparallel_trends":
        return _generate(config, trend_shift_treated=size)
    if violation == "nonparallel_treatment_effects":
        att2 = dataclasses.replace(config.att2, other_cohort_trend=size)
        return _generate(dataclasses.replace(config, att2=att2))
    if violation == "nonadditive":
        return _generate(dataclasses.replace(config, interaction=size))
    raise ConfigError(f"unknown violation tag {violation!r}; expected one of {VIOLATIONS}")


def true_summary(truth: SimTruth, scheme) -> float:
    """Weight-sum of the true target-effect surface under a scheme.

    The oracle value that an estimated summary with the same scheme targets.
    """
    total = 0.0
    for cell, w in scheme.weights.items():
        total += w * truth.true_att1(cell.g1, cell.g2, cell.t)
    return float(total)


def _parse_effect(value) -> EffectSurface:
    if isinstance(value, EffectSurface):
        return value
    if isinstance(value, (int, float)):
        return EffectSurface(base=float(value))
    if isinstance(value, dict):
        return EffectSurface(
            base=float(value.get("base", 0.0)),
            by_event_time=tuple(value["by_event_time"])
            if value.get("by_event_time")
            else None,
            other_cohort_trend=float(value.get("other_cohort_trend", 0.0)),
        )
    raise ConfigError(f"cannot parse effect specification {value!r}")


def load_dgp_config(source) -> DgpConfig:
    """Build a DgpConfig from a dict or a TOML/JSON file path."""
    if isinstance(source, DgpConfig):
        return source
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        if path.suffix.lower() == ".toml":
            try:
                import tomllib as toml
            except ImportError:
                import tomli as toml
            with open(path, "rb") as fh:
                raw = toml.load(fh)
        elif path.suffix.lower() == ".json":
            with open(path) as fh:
                raw = json.load(fh)
        else:
            raise ConfigError(f"unsupported config format {path.suffix!r}")
    elif isinstance(source, dict):
        raw = dict(source)
    else:
        raise ConfigError(f"cannot load config from {type(source).__name__}")

    known = {f.name for f in dataclasses.fields(DgpConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for key in ("n_units", "n_periods"):
        if key not in raw:
            raise ConfigError(f"missing config key {key}")
    kwargs = dict(raw)
    for key in ("att1", "att2"):
        if key in kwargs:
            kwargs[key] = _parse_effect(kwargs[key])
    for key in ("x_trend", "x_trend_sq", "selection", "selection_sq"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    if "cohort_probs" in kwargs and kwargs["cohort_probs"] is not None:
        kwargs["cohort_probs"] = dict(kwargs["cohort_probs"])
    return DgpConfig(**kwargs)
