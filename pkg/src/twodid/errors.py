"""Exception types shared across the package."""

from __future__ import annotations


class TwodidError(Exception):
    """Base class for all package errors."""


class PanelError(TwodidError):
    """Invalid input data (duplicates, imbalance, non-monotone treatment, ...)."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason}: {detail}" if detail else reason)


class ConfigError(TwodidError):
    """Invalid run configuration or command-line arguments."""


class EstimationError(TwodidError):
    """Base class for per-cell and aggregation failures."""


class EmptyTreatedError(EstimationError):
    def __init__(self, cell):
        self.cell = cell
        super().__init__(f"no treated units in cell {cell}")


class EmptyControlError(EstimationError):
    def __init__(self, cell, control_type: str = ""):
        self.cell = cell
        super().__init__(f"no {control_type} control units for cell {cell}")


class BasePeriodError(EstimationError):
    def __init__(self, cell):
        self.cell = cell
        super().__init__(f"base period before sample start for cell {cell}")


class NoVariationError(EstimationError):
    """All pooled units belong to a single class; no binary response fit possible."""


class PerfectSeparationError(EstimationError):
    """A covariate perfectly separates treated from comparison units."""


class RankDeficientDesignError(EstimationError):
    """Regression design matrix is rank deficient over the control sample."""


class InsufficientControlsError(EstimationError):
    """Fewer control units than regression parameters."""


class PropensityBoundaryError(EstimationError):
    """All comparison units sit above the propensity trim threshold."""


class MissingComponentCellError(EstimationError):
    def __init__(self, cell):
        self.cell = cell
        super().__init__(f"component cell {cell} absent from the estimate table")


class NoControlCohortError(EstimationError):
    """No later-treated cohort with positive share is available as control."""


class NoAvailableCellError(EstimationError):
    """No cell satisfies the availability condition for the requested summary."""


class MissingCellError(EstimationError):
    def __init__(self, cell):
        self.cell = cell
        super().__init__(f"scheme references cell {cell} with no estimate")


class HeterogeneousTruthError(TwodidError):
    """Simulated truth violates the constant-effect hypothesis of the decomposition."""
