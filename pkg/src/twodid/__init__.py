"""Staggered difference-in-differences under a confounding second event.

Estimates treatment effects on a balanced panel where two irreversible
events roll out with possibly correlated timing: cell-level moments against
not-yet/never-treated-by-either controls, recovery of the target event's
effect in confounded periods, weighting-scheme aggregation, timing
diagnostics, cluster-bootstrap inference, and a synthetic-data oracle.
"""

__version__ = "0.1.0"

from .aggregate import (
    SummaryEstimate,
    WeightScheme,
    evaluate,
    scheme_did,
    scheme_dynamic,
    scheme_dynamic_staggered,
    scheme_group_time,
    scheme_imp,
    scheme_overall,
)
from .diagnostics import (
    BiasDecomposition,
    bias_decomposition,
    diagnostics_table,
    gamma12,
    naive_cs_att,
    relative_bias,
)
from .doubledid import (
    Availability,
    TargetEstimate,
    TargetTable,
    att_dd,
    att_dd_all,
    att_did_cell,
    att_imp_cell,
    build_availability,
    pre_trend_dd,
)
from .errors import (
    ConfigError,
    EstimationError,
    PanelError,
    TwodidError,
)
from .inference import (
    BootstrapConfig,
    BootstrapResult,
    PipelineSpec,
    bootstrap,
    mc_study,
    run_pipeline,
)
from .moments import (
    CellEstimate,
    CellTable,
    NuisanceFit,
    att_dr,
    att_ipw,
    att_or,
    att_unc,
    estimand_of,
    estimate_all_cells,
    fit_outcome_reg,
    fit_propensity,
)
from .panel import (
    NEVER,
    CellIndex,
    CohortMap,
    Panel,
    cell_membership,
    derive_cohorts,
    from_arrays,
    load_panel,
    write_panel,
)
from .simulate import (
    DgpConfig,
    EffectSurface,
    SimTruth,
    gen_panel,
    gen_violation_panel,
    implied_cohort_table,
    load_dgp_config,
    true_summary,
)

__all__ = [name for name in dir() if not name.startswith("_")]
