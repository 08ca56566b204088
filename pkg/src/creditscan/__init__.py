"""Threshold detection in credit panels and its electoral consequences.

The package scans credit panels for score cutoffs where limits jump,
builds county-by-district population shares around the detected cutoffs,
and estimates their effect on election outcomes with fixed effects,
instruments, and clustered errors.  A synthetic laboratory plants known
truths for every layer, and a CLI chains the stages into reproducible
runs.
"""

from creditscan import errors
from creditscan._backend import backend_name
from creditscan.geo import CcdCell, build_ccd_cells, zcta_to_county_majority
from creditscan.kernel import (
    DesignMatrix,
    GroupLabels,
    RegressionResult,
    absorb_fixed_effects,
    difference_test,
    tsls_fit,
    wald_test,
    wls_fit,
)
from creditscan.panel import (
    PanelEstimate,
    ShiftShareInputs,
    bandwidth_sweep,
    build_panel,
    build_shift_share,
    estimate_above_below,
    estimate_baseline,
    estimate_nominate,
    format_estimates_table,
    gerrymander_window,
)
from creditscan.pipeline import PipelineConfig, run_pipeline
from creditscan.rdscan import (
    RdConfig,
    ThresholdEstimate,
    density_smoothness_test,
    fit_rd_at_cutoff,
    impute_thresholds,
    scan_credit_panel,
    scan_cutoffs,
    select_threshold,
)
from creditscan.shares import (
    ShareRecord,
    compute_shares,
    format_share_table,
    summarize_shares,
)
from creditscan.synthlab import (
    MonteCarloReport,
    VoteDgp,
    World,
    WorldConfig,
    build_world,
    monte_carlo,
    write_world,
)

__version__ = "0.1.0"

__all__ = [
    "CcdCell",
    "DesignMatrix",
    "GroupLabels",
    "MonteCarloReport",
    "PanelEstimate",
    "PipelineConfig",
    "RdConfig",
    "RegressionResult",
    "ShareRecord",
    "ShiftShareInputs",
    "ThresholdEstimate",
    "VoteDgp",
    "World",
    "WorldConfig",
    "absorb_fixed_effects",
    "backend_name",
    "bandwidth_sweep",
    "build_ccd_cells",
    "build_panel",
    "build_shift_share",
    "build_world",
    "compute_shares",
    "density_smoothness_test",
    "difference_test",
    "errors",
    "estimate_above_below",
    "estimate_baseline",
    "estimate_nominate",
    "fit_rd_at_cutoff",
    "format_estimates_table",
    "format_share_table",
    "gerrymander_window",
    "impute_thresholds",
    "monte_carlo",
    "run_pipeline",
    "scan_credit_panel",
    "scan_cutoffs",
    "select_threshold",
    "summarize_shares",
    "tsls_fit",
    "wald_test",
    "wls_fit",
    "write_world",
    "zcta_to_county_majority",
]
