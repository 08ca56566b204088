"""Vote-share and ideology panel regressions on threshold-proximity shares.

Assembles cell-year panels from shares, election returns, and controls,
then estimates the share effects with cell and year fixed effects absorbed,
population weights, the import-exposure control instrumented by the
comparison-country series, and covariances clustered by cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from creditscan.errors import EmptySampleError, RankDeficientError, SchemaError
from creditscan.kernel import (
    DesignMatrix,
    GroupLabels,
    RegressionResult,
    absorb_fixed_effects,
    difference_test,
    tsls_fit,
    with_cluster_vcov,
    wls_fit,
)

GERRYMANDER_YEARS = (2012, 2014, 2016)
DEFAULT_CONTROLS = ("share_white", "share_female")
ENDOG_NAME = "exposure"
INSTRUMENT_NAME = "instrument"

# regressors that must survive absorption; a control absorbed by the fixed
# effects is dropped, but losing one of these invalidates the design
PROTECTED = ("share_total", "share_above", "share_below", ENDOG_NAME,
             INSTRUMENT_NAME)

OUTCOME_ALIASES = {
    "rep": "vote_share_rep",
    "dem": "vote_share_dem",
    "nominate": "nominate1",
}

PRETTY_NAMES = {
    "share_total": "Share at thresholds",
    "share_above": "Share above thresholds",
    "share_below": "Share below thresholds",
    ENDOG_NAME: "Import exposure",
}


@dataclass(frozen=True)
class ShiftShareInputs:
    """Region-industry employment shares and industry import-growth series."""

    region_shares: object  # table: region, industry, share
    import_growth: object  # table: industry, delta_us, delta_other


@dataclass
class PanelEstimate:
    """One fitted specification plus the layout metadata tables report."""

    outcome: str
    subset: str
    spec: str
    bandwidth: int
    result: RegressionResult
    dep_mean: float
    observations: int
    n_rows: int
    wald_above_below: tuple[float, float] | None = None
    notes: dict = field(default_factory=dict)

    def to_json_dict(self):
        body = self.result.to_json_dict()
        body.update(
            outcome=self.outcome,
            subset=self.subset,
            spec=self.spec,
            bandwidth=int(self.bandwidth),
            dep_mean=self.dep_mean,
            observations=int(self.observations),
            n_rows=int(self.n_rows),
        )
        if self.wald_above_below is not None:
            body["wald_above_below"] = {
                "stat": self.wald_above_below[0],
                "p_value": self.wald_above_below[1],
            }
        if "first_stage_F" in self.result.diagnostics:
            body["first_stage_F"] = self.result.diagnostics["first_stage_F"]
        if self.notes:
            body["notes"] = self.notes
        return body


def build_shift_share(inputs: ShiftShareInputs):
    """Aggregate industry import growth to regions with base-period shares.

    exposure_r = sum_j share_rj * delta_us_j and the instrument replaces the
    US growth with the comparison-country series.  Industries appearing in
    the regional shares but missing from the growth table raise SchemaError
    listing the codes.  Returns a frame (region, exposure, instrument).
    """
    shares = pd.DataFrame(inputs.region_shares)
    growth = pd.DataFrame(inputs.import_growth)
    if not {"region", "industry", "share"} <= set(shares.columns):
        raise SchemaError("region shares need region, industry, share columns")
    if not {"industry", "delta_us", "delta_other"} <= set(growth.columns):
        raise SchemaError("import growth needs industry, delta_us, delta_other columns")
    if growth["industry"].duplicated().any():
        raise SchemaError("duplicate industry rows in import growth table")

    sums = shares.groupby("region")["share"].sum()
    over = sums.index[sums > 1.0 + 1e-9].tolist()
    if over:
        raise SchemaError(f"industry shares exceed 1 for regions: {over[:5]}")

    missing = sorted(set(shares["industry"]) - set(growth["industry"]))
    if missing:
        raise SchemaError(f"import growth series missing for industries: {missing}")

    merged = shares.merge(growth, on="industry", how="left")
    merged["exposure"] = merged["share"] * merged["delta_us"]
    merged["instrument"] = merged["share"] * merged["delta_other"]
    out = merged.groupby("region", as_index=False)[["exposure", "instrument"]].sum()
    return out.sort_values("region").reset_index(drop=True)


def build_panel(shares, elections, controls, bandwidth):
    """Join shares at one bandwidth with election outcomes and controls.

    Vote shares divide each party's votes by all votes cast in the cell.
    Rows with null shares (zone without a threshold), zero weight, or no
    votes are dropped.  Returns the panel frame sorted by (cell_id, year).
    """
    sh = pd.DataFrame(shares)
    share_cols = {"cell_id", "year", "bw", "share_tot", "share_above", "share_below", "pop"}
    if not share_cols <= set(sh.columns):
        raise SchemaError(f"shares lack columns: {sorted(share_cols - set(sh.columns))}")
    sh = sh[sh["bw"] == int(bandwidth)]
    if sh.empty:
        raise EmptySampleError(f"no share rows at bandwidth {bandwidth}")
    sh = sh.rename(columns={"share_tot": "share_total"})

    el = pd.DataFrame(elections)
    el_cols = {"cell_id", "year", "votes_rep", "votes_dem", "votes_other",
               "winner_party", "nominate1"}
    if not el_cols <= set(el.columns):
        raise SchemaError(f"elections lack columns: {sorted(el_cols - set(el.columns))}")

    ct = pd.DataFrame(controls)
    ct_cols = {"cell_id", "year", "share_white", "share_female",
               ENDOG_NAME, INSTRUMENT_NAME}
    if not ct_cols <= set(ct.columns):
        raise SchemaError(f"controls lack columns: {sorted(ct_cols - set(ct.columns))}")
    # weights come from the share builder's population; a census pop column
    # in the controls table is tolerated but does not feed estimation
    extra = [c for c in ct.columns if c not in ct_cols and c != "pop"]

    df = sh.merge(el, on=["cell_id", "year"], how="inner")
    df = df.merge(ct[sorted(ct_cols - {"cell_id", "year"}) + extra +
                     ["cell_id", "year"]],
                  on=["cell_id", "year"], how="inner")

    total = df["votes_rep"] + df["votes_dem"] + df["votes_other"]
    with np.errstate(invalid="ignore", divide="ignore"):
        df["vote_share_rep"] = np.where(total > 0, df["votes_rep"] / total, np.nan)
        df["vote_share_dem"] = np.where(total > 0, df["votes_dem"] / total, np.nan)
    df["weight"] = df["pop"].astype(np.float64)

    keep = (
        df["share_total"].notna()
        & (df["weight"] > 0)
        & (total > 0)
    )
    df = df[keep]
    cols = ["cell_id", "year", "vote_share_rep", "vote_share_dem", "winner_party",
            "nominate1", "share_total", "share_above", "share_below",
            "share_white", "share_female", ENDOG_NAME, INSTRUMENT_NAME,
            "weight"] + extra
    return df[cols].sort_values(["cell_id", "year"]).reset_index(drop=True)


def _resolve_outcome(outcome):
    return OUTCOME_ALIASES.get(outcome, outcome)


def _absorb_panel(df, columns, outcome_col):
    """Demean outcome and regressors by cell and year; returns pieces."""
    weights = df["weight"].to_numpy(dtype=np.float64)
    X = DesignMatrix(tuple(columns), df[list(columns)].to_numpy(dtype=np.float64),
                     weights)
    groups = GroupLabels.from_arrays(cell=df["cell_id"].to_numpy(),
                                     year=df["year"].to_numpy())
    y = df[outcome_col].to_numpy(dtype=np.float64)
    scales = np.maximum(1.0, np.max(np.abs(X.values), axis=0))
    xd, yd, dof = absorb_fixed_effects(X, y, groups)
    return xd, yd, dof, scales


def _screen_absorbed(xd, scales):
    """Split demeaned columns into kept names and fully-absorbed controls."""
    absorbed = []
    for j, name in enumerate(xd.names):
        if float(np.max(np.abs(xd.values[:, j]))) < 1e-8 * scales[j]:
            if name in PROTECTED:
                raise RankDeficientError(
                    [name], f"regressor {name!r} is constant within fixed effects"
                )
            absorbed.append(name)
    kept = [n for n in xd.names if n not in absorbed]
    return kept, absorbed


def _fit_spec(df, outcome_col, share_cols, *, controls=DEFAULT_CONTROLS,
              instrumented=True):
    share_cols = list(share_cols)
    controls = [c for c in controls if c in df.columns]
    used = share_cols + controls + [ENDOG_NAME]
    if instrumented:
        used.append(INSTRUMENT_NAME)
    sample = df.dropna(subset=[outcome_col] + used)
    sample = sample[sample["weight"] > 0]
    if sample.empty:
        raise EmptySampleError(f"no rows with outcome {outcome_col!r}")
    if sample["cell_id"].nunique() < 2 or sample["year"].nunique() < 2:
        raise EmptySampleError("panel needs at least two cells and two years")

    xd, yd, dof, scales = _absorb_panel(sample, used, outcome_col)
    kept, absorbed = _screen_absorbed(xd, scales)

    exog_names = [n for n in kept if n not in (ENDOG_NAME, INSTRUMENT_NAME)]
    exog = xd.select(exog_names)
    clusters = sample["cell_id"].to_numpy()

    if instrumented:
        endog = {ENDOG_NAME: xd.values[:, xd.names.index(ENDOG_NAME)]}
        instruments = {INSTRUMENT_NAME: xd.values[:, xd.names.index(INSTRUMENT_NAME)]}
        res = tsls_fit(yd, exog, endog, instruments, clusters=clusters,
                       center_tss=True, extra_dof=dof)
    else:
        names = exog_names + [ENDOG_NAME]
        res = wls_fit(
            DesignMatrix(tuple(names),
                         np.column_stack([exog.values,
                                          xd.values[:, xd.names.index(ENDOG_NAME)]]),
                         exog.weights),
            yd, center_tss=True, extra_dof=dof)
        res = with_cluster_vcov(res, clusters)

    w = sample["weight"].to_numpy(dtype=np.float64)
    y = sample[outcome_col].to_numpy(dtype=np.float64)
    dep_mean = float(np.sum(w * y) / np.sum(w))
    notes = {}
    if absorbed:
        notes["absorbed_controls"] = absorbed
    return res, dep_mean, int(round(w.sum())), sample.shape[0], notes


def estimate_baseline(panel, outcome="rep", bandwidth=15, *,
                      controls=DEFAULT_CONTROLS, instrumented=True,
                      subset="all") -> PanelEstimate:
    """Share-at-thresholds effect on the chosen outcome.

    2SLS with the import exposure instrumented, cell and year effects
    absorbed, population weights, and CR1 covariance clustered by cell.
    ``instrumented=False`` switches to plain weighted within-OLS for
    diagnostics.
    """
    outcome_col = _resolve_outcome(outcome)
    res, dep_mean, obs, n_rows, notes = _fit_spec(
        panel, outcome_col, ["share_total"], controls=controls,
        instrumented=instrumented)
    return PanelEstimate(outcome_col, subset, "baseline", int(bandwidth), res,
                         dep_mean, obs, n_rows, notes=notes)


def estimate_above_below(panel, outcome="rep", bandwidth=15, *,
                         controls=DEFAULT_CONTROLS, instrumented=True,
                         subset="all") -> PanelEstimate:
    """Separate effects of the above-threshold and below-threshold shares.

    Reports the Wald test of equal coefficients alongside the fit; equality
    is the homogeneity diagnostic separating uncertainty from constraint.
    """
    outcome_col = _resolve_outcome(outcome)
    res, dep_mean, obs, n_rows, notes = _fit_spec(
        panel, outcome_col, ["share_above", "share_below"], controls=controls,
        instrumented=instrumented)
    stat, p_value, _ = difference_test(res, "share_above", "share_below")
    return PanelEstimate(outcome_col, subset, "above_below", int(bandwidth), res,
                         dep_mean, obs, n_rows,
                         wald_above_below=(stat, p_value), notes=notes)


def subset_by_winner(panel, subset):
    """Restrict to seats won by one party: 'rep', 'dem', or 'all'."""
    key = subset.lower().split("-")[0]
    if key == "all":
        return panel
    party = {"rep": "R", "dem": "D"}.get(key)
    if party is None:
        raise ValueError(f"unknown subset {subset!r}")
    return panel[panel["winner_party"] == party]


def estimate_nominate(panel, subset="all", bandwidth=15, *,
                      spec="baseline", controls=DEFAULT_CONTROLS,
                      instrumented=True) -> PanelEstimate:
    """Ideology-score specification on winner subsets.

    Rows without a winner ideology score are dropped; ``subset`` restricts
    to seats won by the named party before fitting.
    """
    sub = subset_by_winner(panel, subset)
    sub = sub[sub["nominate1"].notna()]
    if sub.empty:
        raise EmptySampleError(f"no ideology scores in subset {subset!r}")
    fit = estimate_baseline if spec == "baseline" else estimate_above_below
    est = fit(sub, outcome="nominate1", bandwidth=bandwidth, controls=controls,
              instrumented=instrumented, subset=subset)
    return est


def gerrymander_window(panel, years=GERRYMANDER_YEARS):
    """Keep only the fixed-boundary election years."""
    return panel[panel["year"].isin(list(years))]


def bandwidth_sweep(shares, elections, controls, outcome="rep",
                    bandwidths=(5, 10, 15, 20, 25), *, spec="baseline",
                    instrumented=True) -> list[PanelEstimate]:
    """Re-estimate one specification across share bandwidths, in order."""
    fit = estimate_baseline if spec == "baseline" else estimate_above_below
    out = []
    for b in sorted(int(b) for b in bandwidths):
        panel = build_panel(shares, elections, controls, b)
        out.append(fit(panel, outcome=outcome, bandwidth=b,
                       instrumented=instrumented))
    return out


def significance_stars(p_value):
    if p_value < 0.01:
        return "***"
    if p_value < 0.05:
        return "**"
    if p_value < 0.1:
        return "*"
    return ""


def format_estimates_table(estimates: Sequence[PanelEstimate], labels=None):
    """Column-per-model text table: coefficients with stars, clustered SEs
    in parentheses, then observations, R-squared, and dependent-variable
    means."""
    if not estimates:
        raise ValueError("no estimates to format")
    if labels is None:
        labels = [f"({i + 1})" for i in range(len(estimates))]

    rows = []
    coef_names = []
    for est in estimates:
        for name in est.result.names:
            if name not in coef_names:
                coef_names.append(name)
    preferred = [n for n in PRETTY_NAMES if n in coef_names]
    coef_names = preferred + [n for n in coef_names if n not in preferred]

    header = " & " + " & ".join(labels)
    rows.append(header)
    for name in coef_names:
        pretty = PRETTY_NAMES.get(name, name)
        coef_cells, se_cells = [], []
        for est in estimates:
            if name in est.result.names:
                i = est.result.names.index(name)
                p = est.result.p_values[i]
                coef_cells.append(
                    f"{est.result.params[i]:.3f}{significance_stars(p)}"
                )
                se_cells.append(f"({est.result.se[i]:.3f})")
            else:
                coef_cells.append("")
                se_cells.append("")
        rows.append(f"{pretty} & " + " & ".join(coef_cells))
        rows.append(" & " + " & ".join(se_cells))
    rows.append("Observations & " + " & ".join(
        f"{est.observations:,}" for est in estimates))
    rows.append("R-squared & " + " & ".join(
        f"{est.result.r_squared:.3f}" for est in estimates))
    rows.append("Mean dep. var. & " + " & ".join(
        f"{est.dep_mean:.3f}" for est in estimates))
    return "\n".join(rows)
