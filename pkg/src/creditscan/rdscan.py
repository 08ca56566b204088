"""Threshold detection: scan candidate credit-score cutoffs for limit jumps.

For each zone and election year the scanner fits, at every cutoff on a
five-point grid, a discontinuity regression of the asinh-transformed credit
limit on a jump indicator plus side-specific polynomials in the centered
score, absorbing county fixed effects.  The cutoff with the largest positive
significant jump is kept; missing years are imputed from detected ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from creditscan.errors import EstimationError
from creditscan.kernel import (
    DesignMatrix,
    GroupLabels,
    absorb_fixed_effects,
    wls_fit,
)

DEFAULT_GRID = tuple(range(560, 661, 5))
DEFAULT_ELECTION_YEARS = tuple(range(2004, 2017, 2))
SCORE_SCALE = 25.0  # centered scores divided by this before raising to powers
WINDOW_MARGIN = 25  # estimation window extends this far past the grid ends

PROVENANCE_DETECTED = "detected"
PROVENANCE_FORWARD = "imputed_forward"
PROVENANCE_BACKWARD = "imputed_backward"


@dataclass(frozen=True)
class RdConfig:
    """Settings for the cutoff scan."""

    cutoff_grid: tuple[int, ...] = DEFAULT_GRID
    polynomial_degree: int = 4
    window_halfwidth: int | None = None
    min_observations: int = 500
    alpha_level: float = 0.05
    vcov: str = "HC1"
    side_specific: bool = True

    def __post_init__(self):
        grid = tuple(int(c) for c in self.cutoff_grid)
        if not grid or grid != tuple(sorted(grid)):
            raise ValueError("cutoff_grid must be a nonempty ascending sequence")
        if grid[0] < 560 or grid[-1] > 660:
            raise ValueError("cutoff_grid must lie within [560, 660]")
        if self.polynomial_degree < 1:
            raise ValueError("polynomial_degree must be at least 1")
        if self.min_observations < self.polynomial_degree * 2 + 2:
            raise ValueError("min_observations must be at least 2*degree + 2")
        if not 0.0 < self.alpha_level < 1.0:
            raise ValueError("alpha_level must be in (0, 1)")
        if self.window_halfwidth is not None and self.window_halfwidth < 5:
            raise ValueError("window_halfwidth must be at least one grid step")
        object.__setattr__(self, "cutoff_grid", grid)

    @property
    def critical_value(self):
        return float(stats.norm.ppf(1.0 - self.alpha_level / 2.0))

    def window_for(self, cutoff):
        """Score range entering the fit at ``cutoff``: [lo, hi] inclusive."""
        if self.window_halfwidth is not None:
            return cutoff - self.window_halfwidth, cutoff + self.window_halfwidth
        return self.cutoff_grid[0] - WINDOW_MARGIN, self.cutoff_grid[-1] + WINDOW_MARGIN


@dataclass(frozen=True)
class CutoffEstimate:
    """Jump estimate at one candidate cutoff."""

    commuting_zone: int
    year: int
    cutoff: int
    alpha: float
    se: float
    t_stat: float
    n_left: int
    n_right: int


@dataclass(frozen=True)
class ScanSkip:
    """A zone-year or zone-year-cutoff the scanner declined to fit."""

    commuting_zone: int
    year: int
    cutoff: int | None
    reason: str
    n_obs: int


@dataclass(frozen=True)
class ThresholdEstimate:
    """Selected or imputed threshold for one zone and election year."""

    commuting_zone: int
    year: int
    cutoff: int
    alpha: float
    se: float
    t_stat: float
    provenance: str
    source_year: int


@dataclass(frozen=True)
class DensityTestResult:
    """Discontinuity test of the binned log score density at a cutoff."""

    cutoff: int
    estimate: float
    se: float
    t_stat: float
    passed: bool
    inconclusive: bool
    n_bins: int


def asinh_transform(v):
    """Inverse hyperbolic sine, ln(v + sqrt(v^2 + 1)); defined at zero."""
    return np.arcsinh(v)


def asinh_invert(u):
    return np.sinh(u)


def _poly_design(scores, cutoff, config):
    """Jump indicator plus (side-specific) centered-score polynomial columns."""
    u = (scores - float(cutoff)) / SCORE_SCALE
    d = (scores >= cutoff).astype(np.float64)
    p = config.polynomial_degree
    cols = [d]
    names = ["jump"]
    upow = u.copy()
    for j in range(1, p + 1):
        cols.append(upow.copy())
        names.append(f"c{j}")
        if config.side_specific:
            cols.append(d * upow)
            names.append(f"jump_c{j}")
        upow = upow * u
    return tuple(names), np.column_stack(cols)


def _fit_jump(scores, ylog, county_codes, n_counties, cutoff, config,
              commuting_zone, year):
    """Array-level fit at one cutoff; returns CutoffEstimate or ScanSkip."""
    lo, hi = config.window_for(cutoff)
    mask = (scores >= lo) & (scores <= hi)
    if not np.all(mask):
        scores = scores[mask]
        ylog = ylog[mask]
        county_codes = county_codes[mask]
    n = scores.shape[0]
    n_right = int(np.count_nonzero(scores >= cutoff))
    n_left = n - n_right

    if n < config.min_observations:
        return ScanSkip(commuting_zone, year, cutoff,
                        "insufficient observations in estimation window", n)
    if n_left == 0 or n_right == 0:
        side = "below" if n_left == 0 else "above"
        return ScanSkip(commuting_zone, year, cutoff,
                        f"no observations {side} cutoff", n)

    names, values = _poly_design(scores, cutoff, config)
    X = DesignMatrix(names, values, np.ones(n))
    groups = GroupLabels(
        ("county",),
        (np.ascontiguousarray(county_codes, dtype=np.int64),),
        (int(n_counties),),
        (np.arange(n_counties),),
    )
    try:
        xd, yd, dof = absorb_fixed_effects(X, ylog, groups)
        res = wls_fit(xd, yd, vcov=config.vcov, extra_dof=dof, center_tss=True)
    except EstimationError as err:
        return ScanSkip(commuting_zone, year, cutoff, f"degenerate fit: {err}", n)

    alpha = res["jump"]
    se = res.se_of("jump")
    if se > 0:
        t_stat = alpha / se
    else:
        t_stat = math.inf if alpha != 0 else 0.0
    return CutoffEstimate(commuting_zone, year, int(cutoff), alpha, se, t_stat,
                          n_left, n_right)


def _extract_arrays(records):
    scores = np.asarray(records["credit_score"], dtype=np.float64)
    ylog = asinh_transform(np.asarray(records["total_limit"], dtype=np.float64))
    counties = np.asarray(records["county_fips"])
    _, codes = np.unique(counties, return_inverse=True)
    return scores, ylog, codes.astype(np.int64), int(codes.max()) + 1 if codes.size else 0


def fit_rd_at_cutoff(records, cutoff, config=RdConfig(), *,
                     commuting_zone=0, year=0):
    """Fit the discontinuity regression at a single cutoff.

    ``records`` is a mapping of columns (credit_score, total_limit,
    county_fips) for one zone-year, e.g. a DataFrame slice.  Returns a
    CutoffEstimate, or a ScanSkip describing why the fit was declined.
    """
    scores, ylog, codes, n_counties = _extract_arrays(records)
    return _fit_jump(scores, ylog, codes, n_counties, cutoff, config,
                     commuting_zone, year)


def scan_cutoffs(records, config=RdConfig(), *, commuting_zone=0, year=0):
    """Fit every grid cutoff for one zone-year.

    Returns ``(estimates, skips)`` with estimates in ascending cutoff order.
    A zone-year whose estimation window holds fewer than
    ``config.min_observations`` rows yields no estimates and a single skip.
    """
    scores, ylog, codes, n_counties = _extract_arrays(records)
    return _scan_arrays(scores, ylog, codes, n_counties, config,
                        commuting_zone, year)


def _scan_arrays(scores, ylog, codes, n_counties, config, commuting_zone, year):
    lo, hi = config.window_for(config.cutoff_grid[0])[0], \
        config.window_for(config.cutoff_grid[-1])[1]
    mask = (scores >= lo) & (scores <= hi)
    if not np.all(mask):
        scores = scores[mask]
        ylog = ylog[mask]
        codes = codes[mask]
    n = scores.shape[0]
    if n < config.min_observations:
        skip = ScanSkip(commuting_zone, year, None,
                        "zone-year below minimum observation count", n)
        return [], [skip]

    order = np.argsort(scores, kind="stable")
    scores = scores[order]
    ylog = ylog[order]
    codes = codes[order]

    estimates = []
    skips = []
    for cutoff in config.cutoff_grid:
        out = _fit_jump(scores, ylog, codes, n_counties, cutoff, config,
                        commuting_zone, year)
        if isinstance(out, CutoffEstimate):
            estimates.append(out)
        else:
            skips.append(out)
    return estimates, skips


def select_threshold(estimates, config=RdConfig()):
    """Pick the qualifying cutoff with the largest jump.

    Qualifying means alpha > 0 and t above the critical value.  Candidates
    within five points of a larger-alpha qualifying candidate are suppressed
    first; exact ties go to the lower cutoff.  Returns None when nothing
    qualifies.
    """
    crit = config.critical_value
    qualifying = [e for e in estimates if e.alpha > 0 and e.t_stat > crit]
    if not qualifying:
        return None
    qualifying.sort(key=lambda e: (-e.alpha, e.cutoff))
    kept = []
    for cand in qualifying:
        if all(abs(cand.cutoff - k.cutoff) > 5 for k in kept):
            kept.append(cand)
    best = kept[0]
    return ThresholdEstimate(
        commuting_zone=best.commuting_zone,
        year=best.year,
        cutoff=best.cutoff,
        alpha=best.alpha,
        se=best.se,
        t_stat=best.t_stat,
        provenance=PROVENANCE_DETECTED,
        source_year=best.year,
    )


def impute_thresholds(series: Mapping[int, ThresholdEstimate | None],
                      election_years=DEFAULT_ELECTION_YEARS):
    """Fill missing election years from detected thresholds.

    Missing years after a detection copy the most recent detected threshold
    (provenance imputed_forward); years before the first detection copy the
    first one (imputed_backward).  Imputed rows keep the source estimate and
    record its year.  Returns a complete list sorted by year, or an empty
    list when no year has a detection.
    """
    years = sorted(election_years)
    detected = {y: series.get(y) for y in years if series.get(y) is not None}
    if not detected:
        return []
    first_year = min(detected)
    out = []
    last = None
    for y in years:
        hit = detected.get(y)
        if hit is not None:
            out.append(hit)
            last = hit
        elif last is not None:
            out.append(replace(last, year=y, provenance=PROVENANCE_FORWARD,
                               source_year=last.year))
        else:
            src = detected[first_year]
            out.append(replace(src, year=y, provenance=PROVENANCE_BACKWARD,
                               source_year=first_year))
    return out


def density_smoothness_test(scores, cutoff, config=RdConfig(), *,
                            bin_width=1, halfwidth=25, min_bins=20):
    """Test for bunching: a discontinuity in the binned log score density.

    Scores within ``halfwidth`` of the cutoff are counted into integer-width
    bins aligned so no bin straddles the cutoff, and log counts are fit with
    a quadratic on each side, weighting each bin by its count.  Since the
    log of a Poisson count has variance close to 1/count, the weights are
    known inverse variances and the jump's standard error comes straight
    from (X'WX)^-1.  The test passes when the jump is insignificant.
    Fewer than ``min_bins`` populated bins flags the result inconclusive.
    """
    scores = np.asarray(scores, dtype=np.float64)
    lo = cutoff - halfwidth
    n_per_side = int(math.ceil(halfwidth / bin_width))
    n_total = 2 * n_per_side
    # half-open [edge, edge + width) bins so the top score is not double counted
    inside = (scores >= lo) & (scores < lo + n_total * bin_width)
    idx = np.floor((scores[inside] - lo) / bin_width).astype(np.int64)
    counts = np.bincount(idx, minlength=n_total)
    centers = lo + (np.arange(n_total) + 0.5) * bin_width

    populated = counts > 0
    n_bins = int(np.count_nonzero(populated))
    x = (centers[populated] - cutoff) / halfwidth
    logc = np.log(counts[populated].astype(np.float64))
    d = (centers[populated] >= cutoff).astype(np.float64)

    per_side = np.array([np.count_nonzero(d == 0), np.count_nonzero(d == 1)])
    if per_side.min() < 3:
        return DensityTestResult(int(cutoff), math.nan, math.nan, math.nan,
                                 passed=True, inconclusive=True, n_bins=n_bins)

    X = DesignMatrix(
        ("const", "x", "x2", "jump", "jump_x", "jump_x2"),
        np.column_stack([np.ones_like(x), x, x * x, d, d * x, d * x * x]),
        counts[populated].astype(np.float64),
    )
    try:
        res = wls_fit(X, logc, vcov="known")
    except EstimationError:
        return DensityTestResult(int(cutoff), math.nan, math.nan, math.nan,
                                 passed=True, inconclusive=True, n_bins=n_bins)

    est = res["jump"]
    se = res.se_of("jump")
    t = est / se if se > 0 else math.inf
    passed = abs(t) < config.critical_value
    return DensityTestResult(int(cutoff), est, se, float(t), passed,
                             inconclusive=n_bins < min_bins, n_bins=n_bins)


def pool_to_election_year(years, election_years=DEFAULT_ELECTION_YEARS):
    """Map record years onto election years: each year joins the next
    election year at or after it.  Years past the last election year map
    to -1 (dropped)."""
    years = np.asarray(years, dtype=np.int64)
    elect = np.asarray(sorted(election_years), dtype=np.int64)
    idx = np.searchsorted(elect, years, side="left")
    pooled = np.where(idx < elect.shape[0], elect[np.minimum(idx, elect.shape[0] - 1)], -1)
    return pooled


def _scan_zone(payload):
    """Scan all pooled years of one zone; used as the parallel work unit."""
    cz, years, scores, ylog, codes, n_counties, config, election_years = payload
    by_year = {}
    skips = []
    estimates = []
    for year in sorted(set(years.tolist())):
        sel = years == year
        ests, sk = _scan_arrays(scores[sel], ylog[sel], codes[sel], n_counties,
                                config, cz, int(year))
        estimates.extend(ests)
        skips.extend(sk)
        by_year[int(year)] = select_threshold(ests, config)
    thresholds = impute_thresholds(by_year, election_years)
    return thresholds, skips, estimates


def scan_credit_panel(records, config=RdConfig(), *,
                      election_years=DEFAULT_ELECTION_YEARS, workers=1,
                      pool_years=True, keep_estimates=False):
    """Scan every commuting zone in a credit panel.

    ``records`` is a table (DataFrame or column mapping) with columns
    credit_score, total_limit, county_fips, cz, year.  Non-election years
    are pooled into the next election year when ``pool_years`` is set.
    Zones are scanned independently (optionally across ``workers``
    processes) and merged in zone order, so output does not depend on the
    worker count.

    Returns ``(thresholds, skips)`` sorted by zone and year, or
    ``(thresholds, skips, estimates)`` when ``keep_estimates`` is set.
    """
    cz = np.asarray(records["cz"], dtype=np.int64)
    years = np.asarray(records["year"], dtype=np.int64)
    scores = np.asarray(records["credit_score"], dtype=np.float64)
    limits = np.asarray(records["total_limit"], dtype=np.float64)
    counties = np.asarray(records["county_fips"])

    if pool_years:
        pooled = pool_to_election_year(years, election_years)
    else:
        pooled = np.where(np.isin(years, np.asarray(election_years)), years, -1)
    keep = pooled >= 0
    cz, pooled, scores, limits, counties = (
        cz[keep], pooled[keep], scores[keep], limits[keep], counties[keep]
    )
    ylog = asinh_transform(limits)

    order = np.argsort(cz, kind="stable")
    cz_sorted = cz[order]
    zone_ids, starts = np.unique(cz_sorted, return_index=True)
    bounds = np.append(starts, cz_sorted.shape[0])

    payloads = []
    for i, zone in enumerate(zone_ids):
        sl = order[bounds[i]:bounds[i + 1]]
        zone_counties = counties[sl]
        _, codes = np.unique(zone_counties, return_inverse=True)
        payloads.append((
            int(zone), pooled[sl], scores[sl], ylog[sl],
            codes.astype(np.int64), int(codes.max()) + 1,
            config, tuple(election_years),
        ))

    if workers > 1 and len(payloads) > 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=workers)(delayed(_scan_zone)(p) for p in payloads)
    else:
        results = [_scan_zone(p) for p in payloads]

    thresholds = []
    skips = []
    estimates = []
    for th, sk, es in results:
        thresholds.extend(th)
        skips.extend(sk)
        if keep_estimates:
            estimates.extend(es)
    thresholds.sort(key=lambda t: (t.commuting_zone, t.year))
    skips.sort(key=lambda s: (s.commuting_zone, s.year, s.cutoff if s.cutoff is not None else -1))
    if keep_estimates:
        estimates.sort(key=lambda e: (e.commuting_zone, e.year, e.cutoff))
        return thresholds, skips, estimates
    return thresholds, skips
