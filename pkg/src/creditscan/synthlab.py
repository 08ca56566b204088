"""Synthetic worlds with planted thresholds and treatment effects.

Generates credit panels whose limits jump at known cutoffs, a nested
geography (zones, counties, districts), and election panels whose vote
shares load on the threshold-proximity share with known coefficients.
The planted values are the ground truth every estimator test grades
against.  Generation is deterministic: one seed sequence is split into
per-zone streams, so worker count never changes output.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np
import pandas as pd

from creditscan.errors import ConfigError
from creditscan.geo import CcdCell, build_ccd_cells
from creditscan.panel import build_panel, estimate_baseline
from creditscan.rdscan import (
    DEFAULT_ELECTION_YEARS,
    PROVENANCE_DETECTED,
    RdConfig,
    scan_credit_panel,
)
from creditscan.shares import compute_shares, share_frame

ELECTION_YEARS = tuple(DEFAULT_ELECTION_YEARS)
THRESHOLD_GRID = tuple(range(560, 661, 5))

# asinh-scale limit profile: level and curvature chosen so the level at
# score 600 is about asinh(11000) and limits stay positive over [300, 850]
PROFILE = (10.0, 1.2, -0.15)


@dataclass(frozen=True)
class VoteDgp:
    """Planted coefficients for the election outcome equations."""

    beta_share: float = 0.27
    beta_nominate: float = 0.509
    gamma_white: float = 0.1
    gamma_female: float = 0.0
    gamma_china: float = -0.05
    cell_sd: float = 0.03
    year_sd: float = 0.02
    noise_sd: float = 0.02
    confound: float = 0.0
    other_frac: float = 0.0
    turnout: float = 0.6
    nominate_noise_sd: float = 0.05
    nominate_missing: float = 0.0


@dataclass(frozen=True)
class WorldConfig:
    """Shape and planted truth of one synthetic world."""

    n_czs: int = 20
    counties_per_cz: int = 2
    cells_per_county: int = 2
    persons_per_cz: int = 1500
    years: tuple[int, ...] = ELECTION_YEARS
    threshold: object = 600
    planted_jump: float = 1.14
    score_mean: float = 639.0
    score_sd: float = 98.0
    monthly_drift: float = 5.0
    limit_noise_sd: float = 0.35
    bunching: float = 0.0
    vote_dgp: VoteDgp = VoteDgp()
    seed: int = 0

    def __post_init__(self):
        for name in ("n_czs", "counties_per_cz", "cells_per_county",
                     "persons_per_cz"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if not self.years:
            raise ConfigError("years must be nonempty")
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))
        for value in self._threshold_values():
            if value is not None and (value not in THRESHOLD_GRID):
                raise ConfigError(
                    f"planted threshold {value} is off the 5-point grid")
        if not 0.0 <= self.bunching < 1.0:
            raise ConfigError("bunching must be in [0, 1)")

    def _threshold_values(self):
        if self.threshold is None or self.threshold == "random":
            return []
        if isinstance(self.threshold, Mapping):
            return list(self.threshold.values())
        return [self.threshold]

    def resolve_thresholds(self):
        """Materialize the planted (zone, year) -> cutoff map."""
        out = {}
        if self.threshold == "random":
            rng = np.random.default_rng(
                np.random.SeedSequence([self.seed, 0xC0]))
            picks = rng.choice(THRESHOLD_GRID, size=self.n_czs)
            for cz in range(1, self.n_czs + 1):
                for year in self.years:
                    out[(cz, year)] = int(picks[cz - 1])
            return out
        for cz in range(1, self.n_czs + 1):
            for year in self.years:
                if self.threshold is None:
                    value = None
                elif isinstance(self.threshold, Mapping):
                    value = self.threshold.get((cz, year))
                else:
                    value = int(self.threshold)
                if value is not None:
                    out[(cz, year)] = int(value)
        return out

    def to_json_dict(self):
        body = asdict(self)
        if isinstance(self.threshold, Mapping):
            body["threshold"] = {f"{cz}:{yr}": v
                                 for (cz, yr), v in self.threshold.items()}
        return body


@dataclass
class World:
    """One realized synthetic world plus its ground truth."""

    config: WorldConfig
    credit: pd.DataFrame
    thresholds: dict
    cells: list[CcdCell]
    county_cz: pd.DataFrame
    elections: pd.DataFrame
    controls: pd.DataFrame
    true_shares: pd.DataFrame


def build_geography(config: WorldConfig):
    """Nested zone/county/district tables; codes unique by construction."""
    assign_rows = []
    county_rows = []
    for cz in range(1, config.n_czs + 1):
        state = (cz - 1) // 20 + 1
        within = (cz - 1) % 20
        for c in range(config.counties_per_cz):
            county_seq = within * config.counties_per_cz + c + 1
            fips = f"{state:02d}{county_seq:03d}"
            county_rows.append({"county_fips": fips, "cz": cz})
            for d in range(config.cells_per_county):
                # wrap keeps district numbers in 1..99; cells stay unique
                # because the county code is part of the cell id
                cd = ((county_seq - 1) * config.cells_per_county + d) % 99 + 1
                assign_rows.append({"county_fips": fips, "cd": cd})
    county_cz = pd.DataFrame(county_rows)
    cells, exclusions = build_ccd_cells(pd.DataFrame(assign_rows), county_cz)
    if exclusions:
        raise ConfigError("synthetic geography produced exclusions")
    return cells, county_cz


def _zone_credit(seed_seq, cz, counties, cells_by_county, config, thresholds):
    """Person-year credit records for one zone from its own stream."""
    rng = np.random.default_rng(seed_seq)
    n = config.persons_per_cz
    years = np.asarray(config.years, dtype=np.int64)
    n_years = years.shape[0]

    county_idx = rng.integers(0, len(counties), n)
    cell_choice = rng.integers(0, config.cells_per_county, n)
    person_county = np.asarray(counties)[county_idx]
    person_cell = np.array([
        cells_by_county[c][j] for c, j in zip(person_county, cell_choice)
    ])

    total = n * n_years
    scores = rng.normal(config.score_mean, config.score_sd, total)
    scores += rng.uniform(-config.monthly_drift, config.monthly_drift, total)
    scores = np.clip(np.round(scores), 300, 850)
    year_col = np.repeat(years, n)

    cut = np.full(total, -1.0)
    for j, year in enumerate(config.years):
        t = thresholds.get((cz, int(year)))
        if t is not None:
            cut[j * n:(j + 1) * n] = t

    if config.bunching > 0:
        # relocate a slice of just-below mass to just above the cutoff,
        # leaving a dip/spike the density diagnostic should flag
        near = (cut > 0) & (scores >= cut - 5) & (scores <= cut - 1)
        move = near & (rng.random(total) < config.bunching)
        scores[move] = cut[move] + np.floor(rng.uniform(0, 5, int(move.sum())))

    a0, a1, a2 = PROFILE
    u = (scores - 600.0) / 100.0
    ylog = a0 + a1 * u + a2 * u * u
    ylog = ylog + np.where((cut > 0) & (scores >= cut), config.planted_jump, 0.0)
    ylog = ylog + rng.normal(0.0, config.limit_noise_sd, total)

    return pd.DataFrame({
        "cz": np.full(total, cz, dtype=np.int64),
        "county_fips": np.tile(person_county, n_years),
        "cell_id": np.tile(person_cell, n_years),
        "year": year_col,
        "credit_score": scores.astype(np.int64),
        "total_limit": np.sinh(ylog),
    })


def generate_credit_panel(config: WorldConfig):
    """All zones' credit records plus the planted threshold map."""
    thresholds = config.resolve_thresholds()
    cells, county_cz = build_geography(config)
    by_county = {}
    for cell in cells:
        by_county.setdefault(cell.county_fips, []).append(cell.cell_id)
    zone_counties = {
        cz: sorted(county_cz.loc[county_cz["cz"] == cz, "county_fips"])
        for cz in range(1, config.n_czs + 1)
    }
    streams = np.random.SeedSequence([config.seed, 0x01]).spawn(config.n_czs)
    frames = [
        _zone_credit(streams[cz - 1], cz, zone_counties[cz], by_county,
                     config, thresholds)
        for cz in range(1, config.n_czs + 1)
    ]
    credit = pd.concat(frames, ignore_index=True)
    return credit, thresholds, cells, county_cz


def generate_election_panel(credit, thresholds, cells, config: WorldConfig):
    """Cell-year elections and controls with planted share effects.

    The Republican share loads on the bandwidth-15 share around the planted
    thresholds; the Democratic share is one minus it (minus a fixed other
    slice), so votes are real-valued and mirror exactly when the other
    slice is zero.
    """
    dgp = config.vote_dgp
    records, _ = compute_shares(
        credit[["cell_id", "cz", "year", "credit_score"]], thresholds, cells,
        bandwidths=(15,), years=config.years)
    sh = share_frame(records)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x02]))

    cell_ids = sorted({c.cell_id for c in cells})
    cell_fe = dict(zip(cell_ids, rng.normal(0, dgp.cell_sd, len(cell_ids))))
    cell_fe_nom = dict(zip(cell_ids, rng.normal(0, dgp.cell_sd, len(cell_ids))))
    cell_white = dict(zip(cell_ids, rng.uniform(0.45, 0.85, len(cell_ids))))
    year_list = list(config.years)
    year_fe = dict(zip(year_list, rng.normal(0, dgp.year_sd, len(year_list))))
    year_fe_nom = dict(zip(year_list, rng.normal(0, dgp.year_sd, len(year_list))))

    n = sh.shape[0]
    share = sh["share_tot"].fillna(0.0).to_numpy()
    fe_c = sh["cell_id"].map(cell_fe).to_numpy()
    fe_y = sh["year"].map(year_fe).to_numpy()
    white = np.clip(sh["cell_id"].map(cell_white).to_numpy()
                    + rng.normal(0, 0.02, n), 0.3, 0.95)
    female = np.clip(0.5 + rng.normal(0, 0.02, n), 0.4, 0.6)
    z = rng.normal(size=n)
    q = rng.normal(size=n)
    exposure = 0.8 * z + dgp.confound * q + 0.3 * rng.normal(size=n)

    rep = (0.5 + dgp.beta_share * share
           + dgp.gamma_white * (white - 0.65)
           + dgp.gamma_female * (female - 0.5)
           + dgp.gamma_china * exposure
           + fe_c + fe_y
           + dgp.noise_sd * rng.normal(size=n)
           + 0.5 * dgp.confound * q)
    rep = np.clip(rep, 0.0, 1.0 - dgp.other_frac)

    pop = sh["pop"].to_numpy(dtype=np.float64)
    votes_total = dgp.turnout * pop
    votes_rep = rep * votes_total
    votes_other = dgp.other_frac * votes_total
    votes_dem = votes_total - votes_rep - votes_other

    nominate = (0.1 + dgp.beta_nominate * share
                + dgp.gamma_china * exposure
                + sh["cell_id"].map(cell_fe_nom).to_numpy()
                + sh["year"].map(year_fe_nom).to_numpy()
                + dgp.nominate_noise_sd * rng.normal(size=n))
    if dgp.nominate_missing > 0:
        nominate = np.where(rng.random(n) < dgp.nominate_missing,
                            np.nan, nominate)

    elections = pd.DataFrame({
        "cell_id": sh["cell_id"], "year": sh["year"],
        "votes_rep": votes_rep, "votes_dem": votes_dem,
        "votes_other": votes_other,
        "winner_party": np.where(votes_rep > votes_dem, "R", "D"),
        "nominate1": nominate,
    })
    controls = pd.DataFrame({
        "cell_id": sh["cell_id"], "year": sh["year"],
        "share_white": white, "share_female": female,
        "exposure": exposure, "instrument": z, "pop": pop,
    })
    return elections, controls, sh


def build_world(config: WorldConfig) -> World:
    credit, thresholds, cells, county_cz = generate_credit_panel(config)
    elections, controls, true_shares = generate_election_panel(
        credit, thresholds, cells, config)
    return World(config, credit, thresholds, cells, county_cz,
                 elections, controls, true_shares)


def write_world(world: World, outdir):
    """Write the world as the CSV set the pipeline consumes.

    Returns a name -> path mapping.  Files are byte-stable for a fixed
    config and seed.
    """
    from pathlib import Path

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    paths["credit_panel"] = out / "credit_panel.csv"
    world.credit.to_csv(paths["credit_panel"], index=False)

    cells = pd.DataFrame([{
        "cell_id": c.cell_id, "county_fips": c.county_fips,
        "cd": c.congressional_district, "cz": c.commuting_zone,
        "state": c.state,
    } for c in world.cells])
    paths["ccd_cells"] = out / "ccd_cells.csv"
    cells.to_csv(paths["ccd_cells"], index=False)

    truth = pd.DataFrame(
        [{"cz": cz, "year": yr, "cutoff": cut}
         for (cz, yr), cut in sorted(world.thresholds.items())])
    paths["planted_thresholds"] = out / "planted_thresholds.csv"
    truth.to_csv(paths["planted_thresholds"], index=False)

    paths["elections"] = out / "elections.csv"
    world.elections.to_csv(paths["elections"], index=False)
    paths["controls"] = out / "controls.csv"
    world.controls.to_csv(paths["controls"], index=False)

    paths["world_config"] = out / "world_config.json"
    paths["world_config"].write_text(
        json.dumps(world.config.to_json_dict(), indent=2, sort_keys=True)
        + "\n")
    return paths


@dataclass
class MonteCarloReport:
    """Rejection, coverage, and recovery rates with their own MC errors."""

    replications: int
    planted_beta: float
    mean_beta: float
    beta_coverage: float
    beta_rejection: float
    coverage_se: float
    rejection_se: float
    cutoff_recovery: float | None = None
    recovery_se: float | None = None
    mean_alpha: float | None = None

    def to_json_dict(self):
        return asdict(self)


def _binomial_se(p, n):
    return float(np.sqrt(max(p * (1.0 - p), 0.0) / n))


def monte_carlo(config: WorldConfig, replications, *, scan=False,
                rd_config=RdConfig(), level=0.95) -> MonteCarloReport:
    """Replicate world -> estimate and grade against the planted truth.

    With ``scan`` the thresholds are re-detected per replication and cutoff
    recovery (within one grid step of truth) is reported; otherwise the
    planted thresholds feed the share builder directly.
    """
    if replications < 100:
        raise ConfigError("monte_carlo needs at least 100 replications")
    beta = config.vote_dgp.beta_share
    betas = np.empty(replications)
    covered = np.zeros(replications, dtype=bool)
    rejected = np.zeros(replications, dtype=bool)
    recovered = []
    alphas = []

    for rep in range(replications):
        world = build_world(replace(config, seed=config.seed + rep))
        if scan:
            detected, _ = scan_credit_panel(
                world.credit, rd_config, election_years=config.years)
            for est in detected:
                truth = world.thresholds.get(
                    (est.commuting_zone, est.year))
                if truth is not None and est.provenance == PROVENANCE_DETECTED:
                    recovered.append(abs(est.cutoff - truth) <= 5)
                    alphas.append(est.alpha)
            thresholds = detected
        else:
            thresholds = world.thresholds
        records, _ = compute_shares(
            world.credit[["cell_id", "cz", "year", "credit_score"]],
            thresholds, world.cells, bandwidths=(15,), years=config.years)
        panel = build_panel(share_frame(records), world.elections,
                            world.controls, 15)
        est = estimate_baseline(panel, outcome="rep", bandwidth=15)
        i = est.result.names.index("share_total")
        betas[rep] = est.result.params[i]
        lo, hi = est.result.conf_int(level)[i]
        covered[rep] = lo <= beta <= hi
        rejected[rep] = est.result.p_values[i] < (1.0 - level)

    coverage = float(covered.mean())
    rejection = float(rejected.mean())
    report = MonteCarloReport(
        replications=replications,
        planted_beta=beta,
        mean_beta=float(betas.mean()),
        beta_coverage=coverage,
        beta_rejection=rejection,
        coverage_se=_binomial_se(coverage, replications),
        rejection_se=_binomial_se(rejection, replications),
    )
    if scan and recovered:
        rate = float(np.mean(recovered))
        report.cutoff_recovery = rate
        report.recovery_se = _binomial_se(rate, len(recovered))
        report.mean_alpha = float(np.mean(alphas))
    return report
