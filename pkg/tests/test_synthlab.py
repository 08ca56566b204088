"""Synthetic-lab tests: world construction, determinism, planted-truth
recovery, bunching diagnostics, and the Monte Carlo harness."""

import hashlib
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from creditscan.errors import ConfigError
from creditscan.panel import build_panel, estimate_baseline
from creditscan.rdscan import (
    RdConfig,
    density_smoothness_test,
    scan_credit_panel,
)
from creditscan.shares import share_frame
from creditscan.synthlab import (
    THRESHOLD_GRID,
    MonteCarloReport,
    VoteDgp,
    World,
    WorldConfig,
    build_geography,
    build_world,
    generate_credit_panel,
    monte_carlo,
    write_world,
)


def small_config(**kw):
    base = dict(n_czs=4, counties_per_cz=2, cells_per_county=2,
                persons_per_cz=600, years=(2012, 2014, 2016), seed=5)
    base.update(kw)
    return WorldConfig(**base)


class TestWorldConfig:
    def test_counts_validated(self):
        with pytest.raises(ConfigError, match="n_czs"):
            WorldConfig(n_czs=0)
        with pytest.raises(ConfigError, match="persons"):
            WorldConfig(persons_per_cz=0)

    def test_threshold_must_sit_on_grid(self):
        with pytest.raises(ConfigError, match="grid"):
            WorldConfig(threshold=603)
        with pytest.raises(ConfigError, match="grid"):
            WorldConfig(threshold={(1, 2012): 562})

    def test_bunching_range(self):
        with pytest.raises(ConfigError, match="bunching"):
            WorldConfig(bunching=1.0)

    def test_resolve_scalar(self):
        cfg = small_config(threshold=620)
        resolved = cfg.resolve_thresholds()
        assert resolved[(1, 2012)] == 620
        assert len(resolved) == cfg.n_czs * len(cfg.years)

    def test_resolve_none_is_empty(self):
        assert small_config(threshold=None).resolve_thresholds() == {}

    def test_resolve_mapping_partial(self):
        cfg = small_config(threshold={(1, 2012): 580, (2, 2014): 640})
        resolved = cfg.resolve_thresholds()
        assert resolved == {(1, 2012): 580, (2, 2014): 640}

    def test_resolve_random_on_grid_and_deterministic(self):
        cfg = small_config(threshold="random", n_czs=12)
        a = cfg.resolve_thresholds()
        b = cfg.resolve_thresholds()
        assert a == b
        values = {a[(cz, 2012)] for cz in range(1, 13)}
        assert values <= set(THRESHOLD_GRID)
        assert len(values) > 1
        # per-zone constant across years
        for cz in range(1, 13):
            assert len({a[(cz, y)] for y in cfg.years}) == 1

    def test_json_dict_serializes_mapping_keys(self):
        cfg = small_config(threshold={(1, 2012): 580})
        body = cfg.to_json_dict()
        assert body["threshold"] == {"1:2012": 580}


class TestGeography:
    def test_cell_universe_size(self):
        cfg = small_config(n_czs=3, counties_per_cz=2, cells_per_county=3)
        cells, county_cz = build_geography(cfg)
        assert len(cells) == 3 * 2 * 3
        assert len({c.cell_id for c in cells}) == len(cells)
        assert len(county_cz) == 6

    def test_counties_nest_in_zones(self):
        cfg = small_config(n_czs=5)
        cells, county_cz = build_geography(cfg)
        zone_of = dict(zip(county_cz["county_fips"], county_cz["cz"]))
        for cell in cells:
            assert cell.commuting_zone == zone_of[cell.county_fips]
            assert cell.county_fips.startswith(cell.state)

    def test_district_numbers_two_digit(self):
        cfg = small_config(n_czs=25, counties_per_cz=3, cells_per_county=2)
        cells, _ = build_geography(cfg)
        assert all(1 <= c.congressional_district <= 99 for c in cells)


class TestCreditPanel:
    def test_row_count_and_columns(self):
        cfg = small_config()
        credit, thresholds, cells, _ = generate_credit_panel(cfg)
        assert len(credit) == cfg.n_czs * cfg.persons_per_cz * len(cfg.years)
        assert set(credit.columns) == {"cz", "county_fips", "cell_id", "year",
                                       "credit_score", "total_limit"}
        assert len(thresholds) == cfg.n_czs * len(cfg.years)

    def test_same_seed_identical(self):
        a, _, _, _ = generate_credit_panel(small_config())
        b, _, _, _ = generate_credit_panel(small_config())
        pd.testing.assert_frame_equal(a, b)

    def test_different_seed_differs(self):
        a, _, _, _ = generate_credit_panel(small_config(seed=5))
        b, _, _, _ = generate_credit_panel(small_config(seed=6))
        assert not a["credit_score"].equals(b["credit_score"])

    def test_zone_streams_are_independent_of_world_size(self):
        # zone 1 draws from its own stream, so adding zones cannot move it
        a, _, _, _ = generate_credit_panel(small_config(n_czs=2))
        b, _, _, _ = generate_credit_panel(small_config(n_czs=6))
        pd.testing.assert_frame_equal(
            a[a["cz"] == 1].reset_index(drop=True),
            b[b["cz"] == 1].reset_index(drop=True))

    def test_score_mass_below_560(self):
        cfg = small_config(n_czs=10, persons_per_cz=3000, years=(2012,))
        credit, _, _, _ = generate_credit_panel(cfg)
        frac = (credit["credit_score"] < 560).mean()
        assert abs(frac - 0.21) < 0.02

    def test_scores_bounded(self):
        credit, _, _, _ = generate_credit_panel(small_config())
        assert credit["credit_score"].between(300, 850).all()
        assert (credit["total_limit"] > 0).all()

    def test_scanner_detects_planted_threshold(self):
        cfg = small_config(n_czs=1, persons_per_cz=2500, years=(2012,),
                           threshold=620)
        credit, _, _, _ = generate_credit_panel(cfg)
        found, skips = scan_credit_panel(credit, election_years=(2012,))
        assert len(found) == 1
        assert abs(found[0].cutoff - 620) <= 5
        assert abs(found[0].alpha - cfg.planted_jump) < 0.3

    def test_null_world_mostly_clean_at_strict_level(self):
        # 21 correlated cutoff tests inflate the familywise rate, so the
        # per-cutoff level must be tightened for a quiet null scan
        cfg = small_config(n_czs=40, persons_per_cz=2000, years=(2012,),
                           planted_jump=0.0)
        credit, _, _, _ = generate_credit_panel(cfg)
        strict = RdConfig(alpha_level=0.002)
        found, _ = scan_credit_panel(credit, strict, election_years=(2012,))
        assert len(found) / cfg.n_czs <= 0.10

    def test_null_world_noisy_at_default_level(self):
        cfg = small_config(n_czs=40, persons_per_cz=2000, years=(2012,),
                           planted_jump=0.0, seed=9)
        credit, _, _, _ = generate_credit_panel(cfg)
        found, _ = scan_credit_panel(credit, election_years=(2012,))
        rate = len(found) / cfg.n_czs
        assert rate <= 21 * 0.025
        assert rate > 0.10


class TestBunching:
    def payload(self, bunching, seed=13):
        cfg = small_config(n_czs=1, persons_per_cz=5000, years=(2012,),
                           threshold=600, bunching=bunching, seed=seed)
        credit, _, _, _ = generate_credit_panel(cfg)
        return credit["credit_score"].to_numpy(dtype=np.float64)

    def test_smooth_density_passes(self):
        result = density_smoothness_test(self.payload(0.0), 600)
        assert result.passed

    def test_bunching_detected(self):
        result = density_smoothness_test(self.payload(0.5), 600)
        assert not result.passed
        assert not result.inconclusive


class TestElectionPanel:
    def test_vote_totals_and_mirror(self):
        world = build_world(small_config())
        el = world.elections
        ct = world.controls
        totals = el["votes_rep"] + el["votes_dem"] + el["votes_other"]
        np.testing.assert_allclose(
            totals, world.config.vote_dgp.turnout * ct["pop"], rtol=1e-12)
        assert (el["votes_other"] == 0).all()
        np.testing.assert_allclose(el["votes_dem"],
                                   totals - el["votes_rep"], rtol=1e-12)

    def test_other_fraction(self):
        world = build_world(small_config(
            vote_dgp=VoteDgp(other_frac=0.05)))
        el = world.elections
        totals = el["votes_rep"] + el["votes_dem"] + el["votes_other"]
        pos = totals > 0
        np.testing.assert_allclose(
            (el["votes_other"][pos] / totals[pos]), 0.05, atol=1e-12)

    def test_winner_consistent(self):
        world = build_world(small_config())
        el = world.elections
        expect = np.where(el["votes_rep"] > el["votes_dem"], "R", "D")
        assert (el["winner_party"] == expect).all()

    def test_nominate_missing_fraction(self):
        world = build_world(small_config(
            n_czs=10, vote_dgp=VoteDgp(nominate_missing=0.3)))
        frac = world.elections["nominate1"].isna().mean()
        assert abs(frac - 0.3) < 0.08

    def test_noiseless_world_recovers_planted_coefficients_exactly(self):
        dgp = VoteDgp(noise_sd=0.0, cell_sd=0.0, year_sd=0.0, confound=0.0)
        world = build_world(small_config(n_czs=6, persons_per_cz=900,
                                         vote_dgp=dgp))
        panel = build_panel(share_frame_of(world), world.elections,
                            world.controls, 15)
        panel = panel.assign(weight=1.0)
        est = estimate_baseline(panel, outcome="rep", bandwidth=15)
        assert abs(est.result["share_total"] - 0.27) < 1e-10
        assert abs(est.result["share_white"] - 0.1) < 1e-10
        assert abs(est.result["exposure"] - (-0.05)) < 1e-10

    def test_planted_beta_recovered_with_noise(self):
        world = build_world(small_config(n_czs=30, persons_per_cz=700, seed=2))
        panel = build_panel(share_frame_of(world), world.elections,
                            world.controls, 15)
        est = estimate_baseline(panel, outcome="rep", bandwidth=15)
        assert abs(est.result["share_total"] - 0.27) < 4 * est.result.se_of(
            "share_total")


def share_frame_of(world: World):
    from creditscan.shares import compute_shares

    records, _ = compute_shares(
        world.credit[["cell_id", "cz", "year", "credit_score"]],
        world.thresholds, world.cells, bandwidths=(15,),
        years=world.config.years)
    return share_frame(records)


class TestWriteWorld:
    def test_files_and_headers(self, tmp_path):
        world = build_world(small_config(n_czs=2, persons_per_cz=200))
        paths = write_world(world, tmp_path / "w")
        assert set(paths) == {"credit_panel", "ccd_cells",
                              "planted_thresholds", "elections", "controls",
                              "world_config"}
        head = Path(paths["credit_panel"]).read_text().splitlines()[0]
        assert head == "cz,county_fips,cell_id,year,credit_score,total_limit"
        head = Path(paths["controls"]).read_text().splitlines()[0]
        assert head == ("cell_id,year,share_white,share_female,exposure,"
                        "instrument,pop")

    def test_byte_identical_across_rebuilds(self, tmp_path):
        cfg = small_config(n_czs=2, persons_per_cz=200)
        p1 = write_world(build_world(cfg), tmp_path / "a")
        p2 = write_world(build_world(cfg), tmp_path / "b")
        for key in p1:
            h1 = hashlib.sha256(Path(p1[key]).read_bytes()).hexdigest()
            h2 = hashlib.sha256(Path(p2[key]).read_bytes()).hexdigest()
            assert h1 == h2, key


class TestMonteCarlo:
    def test_replication_floor(self):
        with pytest.raises(ConfigError, match="100"):
            monte_carlo(small_config(), 50)

    def test_coverage_and_power(self):
        cfg = WorldConfig(n_czs=5, counties_per_cz=2, cells_per_county=2,
                          persons_per_cz=500, seed=3)
        report = monte_carlo(cfg, 100)
        assert isinstance(report, MonteCarloReport)
        assert report.beta_coverage >= 0.90
        assert abs(report.mean_beta - 0.27) < 0.03
        assert report.beta_rejection >= 0.8
        assert report.coverage_se == pytest.approx(
            np.sqrt(report.beta_coverage * (1 - report.beta_coverage) / 100))
        assert report.cutoff_recovery is None

    def test_null_effect_size(self):
        cfg = WorldConfig(n_czs=5, counties_per_cz=2, cells_per_county=2,
                          persons_per_cz=500, seed=17,
                          vote_dgp=VoteDgp(beta_share=0.0))
        report = monte_carlo(cfg, 150)
        assert 0.005 <= report.beta_rejection <= 0.12
        assert report.beta_coverage >= 0.90

    def test_scan_mode_recovers_cutoffs(self):
        cfg = WorldConfig(n_czs=2, counties_per_cz=2, cells_per_county=2,
                          persons_per_cz=1200, years=(2012, 2014, 2016),
                          threshold=620, seed=23)
        report = monte_carlo(cfg, 100, scan=True)
        assert report.cutoff_recovery is not None
        assert report.cutoff_recovery >= 0.95
        assert abs(report.mean_alpha - 1.14) < 0.1
        assert report.beta_coverage >= 0.90

    def test_to_json_dict(self):
        cfg = WorldConfig(n_czs=4, counties_per_cz=2, cells_per_county=2,
                          persons_per_cz=400, seed=29)
        report = monte_carlo(cfg, 100)
        body = report.to_json_dict()
        assert body["replications"] == 100
        assert body["planted_beta"] == 0.27
