"""Stage orchestration: simulate -> scan -> shares -> estimate -> report.

Each stage reads the previous stage's CSVs from the run directory, writes
its own outputs there, and drops a provenance manifest with the SHA-256 of
every file it touched plus the config that produced it.  Outputs carry no
timestamps, so a rerun with unchanged inputs is byte-identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from creditscan.errors import ConfigError, DependencyError, SchemaError
from creditscan.panel import (
    PanelEstimate,
    bandwidth_sweep,
    build_panel,
    estimate_above_below,
    estimate_baseline,
    estimate_nominate,
    format_estimates_table,
    gerrymander_window,
)
from creditscan.rdscan import RdConfig, scan_credit_panel
from creditscan.shares import (
    DEFAULT_BANDWIDTHS,
    ShareRecord,
    compute_shares,
    format_share_table,
    share_frame,
    summarize_shares,
    total_population,
)
from creditscan.synthlab import VoteDgp, WorldConfig, build_world, write_world

PACKAGE_VERSION = "0.1.0"
ALLOWED_BANDWIDTHS = set(DEFAULT_BANDWIDTHS)

SCHEMAS = {
    "credit_panel": ["cz", "county_fips", "cell_id", "year", "credit_score",
                     "total_limit"],
    "ccd_cells": ["cell_id", "county_fips", "cd", "cz", "state"],
    "thresholds": ["cz", "year", "cutoff", "alpha", "se", "t_stat",
                   "provenance", "source_year"],
    "scan_skips": ["cz", "year", "cutoff", "reason", "n_obs"],
    "shares": ["cell_id", "year", "bw", "share_tot", "share_above",
               "share_below", "pop"],
    "share_gaps": ["cz", "year", "reason"],
    "elections": ["cell_id", "year", "votes_rep", "votes_dem", "votes_other",
                  "winner_party", "nominate1"],
    "controls": ["cell_id", "year", "share_white", "share_female", "exposure",
                 "instrument", "pop"],
}


@dataclass
class PipelineConfig:
    """One run's knobs; every stage receives the same object."""

    out: Path = Path("run")
    seed: int = 0
    workers: int = 1
    bandwidths: tuple[int, ...] = DEFAULT_BANDWIDTHS
    bandwidth: int = 15
    years: tuple[int, ...] | None = None
    subset: str = "all"
    gerrymander: bool = False
    instrumented: bool = True
    rd: RdConfig = field(default_factory=RdConfig)
    world: WorldConfig = field(default_factory=WorldConfig)

    def __post_init__(self):
        self.out = Path(self.out)
        self.bandwidths = tuple(sorted({int(b) for b in self.bandwidths}))
        bad = set(self.bandwidths) - ALLOWED_BANDWIDTHS
        if bad:
            raise ConfigError(f"unsupported bandwidths: {sorted(bad)}")
        self.bandwidth = int(self.bandwidth)
        if self.bandwidth not in self.bandwidths:
            raise ConfigError(
                f"headline bandwidth {self.bandwidth} not in {self.bandwidths}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.years is not None:
            self.years = tuple(int(y) for y in self.years)
        if self.subset.lower().split("-")[0] not in {"all", "rep", "dem"}:
            raise ConfigError(f"unknown subset {self.subset!r}")
        self.world = dataclasses.replace(self.world, seed=self.seed)

    @classmethod
    def from_file(cls, path, **overrides):
        """Load a JSON config; keyword overrides win over file values."""
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
        return cls.from_dict({**raw, **{k: v for k, v in overrides.items()
                                        if v is not None}})

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if isinstance(raw.get("rd"), dict):
                raw["rd"] = RdConfig(**raw["rd"])
            if isinstance(raw.get("world"), dict):
                world = dict(raw["world"])
                if isinstance(world.get("vote_dgp"), dict):
                    world["vote_dgp"] = VoteDgp(**world["vote_dgp"])
                if isinstance(world.get("years"), list):
                    world["years"] = tuple(world["years"])
                raw["world"] = WorldConfig(**world)
            return cls(**raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc))

    def to_json_dict(self):
        body = dataclasses.asdict(self)
        body["out"] = str(self.out)
        body["world"] = self.world.to_json_dict()
        return body


def _sha256(path: Path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(cfg: PipelineConfig, stage, inputs, outputs):
    body = {
        "stage": stage,
        "version": PACKAGE_VERSION,
        "config": cfg.to_json_dict(),
        "inputs": {n: {"path": str(p), "sha256": _sha256(p)}
                   for n, p in sorted(inputs.items())},
        "outputs": {n: {"path": str(p), "sha256": _sha256(p)}
                    for n, p in sorted(outputs.items())},
    }
    path = cfg.out / f"manifest_{stage}.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def _read_stage_csv(cfg: PipelineConfig, name, *, empty_ok=False):
    path = cfg.out / f"{name}.csv"
    if not path.exists():
        raise DependencyError(
            f"{name}.csv not found in {cfg.out}; run the producing stage first")
    df = pd.read_csv(path, dtype={"cell_id": str, "county_fips": str,
                                  "state": str, "winner_party": str})
    missing = [c for c in SCHEMAS[name] if c not in df.columns]
    if missing:
        raise SchemaError(f"{name}.csv lacks columns: {missing}")
    if df.empty and not empty_ok:
        raise DependencyError(f"{name}.csv is empty")
    return df


def _to_csv(df: pd.DataFrame, path: Path):
    df.to_csv(path, index=False)
    return path


def stage_simulate(cfg: PipelineConfig):
    """Generate a synthetic world into the run directory."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    world = build_world(cfg.world)
    paths = write_world(world, cfg.out)
    return _write_manifest(cfg, "simulate", {}, paths)


def stage_scan(cfg: PipelineConfig):
    """Detect thresholds in the credit panel; write estimates and skips."""
    credit = _read_stage_csv(cfg, "credit_panel")
    years = cfg.years or tuple(sorted(credit["year"].unique()))
    thresholds, skips = scan_credit_panel(credit, cfg.rd,
                                          election_years=years,
                                          workers=cfg.workers)
    thr = pd.DataFrame(
        [{"cz": t.commuting_zone, "year": t.year, "cutoff": t.cutoff,
          "alpha": t.alpha, "se": t.se, "t_stat": t.t_stat,
          "provenance": t.provenance, "source_year": t.source_year}
         for t in thresholds], columns=SCHEMAS["thresholds"])
    sk = pd.DataFrame(
        [{"cz": s.commuting_zone, "year": s.year, "cutoff": s.cutoff,
          "reason": s.reason, "n_obs": s.n_obs} for s in skips],
        columns=SCHEMAS["scan_skips"])
    outputs = {
        "thresholds": _to_csv(thr, cfg.out / "thresholds.csv"),
        "scan_skips": _to_csv(sk, cfg.out / "scan_skips.csv"),
    }
    inputs = {"credit_panel": cfg.out / "credit_panel.csv"}
    return _write_manifest(cfg, "scan", inputs, outputs)


def stage_shares(cfg: PipelineConfig):
    """Compute threshold-proximity shares per cell-year and bandwidth."""
    credit = _read_stage_csv(cfg, "credit_panel")
    thresholds = _read_stage_csv(cfg, "thresholds", empty_ok=True)
    cells = _read_stage_csv(cfg, "ccd_cells")
    years = cfg.years or tuple(sorted(credit["year"].unique()))
    records, gaps = compute_shares(
        credit[["cell_id", "cz", "year", "credit_score"]],
        thresholds.to_dict("records"), cells,
        bandwidths=cfg.bandwidths, years=years)
    gp = pd.DataFrame(
        [{"cz": g.commuting_zone, "year": g.year, "reason": g.reason}
         for g in gaps], columns=SCHEMAS["share_gaps"])
    outputs = {
        "shares": _to_csv(share_frame(records), cfg.out / "shares.csv"),
        "share_gaps": _to_csv(gp, cfg.out / "share_gaps.csv"),
    }
    inputs = {name: cfg.out / f"{name}.csv"
              for name in ("credit_panel", "thresholds", "ccd_cells")}
    return _write_manifest(cfg, "shares", inputs, outputs)


def _estimate_models(cfg: PipelineConfig, shares, elections, controls):
    """The model set one estimate stage runs, in a fixed order."""
    if cfg.years is not None:
        years = list(cfg.years)
        shares = shares[shares["year"].isin(years)]
        elections = elections[elections["year"].isin(years)]
        controls = controls[controls["year"].isin(years)]
    panel = build_panel(shares, elections, controls, cfg.bandwidth)
    estimates: list[PanelEstimate] = []

    for outcome in ("rep", "dem"):
        estimates.append(estimate_baseline(
            panel, outcome=outcome, bandwidth=cfg.bandwidth,
            instrumented=cfg.instrumented))
    estimates.append(estimate_above_below(
        panel, outcome="rep", bandwidth=cfg.bandwidth,
        instrumented=cfg.instrumented))

    subsets = ("all", "rep", "dem") if cfg.subset == "all" else (cfg.subset,)
    for subset in subsets:
        estimates.append(estimate_nominate(
            panel, subset=subset, bandwidth=cfg.bandwidth,
            instrumented=cfg.instrumented))

    if cfg.gerrymander:
        window = gerrymander_window(panel)
        for outcome in ("rep", "dem"):
            est = estimate_baseline(window, outcome=outcome,
                                    bandwidth=cfg.bandwidth,
                                    instrumented=cfg.instrumented)
            est.notes["sample"] = "gerrymander"
            estimates.append(est)

    sweep = bandwidth_sweep(shares, elections, controls, outcome="rep",
                            bandwidths=cfg.bandwidths,
                            instrumented=cfg.instrumented)
    for est in sweep:
        est.notes["sample"] = "sweep"
    estimates.extend(sweep)
    return estimates


def stage_estimate(cfg: PipelineConfig):
    """Fit the model set and write estimates.json."""
    shares = _read_stage_csv(cfg, "shares")
    elections = _read_stage_csv(cfg, "elections")
    controls = _read_stage_csv(cfg, "controls")
    estimates = _estimate_models(cfg, shares, elections, controls)
    body = {
        "bandwidth": cfg.bandwidth,
        "bandwidths": list(cfg.bandwidths),
        "estimates": [e.to_json_dict() for e in estimates],
    }
    path = cfg.out / "estimates.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    inputs = {name: cfg.out / f"{name}.csv"
              for name in ("shares", "elections", "controls")}
    return _write_manifest(cfg, "estimate", inputs, {"estimates": path})


def _records_from_share_frame(df: pd.DataFrame):
    return [ShareRecord(r.cell_id, int(r.year), int(r.bw),
                        float(r.share_tot), float(r.share_above),
                        float(r.share_below), int(r.pop))
            for r in df.itertuples()]


def _table_section(title, lines):
    return [f"== {title} ==", *lines, ""]


def _estimate_from_json(body):
    """Rebuild the table-facing fields from one estimates.json entry."""
    from creditscan.kernel import RegressionResult

    names = tuple(body["coefficients"])
    params = np.array([body["coefficients"][n] for n in names])
    se = np.array([body["se"][n] for n in names])
    vcov = np.array(body["vcov"])
    n_clusters = body.get("n_clusters")
    result = RegressionResult(
        names=names, params=params, vcov=vcov, se=se,
        n_obs=body["n_obs"], n_clusters=n_clusters,
        r_squared=body["r2"], dof_residual=max(body["n_obs"] - len(names), 1),
        dof_inference=(n_clusters - 1) if n_clusters else
        max(body["n_obs"] - len(names), 1),
        vcov_type="CR1", diagnostics={}, _ctx=None)
    return PanelEstimate(
        outcome=body["outcome"], subset=body["subset"], spec=body["spec"],
        bandwidth=body["bandwidth"], result=result,
        dep_mean=body["dep_mean"], observations=body["observations"],
        n_rows=body["n_rows"], notes=body.get("notes", {}))


def stage_report(cfg: PipelineConfig):
    """Render the text tables from estimates.json and shares.csv."""
    est_path = cfg.out / "estimates.json"
    if not est_path.exists():
        raise DependencyError(f"estimates.json not found in {cfg.out}")
    body = json.loads(est_path.read_text())
    estimates = [_estimate_from_json(e) for e in body["estimates"]]

    def pick(**want):
        out = []
        for e in estimates:
            sample = e.notes.get("sample", "full")
            if want.get("sample", "full") != sample:
                continue
            if all(getattr(e, k) == v for k, v in want.items()
                   if k != "sample"):
                out.append(e)
        return out

    lines = []
    vote = pick(spec="baseline", outcome="vote_share_rep") + \
        pick(spec="baseline", outcome="vote_share_dem")
    if vote:
        lines += _table_section(
            f"Vote share, bandwidth {body['bandwidth']}",
            format_estimates_table(
                vote, ["Rep. share" if "rep" in e.outcome else "Dem. share"
                       for e in vote]).splitlines())
    else:
        lines += _table_section(
            f"Vote share, bandwidth {body['bandwidth']}", ["Variable &"])

    split = pick(spec="above_below")
    if split:
        lines += _table_section(
            "Above and below the threshold",
            format_estimates_table(split, ["Rep. share"]).splitlines())

    nom = pick(spec="baseline", outcome="nominate1")
    if nom:
        lines += _table_section(
            "Winner ideology",
            format_estimates_table(
                nom, [f"subset: {e.subset}" for e in nom]).splitlines())

    gerry = [e for e in estimates if e.notes.get("sample") == "gerrymander"]
    if gerry:
        lines += _table_section(
            "Fixed-boundary years",
            format_estimates_table(
                gerry, ["Rep. share" if "rep" in e.outcome else "Dem. share"
                        for e in gerry]).splitlines())

    sweep = [e for e in estimates if e.notes.get("sample") == "sweep"]
    if sweep:
        sweep.sort(key=lambda e: (e.outcome, e.subset, e.bandwidth))
        lines += _table_section(
            "Bandwidth sweep",
            format_estimates_table(
                sweep, [f"BW {e.bandwidth}" for e in sweep]).splitlines())

    shares_path = cfg.out / "shares.csv"
    inputs = {"estimates": est_path}
    if shares_path.exists():
        df = _read_stage_csv(cfg, "shares", empty_ok=True)
        records = _records_from_share_frame(df)
        stats = summarize_shares(records)
        lines += _table_section(
            "Share summary",
            format_share_table(
                stats, total_observations=total_population(records)
            ).splitlines())
        inputs["shares"] = shares_path

    path = cfg.out / "report.txt"
    path.write_text("\n".join(lines))
    return _write_manifest(cfg, "report", inputs, {"report": path})


STAGES = {
    "simulate": stage_simulate,
    "scan": stage_scan,
    "shares": stage_shares,
    "estimate": stage_estimate,
    "report": stage_report,
}

STAGE_ORDER = ("simulate", "scan", "shares", "estimate", "report")


def run_pipeline(cfg: PipelineConfig, stages=STAGE_ORDER):
    """Run the named stages in pipeline order."""
    order = [s for s in STAGE_ORDER if s in set(stages)]
    unknown = set(stages) - set(STAGE_ORDER)
    if unknown:
        raise ConfigError(f"unknown stages: {sorted(unknown)}")
    manifests = []
    for name in order:
        manifests.append(STAGES[name](cfg))
    return manifests
