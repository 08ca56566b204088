"""Population shares near thresholds, per cell, year, and bandwidth.

For each county-by-district cell and election year, the share of scored
individuals whose credit score falls within b points of the commuting
zone's threshold, split into the below and above sides.  A score at the
threshold counts as above, mirroring the jump indicator in the scan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from creditscan.errors import SchemaError
from creditscan.geo import CcdCell
from creditscan.rdscan import ThresholdEstimate

DEFAULT_BANDWIDTHS = (5, 10, 15, 20, 25)


@dataclass(frozen=True)
class ShareRecord:
    """Threshold-proximity shares for one cell, year, and bandwidth.

    share_total is defined as share_above + share_below (the sides
    partition the window), so additivity holds to the last bit.  Cell-years
    whose zone has no threshold carry NaN shares.
    """

    cell_id: str
    year: int
    bandwidth: int
    share_total: float
    share_above: float
    share_below: float
    cell_population: int

    @property
    def has_shares(self):
        return not math.isnan(self.share_total)


@dataclass(frozen=True)
class ShareGap:
    """A zone-year that reached the share builder without a threshold."""

    commuting_zone: int
    year: int
    reason: str


@dataclass(frozen=True)
class ShareStat:
    """Weighted summary of one share variable at one bandwidth."""

    kind: str
    bandwidth: int
    mean: float
    sd: float
    minimum: float
    maximum: float

    @property
    def label(self):
        return f"share({self.kind}), BW: {self.bandwidth}"


def _threshold_map(thresholds):
    if isinstance(thresholds, Mapping):
        return {(int(cz), int(y)): int(c) for (cz, y), c in thresholds.items()}
    out = {}
    for t in thresholds:
        if isinstance(t, ThresholdEstimate):
            out[(int(t.commuting_zone), int(t.year))] = int(t.cutoff)
        else:
            out[(int(t["cz"]), int(t["year"]))] = int(t["cutoff"])
    return out


def _cell_frame(cells):
    if isinstance(cells, pd.DataFrame):
        df = cells
    elif cells and isinstance(next(iter(cells)), CcdCell):
        df = pd.DataFrame(
            {"cell_id": [c.cell_id for c in cells],
             "cz": [c.commuting_zone for c in cells]}
        )
    else:
        df = pd.DataFrame(cells)
    if not {"cell_id", "cz"} <= set(df.columns):
        raise SchemaError("cells need cell_id and cz columns")
    df = df.drop_duplicates("cell_id").sort_values("cell_id")
    return df.reset_index(drop=True)


def compute_shares(records, thresholds, cells, bandwidths=DEFAULT_BANDWIDTHS,
                   years=None):
    """Count scored individuals near each zone-year threshold, per cell.

    With threshold t and bandwidth b, the below side is scores in
    [t-b, t-1] and the above side is [t, t+b-1].  Shares divide by the
    cell-year's scored population.  Every (cell, year, bandwidth) in the
    universe is emitted: empty cell-years get zero shares with population
    zero; cell-years whose zone lacks a threshold get NaN shares and the
    zone-year is logged once.  Returns ``(share_records, gaps)`` ordered by
    cell, year, bandwidth.
    """
    thr_map = _threshold_map(thresholds)
    cell_df = _cell_frame(cells)
    if years is None:
        years = {y for _, y in thr_map}
    years = sorted(int(y) for y in years)
    if not years:
        raise SchemaError("no years to compute shares for")
    bandwidths = tuple(sorted({int(b) for b in bandwidths}))
    if any(b <= 0 for b in bandwidths):
        raise SchemaError("bandwidths must be positive")

    n_cells = cell_df.shape[0]
    n_years = len(years)
    cell_pos = {cid: i for i, cid in enumerate(cell_df["cell_id"])}
    cell_cz = cell_df["cz"].to_numpy()

    df = pd.DataFrame(records)
    needed = {"cell_id", "cz", "year", "credit_score"}
    if not needed <= set(df.columns):
        raise SchemaError(f"records lack columns: {sorted(needed - set(df.columns))}")

    yr = df["year"].to_numpy(dtype=np.int64)
    in_years = np.isin(yr, np.asarray(years))
    df = df[in_years]
    yr = yr[in_years]

    cid_codes, cid_uniques = pd.factorize(df["cell_id"])
    unknown = [u for u in cid_uniques if u not in cell_pos]
    if unknown:
        raise SchemaError(f"records reference unknown cells: {unknown[:5]}")
    uni_pos = np.array([cell_pos[u] for u in cid_uniques], dtype=np.int64)
    cell_idx = uni_pos[cid_codes]
    year_idx = np.searchsorted(np.asarray(years), yr)
    gidx = cell_idx * n_years + year_idx
    n_groups = n_cells * n_years

    cz = df["cz"].to_numpy(dtype=np.int64)
    score = df["credit_score"].to_numpy(dtype=np.float64)
    pair = cz * 100_000 + yr
    upair, pinv = np.unique(pair, return_inverse=True)
    pair_cut = np.full(upair.shape[0], np.nan)
    for i, p in enumerate(upair):
        hit = thr_map.get((int(p // 100_000), int(p % 100_000)))
        if hit is not None:
            pair_cut[i] = hit
    delta = score - pair_cut[pinv]

    pop = np.bincount(gidx, minlength=n_groups).astype(np.int64)
    below_counts = {}
    above_counts = {}
    for b in bandwidths:
        below = (delta >= -b) & (delta <= -1)
        above = (delta >= 0) & (delta <= b - 1)
        below_counts[b] = np.bincount(gidx[below], minlength=n_groups)
        above_counts[b] = np.bincount(gidx[above], minlength=n_groups)

    out = []
    gaps = []
    seen_gap = set()
    cell_ids = cell_df["cell_id"].tolist()
    for i in range(n_cells):
        zone = int(cell_cz[i])
        for j, y in enumerate(years):
            g = i * n_years + j
            p = int(pop[g])
            if (zone, y) not in thr_map:
                if (zone, y) not in seen_gap:
                    gaps.append(ShareGap(zone, y, "no threshold for zone-year"))
                    seen_gap.add((zone, y))
                for b in bandwidths:
                    out.append(ShareRecord(cell_ids[i], y, b,
                                           math.nan, math.nan, math.nan, p))
                continue
            for b in bandwidths:
                if p == 0:
                    sa = sb = 0.0
                else:
                    sa = float(above_counts[b][g]) / p
                    sb = float(below_counts[b][g]) / p
                out.append(ShareRecord(cell_ids[i], y, b, sa + sb, sa, sb, p))
    return out, gaps


def summarize_shares(share_records: Sequence[ShareRecord],
                     bandwidths=None):
    """Population-weighted summary statistics per share variable.

    Weights are cell populations; NaN-share and zero-population records are
    left out.  Returns ShareStat rows ordered by bandwidth with total,
    above, below within each (the descriptive-table ordering).
    """
    if bandwidths is None:
        bandwidths = sorted({r.bandwidth for r in share_records})
    rows = []
    for b in bandwidths:
        recs = [r for r in share_records
                if r.bandwidth == b and r.has_shares and r.cell_population > 0]
        if not recs:
            raise SchemaError(f"no populated share records at bandwidth {b}")
        w = np.array([r.cell_population for r in recs], dtype=np.float64)
        for kind, attr in (("tot", "share_total"), ("above", "share_above"),
                           ("below", "share_below")):
            x = np.array([getattr(r, attr) for r in recs])
            mean = float(np.sum(w * x) / np.sum(w))
            sd = float(math.sqrt(np.sum(w * (x - mean) ** 2) / np.sum(w)))
            rows.append(ShareStat(kind, int(b), mean, sd,
                                  float(x.min()), float(x.max())))
    return rows


def format_share_table(stats: Iterable[ShareStat], total_observations=None):
    """Render summary rows as an aligned ampersand-separated table."""
    lines = ["Variable & Mean & St. Dev. & Min & Max"]
    for s in stats:
        lines.append(
            f"{s.label} & {s.mean:.3f} & {s.sd:.3f} & {s.minimum:g} & {s.maximum:g}"
        )
    if total_observations is not None:
        lines.append(f"Weighted by population ({total_observations:,} total observations)")
    return "\n".join(lines)


def total_population(share_records: Sequence[ShareRecord]):
    """Sum of cell populations over distinct cell-years."""
    seen = {}
    for r in share_records:
        seen[(r.cell_id, r.year)] = r.cell_population
    return int(sum(seen.values()))


def share_frame(share_records: Sequence[ShareRecord]):
    """Records as a frame under the interchange column names."""
    return pd.DataFrame({
        "cell_id": [r.cell_id for r in share_records],
        "year": [r.year for r in share_records],
        "bw": [r.bandwidth for r in share_records],
        "share_tot": [r.share_total for r in share_records],
        "share_above": [r.share_above for r in share_records],
        "share_below": [r.share_below for r in share_records],
        "pop": [r.cell_population for r in share_records],
    })
