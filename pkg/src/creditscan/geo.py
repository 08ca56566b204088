"""Crosswalks from ZCTAs to counties and districts, and CCD cell assembly.

All geography is data-driven: relationship tables come in as rows, the
functions here only resolve majorities, enforce nesting, and log what could
not be mapped.  Codes are normalized to zero-padded strings so sort order
and tie-breaks are stable regardless of the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from creditscan.errors import SchemaError


@dataclass(frozen=True)
class CcdCell:
    """One county-by-congressional-district cell."""

    cell_id: str
    county_fips: str
    congressional_district: int
    commuting_zone: int
    state: str


@dataclass(frozen=True)
class GeoExclusion:
    """A code dropped during crosswalk construction, with the reason."""

    kind: str
    code: str
    reason: str


def norm_code(value, width):
    """Zero-pad a census code; accepts ints or strings."""
    s = str(value).strip()
    if s.endswith(".0"):
        s = s[:-2]
    return s.zfill(width)


def norm_zcta(value):
    return norm_code(value, 5)


def norm_county(value):
    return norm_code(value, 5)


def make_cell_id(county_fips, cd):
    return f"{norm_county(county_fips)}-{int(cd):02d}"


def congress_for_year(year):
    """Congress number seated for an election year (2004 -> 109th)."""
    year = int(year)
    if year < 1788:
        raise ValueError("year precedes the first Congress")
    return (year - 1786) // 2


def zcta_to_county_majority(rows):
    """Resolve each ZCTA to the county holding most of its population.

    ``rows`` is a table with columns zcta, county_fips, pop.  Exact ties go
    to the lower FIPS code.  ZCTAs whose rows sum to zero population are
    left unmapped and logged.  Returns ``(mapping, exclusions)``.
    """
    df = pd.DataFrame(rows)
    missing = {"zcta", "county_fips", "pop"} - set(df.columns)
    if missing:
        raise SchemaError(f"relationship rows lack columns: {sorted(missing)}")
    df = df.assign(
        zcta=df["zcta"].map(norm_zcta),
        county_fips=df["county_fips"].map(norm_county),
        pop=pd.to_numeric(df["pop"]),
    )
    if (df["pop"] < 0).any():
        raise SchemaError("population overlap must be nonnegative")

    totals = df.groupby("zcta")["pop"].sum()
    dead = set(totals.index[totals <= 0])
    exclusions = [
        GeoExclusion("zcta", z, "zero population overlap in every county")
        for z in sorted(dead)
    ]
    live = df[~df["zcta"].isin(dead)]
    winners = (
        live.sort_values(["zcta", "pop", "county_fips"],
                         ascending=[True, False, True], kind="stable")
        .drop_duplicates("zcta")
    )
    mapping = dict(zip(winners["zcta"], winners["county_fips"]))
    return mapping, exclusions


def build_ccd_cells(assignments, county_cz):
    """Assemble the CCD cell universe from county-CD pairs.

    ``assignments`` holds one row per observed (county_fips, cd) pair;
    ``county_cz`` maps each county to its commuting zone.  A county mapped
    to more than one zone violates nesting and raises SchemaError; a county
    absent from the zone map is excluded and logged.  Returns
    ``(cells, exclusions)`` with cells sorted by cell_id.
    """
    pairs = pd.DataFrame(assignments)
    if not {"county_fips", "cd"} <= set(pairs.columns):
        raise SchemaError("assignments need county_fips and cd columns")
    pairs = pairs.assign(
        county_fips=pairs["county_fips"].map(norm_county),
        cd=pairs["cd"].astype(int),
    ).drop_duplicates(["county_fips", "cd"])

    cz_df = pd.DataFrame(county_cz)
    if not {"county_fips", "cz"} <= set(cz_df.columns):
        raise SchemaError("county_cz needs county_fips and cz columns")
    cz_df = cz_df.assign(county_fips=cz_df["county_fips"].map(norm_county))
    counts = cz_df.groupby("county_fips")["cz"].nunique()
    split = counts.index[counts > 1].tolist()
    if split:
        raise SchemaError(f"counties in more than one commuting zone: {split[:5]}")
    cz_map = dict(zip(cz_df["county_fips"], cz_df["cz"]))

    cells = []
    exclusions = []
    for county, cd in pairs[["county_fips", "cd"]].itertuples(index=False):
        zone = cz_map.get(county)
        if zone is None:
            exclusions.append(GeoExclusion("county", county, "no commuting zone"))
            continue
        cells.append(CcdCell(
            cell_id=make_cell_id(county, cd),
            county_fips=county,
            congressional_district=int(cd),
            commuting_zone=int(zone),
            state=county[:2],
        ))
    cells.sort(key=lambda c: c.cell_id)
    seen = set()
    for c in cells:
        if c.cell_id in seen:
            raise SchemaError(f"duplicate cell id {c.cell_id}")
        seen.add(c.cell_id)
    # exclusions are keyed by county, not pair, so dedupe
    unique_ex = sorted({(e.kind, e.code, e.reason) for e in exclusions})
    return cells, [GeoExclusion(*e) for e in unique_ex]


def freeze_vintage(codes, crosswalk, valid=None):
    """Re-express geography codes in the frozen (2010) vintage.

    ``crosswalk`` maps superseded codes to their 2010 equivalents; codes it
    does not list pass through unchanged (the crosswalk names only what
    changed).  When ``valid`` is given, results outside that universe map
    to None and are logged.  Returns ``(mapped list, exclusions)``.
    """
    xwalk = {norm_county(k): norm_county(v) for k, v in dict(crosswalk).items()}
    universe = {norm_county(v) for v in valid} if valid is not None else None
    mapped = []
    exclusions = []
    seen_bad = set()
    for raw in codes:
        code = norm_county(raw)
        out = xwalk.get(code, code)
        if universe is not None and out not in universe:
            mapped.append(None)
            if code not in seen_bad:
                exclusions.append(GeoExclusion("county", code, "not in vintage crosswalk"))
                seen_bad.add(code)
        else:
            mapped.append(out)
    return mapped, exclusions


def cells_for_records(zctas, years, zcta_county_map, zcta_cd):
    """Vectorized record-to-cell assignment.

    ``zcta_cd`` is a table (zcta, cd, congress) giving each ZCTA's district
    in each Congress; the record's Congress comes from its year.  Returns
    ``(cell_ids, county_fips, ok_mask, exclusions)`` where unmapped records
    have empty strings and ok False.
    """
    z = pd.Series(zctas).map(norm_zcta)
    yrs = pd.Series(years).astype(int)
    congress = (yrs - 1786) // 2

    counties = z.map(zcta_county_map)

    cd_df = pd.DataFrame(zcta_cd)
    if not {"zcta", "cd", "congress"} <= set(cd_df.columns):
        raise SchemaError("zcta_cd needs zcta, cd, and congress columns")
    cd_df = cd_df.assign(zcta=cd_df["zcta"].map(norm_zcta), cd=cd_df["cd"].astype(int))
    dupes = cd_df.duplicated(["zcta", "congress"])
    if dupes.any():
        raise SchemaError("zcta_cd has conflicting district rows for a zcta-congress")
    key = cd_df["zcta"] + "@" + cd_df["congress"].astype(int).astype(str)
    cd_map = dict(zip(key, cd_df["cd"]))
    cds = (z + "@" + congress.astype(str)).map(cd_map)

    ok = counties.notna() & cds.notna()
    cell_ids = np.where(
        ok,
        counties.fillna("").str.cat(
            cds.map(lambda v: f"{int(v):02d}" if pd.notna(v) else ""), sep="-"
        ),
        "",
    )
    exclusions = []
    for bad_z in sorted(set(z[~counties.notna()])):
        exclusions.append(GeoExclusion("zcta", bad_z, "no county mapping"))
    for bad_z in sorted(set(z[counties.notna() & ~cds.notna()])):
        exclusions.append(GeoExclusion("zcta", bad_z, "no district for congress"))
    return cell_ids, counties.fillna("").to_numpy(), ok.to_numpy(), exclusions
