"""Covariate construction and the descriptive statistics built on the
regression layer: relative shares, elasticities, explained-variance
decomposition, binned scatters, extreme-neighborhood comparisons and the
validity checks against external tables.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .models import CRIME, RACE_SHARES, SOCIOECONOMIC, ModelSpec, design_matrix, fit_ols
from .ols import OLS

logger = logging.getLogger(__name__)

GROUPS = ("black", "hispanic", "asian")
FIG3_BLOCKS = (("socioeconomic", SOCIOECONOMIC), ("crime", CRIME), ("race", RACE_SHARES))


def build_relative_shares(bg_frame: pd.DataFrame, city_table: pd.DataFrame) -> pd.DataFrame:
    """Block-group share over city share, per group.

    City shares come from ``city_table`` (columns city_id, pct_black,
    pct_hispanic, pct_asian). A city whose share is zero or missing leaves
    the ratio undefined (NaN) and sets ``rel_<group>_undefined``.
    """
    city = city_table.set_index(city_table["city_id"].astype(str))
    out = pd.DataFrame({"bg_id": bg_frame["bg_id"].to_numpy(),
                        "city_id": bg_frame["city_id"].astype(str).to_numpy()})
    for g in GROUPS:
        denom = city[f"pct_{g}"].reindex(out["city_id"]).to_numpy(dtype=float)
        undefined = ~(denom > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = bg_frame[f"pct_{g}"].to_numpy(dtype=float) / np.where(undefined, np.nan, denom)
        out[f"rel_{g}"] = rel
        out[f"rel_{g}_undefined"] = undefined
        if undefined.any():
            cities = sorted(set(out.loc[undefined, "city_id"]))
            logger.warning("relative %s share undefined for cities %s", g, cities)
    return out


def analysis_frame(cells: pd.DataFrame, bg_frame: pd.DataFrame, city_table: pd.DataFrame,
                   department_table: pd.DataFrame | None = None) -> pd.DataFrame:
    """One row per block group: presence, covariates, relative shares and
    department composition ratios (``police_rel_black``,
    ``supervisor_rel_black``) when a department table is supplied."""
    df = bg_frame.copy()
    df["bg_id"] = df["bg_id"].astype(str)
    df["city_id"] = df["city_id"].astype(str)
    presence = cells[["bg_id", "hours", "shift_count",
                      *[c for c in cells.columns if c.startswith("hour_")]]]
    df = df.merge(presence, on="bg_id", how="left")
    df["hours"] = df["hours"].fillna(0.0)
    with np.errstate(divide="ignore"):
        df["log_population"] = np.where(df["population"] > 0, np.log(df["population"]), np.nan)
    rel = build_relative_shares(df, city_table)
    df = df.merge(rel[["bg_id", *[f"rel_{g}" for g in GROUPS]]], on="bg_id", how="left")
    if department_table is not None:
        city = city_table.set_index(city_table["city_id"].astype(str))
        dept = department_table.set_index(department_table["city_id"].astype(str))
        share = city["pct_black"].reindex(df["city_id"]).to_numpy(dtype=float)
        for src, dst in (("police_pct_black", "police_rel_black"),
                         ("supervisor_pct_black", "supervisor_rel_black")):
            if src in dept.columns:
                with np.errstate(divide="ignore", invalid="ignore"):
                    df[dst] = dept[src].reindex(df["city_id"]).to_numpy(dtype=float) / \
                        np.where(share > 0, share, np.nan)
    return df


def arsinh_elasticity_factor(y_mean: float) -> float:
    if not y_mean > 0:
        raise ValueError("elasticity needs a positive outcome mean")
    return math.sqrt(1.0 + y_mean * y_mean) / y_mean


def elasticity_arsinh(y_mean: float, x_mean: float, beta: float) -> float:
    """Proportional effect of a regressor on an arsinh-transformed outcome,
    evaluated at the means: ``sqrt(1 + y^2) / y * x * beta``."""
    return arsinh_elasticity_factor(y_mean) * x_mean * beta


def variance_decomposition(data: pd.DataFrame, outcome: str = "hours",
                           blocks=FIG3_BLOCKS, by: str | None = "city_id",
                           transform: str = "arsinh") -> pd.DataFrame:
    """Cumulative R-squared as covariate blocks are added in order.

    Every step uses the same listwise-complete sample. Returns one row per
    (group, block) with ``r2``, ``delta_r2`` and ``rel_increase``
    (``delta_r2`` over the previous R-squared).
    """
    all_cols = [c for _, cols in blocks for c in cols]
    groups = [(None, data)] if by is None else list(data.groupby(by, sort=True))
    rows = []
    for key, sub in groups:
        spec_all = ModelSpec("full", outcome, all_cols, transform=transform)
        sample, _, _, _ = design_matrix(sub, spec_all)
        prev = 0.0
        cols = []
        for name, block_cols in blocks:
            cols = cols + list(block_cols)
            res = fit_ols(sample, ModelSpec(name, outcome, cols, transform=transform))
            r2 = res.r_squared
            rows.append({
                "group": key,
                "block": name,
                "n_obs": res.n_obs,
                "r2": r2,
                "delta_r2": r2 - prev,
                "rel_increase": (r2 - prev) / prev if prev > 0 else np.nan,
            })
            prev = r2
    return pd.DataFrame(rows)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    return float(xc @ yc) / denom if denom > 0 else float("nan")


@dataclass
class BinnedScatter:
    bins: pd.DataFrame
    rho: float
    n: int
    warnings: list[str] = field(default_factory=list)


def binned_scatter(x, y, n_bins: int = 20, transform: str | None = None) -> BinnedScatter:
    """Equal-count bins along sorted ``x`` with per-bin means of x and y.

    ``rho`` is the Pearson correlation of the unbinned pairs (after the
    optional ``"arsinh"`` transform, which is applied to both variables).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if transform == "arsinh":
        x, y = np.arcsinh(x), np.arcsinh(y)
    elif transform not in (None, "none"):
        raise ValueError(f"unknown transform {transform!r}")
    warnings = []
    if len(x) < n_bins:
        warnings.append(f"{len(x)} points < {n_bins} bins; using a single bin")
        logger.warning(warnings[-1])
        n_bins = 1
    order = np.argsort(x, kind="mergesort")
    parts = np.array_split(order, n_bins)
    bins = pd.DataFrame({
        "bin": np.arange(1, n_bins + 1),
        "n": [len(p) for p in parts],
        "x_mean": [x[p].mean() for p in parts],
        "y_mean": [y[p].mean() for p in parts],
    })
    return BinnedScatter(bins, pearson(x, y), len(x), warnings)


def extreme_quantile_comparison(data: pd.DataFrame, outcome: str = "hours",
                                q: float = 0.95, by: str = "city_id") -> pd.DataFrame:
    """Mean outcome in each city's Blackest and Whitest block groups
    (group share above the city's ``q`` quantile)."""
    rows = []
    for city, sub in data.groupby(by, sort=True):
        row = {by: city}
        for g in ("black", "white"):
            share = sub[f"pct_{g}"].astype(float)
            cut = share.quantile(q)
            top = sub[share > cut]
            row[f"n_top_{g}"] = len(top)
            row[f"mean_{outcome}_top_{g}"] = top[outcome].mean() if len(top) else np.nan
        row["difference"] = row[f"mean_{outcome}_top_black"] - row[f"mean_{outcome}_top_white"]
        rows.append(row)
    return pd.DataFrame(rows)


def arrests_per_hour(cells: pd.DataFrame, actions: pd.DataFrame,
                     count_column: str = "count") -> pd.DataFrame:
    """Presence, enforcement actions and their ratio per block group.

    The ratio is undefined (NaN) where hours are zero, so only the ratio
    outcome loses those rows. Block groups without an action record have
    zero actions.
    """
    acts = actions.groupby(actions["bg_id"].astype(str))[count_column].sum()
    df = cells[["bg_id", "city_id", "hours"]].copy()
    df["bg_id"] = df["bg_id"].astype(str)
    df["actions"] = acts.reindex(df["bg_id"]).fillna(0.0).to_numpy()
    hours = df["hours"].to_numpy(dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        df["actions_per_hour"] = np.where(hours > 0, df["actions"] / np.where(hours > 0, hours, 1), np.nan)
    df["arsinh_hours"] = np.arcsinh(hours)
    df["arsinh_actions"] = np.arcsinh(df["actions"].to_numpy(dtype=float))
    df["arsinh_actions_per_hour"] = np.arcsinh(df["actions_per_hour"].to_numpy(dtype=float))
    return df


def shift_hour_disparities(data: pd.DataFrame, max_hour: int = 12) -> pd.DataFrame:
    """Relative-share coefficients when each hour-of-shift presence column
    is regressed on the three relative shares."""
    rows = []
    for h in range(1, max_hour + 1):
        col = f"hour_{h:02d}"
        if col not in data.columns:
            continue
        res = fit_ols(data, ModelSpec(col, col, RACE_SHARES, mean_center=RACE_SHARES))
        for term in RACE_SHARES:
            rows.append({"hour": h, "term": term, "coefficient": res.params[term],
                         "se": res.bse[term], "p": res.pvalues[term], "n_obs": res.n_obs})
    return pd.DataFrame(rows)


# ----------------------------------------------------------------------------
# validity checks
# ----------------------------------------------------------------------------

def city_validation_suite(cells: pd.DataFrame, shifts_table: pd.DataFrame,
                          qualifications: pd.DataFrame, *,
                          city_table: pd.DataFrame | None = None,
                          employee_counts: pd.DataFrame | None = None,
                          department_composition: pd.DataFrame | None = None,
                          smartphone_composition: pd.DataFrame | None = None,
                          zip_residents: pd.DataFrame | None = None,
                          device_zips: pd.DataFrame | None = None,
                          bg_frame: pd.DataFrame | None = None,
                          arrests: pd.DataFrame | None = None,
                          stops: pd.DataFrame | None = None) -> dict:
    """Validity statistics for whichever comparison tables are supplied.

    Checks whose inputs are missing are listed under ``skipped``.
    """
    report: dict = {"skipped": [], "checks": {}}
    q = qualifications[qualifications["qualified"].astype(bool)]
    smartphones = q.groupby("city_id")["device_id"].nunique().rename("smartphones")
    on_shift = shifts_table.groupby("city_id")["device_id"].nunique().rename("patrol_officers")
    counts = pd.concat([smartphones, on_shift], axis=1).fillna(0)
    counts.index = counts.index.astype(str)
    report["city_counts"] = counts.reset_index(names="city_id")

    if employee_counts is None:
        report["skipped"].append("count_correlation: no employee_counts table")
    else:
        emp = employee_counts.set_index(employee_counts["city_id"].astype(str))["employees"]
        joined = counts.join(emp, how="inner")
        check = {"n_cities": len(joined),
                 "rho_counts": pearson(joined["smartphones"], joined["employees"])}
        if city_table is not None and "population" in city_table.columns:
            pop = city_table.set_index(city_table["city_id"].astype(str))["population"]
            j = joined.join(pop, how="inner")
            check["rho_per_capita"] = pearson(j["smartphones"] / j["population"],
                                              j["employees"] / j["population"])
        report["checks"]["count_correlation"] = check

    if city_table is None or "population" not in city_table.columns:
        report["skipped"].append("per_capita_vs_black_share: no city_table")
    else:
        ct = city_table.set_index(city_table["city_id"].astype(str))
        j = counts.join(ct[["population", "pct_black"]], how="inner")
        per_cap = j["patrol_officers"] / j["population"]
        report["checks"]["per_capita_vs_black_share"] = {
            "n_cities": len(j), "rho": pearson(per_cap, j["pct_black"])}

    if department_composition is None or smartphone_composition is None or city_table is None:
        report["skipped"].append("composition_regressions: needs department, smartphone "
                                 "and city composition tables")
    else:
        report["checks"]["composition_regressions"] = composition_regressions(
            department_composition, smartphone_composition, city_table)

    if zip_residents is None or device_zips is None:
        report["skipped"].append("zip_residence: needs zip_residents and device zips")
    else:
        detected = device_zips.groupby(device_zips["zip"].astype(str))["device_id"].nunique()
        official = zip_residents.set_index(zip_residents["zip"].astype(str))["officers"]
        detected = detected.reindex(official.index).fillna(0)
        bs = binned_scatter(detected.to_numpy(), official.to_numpy(), transform="arsinh")
        report["checks"]["zip_residence"] = {"n_zips": len(official), "rho": bs.rho,
                                             "bins": bs.bins}

    for name, table in (("arrests", arrests), ("stops", stops)):
        if table is None:
            report["skipped"].append(f"{name}_binned_scatter: no {name} table")
            continue
        per_city = {}
        frame = arrests_per_hour(cells, table)
        for city, sub in frame.groupby("city_id", sort=True):
            if len(sub) < 2:
                continue
            bs = binned_scatter(sub["hours"], sub["actions"], transform="arsinh")
            per_city[city] = {"rho": bs.rho, "bins": bs.bins, "n": bs.n}
        report["checks"][f"{name}_binned_scatter"] = per_city
    return report


def composition_regressions(department: pd.DataFrame, smartphone: pd.DataFrame,
                            city_table: pd.DataFrame) -> dict:
    """Per group: department share on smartphone-imputed share and city share."""
    key = "city_id"
    d = department.assign(city_id=department[key].astype(str)).set_index(key)
    s = smartphone.assign(city_id=smartphone[key].astype(str)).set_index(key)
    c = city_table.assign(city_id=city_table[key].astype(str)).set_index(key)
    out = {}
    for g in ("white", "black", "hispanic", "asian"):
        col = f"pct_{g}"
        if col not in d.columns or col not in s.columns or col not in c.columns:
            continue
        j = pd.DataFrame({"police": d[col], "smartphone": s[col], "city": c[col]}).dropna()
        if len(j) < 4:
            continue
        m = OLS().fit(j[["smartphone", "city"]], j["police"])
        out[g] = {"n_cities": len(j), "slope_smartphone": float(m.params_["smartphone"]),
                  "se_smartphone": float(m.bse_["smartphone"]),
                  "slope_city": float(m.params_["city"]), "r2": m.r2_}
    return out
