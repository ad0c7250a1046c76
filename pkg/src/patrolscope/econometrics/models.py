"""Declarative regression specifications and their results."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .ols import OLS, significance_stars

TRANSFORMS = {
    "none": lambda v: v,
    "arsinh": np.arcsinh,
    "log": np.log,
}

RACE_SHARES = ["rel_black", "rel_hispanic", "rel_asian"]
SOCIOECONOMIC = ["log_population", "pct_college", "median_income_k", "census_return_rate"]
CRIME = ["dist_nearest_homicide_km", "homicide_count"]
CONTROLS = SOCIOECONOMIC + CRIME


@dataclass
class ModelSpec:
    name: str
    outcome: str
    regressors: list[str]
    transform: str = "arsinh"
    mean_center: list[str] = field(default_factory=list)
    interactions: list[tuple[str, str]] = field(default_factory=list)
    fixed_effects: str | None = None
    se_type: str = "HC1"
    sample_filter: str | None = None

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown outcome transform {self.transform!r}")
        self.interactions = [tuple(p) for p in self.interactions]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "outcome": self.outcome,
            "regressors": list(self.regressors),
            "transform": self.transform,
            "mean_center": list(self.mean_center),
            "interactions": [list(p) for p in self.interactions],
            "fixed_effects": self.fixed_effects,
            "se_type": self.se_type,
            "sample_filter": self.sample_filter,
        }

    @property
    def source_columns(self) -> list[str]:
        cols = [self.outcome, *self.regressors, *(c for p in self.interactions for c in p)]
        if self.fixed_effects:
            cols.append(self.fixed_effects)
        return list(dict.fromkeys(cols))

    @property
    def terms(self) -> list[str]:
        return [*self.regressors, *(f"{a}:{b}" for a, b in self.interactions)]


@dataclass
class RegressionResult:
    spec: ModelSpec
    params: pd.Series
    bse: pd.Series
    pvalues: pd.Series
    cov: pd.DataFrame
    r_squared: float
    r_squared_within: float
    n_obs: int
    n_groups: int
    outcome_mean_levels: float
    regressor_means: pd.Series

    @property
    def stars(self) -> pd.Series:
        return self.pvalues.map(significance_stars)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "term": self.params.index,
            "coefficient": self.params.to_numpy(),
            "se": self.bse.to_numpy(),
            "p": self.pvalues.to_numpy(),
            "stars": self.stars.to_numpy(),
        })

    def to_text(self) -> str:
        width = max([len(t) for t in self.params.index] + [12])
        lines = [f"{self.spec.name}: {self.spec.transform}({self.spec.outcome})", ""]
        for term in self.params.index:
            lines.append(f"{term:<{width}}  {self.params[term]:>12.4g}{self.stars[term]:<3}")
            lines.append(f"{'':<{width}}  ({self.bse[term]:>10.4g})")
        lines.append("")
        lines.append(f"{'Observations':<{width}}  {self.n_obs:>12,d}")
        lines.append(f"{'R-squared':<{width}}  {self.r_squared:>12.3f}")
        lines.append(f"{'Fixed effects':<{width}}  {self.spec.fixed_effects or 'NA':>12}")
        return "\n".join(lines)


def design_matrix(data: pd.DataFrame, spec: ModelSpec):
    """Estimation sample, outcome vector, design frame and FE groups.

    Rows with any missing or non-finite input are dropped (listwise), then
    ``mean_center`` variables are centered on the estimation sample before
    interactions are formed.
    """
    missing = [c for c in spec.source_columns if c not in data.columns]
    if missing:
        raise KeyError(f"model {spec.name!r}: columns not found: {missing}")
    sample = data.query(spec.sample_filter) if spec.sample_filter else data
    sample = sample[spec.source_columns].copy()
    numeric = [c for c in spec.source_columns if c != spec.fixed_effects]
    with np.errstate(divide="ignore", invalid="ignore"):
        y = TRANSFORMS[spec.transform](sample[spec.outcome].astype(float))
    ok = np.isfinite(y.to_numpy())
    for c in numeric:
        ok &= np.isfinite(sample[c].astype(float).to_numpy())
    if spec.fixed_effects:
        ok &= sample[spec.fixed_effects].notna().to_numpy()
    sample = sample[ok]
    y = y[ok]

    base = {}
    for c in dict.fromkeys([*spec.regressors, *(c for p in spec.interactions for c in p)]):
        v = sample[c].astype(float)
        base[c] = v - v.mean() if c in spec.mean_center else v
    X = pd.DataFrame({c: base[c] for c in spec.regressors}, index=sample.index)
    for a, b in spec.interactions:
        X[f"{a}:{b}"] = base[a] * base[b]
    groups = sample[spec.fixed_effects].astype(str).to_numpy() if spec.fixed_effects else None
    return sample, y, X, groups


def fit_ols(data: pd.DataFrame, spec: ModelSpec) -> RegressionResult:
    sample, y, X, groups = design_matrix(data, spec)
    model = OLS(cov_type=spec.se_type).fit(X, y, groups=groups)
    return RegressionResult(
        spec=spec,
        params=model.params_,
        bse=model.bse_,
        pvalues=model.pvalues_,
        cov=model.cov_,
        r_squared=model.r2_,
        r_squared_within=model.r2_within_,
        n_obs=model.n_obs_,
        n_groups=model.n_groups_,
        outcome_mean_levels=float(sample[spec.outcome].astype(float).mean()),
        regressor_means=sample[[c for c in spec.regressors]].astype(float).mean(),
    )


def table1_specs(outcome: str = "hours") -> list[ModelSpec]:
    """The six exposure-disparity columns, as generic specifications."""
    police = ["police_rel_black", "supervisor_rel_black"]
    centered = [*RACE_SHARES, *police]
    return [
        ModelSpec("col1", outcome, RACE_SHARES, mean_center=centered),
        ModelSpec("col2", outcome, RACE_SHARES + CONTROLS, mean_center=centered),
        ModelSpec("col3", outcome, RACE_SHARES + CONTROLS, mean_center=centered,
                  fixed_effects="city_id"),
        ModelSpec("col4", outcome, ["rel_black", "police_rel_black", "rel_hispanic",
                                    "rel_asian", *CONTROLS],
                  mean_center=centered, interactions=[("rel_black", "police_rel_black")]),
        ModelSpec("col5", outcome, ["rel_black", "police_rel_black", "supervisor_rel_black",
                                    "rel_hispanic", "rel_asian", *CONTROLS],
                  mean_center=centered,
                  interactions=[("rel_black", "police_rel_black"),
                                ("rel_black", "supervisor_rel_black")]),
        # department levels are constant within city and absorbed by the FE
        ModelSpec("col6", outcome, ["rel_black", "rel_hispanic", "rel_asian", *CONTROLS],
                  mean_center=centered,
                  interactions=[("rel_black", "police_rel_black"),
                                ("rel_black", "supervisor_rel_black")],
                  fixed_effects="city_id"),
    ]


def table2_specs() -> list[ModelSpec]:
    """Hours, actions and actions-per-hour, without and with controls."""
    out = []
    for with_controls in (False, True):
        regs = RACE_SHARES + (CONTROLS if with_controls else [])
        tag = "controls" if with_controls else "raw"
        for outcome in ("hours", "actions", "actions_per_hour"):
            out.append(ModelSpec(f"{outcome}_{tag}", outcome, regs, mean_center=RACE_SHARES))
    return out
