import math

import numpy as np
import pandas as pd
import pytest

from oracles import dummy_fe, hc1_sandwich, normal_equations, pearson_textbook
from patrolscope.econometrics import (
    OLS,
    ModelSpec,
    RankDeficientError,
    arrests_per_hour,
    arsinh_elasticity_factor,
    binned_scatter,
    build_relative_shares,
    city_validation_suite,
    composition_regressions,
    elasticity_arsinh,
    fit_ols,
    pearson,
    significance_stars,
    table1_specs,
    variance_decomposition,
)
from patrolscope.econometrics.ols import demean_within

# a fixed ten-row dataset for the sandwich comparison
X10 = np.array([[1.2, 0.3], [0.4, 2.1], [2.2, 1.0], [3.1, 0.2], [0.9, 0.9],
                [1.7, 2.8], [2.5, 1.9], [0.1, 0.4], [3.3, 3.0], [1.1, 1.6]])
Y10 = np.array([2.0, 3.5, 4.1, 5.9, 2.2, 6.3, 5.0, 0.7, 8.8, 3.9])


def test_exact_fit():
    x = np.arange(5.0)
    m = OLS().fit(x[:, None], 1 + 2 * x)
    np.testing.assert_allclose(m.params_.to_numpy(), [1, 2], atol=1e-12)
    assert m.r2_ == pytest.approx(1.0)
    np.testing.assert_allclose(m.bse_.to_numpy(), 0, atol=1e-12)


def test_matches_normal_equations():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(50, 3))
    y = X @ [0.5, -1.0, 2.0] + rng.normal(size=50)
    m = OLS(fit_intercept=False).fit(X, y)
    np.testing.assert_allclose(m.coef_, normal_equations(X, y), rtol=1e-8)


def test_hc1_matches_sandwich():
    m = OLS().fit(X10, Y10)
    Z = np.column_stack([np.ones(10), X10])
    np.testing.assert_allclose(m.cov_.to_numpy(), hc1_sandwich(Z, Y10), rtol=1e-10, atol=1e-14)


def test_hc0_and_nonrobust():
    Z = np.column_stack([np.ones(10), X10])
    hc0 = OLS(cov_type="HC0").fit(X10, Y10).cov_.to_numpy()
    np.testing.assert_allclose(hc0 * 10 / 7, hc1_sandwich(Z, Y10), rtol=1e-10)
    m = OLS(cov_type="nonrobust").fit(X10, Y10)
    e = Y10 - Z @ normal_equations(Z, Y10)
    classic = np.linalg.inv(Z.T @ Z) * (e @ e / 7)
    np.testing.assert_allclose(m.cov_.to_numpy(), classic, rtol=1e-10)
    with pytest.raises(ValueError):
        OLS(cov_type="HC3").fit(X10, Y10)


def test_fixed_effects_match_dummies():
    rng = np.random.default_rng(2)
    n = 120
    groups = rng.choice(["a", "b", "c", "d"], n)
    X = rng.normal(size=(n, 3))
    y = X @ [1.0, 0.0, -2.0] + pd.Series(groups).map({"a": 0, "b": 3, "c": -1, "d": 5}).to_numpy() \
        + rng.normal(size=n)
    m = OLS().fit(X, y, groups=groups)
    beta, cov = dummy_fe(X, y, list(groups))
    np.testing.assert_allclose(m.coef_, beta, rtol=1e-8)
    np.testing.assert_allclose(m.cov_.to_numpy(), cov, rtol=1e-8)
    assert m.df_resid_ == n - 3 - 4
    # predictions from the absorbed model equal the dummy model's fit
    assert m.score(X, y, groups=groups) == pytest.approx(m.r2_)


def test_rank_deficiency_names_column():
    X = pd.DataFrame({"a": [1.0, 2, 3, 4, 5], "b": [2.0, 4, 6, 8, 10], "c": [1.0, 0, 1, 0, 2]})
    with pytest.raises(RankDeficientError, match="'b'"):
        OLS().fit(X, [1.0, 2, 3, 4, 6])
    with pytest.raises(ValueError, match="too few"):
        OLS().fit(X10[:2], Y10[:2])
    with pytest.raises(ValueError, match="finite"):
        OLS().fit([[1.0], [np.nan], [2.0]], [1.0, 2.0, 3.0])


@pytest.mark.parametrize("p,stars", [(0.0005, "***"), (0.005, "**"), (0.03, "*"), (0.07, "+"),
                                     (0.2, ""), (0.001, "**"), (0.05, "+")])
def test_stars(p, stars):
    assert significance_stars(p) == stars


def test_relative_shares():
    bg = pd.DataFrame({"bg_id": ["x", "y", "z"], "city_id": ["A", "A", "B"],
                       "pct_black": [0.4, 0.2, 0.3], "pct_hispanic": [0.1, 0.1, 0.1],
                       "pct_asian": [0.0, 0.05, 0.0]})
    city = pd.DataFrame({"city_id": ["A", "B"], "pct_black": [0.2, 0.3],
                         "pct_hispanic": [0.1, 0.2], "pct_asian": [0.05, 0.0]})
    rel = build_relative_shares(bg, city).set_index("bg_id")
    assert rel.loc["x", "rel_black"] == pytest.approx(2.0)
    assert rel.loc["y", "rel_black"] == pytest.approx(1.0)
    assert rel.loc["z", "rel_black"] == pytest.approx(1.0)
    assert math.isnan(rel.loc["z", "rel_asian"]) and rel.loc["z", "rel_asian_undefined"]
    assert not rel.loc["x", "rel_asian_undefined"]


@pytest.mark.parametrize("x,beta,expected", [(1.023, 0.0801, 0.0820), (0.944, 0.0554, 0.0523),
                                             (0.895, 0.0155, 0.0139)])
def test_elasticity_worked_values(x, beta, expected):
    assert arsinh_elasticity_factor(26.685) == pytest.approx(1.0007, abs=1e-4)
    assert elasticity_arsinh(26.685, x, beta) == pytest.approx(expected, abs=1e-4)


def test_elasticity_edge_cases():
    assert elasticity_arsinh(3.0, 7.0, 0.0) == 0.0
    with pytest.raises(ValueError):
        arsinh_elasticity_factor(0.0)
    with pytest.raises(ValueError):
        arsinh_elasticity_factor(-1.0)


def block_data(seed=0, n=300):
    rng = np.random.default_rng(seed)
    cols = ["s1", "s2", "c1", "r1"]
    df = pd.DataFrame(rng.normal(size=(n, 4)), columns=cols)
    df["hours"] = np.sinh(1 + df["s1"] - 0.5 * df["s2"])
    df["city_id"] = "A"
    return df


def test_variance_decomposition_nested():
    blocks = (("se", ["s1", "s2"]), ("crime", ["c1"]), ("race", ["r1"]))
    vd = variance_decomposition(block_data(), blocks=blocks)
    assert vd["r2"].iloc[0] == pytest.approx(1.0)
    assert (vd["delta_r2"].iloc[1:].abs() <= 1e-6).all()
    noisy = block_data(1)
    noisy["hours"] = np.sinh(noisy["s1"] + noisy["r1"] + np.random.default_rng(5).normal(size=300))
    vd = variance_decomposition(noisy, blocks=blocks)
    assert (np.diff(vd["r2"].to_numpy()) >= -1e-12).all()
    assert vd.loc[vd.block == "race", "delta_r2"].item() > 0.1


def test_binned_scatter():
    x = np.arange(40.0)
    bs = binned_scatter(x, x)
    assert (bs.bins["n"] == 2).all() and len(bs.bins) == 20
    assert bs.rho == pytest.approx(1.0)
    np.testing.assert_allclose(bs.bins["x_mean"], bs.bins["y_mean"])
    small = binned_scatter(np.arange(5.0), np.arange(5.0))
    assert len(small.bins) == 1 and small.warnings


def test_pearson_matches_textbook():
    rng = np.random.default_rng(7)
    x = rng.normal(size=100)
    y = 0.3 * x + rng.normal(size=100)
    assert pearson(x, y) == pytest.approx(pearson_textbook(list(x), list(y)), abs=1e-12)
    assert math.isnan(pearson([1, 1, 1], [1, 2, 3]))


def test_arrests_per_hour():
    cells = pd.DataFrame({"bg_id": ["a", "b", "c"], "city_id": "C", "hours": [10.0, 0.0, 4.0]})
    acts = pd.DataFrame({"bg_id": ["a", "b"], "count": [20, 5]})
    df = arrests_per_hour(cells, acts).set_index("bg_id")
    assert df.loc["a", "arsinh_actions_per_hour"] == pytest.approx(1.4436, abs=1e-4)
    assert df.loc["c", "actions"] == 0 and df.loc["c", "arsinh_actions_per_hour"] == 0
    assert math.isnan(df.loc["b", "actions_per_hour"])
    # only the ratio regression loses the zero-hour row
    rng = np.random.default_rng(0)
    frame = pd.DataFrame({"hours": rng.uniform(0, 5, 30), "actions": rng.integers(0, 5, 30).astype(float),
                          "rel_black": rng.uniform(0, 2, 30)})
    frame.loc[:2, "hours"] = 0.0
    frame["actions_per_hour"] = np.where(frame.hours > 0, frame.actions / frame.hours.where(frame.hours > 0), np.nan)
    n = {o: fit_ols(frame, ModelSpec(o, o, ["rel_black"])).n_obs for o in ("hours", "actions", "actions_per_hour")}
    assert n == {"hours": 30, "actions": 30, "actions_per_hour": 27}


def test_mean_centering_keeps_fitted_values():
    rng = np.random.default_rng(4)
    df = pd.DataFrame({"a": rng.uniform(0, 2, 80), "b": rng.uniform(0, 2, 80)})
    df["y"] = np.sinh(1 + df.a * df.b + rng.normal(size=80))
    raw = ModelSpec("r", "y", ["a", "b"], interactions=[("a", "b")])
    cen = ModelSpec("c", "y", ["a", "b"], interactions=[("a", "b")], mean_center=["a", "b"])
    r1, r2 = fit_ols(df, raw), fit_ols(df, cen)
    assert r1.r_squared == pytest.approx(r2.r_squared, abs=1e-12)
    assert r1.params["a:b"] == pytest.approx(r2.params["a:b"], rel=1e-10)
    # centered main effect of a equals raw effect evaluated at mean b
    assert r2.params["a"] == pytest.approx(r1.params["a"] + r1.params["a:b"] * df.b.mean(), rel=1e-8)


def test_table1_specs_shape():
    specs = table1_specs()
    assert [s.name for s in specs] == [f"col{k}" for k in range(1, 7)]
    assert specs[2].fixed_effects == "city_id" and specs[5].fixed_effects == "city_id"
    assert "police_rel_black" not in specs[5].regressors
    assert ModelSpec.from_dict(specs[4].to_dict()) == specs[4]
    with pytest.raises(ValueError):
        ModelSpec("bad", "y", ["x"], transform="sqrt")
    with pytest.raises(KeyError, match="nope"):
        fit_ols(pd.DataFrame({"y": [1.0]}), ModelSpec("m", "y", ["nope"]))


def test_validation_suite():
    cells = pd.DataFrame({"bg_id": ["a", "b"], "city_id": ["A", "B"], "hours": [1.0, 2.0]})
    shifts = pd.DataFrame({"city_id": ["A", "A", "B", "C"], "device_id": ["1", "2", "3", "4"]})
    quals = pd.DataFrame({"city_id": ["A", "A", "B", "C"], "device_id": ["1", "2", "3", "4"],
                          "qualified": [True, True, True, True]})
    emp = pd.DataFrame({"city_id": ["A", "B", "C"], "employees": [2, 1, 1]})
    rep = city_validation_suite(cells, shifts, quals, employee_counts=emp)
    assert rep["checks"]["count_correlation"]["rho_counts"] == pytest.approx(1.0)
    assert any(s.startswith("arrests") for s in rep["skipped"])


def test_composition_slope_one():
    rng = np.random.default_rng(9)
    cities = [f"c{i}" for i in range(30)]
    true = pd.DataFrame({"city_id": cities, "pct_black": rng.uniform(0.05, 0.6, 30)})
    city = pd.DataFrame({"city_id": cities, "pct_black": rng.uniform(0.05, 0.6, 30)})
    out = composition_regressions(true, true.copy(), city)
    assert out["black"]["slope_smartphone"] == pytest.approx(1.0, abs=1e-8)


def test_demean_within():
    v = np.array([1.0, 3.0, 10.0, 20.0])
    np.testing.assert_allclose(demean_within(v, ["a", "a", "b", "b"]), [-1, 1, -5, 5])
