"""Least squares with heteroskedasticity-robust covariance and absorbed
fixed effects.

Coefficients come from a Householder QR of the design, never from the
normal equations. With ``X = QR`` the sandwich collapses to

    V = R^-1 (Q' diag(w e^2) Q) R^-T

where ``w`` is the small-sample scale (``n / (n - k)`` for HC1). Fixed
effects are absorbed by demeaning within groups; the absorbed groups count
toward ``k``, which makes the slope covariance identical to the
dummy-variable regression.
"""

from __future__ import annotations

import numpy as np
import pandas as pd
from scipy import linalg, stats
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

COV_TYPES = ("HC0", "HC1", "nonrobust")
STAR_LEVELS = ((0.001, "***"), (0.01, "**"), (0.05, "*"), (0.1, "+"))
RANK_TOL = 1e-10


class RankDeficientError(ValueError):
    pass


def significance_stars(p: float) -> str:
    for level, mark in STAR_LEVELS:
        if p < level:
            return mark
    return ""


def demean_within(values: np.ndarray, groups) -> np.ndarray:
    """Subtract group means column-wise."""
    values = np.asarray(values, dtype=float)
    codes, _ = pd.factorize(pd.Series(groups).astype(str), sort=True)
    counts = np.bincount(codes).astype(float)
    if values.ndim == 1:
        means = np.bincount(codes, weights=values) / counts
        return values - means[codes]
    out = np.empty_like(values)
    for j in range(values.shape[1]):
        means = np.bincount(codes, weights=values[:, j]) / counts
        out[:, j] = values[:, j] - means[codes]
    return out


def _qr_solve(X: np.ndarray, y: np.ndarray, names):
    Q, R = np.linalg.qr(X, mode="reduced")
    diag = np.abs(np.diag(R))
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    bad = np.flatnonzero(diag <= RANK_TOL * scale * max(1.0, np.sqrt(X.shape[0])))
    if bad.size:
        raise RankDeficientError(
            f"design is rank deficient: column {names[bad[0]]!r} is collinear "
            "with preceding columns")
    beta = linalg.solve_triangular(R, Q.T @ y)
    return Q, R, beta


class OLS(RegressorMixin, BaseEstimator):
    """Ordinary least squares with robust standard errors.

    Parameters
    ----------
    fit_intercept : bool, default True
        Ignored when ``groups`` is passed to :meth:`fit` (the group effects
        absorb the constant).
    cov_type : {"HC1", "HC0", "nonrobust"}, default "HC1"

    Attributes
    ----------
    coef_ : ndarray of shape (n_features,)
    intercept_ : float
    params_ : Series
        Coefficients by name, intercept first when estimated.
    cov_ : DataFrame
        Covariance matrix of ``params_``.
    bse_, tvalues_, pvalues_ : Series
    r2_ : float
        R-squared of the full model (group effects included).
    r2_within_ : float
        R-squared after demeaning; equals ``r2_`` without groups.
    n_obs_, df_resid_, n_groups_ : int
    """

    def __init__(self, fit_intercept=True, cov_type="HC1"):
        self.fit_intercept = fit_intercept
        self.cov_type = cov_type

    def fit(self, X, y, groups=None):
        if self.cov_type not in COV_TYPES:
            raise ValueError(f"cov_type must be one of {COV_TYPES}")
        names = list(X.columns) if isinstance(X, pd.DataFrame) else \
            [f"x{j}" for j in range(np.shape(X)[1])]
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float).ravel()
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError("X must be 2-D with one row per element of y")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("X and y must be finite; drop missing rows first")
        n = X.shape[0]

        if groups is not None:
            groups = np.asarray(groups).astype(str)
            n_groups = len(np.unique(groups))
            Xd, yd = demean_within(X, groups), demean_within(y, groups)
            terms = names
            intercept = False
        else:
            n_groups = 0
            intercept = self.fit_intercept
            Xd = np.column_stack([np.ones(n), X]) if intercept else X
            yd = y
            terms = (["Intercept"] if intercept else []) + names

        k = Xd.shape[1]
        df_resid = n - k - n_groups
        if df_resid <= 0:
            raise ValueError(f"too few observations: n={n}, parameters={k + n_groups}")
        Q, R, beta = _qr_solve(Xd, yd, terms)
        resid = yd - Xd @ beta

        Rinv = linalg.solve_triangular(R, np.eye(k))
        if self.cov_type == "nonrobust":
            cov = Rinv @ Rinv.T * (resid @ resid / df_resid)
        else:
            scale = n / df_resid if self.cov_type == "HC1" else 1.0
            meat = (Q * (resid ** 2)[:, None]).T @ Q * scale
            cov = Rinv @ meat @ Rinv.T
        cov = (cov + cov.T) / 2

        ssr = float(resid @ resid)
        tss = float(np.sum((y - y.mean()) ** 2))
        tss_within = float(yd @ yd) if groups is not None else tss
        self.r2_ = 1.0 - ssr / tss if tss > 0 else float("nan")
        self.r2_within_ = 1.0 - ssr / tss_within if tss_within > 0 else float("nan")

        bse = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        with np.errstate(divide="ignore", invalid="ignore"):
            tvalues = np.where(bse > 0, beta / bse, np.where(beta == 0, 0.0, np.inf))
        pvalues = 2 * stats.norm.sf(np.abs(tvalues))

        self.params_ = pd.Series(beta, index=terms)
        self.cov_ = pd.DataFrame(cov, index=terms, columns=terms)
        self.bse_ = pd.Series(bse, index=terms)
        self.tvalues_ = pd.Series(tvalues, index=terms)
        self.pvalues_ = pd.Series(pvalues, index=terms)
        self.coef_ = beta[1:] if intercept else beta
        self.intercept_ = float(beta[0]) if intercept else 0.0
        self.resid_ = resid
        self.n_obs_ = n
        self.df_resid_ = df_resid
        self.n_groups_ = n_groups
        self.feature_names_in_ = np.array(names, dtype=object)
        if groups is not None:
            fx = pd.Series(y - X @ self.coef_).groupby(groups).mean()
            self.group_effects_ = fx
        return self

    def predict(self, X, groups=None):
        check_is_fitted(self, "coef_")
        pred = np.asarray(X, dtype=float) @ self.coef_ + self.intercept_
        if getattr(self, "group_effects_", None) is not None and self.n_groups_:
            if groups is None:
                raise ValueError("model has fixed effects; pass groups to predict")
            pred = pred + self.group_effects_.reindex(np.asarray(groups).astype(str)).to_numpy()
        return pred

    def score(self, X, y, groups=None, sample_weight=None):
        from sklearn.metrics import r2_score
        return r2_score(y, self.predict(X, groups), sample_weight=sample_weight)

    def stars(self) -> pd.Series:
        check_is_fitted(self, "pvalues_")
        return self.pvalues_.map(significance_stars)
