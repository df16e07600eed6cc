"""Bayesian revision of base-series forecasts given outside forecasts.

An outside forecast for any series in the hierarchy (aggregate or base) is a
mean and variance for one known linear combination of the base vector.  The
joint prior over base series comes from the factor-form moments, so
conditioning on the combination revises every base series at once.  The
covariance change is a rank-1 correction to the prior, which is kept in
descriptor form rather than densified.

The revised per-base means and variances are what the combination regressions
consume: each base series collects one regressor per forecast ancestor plus
its own direct forecast.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from dhf.errors import DataError, NumericalError
from dhf.factor_cov import GaussianFactorMoments, cov_vec, variances
from dhf.hierarchy import Hierarchy

DEGENERATE_TOL = 1e-12


@dataclass(frozen=True)
class ExoForecast:
    """Outside forecast of one series at one horizon.

    variance None marks a point forecast; it is treated as matching the
    prior precision, so only the mean moves.
    """

    series_id: str
    horizon: int
    mean: float
    variance: float | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise DataError(f"horizon must be >= 1, got {self.horizon}")
        if self.variance is not None and self.variance < 0:
            raise DataError("forecast variance must be nonnegative")


def calibrate(
    prior_f: float, prior_q: float, exo: ExoForecast, rho: float = 1.0
) -> tuple[float, float]:
    """Blend an outside forecast with the prior by quality weight rho.

    rho = 0 keeps the prior, rho = 1 adopts the forecast at face value.
    Point forecasts take the prior variance, so calibration shifts the mean
    only.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    q_hat = prior_q if exo.variance is None else exo.variance
    f_star = prior_f + rho * (exo.mean - prior_f)
    q_star = (1.0 - rho**2) * prior_q + rho**2 * q_hat
    return f_star, q_star


@dataclass
class RevisedMoments:
    """Base-vector moments after conditioning on one outside forecast.

    Covariance is the prior minus coef times the outer product of cross with
    itself (coef can be negative, inflating the prior when the forecast is
    weaker than it).  Marginal variances cost O(n_b).
    """

    mean: np.ndarray
    prior: GaussianFactorMoments
    cross: np.ndarray
    coef: float

    def variances(self) -> np.ndarray:
        v = variances(self.prior) - self.coef * self.cross**2
        return np.maximum(v, 0.0)

    def variance(self, i: int) -> float:
        return float(self.variances()[i])

    def dense_cov(self) -> np.ndarray:
        base = self.prior.dense_cov()
        return base - self.coef * np.outer(self.cross, self.cross)


def _as_row(c_i, n_b: int) -> np.ndarray:
    if sparse.issparse(c_i):
        c = np.asarray(c_i.todense()).ravel()
    else:
        c = np.asarray(c_i, dtype=float).ravel()
    if c.shape != (n_b,):
        raise DataError(f"constraint row must have length {n_b}")
    return c


def disaggregate(
    prior: GaussianFactorMoments,
    c_i,
    exo: ExoForecast,
    rho: float = 1.0,
    tol: float = DEGENERATE_TOL,
) -> RevisedMoments:
    """Condition the base-vector prior on an outside forecast of c_i' b.

    Returns the revised mean plus the rank-1 covariance descriptor.  With a
    zero-variance forecast this is exact Gaussian conditioning; with the
    forecast variance matching the prior it leaves the covariance alone.
    """
    c = _as_row(c_i, prior.n_b)
    cross = cov_vec(prior, c)
    q_bar = float(c @ cross)
    if q_bar <= tol:
        raise NumericalError(
            f"aggregate variance {q_bar:.3e} is degenerate; cannot revise"
        )
    cf = float(c @ prior.mean)
    f_star, q_star = calibrate(cf, q_bar, exo, rho)
    if exo.variance is not None and exo.variance > q_bar and rho > 0:
        warnings.warn(
            f"forecast for {exo.series_id} is weaker than the prior "
            f"({exo.variance:.4g} > {q_bar:.4g}); variances inflate",
            RuntimeWarning,
            stacklevel=2,
        )
    alpha = (f_star - cf) / q_bar
    coef = (q_bar - q_star) / q_bar**2
    return RevisedMoments(
        mean=prior.mean + cross * alpha, prior=prior, cross=cross, coef=coef
    )


@dataclass
class RegressorPanel:
    """Ragged per-base-series regressors for one horizon.

    For base series i, means[i] and variance_diags[i] hold one entry per
    forecast source (forecast ancestors top down, own forecast last when
    present); sources[i] and source_levels[i] carry the matching series ids
    and level labels.
    """

    base_ids: tuple[str, ...]
    means: list[np.ndarray]
    variance_diags: list[np.ndarray]
    sources: list[tuple[str, ...]]
    source_levels: list[tuple[str, ...]]

    def k(self, i: int) -> int:
        return len(self.means[i])

    def counts(self) -> np.ndarray:
        return np.array([len(m) for m in self.means])

    def empty_mask(self) -> np.ndarray:
        """Base series with no usable regressors; combinations skip these."""
        return self.counts() == 0


def build_regressors(
    prior,
    exo_set: list[ExoForecast],
    h: Hierarchy,
    rho: float = 1.0,
    tol: float = DEGENERATE_TOL,
) -> list[RegressorPanel]:
    """Disaggregate a forecast set onto every base series, per horizon.

    prior carries one factor-form moment object per horizon.  Each outside
    forecast revises exactly the base series it covers; a base series picks
    up one regressor per forecast ancestor, ordered top level first with its
    own forecast last.  Missing forecasts shrink a series' regressor count
    rather than erroring.
    """
    n_h = len(prior)
    by_horizon: dict[int, dict[int, ExoForecast]] = {}
    for exo in exo_set:
        if exo.series_id not in h.index:
            raise DataError(f"unknown series id {exo.series_id!r} in forecast set")
        if exo.horizon > n_h:
            raise DataError(
                f"forecast horizon {exo.horizon} exceeds prior horizon {n_h}"
            )
        slot = by_horizon.setdefault(exo.horizon, {})
        idx = h.index[exo.series_id]
        if idx in slot:
            raise DataError(
                f"duplicate forecast for {exo.series_id!r} at horizon {exo.horizon}"
            )
        slot[idx] = exo

    anc = [h.ancestors(i) for i in range(h.n_b)]
    panels = []
    for j in range(1, n_h + 1):
        moments = prior[j - 1]
        prior_var = variances(moments)
        slot = by_horizon.get(j, {})
        # Per forecast source: revised mean and variance on its support.
        per_source: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        for idx, exo in slot.items():
            supp = h.s.row_support(idx)
            cf = float(moments.mean[supp].sum())
            w = moments.loadings[supp].sum(axis=0)
            sig_w = moments.factor_cov @ w
            cross = moments.loadings[supp] @ sig_w + moments.specific[supp]
            q_bar = float(w @ sig_w + moments.specific[supp].sum())
            if q_bar <= tol:
                raise NumericalError(
                    f"aggregate variance for {exo.series_id!r} is degenerate"
                )
            f_star, q_star = calibrate(cf, q_bar, exo, rho)
            if exo.variance is not None and exo.variance > q_bar and rho > 0:
                warnings.warn(
                    f"forecast for {exo.series_id} is weaker than the prior "
                    f"({exo.variance:.4g} > {q_bar:.4g}); variances inflate",
                    RuntimeWarning,
                    stacklevel=2,
                )
            alpha = (f_star - cf) / q_bar
            coef = (q_bar - q_star) / q_bar**2
            h_vals = moments.mean[supp] + cross * alpha
            h_vars = np.maximum(prior_var[supp] - coef * cross**2, 0.0)
            per_source[idx] = (supp, h_vals, h_vars)

        means, var_diags, sources, levels = [], [], [], []
        for i in range(h.n_b):
            m_i, v_i, s_i, l_i = [], [], [], []
            for idx in anc[i]:
                if idx not in per_source:
                    continue
                supp, h_vals, h_vars = per_source[idx]
                pos = int(np.searchsorted(supp, i))
                m_i.append(h_vals[pos])
                v_i.append(h_vars[pos])
                sid = h.series_ids[idx]
                s_i.append(sid)
                l_i.append(h.levels[sid])
            means.append(np.array(m_i))
            var_diags.append(np.array(v_i))
            sources.append(tuple(s_i))
            levels.append(tuple(l_i))
        panels.append(
            RegressorPanel(
                base_ids=tuple(h.base_ids),
                means=means,
                variance_diags=var_diags,
                sources=sources,
                source_levels=levels,
            )
        )
    return panels
