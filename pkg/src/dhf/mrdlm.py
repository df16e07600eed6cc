"""Baseline forecasting model: observable-factor DLM plus parallel base DLMs.

Selected aggregate series act as observable factors.  They follow a joint
multivariate DLM (independent structural states, correlated observation
noise), while each base series follows a univariate DLM whose regression
block loads on the observed factor values.  The h-step prior for the base
vector then has exactly the low-rank-plus-diagonal shape handled by
``factor_cov``: common uncertainty flows through the loadings, everything
else stays in the diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import block_diag

from dhf.dlm import (
    DlmSpec,
    Level,
    Q_FLOOR,
    Regression,
    Seasonal,
    SvdState,
    Trend,
    VarianceState,
    svd_predict,
    svd_update,
    svd_update_mv,
)
from dhf.errors import DataError
from dhf.factor_cov import GaussianFactorMoments
from dhf.hierarchy import Hierarchy


@dataclass
class PriorForecast:
    """Per-horizon factor-form moments for the base series."""

    horizons: list[GaussianFactorMoments]

    def __len__(self) -> int:
        return len(self.horizons)

    def __getitem__(self, j: int) -> GaussianFactorMoments:
        return self.horizons[j]


@dataclass
class MrdlmModel:
    hierarchy: Hierarchy
    factor_ids: tuple[str, ...]
    factor_spec: DlmSpec | None
    base_spec: DlmSpec
    factor_state: SvdState | None
    factor_v: np.ndarray          # running factor observation covariance
    factor_v_dof: float
    base_state: SvdState          # batched over base series
    base_var: VarianceState       # batched n, d
    t: int = 0

    @property
    def n_x(self) -> int:
        return len(self.factor_ids)

    @property
    def n_b(self) -> int:
        return self.hierarchy.n_b


def _joint_factor_structure(spec: DlmSpec, n_x: int):
    """Transition, blocks, discounts and design for n_x stacked factor states."""
    q_f = spec.state_dim
    g = block_diag(*[spec.transition()] * n_x)
    blocks: list[slice] = []
    discounts: list[float] = []
    for i in range(n_x):
        for b, d in zip(spec.blocks(), spec.block_discounts):
            blocks.append(slice(i * q_f + b.start, i * q_f + b.stop))
            discounts.append(d)
    f_mat = np.zeros((n_x * q_f, n_x))
    fd = spec.design()
    for i in range(n_x):
        f_mat[i * q_f : (i + 1) * q_f, i] = fd
    return g, blocks, discounts, f_mat


def _seasonal_state_from_means(spec: DlmSpec, seasonal_means: np.ndarray) -> np.ndarray:
    """Map per-season mean effects onto harmonic states by least squares.

    seasonal_means has shape (..., period) with entry k the expected effect at
    the k-th step after initialization.
    """
    seas = next(c for c in spec.components if isinstance(c, Seasonal))
    sl = next(b for c, b in zip(spec.components, spec.blocks()) if isinstance(c, Seasonal))
    g = spec.transition()[sl, sl]
    f = spec.design(np.zeros(spec.regression_slice().stop - spec.regression_slice().start)
                    if spec.regression_slice() else None)[sl]
    rows = []
    gk = np.eye(sl.stop - sl.start)
    for _ in range(seas.period):
        gk = g @ gk
        rows.append(f @ gk)
    m = np.stack(rows)  # period x dim
    pinv = np.linalg.pinv(m)
    return seasonal_means @ pinv.T


def _nan_mean_var(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row means and variances ignoring NaNs, without warnings; empty rows
    fall back to mean 0, variance 1."""
    mask = np.isfinite(values)
    cnt = mask.sum(axis=1)
    filled = np.where(mask, values, 0.0)
    mean = filled.sum(axis=1) / np.maximum(cnt, 1)
    dev = np.where(mask, values - mean[:, None], 0.0)
    var = (dev**2).sum(axis=1) / np.maximum(cnt, 1)
    mean = np.where(cnt > 0, mean, 0.0)
    var = np.where((cnt > 1) & (var > 0), var, 1.0)
    return mean, var


def _series_priors(values: np.ndarray, spec: DlmSpec, factor_scale: np.ndarray | None):
    """Initial state mean/covariance per series from in-sample statistics.

    values: (n_series, T) training observations.  Level mean is the sample
    mean; seasonal states come from per-season average deviations; slopes and
    regression coefficients start at zero.  State variances are set to the
    estimated series variance over 10, with regression entries rescaled by
    the matching factor variance.
    """
    n_series, t_len = values.shape
    mean, var = _nan_mean_var(values)

    q = spec.state_dim
    m0 = np.zeros((n_series, q))
    v0 = np.zeros((n_series, q))
    resid = values - mean[:, None]
    seasonal_fit = np.zeros((n_series, t_len))
    for comp, sl in zip(spec.components, spec.blocks()):
        if isinstance(comp, (Level, Trend)):
            m0[:, sl.start] = mean
            v0[:, sl] = (var / 10.0)[:, None]
        elif isinstance(comp, Seasonal):
            period = comp.period
            if t_len >= period:
                mask = np.isfinite(resid)
                filled = np.where(mask, resid, 0.0)
                smean = np.zeros((n_series, period))
                idx = np.arange(t_len)
                for k in range(period):
                    sel = idx % period == k
                    cnt = mask[:, sel].sum(axis=1)
                    smean[:, k] = np.where(
                        cnt > 0, filled[:, sel].sum(axis=1) / np.maximum(cnt, 1), 0.0
                    )
                smean -= smean.mean(axis=1, keepdims=True)
                # Filtering restarts at the first training row, so season k of
                # the estimate is k + 1 steps ahead of the initial state.
                m0[:, sl] = _seasonal_state_from_means(spec, smean)
                seasonal_fit = smean[:, idx % period]
            v0[:, sl] = (var / 10.0)[:, None]
        elif isinstance(comp, Regression):
            if factor_scale is not None:
                v0[:, sl] = var[:, None] / (10.0 * factor_scale[None, :])
    _, resid_var = _nan_mean_var(resid - seasonal_fit)
    return m0, v0, resid_var


def init_model(
    h: Hierarchy,
    panel: np.ndarray,
    factor_ids: tuple[str, ...],
    factor_spec: DlmSpec | None,
    base_spec: DlmSpec,
) -> MrdlmModel:
    """Set up prior states from a training panel over the full hierarchy.

    panel: (T, n) array aligned to h.series_ids; used only for moment
    estimates, the filter itself has not seen any of it yet.
    """
    panel = np.asarray(panel, dtype=float)
    if panel.ndim != 2 or panel.shape[1] != h.n:
        raise DataError(f"panel must be (T, {h.n})")
    n_x = len(factor_ids)
    reg = base_spec.regression_slice()
    if n_x and (reg is None or reg.stop - reg.start != n_x):
        raise ValueError("base spec regression width must match the factor count")
    if n_x == 0 and reg is not None:
        raise ValueError("base spec has a regression block but no factors were chosen")

    factor_state = None
    factor_v = np.zeros((n_x, n_x))
    fvar = None
    if n_x:
        cols = [h.index[sid] for sid in factor_ids]
        x_panel = panel[:, cols].T  # (n_x, T)
        if np.isnan(x_panel).any():
            raise DataError("factor series must be fully observed in training")
        fm, fv, fresid = _series_priors(x_panel, factor_spec, None)
        q_f = factor_spec.state_dim
        m_joint = fm.reshape(n_x * q_f)
        u = np.eye(n_x * q_f)
        s = np.sqrt(fv.reshape(n_x * q_f))
        factor_state = SvdState(m_joint, u, s)
        factor_v = np.diag(fresid)
        fvar = fresid

    base_panel = panel[:, h.n_a :].T  # (n_b, T)
    bm, bv, bresid = _series_priors(base_panel, base_spec, fvar)
    n_b = h.n_b
    q_b = base_spec.state_dim
    base_state = SvdState(
        bm,
        np.broadcast_to(np.eye(q_b), (n_b, q_b, q_b)).copy(),
        np.sqrt(bv),
    )
    base_var = VarianceState(
        np.ones(n_b), bresid.copy(), base_spec.variance_discount
    )
    return MrdlmModel(
        hierarchy=h,
        factor_ids=tuple(factor_ids),
        factor_spec=factor_spec,
        base_spec=base_spec,
        factor_state=factor_state,
        factor_v=factor_v,
        factor_v_dof=1.0,
        base_state=base_state,
        base_var=base_var,
    )


def update_step(model: MrdlmModel, x_t: np.ndarray, b_t: np.ndarray) -> MrdlmModel:
    """Advance one time step: factor DLM first, then all base DLMs at once.

    Missing base entries (NaN) get the time update only.  Factors must be
    fully observed.
    """
    x_t = np.asarray(x_t, dtype=float)
    b_t = np.asarray(b_t, dtype=float)
    if x_t.shape != (model.n_x,):
        raise DataError(f"expected {model.n_x} factor observations")
    if np.isnan(x_t).any():
        raise DataError("missing factor observation")
    if b_t.shape != (model.n_b,):
        raise DataError(f"expected {model.n_b} base observations")

    factor_state = model.factor_state
    factor_v = model.factor_v
    factor_dof = model.factor_v_dof
    if model.n_x:
        g, blocks, discounts, f_mat = _joint_factor_structure(model.factor_spec, model.n_x)
        a, u_r, s_r = svd_predict(factor_state, g, blocks, discounts)
        factor_state, e_x, q_mat = svd_update_mv(a, u_r, s_r, f_mat, x_t, factor_v)
        # Discounted error-covariance estimate of the factor observation
        # noise; the diagonal recursion coincides with variance_update.
        dv = model.factor_spec.variance_discount
        s_diag = np.diag(factor_v)
        lam = np.sqrt(np.maximum(s_diag, Q_FLOOR) / np.maximum(np.diag(q_mat), Q_FLOOR))
        scaled = lam * e_x
        d_new = dv * factor_v * factor_dof + np.outer(scaled, scaled)
        factor_dof = dv * factor_dof + 1.0
        factor_v = d_new / factor_dof

    spec = model.base_spec
    a, u_r, s_r = svd_predict(
        model.base_state, spec.transition(), spec.blocks(), spec.block_discounts
    )
    f_vec = spec.design(np.broadcast_to(x_t, (model.n_b, model.n_x))) if model.n_x \
        else np.broadcast_to(spec.design(), (model.n_b, spec.state_dim))
    observed = ~np.isnan(b_t)
    y_filled = np.where(observed, b_t, 0.0)
    v_plug = np.maximum(np.asarray(model.base_var.s, dtype=float), Q_FLOOR)
    post, e, q = svd_update(a, u_r, s_r, f_vec, y_filled, v_plug)

    keep = observed[:, None]
    base_state = SvdState(
        np.where(keep, post.m, a),
        np.where(keep[..., None], post.u, u_r),
        np.where(keep, post.s, s_r),
    )
    var_post = VarianceState(
        np.where(observed, model.base_var.delta * model.base_var.n + 1.0, model.base_var.n),
        np.where(
            observed,
            model.base_var.delta * model.base_var.d + v_plug * e**2 / q,
            model.base_var.d,
        ),
        model.base_var.delta,
    )
    return replace(
        model,
        factor_state=factor_state,
        factor_v=factor_v,
        factor_v_dof=factor_dof,
        base_state=base_state,
        base_var=var_post,
        t=model.t + 1,
    )


def factor_forecast(model: MrdlmModel, h: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-horizon mean and covariance of the future observed factor values."""
    if model.n_x == 0:
        return [(np.zeros(0), np.zeros((0, 0)))] * h
    g, blocks, discounts, f_mat = _joint_factor_structure(model.factor_spec, model.n_x)
    out = []
    cur = model.factor_state
    for _ in range(h):
        a, u_r, s_r = svd_predict(cur, g, blocks, discounts)
        urf = u_r.T @ f_mat
        sigma = (s_r[:, None] * urf).T @ (s_r[:, None] * urf) + model.factor_v
        out.append((f_mat.T @ a, sigma))
        cur = SvdState(a, u_r, s_r)
    return out


def assemble_prior(model: MrdlmModel, h: int) -> PriorForecast:
    """Eq.-style h-step prior: mean, loadings on factor forecasts, factor
    forecast covariance, and specific variances per horizon.

    The common-factor variance term goes through the loadings, the rest
    (state uncertainty at forecast-time factor means, regression-state trace
    term, observation variance) stays in the diagonal.
    """
    spec = model.base_spec
    reg = spec.regression_slice()
    fx = factor_forecast(model, h)
    s_now = np.maximum(np.asarray(model.base_var.s, dtype=float), Q_FLOOR)

    horizons = []
    g = spec.transition()
    blocks, discounts = spec.blocks(), spec.block_discounts
    cur = model.base_state
    for j in range(h):
        a, u_r, s_r = svd_predict(cur, g, blocks, discounts)
        cur = SvdState(a, u_r, s_r)
        f_x, sigma_x = fx[j]
        if model.n_x:
            loadings = a[:, reg].copy()
            f_vec = spec.design(np.broadcast_to(f_x, (model.n_b, model.n_x)))
        else:
            loadings = np.zeros((model.n_b, 0))
            f_vec = np.broadcast_to(spec.design(), (model.n_b, spec.state_dim))
        urf = np.einsum("nij,ni->nj", u_r, f_vec)
        quad = np.einsum("nj,nj->n", s_r**2, urf**2)
        mean = np.einsum("ni,ni->n", f_vec, a)
        d = quad + s_now
        if model.n_x:
            u_reg = u_r[:, reg, :]
            r_reg = np.einsum("nik,nk,njk->nij", u_reg, s_r**2, u_reg)
            d = d + np.einsum("nij,ji->n", r_reg, sigma_x)
        horizons.append(
            GaussianFactorMoments(
                mean=mean,
                loadings=loadings,
                factor_cov=sigma_x,
                specific=np.maximum(d, Q_FLOOR),
            )
        )
    return PriorForecast(horizons)
