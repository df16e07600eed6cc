"""Dynamic combination regressions over disaggregated forecasts.

Each base series regresses its outcome on the forecasts disaggregated from
its ancestors (plus its own), with time-varying weights.  Premultiplying the
stacked system by the summing matrix makes the weights answer for every
aggregate as well; because aggregate observations are exact sums of base
observations, that premultiplied update collapses (through the pseudoinverse
of the singular stacked covariance) to a generalized least squares step in
base coordinates with the forecast covariance as the error metric.  The
update here is implemented in that reduced form and unit tests verify the
equivalence against the stacked pseudoinverse oracle.

Two variants: a flat regression with one weight vector per series (dense
joint posterior), and a pooled regression where per-series weights scatter
around a shared hierarchy-wide weight vector (state is the shared vector
only, so it scales linearly in the number of series).

Weights are unconstrained: they need not sum to one and may go negative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from dhf.disaggregation import RegressorPanel
from dhf.errors import DataError, NumericalError
from dhf.factor_cov import (
    GaussianFactorMoments,
    inverse_diag,
    variances,
    woodbury_solve,
)
from dhf.hierarchy import DENSE_CAP, SummingMatrix

COHERENCE_TOL = 1e-6


def init_weight_prior(k: int, scale_divisor: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean weight prior with sd 1/(scale_divisor * k) per entry."""
    if k <= 0:
        raise ValueError("need at least one regressor for a weight prior")
    sd = 1.0 / (scale_divisor * k)
    return np.zeros(k), np.eye(k) * sd**2


@dataclass
class CombinationState:
    """Joint weight posterior for the flat combination.

    Weights for base series i live in mean[offsets[i]:offsets[i+1]]; root is
    an upper-triangular-free square root with C = root' root.  Series with no
    regressors own an empty slice and fall back to the prior forecast.
    """

    offsets: np.ndarray
    mean: np.ndarray
    root: np.ndarray
    weight_discount: float
    source_levels: tuple[tuple[str, ...], ...]
    dof: float = math.inf
    t: int = 0

    @property
    def n_b(self) -> int:
        return len(self.offsets) - 1

    @property
    def dim(self) -> int:
        return int(self.offsets[-1])

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def weight_sd(self) -> np.ndarray:
        return np.sqrt(np.einsum("ri,ri->i", self.root, self.root))

    def block(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))


def init_flat_state(
    panel: RegressorPanel,
    weight_discount: float = 0.97,
    scale_divisor: float = 2.0,
    dof: float = math.inf,
) -> CombinationState:
    """Prior weight state sized to a regressor panel."""
    if not 0.0 < weight_discount <= 1.0:
        raise ValueError("weight_discount must lie in (0, 1]")
    counts = panel.counts()
    offsets = np.concatenate([[0], np.cumsum(counts)])
    d = int(offsets[-1])
    sd = np.concatenate(
        [np.full(k, 1.0 / (scale_divisor * k)) for k in counts if k > 0]
    ) if d else np.zeros(0)
    return CombinationState(
        offsets=offsets,
        mean=np.zeros(d),
        root=np.diag(sd),
        weight_discount=weight_discount,
        source_levels=tuple(panel.source_levels),
        dof=dof,
    )


def _check_panel(state_counts: np.ndarray, panel: RegressorPanel, n_b: int):
    if len(panel.means) != n_b:
        raise DataError("regressor panel size does not match the weight state")
    if not np.array_equal(panel.counts(), state_counts):
        raise DataError("regressor counts changed between steps")


def _base_observation(y_t: np.ndarray, s: SummingMatrix) -> np.ndarray:
    """Extract base observations, checking the aggregates match their sums."""
    y_t = np.asarray(y_t, dtype=float)
    if y_t.shape != (s.n,):
        raise DataError(f"observation vector must have length {s.n}")
    b = y_t[s.n_a :]
    implied = s.aggregate_block() @ b
    scale = np.maximum(1.0, np.abs(implied))
    gap = np.abs(y_t[: s.n_a] - implied) / scale
    if s.n_a and gap.max() > COHERENCE_TOL:
        raise DataError(
            f"observations are incoherent (max relative gap {gap.max():.3e})"
        )
    return b


def _design_matrix(panel: RegressorPanel, offsets: np.ndarray, rows: np.ndarray) -> np.ndarray:
    d = int(offsets[-1])
    f = np.zeros((len(rows), d))
    for r, i in enumerate(rows):
        f[r, offsets[i] : offsets[i + 1]] = panel.means[i]
    return f


def _obs_moments(prior_cov: GaussianFactorMoments, rows: np.ndarray, extra_diag: np.ndarray,
                 extra_loadings: np.ndarray) -> GaussianFactorMoments:
    """Forecast-error covariance restricted to rows, plus regression terms."""
    return GaussianFactorMoments(
        mean=np.zeros(len(rows)),
        loadings=np.concatenate([prior_cov.loadings[rows], extra_loadings], axis=1),
        factor_cov=linalg.block_diag(
            prior_cov.factor_cov, np.eye(extra_loadings.shape[1])
        ),
        specific=prior_cov.specific[rows] + extra_diag,
    )


def _solve_obs(obs: GaussianFactorMoments, rhs: np.ndarray) -> np.ndarray:
    """Solve against the observation covariance, dense when small."""
    n = obs.n_b
    if n <= DENSE_CAP:
        q = obs.dense_cov()
        try:
            c, low = linalg.cho_factor(q, check_finite=False)
        except linalg.LinAlgError:
            jitter = 1e-10 * max(np.median(np.diag(q)), 1.0)
            try:
                c, low = linalg.cho_factor(
                    q + jitter * np.eye(n), check_finite=False
                )
            except linalg.LinAlgError as exc:
                raise NumericalError(
                    "one-step forecast covariance is singular"
                ) from exc
        return linalg.cho_solve((c, low), rhs, check_finite=False)
    return woodbury_solve(obs, rhs)


def flat_update(
    state: CombinationState,
    s: SummingMatrix,
    panel: RegressorPanel,
    y_t: np.ndarray,
    prior_cov: GaussianFactorMoments,
) -> CombinationState:
    """One weight-learning step from a coherent observation vector.

    The error metric is the forecast covariance plus the uncertain-regressor
    diagonal (a'Ha + tr(RH) per series) plus the weight-prior quadratic form.
    Series without regressors are left out of the step.
    """
    _check_panel(state.counts(), panel, state.n_b)
    b = _base_observation(y_t, s)
    if len(b) != state.n_b:
        raise DataError("observation does not match the panel's base series")
    rows = np.flatnonzero(state.counts())
    if rows.size == 0:
        return replace(state, t=state.t + 1)

    delta = state.weight_discount
    a = state.mean
    n_r = state.root / math.sqrt(delta)
    f_rows = _design_matrix(panel, state.offsets, rows)
    t_mat = n_r @ f_rows.T  # (d, n_used)

    # Uncertain-regressor diagonal: a'Ha + tr(RH) per used series.
    extra = np.zeros(rows.size)
    for r, i in enumerate(rows):
        sl = state.block(i)
        h_var = panel.variance_diags[i]
        r_diag = np.einsum("rj,rj->j", n_r[:, sl], n_r[:, sl])
        extra[r] = float(h_var @ (a[sl] ** 2 + r_diag))

    obs = _obs_moments(prior_cov, rows, extra, t_mat.T)
    e = b[rows] - f_rows @ a
    sol = _solve_obs(obs, np.concatenate([e[:, None], t_mat.T], axis=1))
    mean = a + n_r.T @ (t_mat @ sol[:, 0])

    m_mat = t_mat @ sol[:, 1:]  # T Q^-1 T', symmetric PSD, eigenvalues <= 1
    m_mat = 0.5 * (m_mat + m_mat.T)
    w, v = np.linalg.eigh(m_mat)
    w = np.clip(w, 0.0, 1.0)
    shrink = (v * np.sqrt(1.0 - w)) @ v.T
    return replace(state, mean=mean, root=shrink @ n_r, t=state.t + 1)


@dataclass
class ReconciledForecast:
    """Reconciled base-series distribution for one horizon.

    moments.mean is the reconciled mean; applying the summing matrix to it
    defines every aggregate's reconciled forecast.  fallback_mask marks
    series carried straight from the prior because no regressors existed.
    """

    moments: GaussianFactorMoments
    fallback_mask: np.ndarray
    horizon: int

    @property
    def mean(self) -> np.ndarray:
        return self.moments.mean


def _nu_scale(dof: float) -> float:
    if math.isinf(dof):
        return 1.0
    if dof <= 2:
        raise NumericalError("variance degrees of freedom must exceed 2")
    return dof / (dof - 2.0)


def flat_forecast(
    state: CombinationState,
    panel: RegressorPanel,
    prior_cov: GaussianFactorMoments,
    steps: int = 1,
) -> ReconciledForecast:
    """Combine the panel's regressors under the current weight posterior.

    steps counts the origin-to-horizon distance for discount inflation of the
    weight covariance.  The covariance adds the weight-uncertainty quadratic
    form and trace term to the prior and swaps the regressor-variance
    quadratic outside any dof scaling.
    """
    _check_panel(state.counts(), panel, state.n_b)
    n_b = state.n_b
    scale = _nu_scale(state.dof)
    infl = state.weight_discount ** (-0.5 * steps)
    n_r = state.root * infl

    mean = prior_cov.mean.copy()
    mhm = np.zeros(n_b)
    trrh = np.zeros(n_b)
    rows = np.flatnonzero(state.counts())
    f_rows = _design_matrix(panel, state.offsets, rows)
    t_mat = n_r @ f_rows.T  # (d, n_used)
    for r, i in enumerate(rows):
        sl = state.block(i)
        h_var = panel.variance_diags[i]
        mean[i] = float(panel.means[i] @ state.mean[sl])
        mhm[i] = float(h_var @ state.mean[sl] ** 2)
        r_diag = np.einsum("rj,rj->j", n_r[:, sl], n_r[:, sl])
        trrh[i] = float(h_var @ r_diag)

    extra_load = np.zeros((n_b, t_mat.shape[0]))
    extra_load[rows] = t_mat.T
    specific = scale * (prior_cov.specific + trrh - mhm) + mhm
    moments = GaussianFactorMoments(
        mean=mean,
        loadings=np.concatenate([prior_cov.loadings, extra_load], axis=1),
        factor_cov=linalg.block_diag(
            scale * prior_cov.factor_cov, scale * np.eye(t_mat.shape[0])
        ),
        specific=np.maximum(specific, 0.0),
    )
    fallback = np.ones(n_b, dtype=bool)
    fallback[rows] = False
    return ReconciledForecast(moments=moments, fallback_mask=fallback, horizon=steps)


@dataclass
class HierCombinationState:
    """Pooled weight posterior: shared vector plus per-series scatter.

    Per-series weights equal the shared weights plus independent deviations
    with diagonal variance v_h (a fixed hyperparameter).  Only the shared
    posterior evolves; per-series posterior summaries are recomputed each
    step and kept for forecasting.
    """

    mean_h: np.ndarray
    cov_h: np.ndarray
    v_h: np.ndarray
    weight_discount: float
    source_levels: tuple[tuple[str, ...], ...]
    mean_b: np.ndarray          # (n_b, k)
    cov_b: np.ndarray           # (n_b, k, k)
    dof: float = math.inf
    t: int = 0

    @property
    def k(self) -> int:
        return len(self.mean_h)

    @property
    def n_b(self) -> int:
        return self.mean_b.shape[0]


def init_hier_state(
    panel: RegressorPanel,
    weight_discount: float = 0.97,
    scale_divisor: float = 2.0,
    deviation_divisor: float = 8.0,
    dof: float = math.inf,
) -> HierCombinationState:
    """Prior pooled state; every series must carry the same regressor count."""
    counts = panel.counts()
    if counts.min() == 0 or counts.max() != counts.min():
        raise DataError("pooled combination needs equal regressor counts per series")
    k = int(counts[0])
    mean_h, cov_h = init_weight_prior(k, scale_divisor)
    v_h = np.full(k, 1.0 / (deviation_divisor * k) ** 2)
    n_b = len(panel.means)
    return HierCombinationState(
        mean_h=mean_h,
        cov_h=cov_h,
        v_h=v_h,
        weight_discount=weight_discount,
        source_levels=tuple(panel.source_levels),
        mean_b=np.zeros((n_b, k)),
        cov_b=np.broadcast_to(cov_h + np.diag(v_h), (n_b, k, k)).copy(),
        dof=dof,
    )


def _hier_obs(prior_cov, g, r_h, v_h, extra_diag):
    """Observation covariance for the pooled step, in factor form."""
    w, v = np.linalg.eigh(0.5 * (r_h + r_h.T))
    root = v * np.sqrt(np.clip(w, 0.0, None))
    own = np.einsum("ij,j,ij->i", g, v_h, g)
    return GaussianFactorMoments(
        mean=np.zeros(g.shape[0]),
        loadings=np.concatenate([prior_cov.loadings, g @ root], axis=1),
        factor_cov=linalg.block_diag(prior_cov.factor_cov, np.eye(g.shape[1])),
        specific=prior_cov.specific + extra_diag + own,
    )


def hier_update(
    state: HierCombinationState,
    s: SummingMatrix,
    panel: RegressorPanel,
    y_t: np.ndarray,
    prior_cov: GaussianFactorMoments,
) -> HierCombinationState:
    """One pooled weight-learning step.

    The shared vector gets a GLS update against all series at once; the
    per-series posteriors follow from the structural relation, each pulled
    toward its own innovation in proportion to the deviation variance.
    """
    if tuple(panel.counts()) != tuple([state.k] * state.n_b):
        raise DataError("regressor counts changed between steps")
    b = _base_observation(y_t, s)
    if len(b) != state.n_b:
        raise DataError("observation does not match the panel's base series")

    delta = state.weight_discount
    a_h = state.mean_h
    r_h = state.cov_h / delta
    g = np.stack(panel.means)  # (n_b, k)
    h_var = np.stack(panel.variance_diags)

    # a'Ha + tr(R H) with R the per-series prior R_h + diag(v_h).
    r_diag = np.diag(r_h) + state.v_h
    extra = h_var @ (a_h**2) + h_var @ r_diag
    obs = _hier_obs(prior_cov, g, r_h, state.v_h, extra)

    e = b - g @ a_h
    z = _solve_obs(obs, e)
    w_g = _solve_obs(obs, g)
    gz = g.T @ z
    a_mat = g.T @ w_g
    d_inv = inverse_diag(obs)

    mean_h = a_h + r_h @ gz
    cov_h = r_h - r_h @ a_mat @ r_h
    cov_h = 0.5 * (cov_h + cov_h.T)

    vh_g = state.v_h[None, :] * g  # rows V h_i
    mean_b = mean_h[None, :] + vh_g * z[:, None]
    rw = w_g @ r_h  # rows (G' Q^-1)_i' R_h = (R_h w_i)'
    cross = np.einsum("ik,il->ikl", rw, vh_g)
    cov_b = (
        cov_h[None, :, :]
        + np.diag(state.v_h)[None, :, :]
        - cross
        - np.swapaxes(cross, 1, 2)
        - d_inv[:, None, None] * np.einsum("ik,il->ikl", vh_g, vh_g)
    )
    cov_b = 0.5 * (cov_b + np.swapaxes(cov_b, 1, 2))
    return replace(
        state,
        mean_h=mean_h,
        cov_h=cov_h,
        mean_b=mean_b,
        cov_b=cov_b,
        t=state.t + 1,
    )


def hier_forecast(
    state: HierCombinationState,
    panel: RegressorPanel,
    prior_cov: GaussianFactorMoments,
    steps: int = 1,
) -> ReconciledForecast:
    """Reconciled moments under the per-series pooled posteriors."""
    if tuple(panel.counts()) != tuple([state.k] * state.n_b):
        raise DataError("regressor counts changed between steps")
    scale = _nu_scale(state.dof)
    infl = state.weight_discount ** (-float(steps))
    r_h = state.cov_h * infl
    g = np.stack(panel.means)
    h_var = np.stack(panel.variance_diags)

    mean = np.einsum("ik,ik->i", g, state.mean_b)
    mhm = np.einsum("ik,ik->i", h_var, state.mean_b**2)
    r_b_diag = np.einsum("ikk->ik", state.cov_b * infl)
    trrh = np.einsum("ik,ik->i", h_var, r_b_diag)

    w, v = np.linalg.eigh(0.5 * (r_h + r_h.T))
    root = v * np.sqrt(np.clip(w, 0.0, None))
    # Per-series weight covariance beyond the shared part goes on the
    # diagonal; the shared part rides in the loadings block.
    own_extra = np.einsum("ik,ikl,il->i", g, state.cov_b * infl, g) - np.einsum(
        "ik,kl,il->i", g, r_h, g
    )
    specific = scale * (prior_cov.specific + trrh - mhm + own_extra) + mhm
    moments = GaussianFactorMoments(
        mean=mean,
        loadings=np.concatenate([prior_cov.loadings, g @ root], axis=1),
        factor_cov=linalg.block_diag(
            scale * prior_cov.factor_cov, scale * np.eye(state.k)
        ),
        specific=np.maximum(specific, 0.0),
    )
    fallback = np.zeros(state.n_b, dtype=bool)
    return ReconciledForecast(moments=moments, fallback_mask=fallback, horizon=steps)
