import math

import numpy as np
import pytest
from scipy import sparse

from dhf.combination import (
    CombinationState,
    flat_forecast,
    flat_update,
    hier_forecast,
    hier_update,
    init_flat_state,
    init_hier_state,
    init_weight_prior,
)
from dhf.disaggregation import RegressorPanel
from dhf.errors import DataError, NumericalError
from dhf.factor_cov import GaussianFactorMoments, variances
from dhf.hierarchy import SummingMatrix, build_hierarchy, check_coherence

from helpers import fig1, random_moments


def make_panel(h_list, var_list=None, levels=None):
    n = len(h_list)
    if var_list is None:
        var_list = [np.zeros(len(h)) for h in h_list]
    if levels is None:
        levels = [tuple(f"L{j}" for j in range(len(h))) for h in h_list]
    return RegressorPanel(
        base_ids=tuple(f"s{i}" for i in range(n)),
        means=[np.asarray(h, dtype=float) for h in h_list],
        variance_diags=[np.asarray(v, dtype=float) for v in var_list],
        sources=[tuple(f"src{j}" for j in range(len(h))) for h in h_list],
        source_levels=[tuple(l) for l in levels],
    )


def identity_summing(n):
    return SummingMatrix(sparse.identity(n, format="csr"))


def diag_prior(var, mean=None):
    n = len(var)
    return GaussianFactorMoments(
        mean=np.zeros(n) if mean is None else np.asarray(mean, dtype=float),
        loadings=np.zeros((n, 0)),
        factor_cov=np.zeros((0, 0)),
        specific=np.asarray(var, dtype=float),
    )


def test_init_weight_prior_values():
    mean, cov = init_weight_prior(8, 2.0)
    assert mean.shape == (8,)
    np.testing.assert_allclose(np.sqrt(np.diag(cov)), 1.0 / 16.0, atol=0)
    _, cov1 = init_weight_prior(1, 2.0)
    assert cov1[0, 0] == pytest.approx(0.25, abs=0)
    _, cov3 = init_weight_prior(3, 16.0)
    np.testing.assert_allclose(np.diag(cov3), (1.0 / 48.0) ** 2, atol=0)
    with pytest.raises(ValueError):
        init_weight_prior(0)


def test_single_series_equals_univariate_regression():
    from helpers import dense_update

    rng = np.random.default_rng(60)
    s = identity_summing(1)
    state = init_flat_state(make_panel([[0.0, 0.0]]), weight_discount=0.95)
    m_or = state.mean.copy()
    c_or = state.root.T @ state.root
    v_obs = 0.7
    prior = diag_prior([v_obs])
    for _ in range(30):
        h = rng.standard_normal(2)
        y = rng.standard_normal()
        panel = make_panel([h])
        state = flat_update(state, s, panel, np.array([y]), prior)
        r_or = c_or / 0.95
        m_or, c_or, _, _ = dense_update(m_or, r_or, h, y, v_obs)
        np.testing.assert_allclose(state.mean, m_or, atol=1e-10)
        np.testing.assert_allclose(state.root.T @ state.root, c_or, atol=1e-10)


def test_stacked_pseudoinverse_oracle():
    rng = np.random.default_rng(61)
    h = fig1()
    s_dense = h.s.dense()
    prior = random_moments(rng, 10, 2)
    v_dense = prior.dense_cov()
    panels = []
    state = None
    for _ in range(12):
        h_list = [rng.standard_normal(3) for _ in range(10)]
        panels.append(make_panel(h_list))
    state = init_flat_state(panels[0], weight_discount=0.9)
    m_or = state.mean.copy()
    c_or = state.root.T @ state.root
    d = state.dim
    for panel in panels:
        b = rng.standard_normal(10)
        y = h.s.aggregate(b)
        state = flat_update(state, h.s, panel, y, prior)

        f_blocks = np.zeros((10, d))
        for i in range(10):
            f_blocks[i, 3 * i : 3 * i + 3] = panel.means[i]
        h_stack = s_dense @ f_blocks
        r_or = c_or / 0.9
        q_y = h_stack @ r_or @ h_stack.T + s_dense @ v_dense @ s_dense.T
        gain = r_or @ h_stack.T @ np.linalg.pinv(q_y, rcond=1e-12, hermitian=True)
        e = y - h_stack @ m_or
        m_or = m_or + gain @ e
        c_or = r_or - gain @ h_stack @ r_or
        np.testing.assert_allclose(state.mean, m_or, atol=1e-8)
        np.testing.assert_allclose(state.root.T @ state.root, c_or, atol=1e-8)


def test_perfect_regressor_wins():
    rng = np.random.default_rng(62)
    h2 = build_hierarchy([("T", "A"), ("T", "B")])
    prior = diag_prior([1.0, 1.0])
    state = init_flat_state(make_panel([[0, 0], [0, 0]]), weight_discount=0.99)
    for _ in range(200):
        b = rng.standard_normal(2) * 2.0
        noise = rng.standard_normal(2)
        panel = make_panel([[b[0], noise[0]], [b[1], noise[1]]])
        state = flat_update(state, h2.s, panel, h2.s.aggregate(b), prior)
    sd = state.weight_sd()
    for i in range(2):
        w_perfect = state.mean[2 * i]
        assert w_perfect > 0.8
        assert w_perfect - 2 * sd[2 * i] > 0


def test_negative_weights_are_allowed():
    rng = np.random.default_rng(63)
    s = identity_summing(1)
    prior = diag_prior([0.5])
    state = init_flat_state(make_panel([[0, 0]]), weight_discount=0.99)
    for _ in range(150):
        r1, r2 = rng.standard_normal(2)
        y = r1 - 0.5 * r2 + 0.1 * rng.standard_normal()
        state = flat_update(state, s, make_panel([[r1, r2]]), np.array([y]), prior)
    assert state.mean[1] < -0.3


def test_forecast_identity_weights_pass_through():
    prior = diag_prior([1.0, 2.0], mean=[5.0, -1.0])
    panel = make_panel([[3.0, 1.5], [0.0, -2.0]])
    state = init_flat_state(panel)
    state = CombinationState(
        offsets=state.offsets,
        mean=np.array([0.0, 1.0, 0.0, 1.0]),  # weight 1 on own (last) source
        root=np.zeros((4, 4)),
        weight_discount=state.weight_discount,
        source_levels=state.source_levels,
    )
    rec = flat_forecast(state, panel, prior)
    np.testing.assert_allclose(rec.mean, [1.5, -2.0], atol=0)
    np.testing.assert_allclose(rec.moments.dense_cov(), np.diag([1.0, 2.0]), atol=0)


def test_forecast_zero_weights_fall_back_to_prior_cov():
    rng = np.random.default_rng(64)
    prior = random_moments(rng, 4, 2)
    h_list = [rng.standard_normal(2) for _ in range(4)]
    var_list = [rng.uniform(0.1, 0.5, 2) for _ in range(4)]
    panel = make_panel(h_list, var_list)
    state = init_flat_state(panel, weight_discount=1.0)
    rec = flat_forecast(state, panel, prior)
    np.testing.assert_allclose(rec.mean, np.zeros(4), atol=0)
    # theta = 0 leaves Q as the prior plus weight-uncertainty terms only.
    n_r = state.root
    extra = np.zeros((4, 4))
    trrh = np.zeros(4)
    for i in range(4):
        sl = state.block(i)
        extra[i] = 0.0
        block = n_r[:, sl].T @ n_r[:, sl]
        extra_i = np.outer(h_list[i], h_list[i]) * 0  # cross terms live below
        trrh[i] = var_list[i] @ np.diag(block)
    f_blocks = np.zeros((4, 8))
    for i in range(4):
        f_blocks[i, 2 * i : 2 * i + 2] = h_list[i]
    expected = prior.dense_cov() + f_blocks @ (n_r.T @ n_r) @ f_blocks.T + np.diag(trrh)
    np.testing.assert_allclose(rec.moments.dense_cov(), expected, atol=1e-12)


def test_forecast_matches_display_formula_dense():
    rng = np.random.default_rng(65)
    prior = random_moments(rng, 5, 2)
    h_list = [rng.standard_normal(3) for _ in range(5)]
    var_list = [rng.uniform(0.05, 0.4, 3) for _ in range(5)]
    panel = make_panel(h_list, var_list)
    s5 = identity_summing(5)
    state = init_flat_state(panel, weight_discount=0.95, dof=10.0)
    for _ in range(8):
        b = rng.standard_normal(5)
        pan_t = make_panel([rng.standard_normal(3) for _ in range(5)], var_list)
        state = flat_update(state, s5, pan_t, b, prior)
    rec = flat_forecast(state, panel, prior, steps=2)

    infl = 0.95 ** (-2.0)
    r_full = (state.root.T @ state.root) * infl
    f_blocks = np.zeros((5, state.dim))
    mhm = np.zeros(5)
    trrh = np.zeros(5)
    for i in range(5):
        sl = state.block(i)
        f_blocks[i, sl] = h_list[i]
        mhm[i] = var_list[i] @ state.mean[sl] ** 2
        trrh[i] = var_list[i] @ np.diag(r_full[sl, sl])
    scale = 10.0 / 8.0
    expected = scale * (
        prior.dense_cov()
        - np.diag(mhm)
        + f_blocks @ r_full @ f_blocks.T
        + np.diag(trrh)
    ) + np.diag(mhm)
    np.testing.assert_allclose(rec.moments.dense_cov(), expected, atol=1e-9)
    for i in range(5):
        assert rec.mean[i] == pytest.approx(h_list[i] @ state.mean[state.block(i)])
    # H = 0 collapses the display to scale * (prior + F'RF).
    panel0 = make_panel(h_list)
    rec0 = flat_forecast(state, panel0, prior, steps=2)
    expected0 = scale * (prior.dense_cov() + f_blocks @ r_full @ f_blocks.T)
    np.testing.assert_allclose(rec0.moments.dense_cov(), expected0, atol=1e-9)


def test_forecast_means_are_coherent_by_construction():
    rng = np.random.default_rng(66)
    h = fig1()
    prior = random_moments(rng, 10, 2)
    panel = make_panel([rng.standard_normal(2) for _ in range(10)])
    state = init_flat_state(panel)
    rec = flat_forecast(state, panel, prior)
    full = h.s.aggregate(rec.mean)
    assert check_coherence(full[None, :], h, tol=1e-12).ok


def test_dof_must_exceed_two():
    panel = make_panel([[1.0]])
    prior = diag_prior([1.0])
    state = init_flat_state(panel, dof=2.0)
    with pytest.raises(NumericalError):
        flat_forecast(state, panel, prior)


def test_update_rejects_incoherent_observations():
    h2 = build_hierarchy([("T", "A"), ("T", "B")])
    panel = make_panel([[1.0], [1.0]])
    state = init_flat_state(panel)
    prior = diag_prior([1.0, 1.0])
    with pytest.raises(DataError, match="incoherent"):
        flat_update(state, h2.s, panel, np.array([5.0, 1.0, 1.0]), prior)


def test_update_rejects_changed_counts():
    s = identity_summing(2)
    state = init_flat_state(make_panel([[1, 2], [3, 4]]))
    prior = diag_prior([1.0, 1.0])
    with pytest.raises(DataError, match="counts changed"):
        flat_update(state, s, make_panel([[1], [2]]), np.array([0.0, 0.0]), prior)


def test_empty_series_skipped_and_fall_back():
    rng = np.random.default_rng(67)
    s = identity_summing(3)
    panel = make_panel([[1.0, 0.5], [], [2.0]])
    prior = diag_prior([1.0, 1.0, 1.0], mean=[0.0, 7.0, 0.0])
    state = init_flat_state(panel)
    for _ in range(5):
        state = flat_update(state, s, panel, rng.standard_normal(3), prior)
    assert state.counts().tolist() == [2, 0, 1]
    rec = flat_forecast(state, panel, prior)
    assert rec.fallback_mask.tolist() == [False, True, False]
    assert rec.mean[1] == 7.0


def pooled_oracle_step(m, c, g, y, v_dense, h_var, delta):
    r = c / delta
    extra = h_var @ (m**2) + h_var @ np.diag(r)
    q = g @ r @ g.T + v_dense + np.diag(extra)
    sol = np.linalg.solve(q, y - g @ m)
    gain = r @ g.T @ np.linalg.inv(q)
    m_new = m + r @ g.T @ np.linalg.solve(q, y - g @ m)
    c_new = r - gain @ g @ r
    return m_new, 0.5 * (c_new + c_new.T)


def test_hier_zero_deviation_equals_pooled_flat():
    rng = np.random.default_rng(68)
    h = fig1()
    prior = random_moments(rng, 10, 2)
    v_dense = prior.dense_cov()
    panel0 = make_panel(
        [rng.standard_normal(3) for _ in range(10)],
        [rng.uniform(0.01, 0.1, 3) for _ in range(10)],
    )
    state = init_hier_state(panel0, weight_discount=0.95, deviation_divisor=math.inf)
    m_or, c_or = init_weight_prior(3, 2.0)
    for _ in range(30):
        g = np.stack([rng.standard_normal(3) for _ in range(10)])
        h_var = np.stack([rng.uniform(0.01, 0.1, 3) for _ in range(10)])
        panel = make_panel(list(g), list(h_var))
        b = rng.standard_normal(10)
        state = hier_update(state, h.s, panel, h.s.aggregate(b), prior)
        m_or, c_or = pooled_oracle_step(m_or, c_or, g, b, v_dense, h_var, 0.95)
        np.testing.assert_allclose(state.mean_h, m_or, atol=1e-8)
        np.testing.assert_allclose(state.cov_h, c_or, atol=1e-8)
        np.testing.assert_allclose(state.mean_b, np.tile(m_or, (10, 1)), atol=1e-8)
        np.testing.assert_allclose(
            state.cov_b, np.tile(c_or, (10, 1, 1)), atol=1e-8
        )


def test_hier_single_series_equals_flat():
    rng = np.random.default_rng(69)
    s = identity_summing(1)
    prior = diag_prior([0.8])
    panel0 = make_panel([[0.0, 0.0]])
    flat = init_flat_state(panel0, weight_discount=0.9)
    hier = init_hier_state(panel0, weight_discount=0.9, deviation_divisor=math.inf)
    for _ in range(25):
        pan = make_panel([rng.standard_normal(2)], [rng.uniform(0.0, 0.2, 2)])
        y = np.array([rng.standard_normal()])
        flat = flat_update(flat, s, pan, y, prior)
        hier = hier_update(hier, s, pan, y, prior)
        np.testing.assert_allclose(hier.mean_h, flat.mean, atol=1e-10)
        np.testing.assert_allclose(
            hier.cov_h, flat.root.T @ flat.root, atol=1e-10
        )


def test_hier_recovers_common_mean():
    # The pooled model redraws per-series deviations every step, so the
    # simulation matches that: fresh scatter around the common mean each t.
    rng = np.random.default_rng(70)
    n_b, k, t_len = 6, 2, 300
    mu = np.array([0.7, 0.2])
    v_h = np.full(k, (1.0 / (8.0 * k)) ** 2)
    s = identity_summing(n_b)
    prior = diag_prior(np.full(n_b, 0.25))
    panel0 = make_panel([np.zeros(k)] * n_b)
    state = init_hier_state(panel0, weight_discount=1.0, deviation_divisor=8.0)
    for _ in range(t_len):
        theta_t = mu + rng.standard_normal((n_b, k)) * np.sqrt(v_h)
        g = rng.standard_normal((n_b, k))
        y = np.einsum("ik,ik->i", g, theta_t) + 0.5 * rng.standard_normal(n_b)
        state = hier_update(state, s, make_panel(list(g)), y, prior)
    sd = np.sqrt(np.diag(state.cov_h))
    assert np.all(np.abs(state.mean_h - mu) <= 2.0 * sd)


def test_hier_forecast_matches_display():
    rng = np.random.default_rng(71)
    prior = random_moments(rng, 4, 1)
    panel = make_panel(
        [rng.standard_normal(2) for _ in range(4)],
        [rng.uniform(0.05, 0.2, 2) for _ in range(4)],
    )
    s4 = identity_summing(4)
    state = init_hier_state(panel, weight_discount=0.95, deviation_divisor=4.0)
    for _ in range(10):
        pan = make_panel(
            [rng.standard_normal(2) for _ in range(4)],
            [rng.uniform(0.05, 0.2, 2) for _ in range(4)],
        )
        state = hier_update(state, s4, pan, rng.standard_normal(4), prior)
    rec = hier_forecast(state, panel, prior, steps=1)
    g = np.stack(panel.means)
    h_var = np.stack(panel.variance_diags)
    infl = 1.0 / 0.95
    r_h = state.cov_h * infl
    expected_mean = np.einsum("ik,ik->i", g, state.mean_b)
    np.testing.assert_allclose(rec.mean, expected_mean, atol=1e-12)
    # Dense assembly: shared covariance off-diagonal, per-series diagonal.
    q = prior.dense_cov() + g @ r_h @ g.T
    for i in range(4):
        r_b = state.cov_b[i] * infl
        q[i, i] += float(g[i] @ r_b @ g[i]) - float(g[i] @ r_h @ g[i])
        q[i, i] += float(h_var[i] @ np.diag(r_b))
    np.testing.assert_allclose(rec.moments.dense_cov(), q, atol=1e-9)


def test_hier_requires_equal_counts():
    with pytest.raises(DataError, match="equal regressor"):
        init_hier_state(make_panel([[1.0, 2.0], [1.0]]))
