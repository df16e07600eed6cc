"""Discount dynamic linear models with SVD square-root filtering.

States carry their covariance as ``C = U diag(S^2) U'`` and every filter step
works on the square root, so covariances stay symmetric PSD by construction
even over tens of thousands of steps.  All core operations broadcast over
leading batch dimensions: a stack of series sharing one structure filters as
one vectorized call.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

# Forecast variances are floored here before any division.
Q_FLOOR = 1e-12
# Relative floor for prior singular values before inversion in the update.
S_FLOOR = 1e-15


@dataclass(frozen=True)
class Level:
    dim: int = field(default=1, init=False)


@dataclass(frozen=True)
class Trend:
    """Level plus slope."""

    dim: int = field(default=2, init=False)


@dataclass(frozen=True)
class Seasonal:
    """Trigonometric seasonality; pairs of rotating states per harmonic, one
    state for the Nyquist harmonic when the period is even."""

    period: int
    harmonics: int | None = None

    def __post_init__(self):
        if self.period < 2:
            raise ValueError("seasonal period must be >= 2")
        m = self.period // 2 if self.harmonics is None else self.harmonics
        if not 1 <= m <= self.period // 2:
            raise ValueError(f"harmonics must be in [1, {self.period // 2}]")
        object.__setattr__(self, "harmonics", m)

    @property
    def dim(self) -> int:
        nyquist = self.period % 2 == 0 and self.harmonics == self.period // 2
        return 2 * self.harmonics - (1 if nyquist else 0)


@dataclass(frozen=True)
class Regression:
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("regression block needs k >= 1")

    @property
    def dim(self) -> int:
        return self.k


Component = Level | Trend | Seasonal | Regression


@dataclass(frozen=True)
class DlmSpec:
    """Model structure: ordered component blocks, one discount per block, a
    variance discount, and either a fixed or learned observation variance."""

    components: tuple[Component, ...]
    block_discounts: tuple[float, ...]
    variance_discount: float = 1.0
    obs_variance: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "block_discounts", tuple(float(d) for d in self.block_discounts))
        if len(self.block_discounts) != len(self.components):
            raise ValueError("need exactly one discount per component block")
        for d in self.block_discounts + (self.variance_discount,):
            if not 0.0 < d <= 1.0:
                raise ValueError(f"discount {d} outside (0, 1]")

    @property
    def state_dim(self) -> int:
        return sum(c.dim for c in self.components)

    def blocks(self) -> list[slice]:
        out, start = [], 0
        for c in self.components:
            out.append(slice(start, start + c.dim))
            start += c.dim
        return out

    def regression_slice(self) -> slice | None:
        for c, b in zip(self.components, self.blocks()):
            if isinstance(c, Regression):
                return b
        return None

    def transition(self) -> np.ndarray:
        g = np.zeros((self.state_dim, self.state_dim))
        for c, b in zip(self.components, self.blocks()):
            if isinstance(c, Level):
                g[b, b] = 1.0
            elif isinstance(c, Trend):
                g[b.start : b.stop, b.start : b.stop] = [[1.0, 1.0], [0.0, 1.0]]
            elif isinstance(c, Seasonal):
                pos = b.start
                for j in range(1, c.harmonics + 1):
                    if 2 * j == c.period:
                        g[pos, pos] = -1.0
                        pos += 1
                    else:
                        w = 2.0 * np.pi * j / c.period
                        rot = [[np.cos(w), np.sin(w)], [-np.sin(w), np.cos(w)]]
                        g[pos : pos + 2, pos : pos + 2] = rot
                        pos += 2
            else:
                g[b, b] = np.eye(c.k)
        return g

    def design(self, regressors: np.ndarray | None = None) -> np.ndarray:
        """Observation vector F; broadcasts over leading dims of regressors."""
        parts: list[np.ndarray] = []
        reg = None
        for c in self.components:
            if isinstance(c, Level):
                parts.append(np.ones(1))
            elif isinstance(c, Trend):
                parts.append(np.array([1.0, 0.0]))
            elif isinstance(c, Seasonal):
                row = []
                for j in range(1, c.harmonics + 1):
                    row.extend([1.0] if 2 * j == c.period else [1.0, 0.0])
                parts.append(np.array(row))
            else:
                if regressors is None:
                    raise ValueError("spec has a regression block but no regressors given")
                reg = np.asarray(regressors, dtype=float)
                if reg.shape[-1] != c.k:
                    raise ValueError(f"expected {c.k} regressors, got {reg.shape[-1]}")
                parts.append(reg)
        if reg is None and regressors is not None:
            raise ValueError("regressors given but spec has no regression block")
        if reg is None or reg.ndim == 1:
            return np.concatenate(parts)
        lead = reg.shape[:-1]
        return np.concatenate(
            [np.broadcast_to(p, lead + p.shape[-1:]) if p is not reg else p for p in parts],
            axis=-1,
        )


def build_design(
    spec: DlmSpec, regressors: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Design vector and transition matrix for one observation time."""
    return spec.design(regressors), spec.transition()


@dataclass
class SvdState:
    """State mean with square-root covariance C = u diag(s^2) u'."""

    m: np.ndarray
    u: np.ndarray
    s: np.ndarray

    def cov(self) -> np.ndarray:
        return np.einsum("...ik,...k,...jk->...ij", self.u, self.s**2, self.u)

    @staticmethod
    def from_moments(m: np.ndarray, c: np.ndarray) -> "SvdState":
        w, v = np.linalg.eigh(c)
        return SvdState(np.asarray(m, dtype=float), v, np.sqrt(np.clip(w, 0.0, None)))


@dataclass
class VarianceState:
    """Discounted observation-variance learning: point estimate s = d/n."""

    n: np.ndarray | float
    d: np.ndarray | float
    delta: float = 1.0

    @property
    def s(self) -> np.ndarray | float:
        return self.d / self.n


def variance_update(vs: VarianceState, e: np.ndarray, q_star: np.ndarray) -> VarianceState:
    """One step of variance discounting; q_star must already use s as plug-in."""
    scaled = vs.s * (np.asarray(e) ** 2) / np.maximum(np.asarray(q_star), Q_FLOOR)
    return VarianceState(vs.delta * vs.n + 1.0, vs.delta * vs.d + scaled, vs.delta)


def _sqrt_rows(state_u: np.ndarray, state_s: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Rows N with N'N = G C G'."""
    gu = np.einsum("ij,...jk->...ik", g, state_u)
    return state_s[..., :, None] * np.swapaxes(gu, -1, -2)


def svd_predict(
    state: SvdState,
    g: np.ndarray,
    blocks: Sequence[slice],
    discounts: Sequence[float],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Time update: a = G m and square root of R = G C G' + W.

    W is the component-discount innovation: per block, (1-d)/d times the
    corresponding diagonal block of G C G'.  Rather than factorizing each
    block, rows of the G C G' square root restricted to the block's columns
    are rescaled by sqrt((1-d)/d); stacking those under the base rows gives an
    exact square root of R, and one thin SVD re-orthogonalizes.
    """
    a = np.einsum("ij,...j->...i", g, state.m)
    n_p = _sqrt_rows(state.u, state.s, g)
    stacks = [n_p]
    for b, d in zip(blocks, discounts):
        if d >= 1.0:
            continue
        gamma = np.sqrt((1.0 - d) / d)
        rows = np.zeros_like(n_p)
        rows[..., :, b] = n_p[..., :, b]
        stacks.append(gamma * rows)
    full = np.concatenate(stacks, axis=-2)
    _, s_r, vh = np.linalg.svd(full, full_matrices=False)
    u_r = np.swapaxes(vh, -1, -2)
    return a, u_r, s_r


def svd_update(
    a: np.ndarray,
    u_r: np.ndarray,
    s_r: np.ndarray,
    f: np.ndarray,
    y: np.ndarray,
    v: np.ndarray,
) -> tuple[SvdState, np.ndarray, np.ndarray]:
    """Scalar-observation measurement update in square-root form.

    Returns the posterior state plus the one-step error e and forecast
    variance q.  Broadcasts over leading dimensions of every argument.
    """
    a = np.asarray(a, dtype=float)
    f = np.asarray(f, dtype=float)
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    urf = np.einsum("...ij,...i->...j", u_r, f)
    q = np.maximum(np.einsum("...j,...j->...", s_r**2, urf**2) + v, Q_FLOOR)
    fa = np.einsum("...i,...i->...", f, a)
    e = y - fa
    gain = np.einsum("...ij,...j->...i", u_r, s_r**2 * urf) / q[..., None]
    m = a + gain * e[..., None]

    s_safe = np.maximum(s_r, S_FLOOR * np.max(s_r, axis=-1, keepdims=True))
    top = (urf / np.sqrt(v)[..., None])[..., None, :]
    q_dim = u_r.shape[-1]
    diag = np.zeros(u_r.shape[:-2] + (q_dim, q_dim))
    idx = np.arange(q_dim)
    diag[..., idx, idx] = 1.0 / s_safe
    stack = np.concatenate([np.broadcast_to(top, diag.shape[:-2] + (1, q_dim)), diag], axis=-2)
    _, sv, vh = np.linalg.svd(stack, full_matrices=False)
    u_c = np.einsum("...ij,...kj->...ik", u_r, vh)
    s_c = 1.0 / sv
    return SvdState(m, u_c, s_c), e, q


def svd_update_mv(
    a: np.ndarray,
    u_r: np.ndarray,
    s_r: np.ndarray,
    f_mat: np.ndarray,
    y: np.ndarray,
    v_mat: np.ndarray,
) -> tuple[SvdState, np.ndarray, np.ndarray]:
    """Vector-observation update: F is q x p, observation covariance p x p.

    Returns (posterior, e, Q) with Q the p x p one-step forecast covariance.
    Not batched; used for the low-dimensional factor block.
    """
    urf = u_r.T @ f_mat  # q x p
    q_mat = (s_r[:, None] * urf).T @ (s_r[:, None] * urf) + v_mat
    e = y - f_mat.T @ a
    rf = u_r @ (s_r[:, None] ** 2 * urf)
    sol = np.linalg.solve(q_mat, e)
    m = a + rf @ sol

    w, vecs = np.linalg.eigh(v_mat)
    w = np.clip(w, Q_FLOOR, None)
    v_isqrt_rows = (vecs / np.sqrt(w)).T  # rows: V^{-1/2}
    s_safe = np.maximum(s_r, S_FLOOR * s_r.max())
    stack = np.concatenate([v_isqrt_rows @ urf.T, np.diag(1.0 / s_safe)], axis=0)
    _, sv, vh = np.linalg.svd(stack, full_matrices=False)
    return SvdState(m, u_r @ vh.T, 1.0 / sv), e, q_mat


def forecast_state_moments(
    state: SvdState, spec: DlmSpec, h: int
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Per-horizon prior state moments (a, U_R, S_R), j = 1..h.

    Discount innovation is applied at every step of the recursion, so forecast
    uncertainty keeps growing for discounts below one.
    """
    g = spec.transition()
    blocks, discounts = spec.blocks(), spec.block_discounts
    out = []
    cur = state
    for _ in range(h):
        a, u_r, s_r = svd_predict(cur, g, blocks, discounts)
        out.append((a, u_r, s_r))
        cur = SvdState(a, u_r, s_r)
    return out


def state_diag(u: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Diagonal of U diag(S^2) U'."""
    return np.einsum("...ij,...j->...i", u**2, s**2)


def forecast_h(
    state: SvdState,
    spec: DlmSpec,
    h: int,
    regressor_moments: tuple[np.ndarray, np.ndarray] | None = None,
    obs_variance: np.ndarray | float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Forecast means and variances for horizons 1..h, stacked on the last axis.

    ``regressor_moments`` supplies (means, variances) of uncertain future
    regressors with shape (..., h, k); their uncertainty enters the forecast
    variance as a'Ha + tr(RH) with H diagonal, on top of the usual F'RF + v.
    """
    reg = spec.regression_slice()
    if reg is not None and regressor_moments is None:
        raise ValueError("regression block requires future regressor moments")
    v = spec.obs_variance if spec.obs_variance is not None else obs_variance
    if v is None:
        raise ValueError("observation variance required (fixed in spec or passed in)")
    v = np.asarray(v, dtype=float)

    fs, qs = [], []
    for j, (a, u_r, s_r) in enumerate(forecast_state_moments(state, spec, h)):
        if reg is None:
            f_vec = spec.design()
        else:
            means = np.asarray(regressor_moments[0], dtype=float)[..., j, :]
            f_vec = spec.design(means)
        urf = np.einsum("...ij,...i->...j", u_r, f_vec)
        q = np.einsum("...j,...j->...", s_r**2, urf**2) + v
        if reg is not None:
            hvar = np.asarray(regressor_moments[1], dtype=float)[..., j, :]
            a_reg = a[..., reg]
            q = q + np.einsum("...k,...k->...", a_reg**2, hvar)
            q = q + np.einsum("...k,...k->...", state_diag(u_r, s_r)[..., reg], hvar)
        fs.append(np.einsum("...i,...i->...", f_vec, a))
        qs.append(np.maximum(q, Q_FLOOR))
    return np.stack(fs, axis=-1), np.stack(qs, axis=-1)
