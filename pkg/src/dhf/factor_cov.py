"""Low-rank-plus-diagonal covariance algebra.

Bottom-level forecast covariances are carried as ``Q = L S L' + diag(d)``
with tall loadings ``L`` (n_b x n_x), a small factor covariance ``S`` and a
specific-variance vector ``d``.  Everything downstream (solves, determinants,
quadratic forms, aggregation through a summing matrix) works off this
representation, so costs scale with n_b rather than n_b^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from dhf.errors import NumericalError
from dhf.hierarchy import SummingMatrix

# Relative floor applied to specific variances before any inversion, and the
# eigenvalue clip applied when factorizing small symmetric systems.
SPECIFIC_FLOOR = 1e-10
EIG_CLIP = 1e-12


@dataclass
class GaussianFactorMoments:
    """Mean and factor-form covariance of a base-series vector.

    Covariance is ``loadings @ factor_cov @ loadings.T + diag(specific)``;
    storage is n_b(n_x+2) + n_x^2 scalars no matter how large n_b gets.
    """

    mean: np.ndarray
    loadings: np.ndarray
    factor_cov: np.ndarray
    specific: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.loadings = np.asarray(self.loadings, dtype=float)
        self.factor_cov = np.asarray(self.factor_cov, dtype=float)
        self.specific = np.asarray(self.specific, dtype=float)
        n_b = self.mean.shape[0]
        if self.loadings.shape != (n_b, self.n_x):
            raise ValueError(
                f"loadings shape {self.loadings.shape} incompatible with "
                f"mean length {n_b}"
            )
        if self.factor_cov.shape != (self.n_x, self.n_x):
            raise ValueError("factor_cov must be square n_x x n_x")
        if self.specific.shape != (n_b,):
            raise ValueError("specific must be a length n_b vector")
        if self.n_x and not np.allclose(self.factor_cov, self.factor_cov.T, atol=1e-8):
            raise ValueError("factor_cov must be symmetric")
        if self.specific.size and self.specific.min() < 0:
            raise ValueError("specific variances must be nonnegative")

    @property
    def n_b(self) -> int:
        return self.mean.shape[0]

    @property
    def n_x(self) -> int:
        return self.loadings.shape[1] if self.loadings.ndim == 2 else 0

    def storage_scalars(self) -> int:
        return self.mean.size + self.loadings.size + self.factor_cov.size + self.specific.size

    def dense_cov(self) -> np.ndarray:
        """Materialize the full covariance; test and small-problem use only."""
        return self.loadings @ self.factor_cov @ self.loadings.T + np.diag(self.specific)


def _clipped_eigh(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric PSD matrix with small/negative
    eigenvalues clipped to a relative floor."""
    w, v = np.linalg.eigh(a)
    top = float(w[-1]) if w.size else 0.0
    if top <= 0.0:
        return np.zeros_like(w), v
    return np.clip(w, EIG_CLIP * top, None), v


def _sqrt_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(a)
    return v * np.sqrt(np.clip(w, 0.0, None)) @ v.T


def _floored_specific(fc: GaussianFactorMoments) -> np.ndarray:
    d = fc.specific
    if d.size == 0:
        return d
    floor = SPECIFIC_FLOOR * float(np.median(d))
    if floor <= 0.0:
        floor = SPECIFIC_FLOOR * float(d.max(initial=0.0))
    if floor <= 0.0:
        raise NumericalError(
            "all specific variances are zero; add diagonal jitter before solving"
        )
    return np.maximum(d, floor)


def cov_vec(fc: GaussianFactorMoments, c: np.ndarray) -> np.ndarray:
    """Covariance times a vector, Q c, in O(n_b n_x)."""
    c = np.asarray(c, dtype=float)
    if c.shape != (fc.n_b,):
        raise ValueError(f"expected length {fc.n_b} vector, got shape {c.shape}")
    return fc.loadings @ (fc.factor_cov @ (fc.loadings.T @ c)) + fc.specific * c


def quad_form(fc: GaussianFactorMoments, c: np.ndarray) -> float:
    """Quadratic form c' Q c."""
    c = np.asarray(c, dtype=float)
    if c.shape != (fc.n_b,):
        raise ValueError(f"expected length {fc.n_b} vector, got shape {c.shape}")
    lc = fc.loadings.T @ c
    return float(lc @ fc.factor_cov @ lc + np.sum(fc.specific * c * c))


def variances(fc: GaussianFactorMoments) -> np.ndarray:
    """Diagonal of Q."""
    ls = fc.loadings @ fc.factor_cov
    return np.einsum("ij,ij->i", ls, fc.loadings) + fc.specific


def woodbury_solve(fc: GaussianFactorMoments, rhs: np.ndarray) -> np.ndarray:
    """Solve Q x = rhs against the factor-form covariance.

    Uses the identity (D + L L')^-1 = D^-1 - D^-1 L (I + L' D^-1 L)^-1 L' D^-1
    with L = loadings @ sqrt(factor_cov), which never inverts the factor
    covariance itself and keeps the inner system at eigenvalues >= 1.
    """
    rhs = np.asarray(rhs, dtype=float)
    vec_in = rhs.ndim == 1
    r = rhs[:, None] if vec_in else rhs
    if r.shape[0] != fc.n_b:
        raise ValueError(f"rhs has leading dimension {r.shape[0]}, expected {fc.n_b}")
    d = _floored_specific(fc)
    di_r = r / d[:, None]
    if fc.n_x == 0:
        return di_r[:, 0] if vec_in else di_r
    ell = fc.loadings @ _sqrt_psd(fc.factor_cov)
    di_l = ell / d[:, None]
    inner = np.eye(fc.n_x) + ell.T @ di_l
    w, v = _clipped_eigh(inner)
    coef = v @ ((v.T @ (di_l.T @ r)) / w[:, None])
    out = di_r - di_l @ coef
    return out[:, 0] if vec_in else out


def inverse_diag(fc: GaussianFactorMoments) -> np.ndarray:
    """Diagonal of Q^-1 in O(n_b n_x^2), via the same inverse identity as
    woodbury_solve."""
    d = _floored_specific(fc)
    base = 1.0 / d
    if fc.n_x == 0:
        return base
    ell = fc.loadings @ _sqrt_psd(fc.factor_cov)
    di_l = ell / d[:, None]
    inner = np.eye(fc.n_x) + ell.T @ di_l
    w, v = _clipped_eigh(inner)
    half = (di_l @ v) / np.sqrt(w)[None, :]
    return base - np.einsum("ij,ij->i", half, half)


def logdet(fc: GaussianFactorMoments) -> float:
    """log det Q by the matrix determinant lemma:
    sum(log d) + log det(I + L' D^-1 L)."""
    d = _floored_specific(fc)
    total = float(np.sum(np.log(d))) if d.size else 0.0
    if fc.n_x == 0:
        return total
    ell = fc.loadings @ _sqrt_psd(fc.factor_cov)
    inner = np.eye(fc.n_x) + ell.T @ (ell / d[:, None])
    sign, ld = np.linalg.slogdet(inner)
    if sign <= 0:
        raise NumericalError("covariance has nonpositive determinant")
    return total + float(ld)


class ProjectedMoments:
    """Moments of S y where y has factor-form covariance.

    The aggregated specific part S D S' is no longer diagonal, so the full
    matrix is never formed; variances and pairwise covariances come from row
    supports instead.
    """

    def __init__(self, fc: GaussianFactorMoments, s: SummingMatrix):
        if s.n_b != fc.n_b:
            raise ValueError(f"summing matrix over {s.n_b} base series, moments over {fc.n_b}")
        self.base = fc
        self.s = s
        self.mean = s.matrix @ fc.mean
        self.loadings = s.matrix @ fc.loadings
        self.factor_cov = fc.factor_cov

    @property
    def n(self) -> int:
        return self.s.n

    def variances(self) -> np.ndarray:
        ls = self.loadings @ self.factor_cov
        common = np.einsum("ij,ij->i", ls, self.loadings)
        return common + self.s.matrix @ self.base.specific

    def variance(self, i: int) -> float:
        row = self.loadings[i]
        supp = self.s.row_support(i)
        return float(row @ self.factor_cov @ row + self.base.specific[supp].sum())

    def cov(self, i: int, j: int) -> float:
        common = float(self.loadings[i] @ self.factor_cov @ self.loadings[j])
        overlap = np.intersect1d(self.s.row_support(i), self.s.row_support(j), assume_unique=True)
        return common + float(self.base.specific[overlap].sum())

    def dense(self, force: bool = False) -> np.ndarray:
        if self.n > self.s.dense_cap and not force:
            raise ValueError(
                f"dense covariance of size {self.n} exceeds cap {self.s.dense_cap}; "
                "pass force=True to override"
            )
        sd = self.s.matrix @ sparse.diags(self.base.specific) @ self.s.matrix.T
        return self.loadings @ self.factor_cov @ self.loadings.T + sd.toarray()


def project(fc: GaussianFactorMoments, s: SummingMatrix) -> ProjectedMoments:
    """Aggregate factor-form base moments through a summing matrix."""
    return ProjectedMoments(fc, s)
