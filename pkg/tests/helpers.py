"""Shared fixtures, generators, and dense oracles for the test suite."""

from __future__ import annotations

import numpy as np

from dhf.dlm import DlmSpec, Level, Regression, Seasonal, Trend
from dhf.hierarchy import Hierarchy, build_hierarchy

FIG1_EDGES = [
    ("T", "A"),
    ("T", "B"),
    ("T", "C"),
    ("A", "A1"),
    ("A", "A2"),
    ("A", "A3"),
    ("A", "A4"),
    ("B", "B1"),
    ("B", "B2"),
    ("B", "B3"),
    ("C", "C1"),
    ("C", "C2"),
    ("C", "C3"),
]


def fig1() -> Hierarchy:
    return build_hierarchy(FIG1_EDGES)


def random_hierarchy(rng: np.random.Generator, depth: int | None = None,
                     max_base: int = 200) -> Hierarchy:
    """Random nested tree hierarchy with 2 to 4 levels including the base."""
    depth = int(rng.integers(2, 5)) if depth is None else depth
    edges: list[tuple[str, str]] = []
    frontier = ["T"]
    counter = 0
    for lvl in range(1, depth):
        last = lvl == depth - 1
        nxt: list[str] = []
        for parent in frontier:
            k = int(rng.integers(2, 5))
            for _ in range(k):
                counter += 1
                child = f"b{counter}" if last else f"n{counter}"
                edges.append((parent, child))
                nxt.append(child)
        frontier = nxt
        if len(frontier) > max_base and not last:
            # Close out early so the base count stays bounded.
            for sid in frontier:
                counter += 1
                edges.append((sid, f"b{counter}"))
            return build_hierarchy(edges)
    return build_hierarchy(edges)


def coherent_panel(rng: np.random.Generator, h: Hierarchy, t: int) -> np.ndarray:
    base = rng.standard_normal((t, h.n_b))
    return h.s.aggregate(base)


# Dense covariance-form Kalman recursions, used as the oracle for the SVD
# square-root filter.  Same component-discount innovation construction.

def dense_predict(m, c, g, blocks, discounts):
    a = g @ m
    p = g @ c @ g.T
    r = p.copy()
    for b, d in zip(blocks, discounts):
        if d < 1.0:
            r[b, b] += (1.0 - d) / d * p[b, b]
    return a, r


def dense_update(a, r, f, y, v):
    q = float(f @ r @ f + v)
    e = float(y - f @ a)
    rf = r @ f
    m = a + rf * e / q
    c = r - np.outer(rf, rf) / q
    return m, c, e, q


def random_dlm_spec(rng: np.random.Generator, with_regression: bool = True) -> DlmSpec:
    """Random component mix with state dimension at most 8."""
    choices = [
        (Level(),),
        (Trend(),),
        (Level(), Seasonal(4)),
        (Level(), Seasonal(5, 2)),
        (Trend(), Seasonal(6, 2)),
    ]
    if with_regression:
        choices += [
            (Level(), Regression(2)),
            (Trend(), Regression(3)),
            (Level(), Seasonal(4), Regression(2)),
        ]
    comps = choices[int(rng.integers(len(choices)))]
    discounts = tuple(float(rng.choice([0.9, 0.95, 0.98, 1.0])) for _ in comps)
    return DlmSpec(comps, discounts, obs_variance=None)


def random_svd_start(rng: np.random.Generator, q: int):
    """Random positive-definite starting state in both representations."""
    from dhf.dlm import SvdState

    m = rng.standard_normal(q)
    a = rng.standard_normal((q, q))
    c = a @ a.T + 0.5 * np.eye(q)
    return SvdState.from_moments(m, c), m, c


def random_moments(rng, n_b, n_x, singular=False):
    """Random factor-form moments with a well-conditioned specific part."""
    from dhf.factor_cov import GaussianFactorMoments

    a = rng.standard_normal((n_x, n_x))
    sig = a @ a.T
    if singular and n_x > 1:
        w, v = np.linalg.eigh(sig)
        w[0] = 0.0
        sig = (v * w) @ v.T
    return GaussianFactorMoments(
        mean=rng.standard_normal(n_b),
        loadings=rng.standard_normal((n_b, n_x)),
        factor_cov=sig,
        specific=rng.uniform(0.1, 2.0, n_b),
    )
