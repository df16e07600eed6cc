"""Hierarchy structure, summing matrices, and sub-hierarchy partitions.

A hierarchy is a DAG of aggregation constraints over a set of base series.
Aggregate series are 0/1 sums of base series, so the full observation vector
satisfies ``y = S b`` where the top block of ``S`` holds the aggregation rows
and the bottom block is the identity.  Grouped structures (a series with more
than one parent) are supported; rows of ``S`` stay 0/1 because supports are
unions, not path counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse

from dhf.errors import HierarchyError

# Dense conversion guard: a dense S for the full M5 hierarchy would be
# 42,840 x 30,490 floats, an order of magnitude past what the dense linear
# algebra paths are meant to touch.
DENSE_CAP = 2000


class SummingMatrix:
    """Sparse summing matrix mapping base series to the full series vector.

    Rows follow the hierarchy ordering: aggregate series first, then an
    identity block for the base series.

    Parameters
    ----------
    matrix : scipy.sparse matrix, shape (n, n_b)
        Full summing matrix including the identity block.
    dense_cap : int
        Largest ``n_b`` for which ``dense()`` will densify without
        ``force=True``.
    """

    def __init__(self, matrix: sparse.spmatrix, dense_cap: int = DENSE_CAP):
        self.matrix = sparse.csr_matrix(matrix)
        self.dense_cap = int(dense_cap)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_b(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_a(self) -> int:
        return self.n - self.n_b

    def aggregate_block(self) -> sparse.csr_matrix:
        """The aggregation rows only (C in ``y = [C b; b]``)."""
        return self.matrix[: self.n_a]

    def row(self, i: int) -> sparse.csr_matrix:
        """Constraint row c_i as a 1 x n_b sparse matrix."""
        return self.matrix[i]

    def row_support(self, i: int) -> np.ndarray:
        """Base indices with a nonzero coefficient in row i."""
        return self.matrix.indices[self.matrix.indptr[i] : self.matrix.indptr[i + 1]]

    def dense(self, force: bool = False) -> np.ndarray:
        if self.n_b > self.dense_cap and not force:
            raise ValueError(
                f"dense summing matrix with n_b={self.n_b} exceeds cap "
                f"{self.dense_cap}; pass force=True to override"
            )
        return self.matrix.toarray()

    def aggregate(self, base_panel: np.ndarray) -> np.ndarray:
        """Map a base panel (..., n_b) to the full panel (..., n)."""
        base_panel = np.asarray(base_panel, dtype=float)
        return (self.matrix @ base_panel[..., None])[..., 0] if base_panel.ndim == 1 \
            else (self.matrix @ base_panel.T).T


@dataclass
class Hierarchy:
    """Aggregation structure over a collection of series.

    ``series_ids`` lists aggregates first (by topological depth, then first
    appearance in the edge list) followed by base series in input order.
    """

    series_ids: tuple[str, ...]
    n_a: int
    edges: tuple[tuple[str, str], ...]
    levels: dict[str, str]
    parents: dict[str, tuple[str, ...]]
    children: dict[str, tuple[str, ...]]
    depth: dict[str, int]
    s: SummingMatrix
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {sid: i for i, sid in enumerate(self.series_ids)}

    @property
    def n(self) -> int:
        return len(self.series_ids)

    @property
    def n_b(self) -> int:
        return self.n - self.n_a

    @property
    def aggregate_ids(self) -> tuple[str, ...]:
        return self.series_ids[: self.n_a]

    @property
    def base_ids(self) -> tuple[str, ...]:
        return self.series_ids[self.n_a :]

    def level_labels(self) -> list[str]:
        """Distinct level labels ordered from the top of the hierarchy down."""
        seen: dict[str, tuple[int, int]] = {}
        for pos, sid in enumerate(self.series_ids):
            lab = self.levels[sid]
            if lab not in seen:
                seen[lab] = (self.depth[sid], pos)
        return sorted(seen, key=lambda lab: seen[lab])

    def level_ids(self, label: str) -> list[str]:
        return [sid for sid in self.series_ids if self.levels[sid] == label]

    def ancestors(self, base_index: int) -> list[int]:
        """Indices of constraint rows covering one base series.

        Returns every aggregate ancestor ordered top level first, followed by
        the base series' own identity row.  With grouped structures a series
        can have several ancestors at the same depth; ties break on series
        order so the result is deterministic.
        """
        if not 0 <= base_index < self.n_b:
            raise IndexError(f"base index {base_index} out of range")
        sid = self.series_ids[self.n_a + base_index]
        found: set[str] = set()
        stack = list(self.parents.get(sid, ()))
        while stack:
            p = stack.pop()
            if p in found:
                continue
            found.add(p)
            stack.extend(self.parents.get(p, ()))
        order = sorted(found, key=lambda a: (self.depth[a], self.index[a]))
        return [self.index[a] for a in order] + [self.n_a + base_index]


def build_hierarchy(
    edges: Sequence[tuple[str, str]],
    base_marker: Callable[[str], bool] | None = None,
    levels: Mapping[str, str] | None = None,
    base_order: Sequence[str] | None = None,
    dense_cap: int = DENSE_CAP,
) -> Hierarchy:
    """Build a hierarchy from parent -> child edges.

    Parameters
    ----------
    edges : sequence of (parent, child) pairs
        Aggregation constraints.  Every series id must appear in some edge.
    base_marker : callable, optional
        Predicate deciding which ids are base series.  Defaults to "never
        appears as a parent".
    levels : mapping, optional
        Level label for each id.  Missing ids get a default label "L<depth>"
        where depth is the longest path from a root.
    base_order : sequence, optional
        Explicit ordering of the base series (must list exactly the base set).
        Defaults to first appearance as a child.
    """
    edge_list: list[tuple[str, str]] = []
    seen_edges: set[tuple[str, str]] = set()
    for parent, child in edges:
        if parent == child:
            raise HierarchyError(f"self edge on {parent!r}")
        key = (parent, child)
        if key in seen_edges:
            raise HierarchyError(f"duplicate edge {parent!r} -> {child!r}")
        seen_edges.add(key)
        edge_list.append(key)

    appearance: dict[str, int] = {}
    for parent, child in edge_list:
        appearance.setdefault(parent, len(appearance))
        appearance.setdefault(child, len(appearance))
    if base_order is not None:
        for sid in base_order:
            appearance.setdefault(sid, len(appearance))
    if not appearance:
        raise HierarchyError("empty hierarchy")

    parent_set = {p for p, _ in edge_list}
    if base_marker is None:
        is_base = {sid: sid not in parent_set for sid in appearance}
    else:
        is_base = {sid: bool(base_marker(sid)) for sid in appearance}
        clash = [sid for sid in parent_set if is_base[sid]]
        if clash:
            raise HierarchyError(f"base series used as parent: {clash[0]!r}")

    children: dict[str, list[str]] = {sid: [] for sid in appearance}
    parents: dict[str, list[str]] = {sid: [] for sid in appearance}
    for parent, child in edge_list:
        children[parent].append(child)
        parents[child].append(parent)

    aggs = [sid for sid in appearance if not is_base[sid]]
    base_first = [sid for sid in appearance if is_base[sid]]
    for sid in aggs:
        if not children[sid]:
            raise HierarchyError(f"aggregate {sid!r} has no children")
    orphans = [sid for sid in base_first if not parents[sid] and len(appearance) > len(base_first)]
    if orphans:
        raise HierarchyError(f"base series {orphans[0]!r} has no parent")

    # Longest-path depths via Kahn's algorithm; leftover in-degree means a cycle.
    indeg = {sid: len(parents[sid]) for sid in appearance}
    queue = [sid for sid in appearance if indeg[sid] == 0]
    depth = {sid: 0 for sid in queue}
    topo: list[str] = []
    while queue:
        sid = queue.pop(0)
        topo.append(sid)
        for c in children[sid]:
            depth[c] = max(depth.get(c, 0), depth[sid] + 1)
            indeg[c] -= 1
            if indeg[c] == 0:
                queue.append(c)
    if len(topo) < len(appearance):
        stuck = [sid for sid in appearance if indeg[sid] > 0]
        raise HierarchyError(f"cycle detected involving {stuck[0]!r}")

    aggs.sort(key=lambda sid: (depth[sid], appearance[sid]))
    if base_order is not None:
        if set(base_order) != set(base_first) or len(base_order) != len(base_first):
            raise HierarchyError("base_order does not match the base series set")
        base = list(base_order)
    else:
        base = sorted(base_first, key=lambda sid: appearance[sid])

    base_pos = {sid: j for j, sid in enumerate(base)}
    support: dict[str, np.ndarray] = {}
    for sid in sorted(aggs, key=lambda a: -depth[a]):
        parts = []
        for c in children[sid]:
            parts.append(np.array([base_pos[c]], dtype=np.int64) if is_base[c] else support[c])
        support[sid] = np.unique(np.concatenate(parts))

    n_a, n_b = len(aggs), len(base)
    indptr = np.zeros(n_a + n_b + 1, dtype=np.int64)
    chunks = [support[sid] for sid in aggs]
    for i, chunk in enumerate(chunks):
        indptr[i + 1] = indptr[i] + len(chunk)
    base_rows = np.arange(n_b, dtype=np.int64)
    indptr[n_a + 1 :] = indptr[n_a] + base_rows + 1
    indices = np.concatenate(chunks + [base_rows]) if chunks else base_rows
    data = np.ones(len(indices))
    matrix = sparse.csr_matrix((data, indices, indptr), shape=(n_a + n_b, n_b))

    label_of = {sid: f"L{depth[sid]}" for sid in appearance}
    if levels is not None:
        unknown = set(levels) - set(appearance)
        if unknown:
            raise HierarchyError(f"level label for unknown series {sorted(unknown)[0]!r}")
        label_of.update(levels)

    return Hierarchy(
        series_ids=tuple(aggs + base),
        n_a=n_a,
        edges=tuple(edge_list),
        levels=label_of,
        parents={sid: tuple(v) for sid, v in parents.items()},
        children={sid: tuple(v) for sid, v in children.items()},
        depth=depth,
        s=SummingMatrix(matrix, dense_cap=dense_cap),
    )


@dataclass
class CoherenceReport:
    ok: bool
    max_violation: float
    worst_series: str | None


def check_coherence(
    panel: np.ndarray, h: Hierarchy, tol: float = 1e-8
) -> CoherenceReport:
    """Check that aggregate columns of a panel equal the summed base columns.

    Violations are measured relative to ``max(1, |aggregated value|)`` so the
    tolerance behaves sensibly for both tiny and very large aggregates.
    Entries involving NaN (missing observations) are skipped.
    """
    panel = np.atleast_2d(np.asarray(panel, dtype=float))
    if panel.shape[1] != h.n:
        raise ValueError(f"panel has {panel.shape[1]} columns, expected {h.n}")
    if h.n_a == 0:
        return CoherenceReport(True, 0.0, None)
    expected = (h.s.aggregate_block() @ panel[:, h.n_a :].T).T
    diff = np.abs(panel[:, : h.n_a] - expected) / np.maximum(1.0, np.abs(expected))
    diff = np.where(np.isnan(diff), 0.0, diff)
    worst_flat = int(np.argmax(diff))
    worst = float(diff.flat[worst_flat])
    worst_col = worst_flat % h.n_a
    return CoherenceReport(worst <= tol, worst, h.series_ids[worst_col])


@dataclass
class SubHierarchyPartition:
    """Split of a hierarchy at a boundary level.

    ``upper`` has the boundary series as its base; each entry of ``lowers``
    is rooted at one boundary series.  ``forecast_assignment`` maps every
    level label to "upper" or "lower", deciding where exogenous forecasts at
    that level enter the reconciliation.  Levels that neither contain nor sit
    inside the boundary blocks (possible with grouped structures) are listed
    in ``non_nesting_levels``; they are absent from both sub-hierarchy
    structures but their forecasts still get used via disaggregation.
    """

    upper: Hierarchy
    lowers: list[Hierarchy]
    boundary_level: str
    forecast_assignment: dict[str, str]
    boundary_ids: tuple[str, ...]
    non_nesting_levels: tuple[str, ...]
    # original base positions of each lower's base series, in lower order
    base_maps: list[np.ndarray]


def partition(
    h: Hierarchy,
    boundary_level: str,
    forecast_assignment: Mapping[str, str] | None = None,
) -> SubHierarchyPartition:
    """Partition a hierarchy at ``boundary_level``.

    The boundary series must partition the base set: every base series needs
    exactly one ancestor at the boundary level.  Levels above the boundary
    whose series are exact unions of boundary blocks form the upper
    sub-hierarchy; levels sitting inside single blocks join the lowers.
    """
    boundary = [sid for sid in h.series_ids if h.levels[sid] == boundary_level]
    if not boundary:
        raise HierarchyError(f"no series at level {boundary_level!r}")

    n_b = h.n_b
    block_of = np.full(n_b, -1, dtype=np.int64)
    count = np.zeros(n_b, dtype=np.int64)
    block_size: list[int] = []
    for k, sid in enumerate(boundary):
        supp = h.s.row_support(h.index[sid])
        count[supp] += 1
        block_of[supp] = k
        block_size.append(len(supp))
    if count.min() < 1 or count.max() > 1:
        bad = int(np.argmin(count) if count.min() < 1 else np.argmax(count))
        raise HierarchyError(
            f"boundary level {boundary_level!r} does not give base series "
            f"{h.base_ids[bad]!r} exactly one ancestor"
        )
    sizes = np.asarray(block_size)

    def touched_blocks(i: int) -> tuple[np.ndarray, np.ndarray]:
        supp = h.s.row_support(i)
        return np.unique(block_of[supp]), supp

    upper_levels: list[str] = []
    below_levels: list[str] = []
    non_nesting: list[str] = []
    blockset: dict[str, np.ndarray] = {}
    for label in h.level_labels():
        if label == boundary_level:
            continue
        members = h.level_ids(label)
        all_union, all_within = True, True
        for sid in members:
            blocks, supp = touched_blocks(h.index[sid])
            blockset[sid] = blocks
            if len(blocks) > 1:
                all_within = False
            if len(supp) != int(sizes[blocks].sum()):
                all_union = False
        if all_union:
            upper_levels.append(label)
        elif all_within:
            below_levels.append(label)
        else:
            non_nesting.append(label)

    assignment = {label: "lower" for label in h.level_labels()}
    for label in upper_levels:
        assignment[label] = "upper"
    if forecast_assignment is not None:
        for label, side in forecast_assignment.items():
            if label not in assignment:
                raise HierarchyError(f"unknown level {label!r} in forecast_assignment")
            if side not in ("upper", "lower"):
                raise HierarchyError(f"forecast_assignment side {side!r} invalid")
            assignment[label] = side

    # Upper structure: containment order of block sets, transitively reduced.
    upper_aggs = [sid for lab in upper_levels for sid in h.level_ids(lab)]
    upper_aggs.sort(key=lambda sid: h.index[sid])
    upper_edges: list[tuple[str, str]] = []
    nodes = upper_aggs + boundary
    sets = {sid: frozenset(blockset[sid]) for sid in upper_aggs}
    boundary_set = set(boundary)
    for k, sid in enumerate(boundary):
        sets[sid] = frozenset((k,))
    for sid in nodes:
        cands = [
            u
            for u in upper_aggs
            if u != sid
            and sets[sid] <= sets[u]
            and (sets[sid] != sets[u] or sid in boundary_set)
        ]
        minimal = [
            u
            for u in cands
            if not any(w is not u and sets[w] < sets[u] and sets[sid] <= sets[w] for w in cands)
        ]
        upper_edges.extend((u, sid) for u in minimal)
    upper_edges.sort(key=lambda e: (h.index[e[1]], h.index[e[0]]))
    upper = build_hierarchy(
        upper_edges,
        base_marker=lambda sid: sid in boundary_set,
        levels={sid: h.levels[sid] for sid in nodes},
        base_order=boundary,
    ) if upper_edges else _trivial_hierarchy(boundary, {sid: h.levels[sid] for sid in boundary})

    # Lower structures: one per boundary series, original edges restricted to
    # members, with synthesized root edges for members orphaned by the cut.
    below_aggs = [
        sid
        for lab in below_levels
        for sid in h.level_ids(lab)
        if h.index[sid] < h.n_a
    ]
    base_id_set = set(h.base_ids)
    lowers: list[Hierarchy] = []
    base_maps: list[np.ndarray] = []
    for k, root in enumerate(boundary):
        base_idx = np.flatnonzero(block_of == k)
        base_here = [h.base_ids[j] for j in base_idx]
        members = set(base_here)
        members.update(sid for sid in below_aggs if blockset[sid][0] == k)
        edges_k = [
            (p, c) for (p, c) in h.edges if (p in members or p == root) and c in members
        ]
        with_parent = {c for _, c in edges_k}
        for sid in h.series_ids:
            if sid in members and sid not in with_parent and sid != root:
                edges_k.append((root, sid))
        lowers.append(
            build_hierarchy(
                edges_k,
                base_marker=lambda sid: sid in base_id_set,
                levels={sid: h.levels[sid] for sid in members | {root}},
                base_order=base_here,
            )
            if edges_k
            else _trivial_hierarchy([root], {root: h.levels[root]})
        )
        base_maps.append(base_idx)

    return SubHierarchyPartition(
        upper=upper,
        lowers=lowers,
        boundary_level=boundary_level,
        forecast_assignment=assignment,
        boundary_ids=tuple(boundary),
        non_nesting_levels=tuple(non_nesting),
        base_maps=base_maps,
    )


def _trivial_hierarchy(ids: Sequence[str], levels: Mapping[str, str]) -> Hierarchy:
    """Hierarchy with no aggregates (used when the boundary is the top level)."""
    n = len(ids)
    return Hierarchy(
        series_ids=tuple(ids),
        n_a=0,
        edges=(),
        levels=dict(levels),
        parents={sid: () for sid in ids},
        children={sid: () for sid in ids},
        depth={sid: 0 for sid in ids},
        s=SummingMatrix(sparse.identity(n, format="csr")),
    )
