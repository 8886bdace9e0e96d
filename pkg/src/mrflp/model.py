"""Domain types and elementary operations for pairwise MRF energy minimization.

A model is an undirected graph with a finite label space per node, a unary
energy table per node and a pairwise energy table per edge.  Relaxed primal
points ("marginals") carry one simplex block per node and one joint block per
edge; the local polytope is the set of such blocks satisfying normalization
and the two marginalization families.

Conventions kept throughout the package:

* nodes are the integers ``0 .. n-1`` (grids are row-major),
* edges are pairs ``(u, v)`` with ``u < v``, sorted lexicographically,
* pairwise tables are indexed ``theta[x_u, x_v]``,
* potentials are finite energies (lower is better); "infinite" potentials
  are represented by large finite values chosen by the caller, so all
  arithmetic stays exact.
"""

from __future__ import annotations

import dataclasses
from typing import Iterable, Sequence

import numpy as np

from .errors import InfeasibleMarginalsError, InvalidLabelingError, StructureError


def _frozen_array(a, dtype=np.float64, ndim=None) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    if ndim is not None and out.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {out.shape}")
    out.flags.writeable = False
    return out


@dataclasses.dataclass(frozen=True)
class MrfModel:
    """Pairwise graphical model with energy tables.

    Instances are immutable; build them through :meth:`create`, which
    canonicalizes edge orientation and ordering.
    """

    label_counts: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    unary: tuple[np.ndarray, ...]
    pairwise: tuple[np.ndarray, ...]
    grid_shape: tuple[int, int] | None = None

    def __post_init__(self):
        n = len(self.label_counts)
        if n == 0:
            raise StructureError("a model needs at least one node")
        if any(int(c) < 1 for c in self.label_counts):
            raise StructureError("every node needs at least one label")
        if len(self.unary) != n:
            raise StructureError("one unary table per node required")
        for v, t in enumerate(self.unary):
            if t.shape != (self.label_counts[v],):
                raise StructureError(f"unary table of node {v} has shape {t.shape}")
            if not np.all(np.isfinite(t)):
                raise StructureError(f"unary table of node {v} has non-finite entries")
        if len(self.pairwise) != len(self.edges):
            raise StructureError("one pairwise table per edge required")
        prev = None
        for e, (u, v) in enumerate(self.edges):
            if not (0 <= u < v < n):
                raise StructureError(f"edge ({u}, {v}) is not canonical (need 0 <= u < v < n)")
            if prev is not None and (u, v) <= prev:
                raise StructureError("edges must be strictly increasing (no duplicates)")
            prev = (u, v)
            t = self.pairwise[e]
            want = (self.label_counts[u], self.label_counts[v])
            if t.shape != want:
                raise StructureError(f"pairwise table of edge {(u, v)} has shape {t.shape}, expected {want}")
            if not np.all(np.isfinite(t)):
                raise StructureError(f"pairwise table of edge {(u, v)} has non-finite entries")
        if self.grid_shape is not None:
            r, c = self.grid_shape
            if r < 1 or c < 1 or r * c != n:
                raise StructureError(f"grid shape {self.grid_shape} does not match {n} nodes")
        nbrs: list[list[tuple[int, int]]] = [[] for _ in range(n)]
        for e, (u, v) in enumerate(self.edges):
            nbrs[u].append((v, e))
            nbrs[v].append((u, e))
        object.__setattr__(self, "_neighbors", tuple(tuple(x) for x in nbrs))
        object.__setattr__(self, "_edge_index", {uv: e for e, uv in enumerate(self.edges)})
        object.__setattr__(self, "_packing", None)

    @classmethod
    def create(
        cls,
        label_counts: Sequence[int],
        edges: Iterable[tuple[int, int]],
        unary: Sequence,
        pairwise: Sequence,
        grid_shape: tuple[int, int] | None = None,
    ) -> "MrfModel":
        """Build a model, sorting edges canonically and copying all tables.

        Edges may be given in either orientation; tables follow their edge
        (a table for ``(v, u)`` with ``v > u`` is transposed).
        """
        pair = list(zip(edges, pairwise))
        canon = []
        for (u, v), t in pair:
            t = np.asarray(t, dtype=np.float64)
            if u == v:
                raise StructureError(f"self-loop on node {u}")
            if u > v:
                u, v, t = v, u, t.T
            canon.append(((u, v), t))
        canon.sort(key=lambda item: item[0])
        return cls(
            label_counts=tuple(int(c) for c in label_counts),
            edges=tuple(uv for uv, _ in canon),
            unary=tuple(_frozen_array(t, ndim=1) for t in unary),
            pairwise=tuple(_frozen_array(t, ndim=2) for _, t in canon),
            grid_shape=None if grid_shape is None else (int(grid_shape[0]), int(grid_shape[1])),
        )

    @property
    def n_nodes(self) -> int:
        return len(self.label_counts)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def neighbors(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        """Per node: tuple of ``(neighbor, edge_index)`` pairs."""
        return self._neighbors  # type: ignore[attr-defined]

    def edge_id(self, u: int, v: int) -> int:
        if u > v:
            u, v = v, u
        return self._edge_index[(u, v)]  # type: ignore[attr-defined]

    def packing(self):
        """Cached flat-vector layout used by vectorized kernels."""
        from ._packing import Packing

        p = self._packing  # type: ignore[attr-defined]
        if p is None:
            p = Packing.build(self)
            object.__setattr__(self, "_packing", p)
        return p


@dataclasses.dataclass(frozen=True)
class Marginals:
    """Relaxed primal point: one vector per node, optionally one matrix per edge.

    Purely dual reconstructions only produce node blocks; the edge blocks are
    then ``None`` and :attr:`has_edge_blocks` is ``False``.  Treated as
    immutable after construction (blocks are coerced, not defensively
    copied; do not write into them).
    """

    node_blocks: tuple[np.ndarray, ...]
    edge_blocks: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        object.__setattr__(
            self, "node_blocks", tuple(np.asarray(b, dtype=np.float64) for b in self.node_blocks)
        )
        if self.edge_blocks is not None:
            object.__setattr__(
                self, "edge_blocks", tuple(np.asarray(b, dtype=np.float64) for b in self.edge_blocks)
            )

    @property
    def has_edge_blocks(self) -> bool:
        return self.edge_blocks is not None


@dataclasses.dataclass(frozen=True)
class DualPoint:
    """Point of the explicit LP dual.

    ``messages[e]`` holds the pair of reweighting vectors of edge
    ``(u, v)``: first the one sent from ``u`` (indexed by ``x_u``), then the
    one sent from ``v`` (indexed by ``x_v``).  ``node_bounds`` and
    ``edge_bounds`` are the lower bounds on the reweighted unary/pairwise
    minima whose sum is the dual objective.
    """

    node_bounds: np.ndarray
    edge_bounds: np.ndarray
    messages: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self):
        object.__setattr__(self, "node_bounds", _frozen_array(self.node_bounds, ndim=1))
        object.__setattr__(self, "edge_bounds", _frozen_array(self.edge_bounds, ndim=1))
        object.__setattr__(
            self,
            "messages",
            tuple((_frozen_array(a, ndim=1), _frozen_array(b, ndim=1)) for a, b in self.messages),
        )


@dataclasses.dataclass(frozen=True)
class Subgraph:
    """Node/edge subset of a master graph (edges must exist in the model)."""

    nodes: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]


@dataclasses.dataclass(frozen=True)
class Decomposition:
    """Cover of the master graph by forests.

    ``node_counts[v]`` is the number of subgraphs containing node ``v`` and
    ``edge_counts[e]`` the number containing edge ``e`` (one, for an
    edge-disjoint cover).
    """

    subgraphs: tuple[Subgraph, ...]
    node_counts: np.ndarray
    edge_counts: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "node_counts", _frozen_array(self.node_counts, dtype=np.int64, ndim=1))
        object.__setattr__(self, "edge_counts", _frozen_array(self.edge_counts, dtype=np.int64, ndim=1))


@dataclasses.dataclass(frozen=True)
class Reparametrization:
    """Shift of unary potentials between the two subgraphs of a decomposition.

    The flat vector ``lam`` stacks one entry per (node, label) in node order.
    Side 0 receives ``theta_v / 2 + lam_v``, side 1 receives
    ``theta_v / 2 - lam_v``, so the two reparametrized energies always sum
    to the original one.
    """

    lam: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lam", _frozen_array(self.lam, ndim=1))

    def unary_for_side(self, model: MrfModel, side: int) -> tuple[np.ndarray, ...]:
        if side not in (0, 1):
            raise ValueError("side must be 0 or 1")
        packing = model.packing()
        if self.lam.size != packing.node_dim:
            raise ValueError("lambda length does not match the model's node/label count")
        sign = 1.0 if side == 0 else -1.0
        flat = packing.unary_flat(model) / 2.0 + sign * self.lam
        return packing.split_nodes(flat)


@dataclasses.dataclass(frozen=True)
class ConvergenceRecord:
    """One logged epoch of a solver run.

    ``dual_bound`` and ``primal_bound`` are the best certified bounds known
    at that point (a feasible dual value, and the relaxed energy of a
    feasible primal point, with rounded labelings folded in through their
    embeddings), so ``primal_bound >= dual_bound`` holds at every record and
    ``gap`` never increases.  ``projected_energy`` is the instantaneous
    relaxed energy of this epoch's projected point; ``smoothed_gap`` is only
    filled by the smoothed solver.
    """

    iteration: int
    time_s: float
    dual_bound: float
    primal_bound: float
    integer_bound: float
    gap: float
    rho: float | None = None
    smoothed_gap: float | None = None
    projected_energy: float | None = None


def validate_labeling(model: MrfModel, labeling) -> np.ndarray:
    x = np.asarray(labeling, dtype=np.int64)
    if x.shape != (model.n_nodes,):
        raise InvalidLabelingError(f"labeling has shape {x.shape}, expected ({model.n_nodes},)")
    counts = np.asarray(model.label_counts)
    if np.any(x < 0) or np.any(x >= counts):
        bad = int(np.argmax((x < 0) | (x >= counts)))
        raise InvalidLabelingError(f"label {x[bad]} out of range for node {bad}")
    return x


def energy(model: MrfModel, labeling) -> float:
    """Energy of an integer labeling: sum of the selected table entries."""
    x = validate_labeling(model, labeling)
    total = 0.0
    for v in range(model.n_nodes):
        total += model.unary[v][x[v]]
    for e, (u, v) in enumerate(model.edges):
        total += model.pairwise[e][x[u], x[v]]
    return float(total)


def _check_block_shapes(model: MrfModel, marginals: Marginals, need_edges: bool):
    if len(marginals.node_blocks) != model.n_nodes:
        raise ValueError("wrong number of node blocks")
    for v, b in enumerate(marginals.node_blocks):
        if b.shape != (model.label_counts[v],):
            raise ValueError(f"node block {v} has shape {b.shape}")
    if need_edges:
        if not marginals.has_edge_blocks:
            raise InfeasibleMarginalsError(
                "edge blocks are missing; apply a primal projection first"
            )
        if len(marginals.edge_blocks) != model.n_edges:
            raise ValueError("wrong number of edge blocks")
        for e, (u, v) in enumerate(model.edges):
            want = (model.label_counts[u], model.label_counts[v])
            if marginals.edge_blocks[e].shape != want:
                raise ValueError(f"edge block {e} has shape {marginals.edge_blocks[e].shape}")


def relaxed_energy(model: MrfModel, marginals: Marginals) -> float:
    """Inner product of the potentials with a (not necessarily feasible) point."""
    _check_block_shapes(model, marginals, need_edges=True)
    total = 0.0
    for v in range(model.n_nodes):
        total += float(np.dot(model.unary[v], marginals.node_blocks[v]))
    for e in range(model.n_edges):
        total += float(np.sum(model.pairwise[e] * marginals.edge_blocks[e]))
    return total


def embed_labeling(model: MrfModel, labeling) -> Marginals:
    """Indicator embedding of a labeling; exactly feasible by construction."""
    x = validate_labeling(model, labeling)
    node_blocks = []
    for v in range(model.n_nodes):
        b = np.zeros(model.label_counts[v])
        b[x[v]] = 1.0
        node_blocks.append(b)
    edge_blocks = []
    for u, v in model.edges:
        b = np.zeros((model.label_counts[u], model.label_counts[v]))
        b[x[u], x[v]] = 1.0
        edge_blocks.append(b)
    return Marginals(node_blocks=tuple(node_blocks), edge_blocks=tuple(edge_blocks))


def constraint_residual(model: MrfModel, marginals: Marginals) -> float:
    """Maximum violation of the local-polytope constraints.

    Covers node normalization, both marginalization families and
    nonnegativity (edge normalization is implied by the former).
    """
    _check_block_shapes(model, marginals, need_edges=True)
    packing = model.packing()
    flat = packing.pack(marginals)
    node_sums, _, marg_u, marg_v = packing.apply_a(flat)
    res = 0.0
    if node_sums.size:
        res = max(res, float(np.max(np.abs(node_sums - 1.0))))
    if marg_u.size:
        res = max(res, float(np.max(np.abs(marg_u))), float(np.max(np.abs(marg_v))))
    res = max(res, max(0.0, -float(np.min(flat))))
    return res


def round_to_labeling(marginals: Marginals) -> np.ndarray:
    """Per-node argmax of the node blocks; ties go to the smallest label."""
    return np.array([int(np.argmax(b)) for b in marginals.node_blocks], dtype=np.int64)


def _forest_check(n_nodes: int, edges: Iterable[tuple[int, int]]) -> bool:
    parent = list(range(n_nodes))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for u, v in edges:
        ru, rv = find(u), find(v)
        if ru == rv:
            return False
        parent[ru] = rv
    return True


def decompose_by_coloring(model: MrfModel, colors: Sequence[int]) -> Decomposition:
    """Two-subgraph decomposition from a user-supplied edge 2-coloring.

    Both subgraphs keep every node; edges with color 0 go to the first
    subgraph, color 1 to the second.  Each side must be a forest.
    """
    if len(colors) != model.n_edges:
        raise StructureError("need exactly one color per edge")
    if any(c not in (0, 1) for c in colors):
        raise StructureError("colors must be 0 or 1")
    sides: list[list[tuple[int, int]]] = [[], []]
    for e, (u, v) in enumerate(model.edges):
        sides[colors[e]].append((u, v))
    for i in (0, 1):
        if not _forest_check(model.n_nodes, sides[i]):
            raise StructureError(f"subgraph {i} of the supplied coloring contains a cycle")
    nodes = tuple(range(model.n_nodes))
    subgraphs = (
        Subgraph(nodes=nodes, edges=tuple(sides[0])),
        Subgraph(nodes=nodes, edges=tuple(sides[1])),
    )
    return Decomposition(
        subgraphs=subgraphs,
        node_counts=np.full(model.n_nodes, 2, dtype=np.int64),
        edge_counts=np.ones(model.n_edges, dtype=np.int64),
    )


def grid_edges(rows: int, cols: int) -> list[tuple[int, int]]:
    """Canonical 4-connected edges of a row-major grid."""
    edges = []
    for r in range(rows):
        for c in range(cols):
            v = r * cols + c
            if c + 1 < cols:
                edges.append((v, v + 1))
            if r + 1 < rows:
                edges.append((v, v + cols))
    edges.sort()
    return edges


def infer_grid_shape(model: MrfModel) -> tuple[int, int] | None:
    """Recover (rows, cols) of a 4-connected grid from the edge set, if any."""
    if model.grid_shape is not None:
        return model.grid_shape
    n = model.n_nodes
    want = set(model.edges)
    for rows in range(1, n + 1):
        if n % rows:
            continue
        cols = n // rows
        if set(grid_edges(rows, cols)) == want:
            return (rows, cols)
    return None


def decompose_grid(model: MrfModel, colors: Sequence[int] | None = None) -> Decomposition:
    """Horizontal/vertical decomposition of a grid model.

    For non-grid models a user coloring must be supplied (see
    :func:`decompose_by_coloring`); there is no automatic decomposition
    beyond grids.
    """
    if colors is not None:
        return decompose_by_coloring(model, colors)
    shape = infer_grid_shape(model)
    if shape is None:
        raise StructureError(
            "model is not a 4-connected grid; supply an edge 2-coloring into forests"
        )
    rows, cols = shape
    coloring = []
    for u, v in model.edges:
        coloring.append(0 if v == u + 1 and (u % cols) + 1 < cols else 1)
    return decompose_by_coloring(model, coloring)
