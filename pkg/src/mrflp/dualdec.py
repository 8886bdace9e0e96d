"""Dual decomposition: forest oracles, nonsmooth/smoothed duals, free energy.

A two-forest decomposition splits the energy into two tractable parts whose
unary tables are shifted against each other by a reparametrization vector.
The decomposition dual is the sum of the two forest minima; its smoothed
variant replaces min by a soft-min at temperature ``rho`` and is
continuously differentiable with the difference of the two forest marginal
maps as its gradient.

Forest dynamic programming runs in the energy domain with max-subtracted
exponentials, so it is stable for temperatures down to (and well below)
1e-4.  Path components are batched into stacked array recursions; general
tree components fall back to per-node message passing.  Argmin ties are
always broken toward the smaller label so subgradients are reproducible.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import InfeasibleMarginalsError, StructureError
from .model import (
    Decomposition,
    Marginals,
    MrfModel,
    Reparametrization,
    Subgraph,
    constraint_residual,
    relaxed_energy,
    validate_labeling,
)
from .tolerances import EQ_TOL, LOG_FLOOR


def _softmin(arr: np.ndarray, rho: float, axis: int) -> np.ndarray:
    mn = np.min(arr, axis=axis, keepdims=True)
    out = mn.squeeze(axis) - rho * np.log(np.sum(np.exp(-(arr - mn) / rho), axis=axis))
    return out


def _gibbs(neg_energy_over_rho: np.ndarray, axis) -> np.ndarray:
    mx = np.max(neg_energy_over_rho, axis=axis, keepdims=True)
    z = np.exp(neg_energy_over_rho - mx)
    return z / np.sum(z, axis=axis, keepdims=True)


@dataclasses.dataclass
class _PathGroup:
    order: np.ndarray      # (k, c) node ids
    gather: np.ndarray     # (k, c, L) flat unary indices
    pairwise: np.ndarray   # (k, c-1, L, L) oriented along the walk
    edge_ids: np.ndarray   # (k, c-1)
    flipped: np.ndarray    # (k, c-1) walk orientation vs canonical edge


@dataclasses.dataclass
class _IsolatedGroup:
    nodes: np.ndarray      # (k,)
    gather: np.ndarray     # (k, L)


@dataclasses.dataclass
class _TreeNode:
    node: int
    parent: int
    edge_id: int
    w: np.ndarray | None   # (L_node, L_parent), None at the root
    children: list[int]


class ForestPlan:
    """Precomputed traversal structure of one forest subgraph.

    Building the plan validates acyclicity.  The plan is reusable across
    unary tables (the pairwise tables are fixed by the model), which is what
    the iterative solvers rely on.
    """

    def __init__(self, model: MrfModel, subgraph: Subgraph):
        self.model = model
        self.subgraph = subgraph
        self.packing = model.packing()
        n = model.n_nodes
        in_sub = np.zeros(n, dtype=bool)
        for v in subgraph.nodes:
            in_sub[v] = True
        self.in_subgraph = in_sub
        adj: dict[int, list[tuple[int, int]]] = {v: [] for v in subgraph.nodes}
        for u, v in subgraph.edges:
            if not (in_sub[u] and in_sub[v]):
                raise StructureError(f"edge {(u, v)} leaves the subgraph's node set")
            e = model.edge_id(u, v)
            adj[u].append((v, e))
            adj[v].append((u, e))
        for v in adj:
            adj[v].sort()

        visited = set()
        isolated: list[int] = []
        paths: list[list[int]] = []
        trees: list[list[int]] = []
        for start in sorted(subgraph.nodes):
            if start in visited:
                continue
            comp = []
            queue = [start]
            visited.add(start)
            edge_count = 0
            while queue:
                x = queue.pop()
                comp.append(x)
                for y, _ in adj[x]:
                    edge_count += 1
                    if y not in visited:
                        visited.add(y)
                        queue.append(y)
            edge_count //= 2
            if edge_count != len(comp) - 1:
                raise StructureError("subgraph contains a cycle")
            if len(comp) == 1:
                isolated.append(comp[0])
            elif all(len(adj[x]) <= 2 for x in comp):
                ends = sorted(x for x in comp if len(adj[x]) == 1)
                walk = [ends[0]]
                prev = -1
                while len(walk) < len(comp):
                    nxt = [y for y, _ in adj[walk[-1]] if y != prev]
                    prev = walk[-1]
                    walk.append(nxt[0])
                paths.append(walk)
            else:
                trees.append(sorted(comp))

        counts = self.packing.label_counts
        starts = self.packing.node_starts

        self.isolated_groups: list[_IsolatedGroup] = []
        by_count: dict[int, list[int]] = {}
        for v in isolated:
            by_count.setdefault(int(counts[v]), []).append(v)
        for L, nodes in sorted(by_count.items()):
            ids = np.array(sorted(nodes), dtype=np.int64)
            self.isolated_groups.append(
                _IsolatedGroup(nodes=ids, gather=starts[ids][:, None] + np.arange(L)[None, :])
            )

        self.path_groups: list[_PathGroup] = []
        by_shape: dict[tuple[int, int], list[list[int]]] = {}
        for walk in paths:
            labels = {int(counts[v]) for v in walk}
            if len(labels) == 1:
                by_shape.setdefault((len(walk), labels.pop()), []).append(walk)
            else:
                trees.append(walk)  # mixed label counts: use the generic code path
        for (c, L), walks in sorted(by_shape.items()):
            order = np.array(walks, dtype=np.int64)
            k = order.shape[0]
            gather = starts[order][:, :, None] + np.arange(L)[None, None, :]
            pw = np.empty((k, c - 1, L, L))
            eids = np.empty((k, c - 1), dtype=np.int64)
            flipped = np.zeros((k, c - 1), dtype=bool)
            for i in range(k):
                for t in range(c - 1):
                    a, b = int(order[i, t]), int(order[i, t + 1])
                    e = model.edge_id(a, b)
                    eids[i, t] = e
                    if a < b:
                        pw[i, t] = model.pairwise[e]
                    else:
                        pw[i, t] = model.pairwise[e].T
                        flipped[i, t] = True
            self.path_groups.append(
                _PathGroup(order=order, gather=gather, pairwise=pw, edge_ids=eids, flipped=flipped)
            )

        self.tree_components: list[list[_TreeNode]] = []
        for comp in trees:
            root = comp[0]
            order: list[_TreeNode] = []
            index: dict[int, int] = {}
            seen = {root}
            bfs = [(root, -1, -1)]
            head = 0
            while head < len(bfs):
                node, parent, eid = bfs[head]
                head += 1
                for y, e in adj[node]:
                    if y not in seen:
                        seen.add(y)
                        bfs.append((y, node, e))
            for node, parent, eid in bfs:
                w = None
                if parent >= 0:
                    mat = model.pairwise[eid]
                    u, v = model.edges[eid]
                    w = np.array(mat if node == u else mat.T)
                tn = _TreeNode(node=node, parent=parent, edge_id=eid, w=w, children=[])
                index[node] = len(order)
                order.append(tn)
            for tn in order:
                if tn.parent >= 0:
                    order[index[tn.parent]].children.append(index[tn.node])
            self.tree_components.append(order)

    # ------------------------------------------------------------------

    def min_sum(self, unary_flat: np.ndarray) -> tuple[float, np.ndarray]:
        """Exact minimum of the forest energy and a tie-broken argmin."""
        labels = np.zeros(self.model.n_nodes, dtype=np.int64)
        value = 0.0

        for grp in self.isolated_groups:
            u = unary_flat[grp.gather]
            value += float(u.min(axis=1).sum())
            labels[grp.nodes] = np.argmin(u, axis=1)

        for grp in self.path_groups:
            u = unary_flat[grp.gather]
            k, c, L = u.shape
            msg = np.zeros((k, c, L))
            for t in range(c - 2, -1, -1):
                msg[:, t] = np.min(grp.pairwise[:, t] + (u[:, t + 1] + msg[:, t + 1])[:, None, :], axis=2)
            head = u[:, 0] + msg[:, 0]
            value += float(head.min(axis=1).sum())
            prev = np.argmin(head, axis=1)
            labels[grp.order[:, 0]] = prev
            rows = np.arange(k)
            for t in range(1, c):
                cand = grp.pairwise[rows, t - 1, prev, :] + u[:, t] + msg[:, t]
                prev = np.argmin(cand, axis=1)
                labels[grp.order[:, t]] = prev

        starts = self.packing.node_starts
        counts = self.packing.label_counts
        for comp in self.tree_components:
            agg: list[np.ndarray] = [None] * len(comp)
            up: list[np.ndarray] = [None] * len(comp)
            for i in range(len(comp) - 1, -1, -1):
                tn = comp[i]
                a = unary_flat[starts[tn.node] : starts[tn.node] + counts[tn.node]].copy()
                for ci in tn.children:
                    a += up[ci]
                agg[i] = a
                if tn.parent >= 0:
                    up[i] = np.min(tn.w + a[:, None], axis=0)
            value += float(agg[0].min())
            labels[comp[0].node] = int(np.argmin(agg[0]))
            for i, tn in enumerate(comp):
                if tn.parent >= 0:
                    xp = labels[tn.parent]
                    labels[tn.node] = int(np.argmin(agg[i] + tn.w[:, xp]))
        return value, labels

    # ------------------------------------------------------------------

    def soft_min(
        self,
        unary_flat: np.ndarray,
        rho: float,
        want_marginals: bool = True,
        want_edge_marginals: bool = False,
    ):
        """Soft minimum of the forest energy at temperature ``rho``.

        Returns ``(value, node_marginals_flat, edge_marginals)`` where the
        flat marginals align with the unary layout (zero outside the
        subgraph) and ``edge_marginals`` maps edge id to a canonically
        oriented table.
        """
        if rho <= 0.0:
            raise ValueError("rho must be positive")
        value = 0.0
        node_marg = np.zeros_like(unary_flat) if want_marginals else None
        edge_marg: dict[int, np.ndarray] = {}

        for grp in self.isolated_groups:
            u = unary_flat[grp.gather]
            value += float(_softmin(u, rho, axis=1).sum())
            if want_marginals:
                node_marg[grp.gather] = _gibbs(-u / rho, axis=1)

        for grp in self.path_groups:
            u = unary_flat[grp.gather]
            k, c, L = u.shape
            bwd = np.zeros((k, c, L))
            for t in range(c - 2, -1, -1):
                bwd[:, t] = _softmin(grp.pairwise[:, t] + (u[:, t + 1] + bwd[:, t + 1])[:, None, :], rho, axis=2)
            value += float(_softmin(u[:, 0] + bwd[:, 0], rho, axis=1).sum())
            if want_marginals:
                fwd = np.zeros((k, c, L))
                for t in range(1, c):
                    fwd[:, t] = _softmin((fwd[:, t - 1] + u[:, t - 1])[:, :, None] + grp.pairwise[:, t - 1], rho, axis=1)
                node_marg[grp.gather] = _gibbs(-(fwd + u + bwd) / rho, axis=2)
                if want_edge_marginals:
                    for t in range(c - 1):
                        logits = -(
                            (fwd[:, t] + u[:, t])[:, :, None]
                            + grp.pairwise[:, t]
                            + (u[:, t + 1] + bwd[:, t + 1])[:, None, :]
                        ) / rho
                        probs = _gibbs(logits.reshape(k, -1), axis=1).reshape(k, L, L)
                        for i in range(k):
                            m = probs[i].T if grp.flipped[i, t] else probs[i]
                            edge_marg[int(grp.edge_ids[i, t])] = m

        starts = self.packing.node_starts
        counts = self.packing.label_counts
        for comp in self.tree_components:
            agg: list[np.ndarray] = [None] * len(comp)
            up: list[np.ndarray] = [None] * len(comp)
            for i in range(len(comp) - 1, -1, -1):
                tn = comp[i]
                a = unary_flat[starts[tn.node] : starts[tn.node] + counts[tn.node]].copy()
                for ci in tn.children:
                    a += up[ci]
                agg[i] = a
                if tn.parent >= 0:
                    up[i] = _softmin(tn.w + a[:, None], rho, axis=0)
            value += float(_softmin(agg[0], rho, axis=0))
            if want_marginals:
                down: list[np.ndarray] = [None] * len(comp)
                belief: list[np.ndarray] = [None] * len(comp)
                index = {tn.node: i for i, tn in enumerate(comp)}
                for i, tn in enumerate(comp):
                    b = agg[i] if tn.parent < 0 else agg[i] + down[i]
                    belief[i] = b
                    s = starts[tn.node]
                    node_marg[s : s + counts[tn.node]] = _gibbs(-b / rho, axis=0)
                    for ci in tn.children:
                        child = comp[ci]
                        down[ci] = _softmin(child.w + (b - up[ci])[None, :], rho, axis=1)
                        if want_edge_marginals:
                            logits = -(agg[ci][:, None] + child.w + (b - up[ci])[None, :]) / rho
                            probs = _gibbs(logits.reshape(-1), axis=0).reshape(child.w.shape)
                            uu, vv = self.model.edges[child.edge_id]
                            edge_marg[child.edge_id] = probs if child.node == uu else probs.T
        return value, node_marg, edge_marg


def _as_unary_flat(model: MrfModel, unary_blocks) -> np.ndarray:
    packing = model.packing()
    if isinstance(unary_blocks, np.ndarray) and unary_blocks.ndim == 1:
        if unary_blocks.size != packing.node_dim:
            raise ValueError("flat unary vector has the wrong length")
        return np.asarray(unary_blocks, dtype=np.float64)
    blocks = [np.asarray(b, dtype=np.float64) for b in unary_blocks]
    if len(blocks) != model.n_nodes:
        raise ValueError(f"expected {model.n_nodes} unary tables")
    for v, b in enumerate(blocks):
        if b.shape != (model.label_counts[v],):
            raise ValueError(f"unary table {v} has shape {b.shape}")
    return packing.pack_nodes(blocks)


def dp_min(model: MrfModel, subgraph: Subgraph, unary_blocks) -> tuple[float, np.ndarray]:
    """Exact minimum-energy labeling of a forest subgraph.

    ``unary_blocks`` replace the model's unary tables; pairwise tables come
    from the model, restricted to the subgraph's edges.  Ties break toward
    the smaller label at every assignment.
    """
    plan = ForestPlan(model, subgraph)
    return plan.min_sum(_as_unary_flat(model, unary_blocks))


def dp_softmin(
    model: MrfModel,
    subgraph: Subgraph,
    unary_blocks,
    rho: float,
    with_edge_marginals: bool = True,
):
    """Soft minimum and Gibbs marginals of a forest subgraph at temperature
    ``rho``.

    Returns ``(value, node_marginals, edge_marginals)``: per-node marginal
    vectors (``None`` for nodes outside the subgraph) and a dict from edge
    id to the canonically oriented pairwise marginal table.
    """
    plan = ForestPlan(model, subgraph)
    value, flat, edge_marg = plan.soft_min(
        _as_unary_flat(model, unary_blocks), rho, want_marginals=True, want_edge_marginals=with_edge_marginals
    )
    packing = model.packing()
    blocks = packing.split_nodes(flat)
    node_marg = tuple(
        blocks[v] if plan.in_subgraph[v] else None for v in range(model.n_nodes)
    )
    return value, node_marg, edge_marg


class DualContext:
    """Reusable evaluation context for the two-forest decomposition dual."""

    def __init__(self, model: MrfModel, decomposition: Decomposition):
        if len(decomposition.subgraphs) != 2:
            raise StructureError("dual decomposition operations support exactly two subgraphs")
        cover = set()
        for sg in decomposition.subgraphs:
            if set(sg.nodes) != set(range(model.n_nodes)):
                raise StructureError("each subgraph must cover every node")
            cover.update(sg.edges)
        if cover != set(model.edges):
            raise StructureError("subgraph edges must cover the model's edges")
        if len(decomposition.subgraphs[0].edges) + len(decomposition.subgraphs[1].edges) != model.n_edges:
            raise StructureError("subgraph edge sets must be disjoint")
        self.model = model
        self.decomposition = decomposition
        self.packing = model.packing()
        self.theta_nodes = self.packing.unary_flat(model)
        self.plans = [ForestPlan(model, sg) for sg in decomposition.subgraphs]

    def _sides(self, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lam = np.asarray(lam, dtype=np.float64)
        if lam.shape != (self.packing.node_dim,):
            raise ValueError(f"lambda must be a flat vector of length {self.packing.node_dim}")
        half = self.theta_nodes / 2.0
        return half + lam, half - lam

    def value_and_subgradient(self, lam):
        t1, t2 = self._sides(lam)
        v1, x1 = self.plans[0].min_sum(t1)
        v2, x2 = self.plans[1].min_sum(t2)
        g = np.zeros(self.packing.node_dim)
        pos = self.packing.node_starts
        g[pos + x1] += 1.0
        g[pos + x2] -= 1.0
        return v1 + v2, g, (x1, x2)

    def smoothed(self, lam, rho: float, want_marginals: bool = True):
        t1, t2 = self._sides(lam)
        v1, m1, _ = self.plans[0].soft_min(t1, rho, want_marginals=want_marginals)
        v2, m2, _ = self.plans[1].soft_min(t2, rho, want_marginals=want_marginals)
        if not want_marginals:
            return v1 + v2, None, None
        return v1 + v2, m1 - m2, (m1, m2)

    def smoothed_value(self, lam, rho: float) -> float:
        value, _, _ = self.smoothed(lam, rho, want_marginals=False)
        return value


def _lam_of(arg) -> np.ndarray:
    if isinstance(arg, Reparametrization):
        return np.asarray(arg.lam, dtype=np.float64)
    return np.asarray(arg, dtype=np.float64)


def dual_u(model: MrfModel, decomposition: Decomposition, lam):
    """Nonsmooth decomposition dual: value, a subgradient, and the two
    tie-broken argmin labelings it is built from."""
    ctx = DualContext(model, decomposition)
    return ctx.value_and_subgradient(_lam_of(lam))


def dual_u_smoothed(model: MrfModel, decomposition: Decomposition, lam, rho: float):
    """Smoothed decomposition dual: value, exact gradient, and the two
    per-subgraph node marginal maps (flat, in unary layout)."""
    ctx = DualContext(model, decomposition)
    return ctx.smoothed(_lam_of(lam), rho)


def decomposition_entropy(model: MrfModel, decomposition: Decomposition, marginals: Marginals) -> float:
    """Weighted sum of node entropies minus edge mutual informations.

    Equals the sum of the subgraph tree entropies, hence nonnegative on the
    local polytope.
    """
    h = 0.0
    for v in range(model.n_nodes):
        b = marginals.node_blocks[v]
        pos = b > 0.0
        h -= float(decomposition.node_counts[v]) * float(np.sum(b[pos] * np.log(b[pos])))
    for e, (u, v) in enumerate(model.edges):
        blk = marginals.edge_blocks[e]
        bu = np.maximum(marginals.node_blocks[u], LOG_FLOOR)
        bv = np.maximum(marginals.node_blocks[v], LOG_FLOOR)
        pos = blk > 0.0
        ratio = np.log(np.maximum(blk, LOG_FLOOR)) - np.log(bu)[:, None] - np.log(bv)[None, :]
        h -= float(decomposition.edge_counts[e]) * float(np.sum(blk[pos] * ratio[pos]))
    return h


def entropy_upper_bound(model: MrfModel, decomposition: Decomposition) -> float:
    """Upper bound on :func:`decomposition_entropy` over the local polytope."""
    counts = np.asarray(model.label_counts, dtype=np.float64)
    return float(np.sum(decomposition.node_counts * np.log(counts)))


def free_energy(model: MrfModel, decomposition: Decomposition, marginals: Marginals, rho: float) -> float:
    """Entropy-smoothed relaxed energy (tree-reweighted free energy).

    Defined as the relaxed energy minus ``rho`` times the decomposition
    entropy, so it lower-bounds the relaxed energy on the local polytope and
    is within ``rho * entropy_upper_bound`` of it.
    """
    if rho <= 0.0:
        raise ValueError("rho must be positive")
    residual = constraint_residual(model, marginals)
    if residual > EQ_TOL:
        raise InfeasibleMarginalsError(
            "free energy is only defined on feasible points", residual=residual
        )
    return relaxed_energy(model, marginals) - rho * decomposition_entropy(model, decomposition, marginals)


def reconstruct_primal_subgradient(model: MrfModel, history, weights=None) -> tuple[np.ndarray, ...]:
    """Weighted average of the embedded argmin labelings of both subgraphs.

    ``history`` is a sequence of ``(labeling_1, labeling_2)`` pairs; with
    ``weights=None`` the average is uniform, otherwise entry ``k`` carries
    weight ``weights[k]`` (the step sizes, for step-weighted averaging).
    Each returned node block is a distribution.
    """
    history = list(history)
    if not history:
        raise ValueError("history must not be empty")
    if weights is None:
        weights = np.ones(len(history))
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(history),) or np.any(weights < 0) or weights.sum() <= 0:
            raise ValueError("weights must be nonnegative with positive sum, one per entry")
    packing = model.packing()
    acc = np.zeros(packing.node_dim)
    pos = packing.node_starts
    for (x1, x2), w in zip(history, weights):
        acc[pos + validate_labeling(model, x1)] += w
        acc[pos + validate_labeling(model, x2)] += w
    acc /= 2.0 * weights.sum()
    return packing.split_nodes(acc)
