"""Flat-vector layout of primal/dual blocks and streaming constraint products.

The primal vector stacks all node blocks, then all edge blocks in row-major
order.  The constraint operator is never materialized as a matrix; its
forward and adjoint products are computed from precomputed gather/scatter
index plans, so they stay O(total block size) regardless of graph size.

Constraint row order (matching the dual-variable layout used by the
saddle-point solver): node normalization, edge normalization, then for each
edge the u-side marginalization rows (one per ``x_u``) and the v-side rows
(one per ``x_v``).
"""

from __future__ import annotations

import dataclasses

import numpy as np


@dataclasses.dataclass(frozen=True)
class Packing:
    node_dim: int
    edge_dim: int
    node_starts: np.ndarray      # (n,) offsets of node blocks in the node segment
    label_counts: np.ndarray     # (n,)
    edge_starts: np.ndarray      # (m,) offsets of edge blocks in the edge segment
    block_sizes: np.ndarray      # (m,) L_u * L_v
    lu: np.ndarray               # (m,)
    lv: np.ndarray               # (m,)
    u_gather: np.ndarray         # (sum L_u,) node-segment index of (e, x_u)
    v_gather: np.ndarray         # (sum L_v,) node-segment index of (e, x_v)
    row_starts: np.ndarray       # (sum L_u,) reduceat starts of block rows
    colmaj_perm: np.ndarray      # edge segment row-major -> column-major
    col_starts: np.ndarray       # (sum L_v,) reduceat starts in column-major layout
    row_repeat: np.ndarray       # (sum L_u,) = L_v of the owning edge
    col_repeat: np.ndarray       # (sum L_v,) = L_u of the owning edge

    @classmethod
    def build(cls, model) -> "Packing":
        counts = np.asarray(model.label_counts, dtype=np.int64)
        node_starts = np.concatenate(([0], np.cumsum(counts)))[:-1]
        node_dim = int(counts.sum())
        m = model.n_edges
        lu = np.array([model.label_counts[u] for u, _ in model.edges], dtype=np.int64)
        lv = np.array([model.label_counts[v] for _, v in model.edges], dtype=np.int64)
        block_sizes = lu * lv
        edge_starts = np.concatenate(([0], np.cumsum(block_sizes)))[:-1] if m else np.zeros(0, np.int64)
        edge_dim = int(block_sizes.sum())

        u_gather, v_gather, row_starts, col_starts_cm, colmaj_perm = [], [], [], [], []
        row_repeat, col_repeat = [], []
        cm_off = 0
        for e, (u, v) in enumerate(model.edges):
            a, b = int(lu[e]), int(lv[e])
            off = int(edge_starts[e])
            u_gather.append(node_starts[u] + np.arange(a))
            v_gather.append(node_starts[v] + np.arange(b))
            row_starts.append(off + np.arange(a) * b)
            # column-major copy of this block: for x_v, for x_u
            idx = off + (np.arange(b)[:, None] + np.arange(a)[None, :] * b)
            colmaj_perm.append(idx.ravel())
            col_starts_cm.append(cm_off + np.arange(b) * a)
            cm_off += a * b
            row_repeat.append(np.full(a, b, dtype=np.int64))
            col_repeat.append(np.full(b, a, dtype=np.int64))

        def cat(parts, dtype=np.int64):
            return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype)

        return cls(
            node_dim=node_dim,
            edge_dim=edge_dim,
            node_starts=node_starts,
            label_counts=counts,
            edge_starts=edge_starts,
            block_sizes=block_sizes,
            lu=lu,
            lv=lv,
            u_gather=cat(u_gather),
            v_gather=cat(v_gather),
            row_starts=cat(row_starts),
            colmaj_perm=cat(colmaj_perm),
            col_starts=cat(col_starts_cm),
            row_repeat=cat(row_repeat),
            col_repeat=cat(col_repeat),
        )

    # -- primal packing ----------------------------------------------------

    @property
    def total_dim(self) -> int:
        return self.node_dim + self.edge_dim

    @property
    def dual_dim(self) -> int:
        n, m = len(self.node_starts), len(self.edge_starts)
        return n + m + len(self.u_gather) + len(self.v_gather)

    def pack(self, marginals) -> np.ndarray:
        parts = list(marginals.node_blocks)
        if marginals.edge_blocks is not None:
            parts += [b.ravel() for b in marginals.edge_blocks]
        else:
            parts += [np.zeros(self.edge_dim)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def pack_nodes(self, node_blocks) -> np.ndarray:
        return np.concatenate([np.asarray(b, dtype=np.float64) for b in node_blocks])

    def split_nodes(self, flat_nodes: np.ndarray) -> tuple[np.ndarray, ...]:
        ends = self.node_starts + self.label_counts
        return tuple(flat_nodes[s:e] for s, e in zip(self.node_starts, ends))

    def split_edges(self, flat_edges: np.ndarray) -> tuple[np.ndarray, ...]:
        out = []
        for e in range(len(self.edge_starts)):
            off, a, b = int(self.edge_starts[e]), int(self.lu[e]), int(self.lv[e])
            out.append(flat_edges[off : off + a * b].reshape(a, b))
        return tuple(out)

    def unary_flat(self, model) -> np.ndarray:
        return np.concatenate(model.unary) if model.unary else np.zeros(0)

    def theta_flat(self, model) -> np.ndarray:
        parts = list(model.unary) + [t.ravel() for t in model.pairwise]
        return np.concatenate(parts)

    # -- streaming constraint products --------------------------------------

    def apply_a(self, mu: np.ndarray):
        """Return (node_sums, edge_sums, u_marg_residual, v_marg_residual)."""
        nodes = mu[: self.node_dim]
        edges = mu[self.node_dim :]
        node_sums = np.add.reduceat(nodes, self.node_starts) if self.node_dim else np.zeros(0)
        if self.edge_dim:
            edge_sums = np.add.reduceat(edges, self.edge_starts)
            row_sums = np.add.reduceat(edges, self.row_starts)
            col_sums = np.add.reduceat(edges[self.colmaj_perm], self.col_starts)
            marg_u = nodes[self.u_gather] - row_sums
            marg_v = nodes[self.v_gather] - col_sums
        else:
            edge_sums = np.zeros(0)
            marg_u = np.zeros(0)
            marg_v = np.zeros(0)
        return node_sums, edge_sums, marg_u, marg_v

    def apply_a_packed(self, mu: np.ndarray) -> np.ndarray:
        return np.concatenate(self.apply_a(mu))

    def rhs(self) -> np.ndarray:
        """Right-hand side matching :meth:`apply_a_packed` (ones, ones, zeros)."""
        n, m = len(self.node_starts), len(self.edge_starts)
        return np.concatenate(
            [np.ones(n), np.ones(m), np.zeros(len(self.u_gather)), np.zeros(len(self.v_gather))]
        )

    def split_dual(self, nu: np.ndarray):
        n, m = len(self.node_starts), len(self.edge_starts)
        ku = len(self.u_gather)
        return (
            nu[:n],
            nu[n : n + m],
            nu[n + m : n + m + ku],
            nu[n + m + ku :],
        )

    def apply_at(self, nu: np.ndarray) -> np.ndarray:
        """Adjoint product, returned in the primal layout."""
        nb, eb, msg_u, msg_v = self.split_dual(nu)
        out_nodes = np.repeat(nb, self.label_counts)
        if self.edge_dim:
            out_nodes = out_nodes + np.bincount(self.u_gather, weights=msg_u, minlength=self.node_dim)
            out_nodes += np.bincount(self.v_gather, weights=msg_v, minlength=self.node_dim)
            out_edges = np.repeat(eb, self.block_sizes)
            out_edges -= np.repeat(msg_u, self.row_repeat)
            scatter = np.empty(self.edge_dim)
            scatter[self.colmaj_perm] = np.repeat(msg_v, self.col_repeat)
            out_edges -= scatter
            return np.concatenate([out_nodes, out_edges])
        return out_nodes


def project_simplex_blocks(flat: np.ndarray, starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Euclidean projection of every block of ``flat`` onto its simplex.

    Iterative uniform-shift-and-clip with exact termination: repeatedly
    center the active entries so they sum to one, drop the ones that went
    negative, and stop once none do.
    """
    x = np.asarray(flat, dtype=np.float64)
    if not counts.size:
        return x.copy()
    active = np.ones(x.size, dtype=bool)
    block_of = np.repeat(np.arange(len(starts)), counts)
    shift = np.zeros(len(starts))
    for _ in range(int(counts.max()) + 1):
        sums = np.add.reduceat(np.where(active, x, 0.0), starts)
        k = np.add.reduceat(active.astype(np.float64), starts)
        shift = (sums - 1.0) / np.maximum(k, 1.0)
        w = x - shift[block_of]
        fresh = active & (w < 0.0)
        if not fresh.any():
            break
        active &= ~fresh
    out = np.where(active, np.maximum(x - shift[block_of], 0.0), 0.0)
    return out
