"""Cross-modal reference graph and its graph-convolutional encoder.

Nodes are the meme's text tokens (ids 0 .. n_t-1) followed by its image
patches (ids n_t .. n_t+n_v-1).  Three undirected edge families connect
them: the token chain, the 4-neighborhood patch grid, and, per token, the
top-K patches by attention mass.  A symmetric-normalized propagation matrix
with self-loops drives the convolution; the readout is the node mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .autodiff import Param, Tensor, matmul, mean_pool, relu, transpose, vconcat
from .dump_io import MemeDump, validate_dump
from .errors import ConfigError, DomainError, InvalidDumpError, ShapeError
from .pcm import fan_in_uniform

__all__ = [
    "ReferenceGraph",
    "GcnParams",
    "build_token_edges",
    "build_patch_edges",
    "top_k_patch_neighbors",
    "build_reference_graph",
    "propagation_matrix",
    "gcn_forward",
    "graph_readout",
    "export_edge_list",
]

ACTIVATIONS = ("relu", "identity")


def build_token_edges(n_tokens: int) -> list[tuple[int, int]]:
    """Chain each token to its successor: (i, i+1) for i in 0 .. n_t-2."""
    if n_tokens < 1:
        raise DomainError(f"need at least one token, got {n_tokens}")
    return [(i, i + 1) for i in range(n_tokens - 1)]


def build_patch_edges(grid_rows: int, grid_cols: int) -> list[tuple[int, int]]:
    """4-neighborhood over the row-major patch grid, in patch-local ids."""
    if grid_rows < 1 or grid_cols < 1:
        raise DomainError(f"grid must be at least 1x1, got {grid_rows}x{grid_cols}")
    edges = []
    for r in range(grid_rows):
        for c in range(grid_cols):
            idx = r * grid_cols + c
            if c + 1 < grid_cols:
                edges.append((idx, idx + 1))
            if r + 1 < grid_rows:
                edges.append((idx, idx + grid_cols))
    return edges


def top_k_patch_neighbors(attention: np.ndarray, token_pos: int, patch_lo: int,
                          patch_hi: int, k_ref: int) -> list[int]:
    """The k_ref patch positions a token attends to most, ascending.

    Positions index the attention matrix; the patch block is the inclusive
    range [patch_lo, patch_hi].  k_ref clamps to the block size.  Ties break
    toward the lower position.
    """
    attention = np.asarray(attention)
    if attention.ndim != 2 or attention.shape[0] != attention.shape[1]:
        raise ShapeError(f"attention must be square, got shape {attention.shape}")
    n = attention.shape[0]
    if not (0 <= patch_lo <= patch_hi < n):
        raise DomainError(f"patch block [{patch_lo}, {patch_hi}] not within 0..{n - 1}")
    if not (0 <= token_pos < n):
        raise DomainError(f"token position {token_pos} not within 0..{n - 1}")
    if k_ref < 1:
        raise DomainError(f"k_ref must be at least 1, got {k_ref}")
    row = attention[token_pos, patch_lo:patch_hi + 1]
    k = min(k_ref, row.shape[0])
    # stable sort on the negated row keeps lower positions first among ties
    order = np.argsort(-row, kind="stable")[:k]
    return sorted(int(patch_lo + j) for j in order)


@dataclass
class ReferenceGraph:
    """Assembled graph plus the per-modality node features."""

    n_tokens: int
    n_patches: int
    token_edges: list[tuple[int, int]]   # within token nodes
    patch_edges: list[tuple[int, int]]   # within patch nodes (already offset)
    cross_edges: list[tuple[int, int]]   # (token node, patch node)
    token_features: np.ndarray           # (n_t, d_t) float64
    patch_features: np.ndarray           # (n_v, d_v) float64

    @property
    def n_nodes(self) -> int:
        return self.n_tokens + self.n_patches

    @property
    def edges(self) -> list[tuple[int, int]]:
        return self.token_edges + self.patch_edges + self.cross_edges

    @property
    def features(self) -> np.ndarray:
        """Stacked node features; only defined when both widths agree."""
        if self.token_features.shape[1] != self.patch_features.shape[1]:
            raise ShapeError(
                f"token width {self.token_features.shape[1]} != patch width "
                f"{self.patch_features.shape[1]}; a projection is required")
        return np.concatenate([self.token_features, self.patch_features], axis=0)


def build_reference_graph(dump: MemeDump, k_ref: int) -> ReferenceGraph:
    """Build the graph for one dump: chain, grid, and top-k_ref cross edges."""
    violations = validate_dump(dump)
    if violations:
        raise InvalidDumpError(violations)
    if k_ref < 1:
        raise DomainError(f"k_ref must be at least 1, got {k_ref}")
    n_t, n_v = dump.n_tokens, dump.n_patches
    i1, _ = dump.text_range
    j1, j2 = dump.patch_range
    token_edges = build_token_edges(n_t)
    patch_edges = [(a + n_t, b + n_t) for a, b in build_patch_edges(dump.grid_rows, dump.grid_cols)]
    cross_edges = []
    for tok in range(n_t):
        for pos in top_k_patch_neighbors(dump.attention, i1 + tok, j1, j2, k_ref):
            cross_edges.append((tok, n_t + (pos - j1)))
    return ReferenceGraph(
        n_tokens=n_t,
        n_patches=n_v,
        token_edges=token_edges,
        patch_edges=patch_edges,
        cross_edges=cross_edges,
        token_features=dump.token_embeddings.astype(np.float64),
        patch_features=dump.patch_embeddings.astype(np.float64),
    )


def propagation_matrix(graph: ReferenceGraph) -> np.ndarray:
    """Symmetric-normalized adjacency with self-loops.

    With A the 0/1 adjacency and D the degree of A + I, this returns
    D^(-1/2) (A + I) D^(-1/2).  Rows of isolated nodes reduce to their
    self-loop, so every row is well defined.
    """
    n = graph.n_nodes
    adj = np.zeros((n, n))
    for a, b in graph.edges:
        if not (0 <= a < n and 0 <= b < n):
            raise DomainError(f"edge ({a}, {b}) outside 0..{n - 1}")
        adj[a, b] = 1.0
        adj[b, a] = 1.0
    adj += np.eye(n)
    inv_sqrt_deg = 1.0 / np.sqrt(adj.sum(axis=1))
    return inv_sqrt_deg[:, None] * adj * inv_sqrt_deg[None, :]


@dataclass
class GcnParams:
    """Stacked convolution weights plus optional input projections."""

    layers: list[Param]                    # each (d_g, d_g)
    activation: str = "relu"
    token_projection: Param | None = None  # (d_g, d_t) when widths differ
    patch_projection: Param | None = None  # (d_g, d_v)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if not self.layers:
            raise ConfigError("need at least one convolution layer")
        if (self.token_projection is None) != (self.patch_projection is None):
            raise ConfigError("projections must be given for both modalities or neither")

    @classmethod
    def init(cls, graph_dim: int, n_layers: int, rng: np.random.Generator,
             activation: str = "relu", token_dim: int | None = None,
             patch_dim: int | None = None) -> "GcnParams":
        """Fan-in uniform weights; projections appear iff a width differs."""
        token_dim = graph_dim if token_dim is None else token_dim
        patch_dim = graph_dim if patch_dim is None else patch_dim
        tok_proj = pat_proj = None
        if token_dim != graph_dim or patch_dim != graph_dim:
            tok_proj = Param(fan_in_uniform(rng, graph_dim, token_dim))
            pat_proj = Param(fan_in_uniform(rng, graph_dim, patch_dim))
        layers = [Param(fan_in_uniform(rng, graph_dim, graph_dim)) for _ in range(n_layers)]
        return cls(layers, activation, tok_proj, pat_proj)

    @property
    def graph_dim(self) -> int:
        return self.layers[0].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def params(self) -> list[Param]:
        out = []
        if self.token_projection is not None:
            out += [self.token_projection, self.patch_projection]
        out += self.layers
        return out


def _node_features(graph: ReferenceGraph, params: GcnParams) -> Tensor:
    if params.token_projection is None:
        feats = graph.features
        if feats.shape[1] != params.graph_dim:
            raise ConfigError(
                f"features have width {feats.shape[1]} but layers expect {params.graph_dim}")
        return Tensor(feats)
    projected_tokens = matmul(Tensor(graph.token_features), transpose(params.token_projection))
    projected_patches = matmul(Tensor(graph.patch_features), transpose(params.patch_projection))
    return vconcat([projected_tokens, projected_patches])


def gcn_forward(graph: ReferenceGraph, params: GcnParams,
                propagation: np.ndarray | None = None) -> Tensor:
    """Run every convolution layer; returns the (n_nodes, d_g) embeddings.

    Differentiable with respect to all weights.  The propagation matrix is
    treated as a constant; pass one in to reuse it across calls.
    """
    if propagation is None:
        propagation = propagation_matrix(graph)
    prop = Tensor(propagation)
    hidden = _node_features(graph, params)
    for layer in params.layers:
        hidden = matmul(matmul(prop, hidden), layer)
        if params.activation == "relu":
            hidden = relu(hidden)
    return hidden


def graph_readout(node_embeddings: Tensor) -> Tensor:
    """Mean over nodes; exactly invariant to node order (see mean_pool)."""
    return mean_pool(node_embeddings)


def export_edge_list(graph: ReferenceGraph) -> str:
    """One edge per line as 'type src dst' with type in {TT, PP, TP}."""
    lines = []
    for kind, edges in (("TT", graph.token_edges), ("PP", graph.patch_edges),
                        ("TP", graph.cross_edges)):
        for a, b in edges:
            lines.append(f"{kind} {a} {b}")
    return "\n".join(lines) + ("\n" if lines else "")


def permute_graph(graph: ReferenceGraph, perm: Sequence[int]) -> tuple[ReferenceGraph, np.ndarray]:
    """Relabel nodes by perm (new id -> old id) for equivariance checks.

    Returns the relabeled graph and the permuted feature matrix; only valid
    for graphs whose two feature widths agree.
    """
    perm = list(perm)
    n = graph.n_nodes
    if sorted(perm) != list(range(n)):
        raise DomainError("perm must be a permutation of the node ids")
    old_to_new = {old: new for new, old in enumerate(perm)}
    feats = graph.features[perm]
    remap = lambda edges: [(old_to_new[a], old_to_new[b]) for a, b in edges]
    relabeled = replace(
        graph,
        token_edges=remap(graph.token_edges),
        patch_edges=remap(graph.patch_edges),
        cross_edges=remap(graph.cross_edges),
        token_features=feats[:graph.n_tokens],
        patch_features=feats[graph.n_tokens:],
    )
    return relabeled, feats
