"""Group hypergraphs and attention-weighted hypergraph convolution.

Each group becomes one hyperedge weighted by its silhouette cohesion.  The
convolution splits the propagation operator ``D^-1/2 H W B^-1 H^T D^-1/2``
into per-edge terms and mixes them with learned node-to-edge attention.
Batches of independent hypergraphs are handled as one block-diagonal
hypergraph (see :func:`batch`).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .spectral import Grouping
from .tensor import Tensor

MIN_EDGE_WEIGHT = 0.1
_MASKED = -1e30


@dataclass(frozen=True, eq=False)
class Hypergraph:
    incidence: np.ndarray
    edge_weights: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.incidence, dtype=np.float64)
        w = np.asarray(self.edge_weights, dtype=np.float64)
        if h.ndim != 2 or w.shape != (h.shape[1],):
            raise ValueError(f"incidence {h.shape} and edge weights {w.shape} do not conform")
        if np.any(h.sum(axis=0) < 1) or np.any(h.sum(axis=1) < 1):
            raise ValueError("every hyperedge needs a member and every node an edge")
        if np.any(w <= 0):
            raise ValueError("hyperedge weights must be strictly positive")
        object.__setattr__(self, "incidence", h)
        object.__setattr__(self, "edge_weights", w)

    @property
    def n(self) -> int:
        return self.incidence.shape[0]

    @property
    def m(self) -> int:
        return self.incidence.shape[1]

    @cached_property
    def node_degrees(self) -> np.ndarray:
        return self.incidence @ self.edge_weights

    @cached_property
    def edge_degrees(self) -> np.ndarray:
        return self.incidence.sum(axis=0)

    @cached_property
    def propagation(self) -> np.ndarray:
        """Dense ``D^-1/2 H W B^-1 H^T D^-1/2``."""
        r = self.incidence / np.sqrt(self.node_degrees)[:, None]
        return (r * (self.edge_weights / self.edge_degrees)) @ r.T

    def edge_operator(self, e: int) -> np.ndarray:
        """Contribution of hyperedge ``e`` alone to :attr:`propagation`."""
        r = self.incidence[:, e] / np.sqrt(self.node_degrees)
        return np.outer(r, r) * self.edge_weights[e] / self.edge_degrees[e]

    # Factors for sum_e alpha_ie M_e = (alpha * edge_coef) @ node_scale.T
    @cached_property
    def edge_coef(self) -> np.ndarray:
        return self.node_scale * (self.edge_weights / self.edge_degrees)

    @cached_property
    def node_scale(self) -> np.ndarray:
        return self.incidence / np.sqrt(self.node_degrees)[:, None]

    @cached_property
    def member_mean(self) -> np.ndarray:
        """(m, n) averaging operator giving each edge the mean of its members."""
        return (self.incidence / self.edge_degrees).T

    @cached_property
    def mask_bias(self) -> np.ndarray:
        return np.where(self.incidence > 0, 0.0, _MASKED)

    @cached_property
    def gcn_adjacency(self) -> np.ndarray:
        """Symmetric-normalized clique adjacency with self-loops."""
        a = (self.incidence @ self.incidence.T > 0).astype(np.float64)
        d = 1.0 / np.sqrt(a.sum(axis=1))
        return d[:, None] * a * d[None, :]


def build_hypergraph(grouping: Grouping) -> Hypergraph:
    h = np.zeros((grouping.n, grouping.k))
    h[np.arange(grouping.n), grouping.labels] = 1.0
    return Hypergraph(h, np.maximum(grouping.cohesion, MIN_EDGE_WEIGHT))


def batch(graphs: Sequence[Hypergraph]) -> Hypergraph:
    """Disjoint union; node and edge indices follow the input order."""
    n = sum(g.n for g in graphs)
    m = sum(g.m for g in graphs)
    h = np.zeros((n, m))
    i = e = 0
    for g in graphs:
        h[i:i + g.n, e:e + g.m] = g.incidence
        i += g.n
        e += g.m
    return Hypergraph(h, np.concatenate([g.edge_weights for g in graphs]))


def message_count(hg: Hypergraph) -> int:
    """Directed intra-group messages per exchange: sum of |g|(|g|-1)."""
    b = hg.edge_degrees.astype(int)
    return int(np.sum(b * (b - 1)))


def edge_features(node_feats, hg: Hypergraph) -> Tensor:
    return T.matmul(T.Tensor(hg.member_mean), node_feats)


# -- parameters --------------------------------------------------------------------
@dataclass
class HgcnLayerParams:
    proj: Tensor
    att_proj: list[Tensor]
    att_vec: list[Tensor]
    leaky_slope: float = 0.2

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int, d_att: int = 32,
             heads: int = 1, leaky_slope: float = 0.2) -> "HgcnLayerParams":
        return cls(
            T.uniform_init(rng, d_in, (d_in, d_out)),
            [T.uniform_init(rng, d_out, (d_out, d_att)) for _ in range(heads)],
            [T.uniform_init(rng, 2 * d_att, (2 * d_att, 1)) for _ in range(heads)],
            leaky_slope,
        )

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}proj": self.proj}
        for h, (w, a) in enumerate(zip(self.att_proj, self.att_vec)):
            out[f"{prefix}att_proj.{h}"] = w
            out[f"{prefix}att_vec.{h}"] = a
        return out


@dataclass
class HgcnNetwork:
    layers: list[HgcnLayerParams]
    activation: Callable[[Tensor], Tensor] = field(default=T.elu)

    @classmethod
    def init(cls, rng, dims: Sequence[int], d_att: int = 32, heads: int = 1,
             leaky_slope: float = 0.2) -> "HgcnNetwork":
        layers = [HgcnLayerParams.init(rng, a, b, d_att, heads, leaky_slope)
                  for a, b in zip(dims[:-1], dims[1:])]
        return cls(layers)

    def named(self, prefix: str = "hgcn.") -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"{prefix}{i}."))
        return out


# -- convolution ----------------------------------------------------------------------
def _head_attention(projected: Tensor, hg: Hypergraph, w_s: Tensor, a: Tensor,
                    slope: float) -> Tensor:
    d_att = w_s.shape[1]
    node_side = T.matmul(T.matmul(projected, w_s), a[:d_att])
    edge_side = T.matmul(T.matmul(edge_features(projected, hg), w_s), a[d_att:])
    scores = T.leaky_relu(node_side + T.transpose(edge_side), slope)
    return T.softmax(scores + T.Tensor(hg.mask_bias), axis=1)


def attention_coeffs(node_feats, hg: Hypergraph, params: HgcnLayerParams,
                     projected: Tensor | None = None) -> Tensor:
    """Node-to-hyperedge attention, (n, m); zero outside each node's edges.

    Scores use the projected features ``node_feats @ proj``; multiple heads
    are averaged.
    """
    if projected is None:
        projected = T.matmul(node_feats, params.proj)
    heads = [_head_attention(projected, hg, w, a, params.leaky_slope)
             for w, a in zip(params.att_proj, params.att_vec)]
    alpha = heads[0]
    for extra in heads[1:]:
        alpha = alpha + extra
    return alpha if len(heads) == 1 else alpha / len(heads)


def hgcn_layer(node_feats, hg: Hypergraph, params: HgcnLayerParams,
               activation: Callable[[Tensor], Tensor] = T.elu,
               return_attention: bool = False):
    """``act( sum_e alpha_ie (M_e X P)_i )`` with ``M_e`` the per-edge propagation."""
    node_feats = T.as_tensor(node_feats)
    if node_feats.shape[0] != hg.n:
        raise T.ShapeError(f"hgcn_layer: {node_feats.shape[0]} feature rows for {hg.n} nodes")
    projected = T.matmul(node_feats, params.proj)
    alpha = attention_coeffs(node_feats, hg, params, projected)
    mixing = T.matmul(T.mul(alpha, T.Tensor(hg.edge_coef)), T.Tensor(hg.node_scale.T))
    out = activation(T.matmul(mixing, projected))
    return (out, alpha) if return_attention else out


def forward(node_feats, hg: Hypergraph, net: HgcnNetwork, return_attention: bool = False):
    x = T.as_tensor(node_feats)
    alphas = []
    for layer in net.layers:
        x, alpha = hgcn_layer(x, hg, layer, net.activation, return_attention=True)
        alphas.append(alpha)
    return (x, alphas) if return_attention else x


def gcn_layer_variant(node_feats, grouping: Grouping | Hypergraph, proj: Tensor,
                      activation: Callable[[Tensor], Tensor] = T.elu) -> Tensor:
    """Graph-convolution ablation: each group as a clique with self-loops."""
    hg = grouping if isinstance(grouping, Hypergraph) else build_hypergraph(grouping)
    if isinstance(proj, HgcnLayerParams):
        proj = proj.proj
    return activation(T.matmul(T.Tensor(hg.gcn_adjacency), T.matmul(node_feats, proj)))


def balanced_grouping(n: int, k: int) -> Grouping:
    """Agents dealt round-robin into k groups (sizes differ by at most one)."""
    labels = np.arange(n) % k
    return Grouping(labels, k, np.ones(k))
