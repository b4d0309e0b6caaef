"""Graphs over channels and vessel pixels, and Kipf-style graph convolution."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import ops
from .nn import Module
from .tensor import (
    ContractError,
    Parameter,
    ShapeError,
    Tensor,
    as_tensor,
    matmul,
    relu,
    sigmoid,
    take,
    transpose,
)

Array = Union[np.ndarray, Tensor]


@dataclass
class Graph:
    """Node features plus an optional adjacency.

    ``node_features`` is [N, F] or a batch of independent graphs [B, N, F]
    that share one adjacency source. ``adjacency`` is None when the layer
    that consumes the graph supplies a learned one.
    """

    node_features: Tensor
    adjacency: Optional[Array] = None
    normalized: bool = False
    node_index: Optional[np.ndarray] = None

    def __post_init__(self):
        self.node_features = as_tensor(self.node_features)
        if self.node_features.ndim not in (2, 3):
            raise ShapeError(f"node features must be [N,F] or [B,N,F], got {self.node_features.shape}")
        if self.num_nodes < 1:
            raise ContractError("a graph needs at least one node; use EMPTY_GRAPH")
        if self.adjacency is not None:
            adj = self.adjacency.data if isinstance(self.adjacency, Tensor) else np.asarray(self.adjacency)
            if adj.shape[-2:] != (self.num_nodes, self.num_nodes):
                raise ShapeError(f"adjacency {adj.shape} does not match {self.num_nodes} nodes")
            if np.any(adj < 0):
                raise ContractError("adjacency entries must be nonnegative")

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[-2]

    @property
    def batched(self) -> bool:
        return self.node_features.ndim == 3

    @property
    def is_empty(self) -> bool:
        return False

    def unbatch(self) -> list["Graph"]:
        if not self.batched:
            return [self]
        out = []
        for b in range(self.node_features.shape[0]):
            feats = take(self.node_features, np.array([b]), axis=0).reshape(self.node_features.shape[1:])
            out.append(Graph(feats, self.adjacency, self.normalized, self.node_index))
        return out


class _EmptyGraph:
    """Sentinel for a vessel graph with no nodes."""

    is_empty = True
    num_nodes = 0

    def __repr__(self) -> str:
        return "EMPTY_GRAPH"


EMPTY_GRAPH = _EmptyGraph()


def normalize_adjacency(A: np.ndarray) -> np.ndarray:
    """D^{-1/2} (A + I) D^{-1/2} with D the degree matrix of A + I."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"adjacency must be square, got {A.shape}")
    if np.any(A < 0):
        raise ContractError("adjacency entries must be nonnegative")
    At = A + np.eye(A.shape[0])
    d = 1.0 / np.sqrt(At.sum(axis=1))
    return d[:, None] * At * d[None, :]


def normalize_adjacency_tensor(A: Tensor) -> Tensor:
    """Differentiable ``normalize_adjacency`` for learned adjacencies."""
    n = A.shape[-1]
    At = A + np.eye(n)
    d = At.sum(axis=-1, keepdims=True) ** -0.5
    return d * At * transpose(d, (1, 0))


def build_channel_graph(feat: Tensor) -> Graph:
    """One node per channel from pooled features [B, C, 1, 1] -> batched [B, C, 1]."""
    feat = as_tensor(feat)
    if feat.ndim != 4 or feat.shape[2:] != (1, 1):
        raise ContractError(f"channel graph expects pooled [B,C,1,1] features, got {feat.shape}")
    B, C = feat.shape[:2]
    return Graph(feat.reshape(B, C, 1))


class GraphConvLayer(Module):
    """Single-hop propagation act(Â X W).

    With ``num_nodes`` set the layer owns learnable adjacency logits: a
    row-softmax, symmetrized and then normalized. Otherwise the graph must
    carry a structural adjacency. ``activation`` is one of "relu",
    "sigmoid" or "linear".
    """

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 num_nodes: Optional[int] = None, activation: str = "relu", weight_scale: float = 1.0):
        if activation not in ("relu", "sigmoid", "linear"):
            raise ValueError(f"unknown activation {activation!r}")
        self.in_features = in_features
        self.out_features = out_features
        self.activation = activation
        self.weight = Parameter(rng.standard_normal((in_features, out_features)) * weight_scale
                                * np.sqrt(1.0 / in_features))
        self.adjacency_logits = Parameter(np.zeros((num_nodes, num_nodes))) if num_nodes else None

    @property
    def learned_adjacency(self) -> bool:
        return self.adjacency_logits is not None

    def propagation(self) -> Tensor:
        S = ops.softmax(self.adjacency_logits, axis=1)
        A = (S + transpose(S, (1, 0))) * 0.5
        return normalize_adjacency_tensor(A)

    def forward(self, g: Graph) -> Graph:
        return graph_conv(self, g)


def _activate(x: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return relu(x)
    if activation == "sigmoid":
        return sigmoid(x)
    return x


def graph_conv(layer: GraphConvLayer, g: Graph) -> Graph:
    """Apply ``layer`` to ``g``; the adjacency is passed through unchanged."""
    X = g.node_features
    if X.shape[-1] != layer.in_features:
        raise ShapeError(f"graph has {X.shape[-1]} features per node, layer expects {layer.in_features}")
    if layer.learned_adjacency:
        if g.adjacency is not None:
            raise ContractError("layer owns a learned adjacency but the graph also carries one")
        if layer.adjacency_logits.shape[0] != g.num_nodes:
            raise ShapeError(f"layer expects {layer.adjacency_logits.shape[0]} nodes, graph has {g.num_nodes}")
        A_hat = layer.propagation()
    else:
        if g.adjacency is None:
            raise ContractError("graph has no adjacency and the layer has no learned one")
        A_hat = g.adjacency if g.normalized else normalize_adjacency(
            g.adjacency.data if isinstance(g.adjacency, Tensor) else g.adjacency)
    out = _activate(matmul(matmul(A_hat, X), layer.weight), layer.activation)
    return Graph(out, g.adjacency, g.normalized, g.node_index)


def knn_adjacency(coords: np.ndarray, k: int) -> np.ndarray:
    """Symmetrized k-nearest-neighbour adjacency (edge if either endpoint selects the other).

    Distance ties are broken by node index.
    """
    n = len(coords)
    A = np.zeros((n, n))
    if n <= 1:
        return A
    diff = coords[:, None, :] - coords[None, :, :]
    d2 = (diff ** 2).sum(-1).astype(np.float64)
    np.fill_diagonal(d2, np.inf)
    kk = min(k, n - 1)
    order = np.argsort(d2, axis=1, kind="stable")[:, :kk]
    rows = np.repeat(np.arange(n), kk)
    A[rows, order.reshape(-1)] = 1.0
    return np.maximum(A, A.T)


def build_spatial_vessel_graph(mask: np.ndarray, feat: Tensor, max_nodes: int = 256, k: int = 8,
                               seed: int = 0):
    """Graph over vessel pixels of ``mask`` [H, W] with features from ``feat`` [C, H, W].

    Vessel pixels are subsampled uniformly to at most ``max_nodes`` with a
    seeded generator; nodes keep row-major pixel order. Returns
    ``EMPTY_GRAPH`` when the mask has no vessel pixels.
    """
    mask = np.asarray(mask)
    if max_nodes < 1 or k < 1:
        raise ValueError("max_nodes and k must be >= 1")
    if not np.all((mask == 0) | (mask == 1)):
        raise ContractError("vessel mask must be binary")
    feat = as_tensor(feat)
    C, H, W = feat.shape
    if mask.shape != (H, W):
        raise ShapeError(f"mask {mask.shape} does not match features {feat.shape}")
    flat_idx = np.flatnonzero(mask.reshape(-1))
    if flat_idx.size == 0:
        return EMPTY_GRAPH
    if flat_idx.size > max_nodes:
        rng = np.random.default_rng(seed)
        flat_idx = np.sort(rng.choice(flat_idx, size=max_nodes, replace=False))
    coords = np.stack(np.unravel_index(flat_idx, (H, W)), axis=1)
    A_hat = normalize_adjacency(knn_adjacency(coords, k))
    X = transpose(take(feat.reshape(C, H * W), flat_idx, axis=1), (1, 0))
    return Graph(X, A_hat, normalized=True, node_index=flat_idx)
