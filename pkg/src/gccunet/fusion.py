"""Graph-attention fusion blocks: SGAF, CGA/SGA/BGA and MSGF.

All channel gates come from a graph convolution over pooled channel
descriptors, squashed to [0, 1] by a sigmoid and broadcast over H and W.
Setting ``gate_override`` on a block replaces every gate with that constant,
which is how the residual-identity cases are exercised.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from . import ops
from .graph import GraphConvLayer, build_channel_graph, build_spatial_vessel_graph
from .nn import Conv2d, Module
from .tensor import (
    ConfigurationError,
    ContractError,
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    register_op,
    scatter,
    take,
    transpose,
)

register_op("sign_mask", "hard threshold of a probability map", differentiable=False)

MSGF_MODES = ("shared", "individual", "concat")


def _channel_gate(layer: GraphConvLayer, x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C,1,1] gate from a graph over pooled channels."""
    B, C = x.shape[:2]
    g = layer(build_channel_graph(ops.global_avg_pool(x)))
    return g.node_features.reshape(B, C, 1, 1)


def _constant_gate(x: Tensor, value: float) -> Tensor:
    B, C = x.shape[:2]
    return as_tensor(np.full((B, C, 1, 1), float(value)))


class SGAF(Module):
    """Selective graph attention fusion of a local and a global feature map.

    Two graph convolutions serve four channel graphs: ``gc_local`` runs on
    the local graph and on the fusion graph, ``gc_global`` on the global
    graph and on the fusion graph.
    """

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channels = channels
        self.gc_local = GraphConvLayer(1, 1, rng, num_nodes=channels, activation="sigmoid")
        self.gc_global = GraphConvLayer(1, 1, rng, num_nodes=channels, activation="sigmoid")
        self.gate_override: Optional[float] = None

    def gates(self, x_local: Tensor, x_global: Tensor) -> tuple[Tensor, Tensor]:
        if self.gate_override is not None:
            return _constant_gate(x_local, self.gate_override), _constant_gate(x_global, self.gate_override)
        fused_pool = ops.global_avg_pool(x_local + x_global)
        # the pooled fusion descriptor is split (duplicated) into the two fusion graphs
        fusion_local = build_channel_graph(fused_pool)
        fusion_global = build_channel_graph(fused_pool)
        B, C = x_local.shape[:2]
        g_local = self.gc_local(build_channel_graph(ops.global_avg_pool(x_local))).node_features
        g_fl = self.gc_local(fusion_local).node_features
        g_global = self.gc_global(build_channel_graph(ops.global_avg_pool(x_global))).node_features
        g_fg = self.gc_global(fusion_global).node_features
        return (g_local * g_fl).reshape(B, C, 1, 1), (g_global * g_fg).reshape(B, C, 1, 1)

    def forward(self, x_local: Tensor, x_global: Tensor) -> Tensor:
        if x_local.shape != x_global.shape:
            raise ShapeError(f"SGAF inputs differ in shape: {x_local.shape} vs {x_global.shape}")
        gate_l, gate_g = self.gates(x_local, x_global)
        refined_local = x_local * gate_l + x_local
        refined_global = x_global * gate_g + x_global
        return refined_local + refined_global


def sgaf_forward(block: SGAF, x_local: Tensor, x_global: Tensor) -> Tensor:
    return block(x_local, x_global)


class CGA(Module):
    """Channel-wise graph attention: Y = X * gate(X) + X."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.gc_channel = GraphConvLayer(1, 1, rng, num_nodes=channels, activation="sigmoid")
        self.gate_override: Optional[float] = None

    def forward(self, x: Tensor) -> Tensor:
        gate = _constant_gate(x, self.gate_override) if self.gate_override is not None \
            else _channel_gate(self.gc_channel, x)
        return x * gate + x


def cga_forward(block: CGA, x: Tensor) -> Tensor:
    return block(x)


def sign_mask(p: Tensor, threshold: float = 0.4) -> Tensor:
    """1 where p > threshold, else 0; a graph constant (no gradient)."""
    pd = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    if np.any(pd < 0) or np.any(pd > 1):
        raise ContractError("probability map must lie in [0, 1]")
    return Tensor._from_op((pd > threshold).astype(np.float64), (), None, "sign_mask")


def sign_split(p: Tensor, y: Tensor, threshold: float = 0.4) -> tuple[Tensor, Tensor, Tensor]:
    """Split ``y`` [B,C,H,W] by the vessel probability ``p`` [B,1,H,W].

    Returns (vessel, background, mask) with vessel + background == y.
    """
    y = as_tensor(y)
    mask = sign_mask(p, threshold)
    if mask.shape[0] != y.shape[0] or mask.shape[2:] != y.shape[2:]:
        raise ShapeError(f"probability map {mask.shape} does not match features {y.shape}")
    return y * mask, y * (1.0 - mask), mask


class SGA(Module):
    """Spatial graph attention over predicted vessel pixels.

    A 1x1 selector and a two-class softmax give the vessel probability per
    pixel. Pixels above ``threshold`` become nodes of a k-NN graph refined
    by ``gc_spatial``; a probability-weighted channel descriptor of the
    vessel pixels feeds ``gc_channel_vessel``, whose gate scales the
    refined vessel map before the background is added back.
    """

    def __init__(self, channels: int, rng: np.random.Generator, threshold: float = 0.4,
                 max_nodes: int = 256, k: int = 8, seed: int = 0):
        self.channels = channels
        self.threshold = threshold
        self.max_nodes = max_nodes
        self.k = k
        self.seed = seed
        self.selector = Conv2d(channels, 2, 1, rng, activation="linear")
        self.gc_spatial = GraphConvLayer(channels, channels, rng, activation="relu", weight_scale=np.sqrt(2.0))
        self.gc_channel_vessel = GraphConvLayer(1, 1, rng, num_nodes=channels, activation="sigmoid")
        self.gate_override: Optional[float] = None

    def probability(self, y: Tensor) -> Tensor:
        """Vessel-class plane of the selector softmax, [B,1,H,W]."""
        return take(ops.softmax(self.selector(y), axis=1), np.array([1]), axis=1)

    def spatial_refine(self, vessel: Tensor, mask: Tensor) -> Tensor:
        """Refined vessel map; sampled node pixels are replaced by graph outputs."""
        B, C, H, W = vessel.shape
        planes = []
        for b in range(B):
            vb = take(vessel, np.array([b]), axis=0).reshape(C, H, W)
            graph = build_spatial_vessel_graph(mask.data[b, 0], vb, self.max_nodes, self.k, self.seed)
            if graph.is_empty:
                planes.append(vb.reshape(1, C, H, W))
                continue
            nodes = self.gc_spatial(graph).node_features  # [N, C]
            keep = np.ones(H * W)
            keep[graph.node_index] = 0.0
            flat = vb.reshape(C, H * W) * keep + scatter(transpose(nodes, (1, 0)), graph.node_index, H * W, axis=1)
            planes.append(flat.reshape(1, C, H, W))
        return planes[0] if B == 1 else concat(planes, axis=0)

    def channel_gate(self, vessel: Tensor, p: Tensor, mask: Tensor) -> Tensor:
        B, C = vessel.shape[:2]
        if self.gate_override is not None:
            return _constant_gate(vessel, self.gate_override)
        counts = np.maximum(mask.data.sum(axis=(2, 3), keepdims=True), 1.0)  # [B,1,1,1]
        descriptor = (vessel * p).sum(axis=(2, 3), keepdims=True) / counts
        g = self.gc_channel_vessel(build_channel_graph(descriptor)).node_features
        return g.reshape(B, C, 1, 1)

    def forward(self, y: Tensor) -> Tensor:
        p = self.probability(y)
        vessel, background, mask = sign_split(p, y, self.threshold)
        z_spatial = self.spatial_refine(vessel, mask)
        z_channel = self.channel_gate(vessel, p, mask)
        return z_channel * z_spatial + background


def sga_forward(block: SGA, y: Tensor) -> Tensor:
    return block(y)


class BGA(Module):
    """Bottleneck graph attention: CGA followed by SGA."""

    def __init__(self, channels: int, rng: np.random.Generator, threshold: float = 0.4,
                 max_nodes: int = 256, k: int = 8, seed: int = 0):
        self.cga = CGA(channels, rng)
        self.sga = SGA(channels, rng, threshold=threshold, max_nodes=max_nodes, k=k, seed=seed)

    def forward(self, x: Tensor) -> Tensor:
        return self.sga(self.cga(x))


def bga_forward(block: BGA, x: Tensor) -> Tensor:
    return block(x)


class MSGF(Module):
    """Multi-scale graph fusion of three decoder stages (finest first)."""

    def __init__(self, channels: tuple[int, int, int], rng: np.random.Generator, mode: str = "shared"):
        if mode not in MSGF_MODES:
            raise ConfigurationError(f"MSGF mode must be one of {MSGF_MODES}, got {mode!r}")
        ca, cb, cc = channels
        self.channels = ca
        self.mode = mode
        self.align_b = Conv2d(cb, ca, 1, rng)
        self.align_c = Conv2d(cc, ca, 1, rng)
        if mode == "shared":
            self.gc = GraphConvLayer(1, 1, rng, num_nodes=ca, activation="sigmoid")
        elif mode == "individual":
            self.gcs = [GraphConvLayer(1, 1, rng, num_nodes=ca, activation="sigmoid") for _ in range(3)]
        else:
            self.gc = GraphConvLayer(1, 1, rng, num_nodes=3 * ca, activation="sigmoid")
        self.fuse = Conv2d(3 * ca, ca, 1, rng)
        self.gate_override: Optional[float] = None

    @staticmethod
    def _factor(target: int, size: int) -> int:
        if size < 1 or target % size:
            raise ConfigurationError(f"cannot align extent {size} to {target} with an integer factor")
        return target // size

    def align(self, xa: Tensor, xb: Tensor, xc: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        Ha, Wa = xa.shape[2:]
        fb = self._factor(Ha, xb.shape[2])
        fc = self._factor(Ha, xc.shape[2])
        if self._factor(Wa, xb.shape[3]) != fb or self._factor(Wa, xc.shape[3]) != fc:
            raise ConfigurationError("MSGF inputs need the same scale factor along H and W")
        return xa, ops.upsample_nearest(self.align_b(xb), fb), ops.upsample_nearest(self.align_c(xc), fc)

    def gates(self, streams: list[Tensor]) -> list[Tensor]:
        if self.gate_override is not None:
            return [_constant_gate(s, self.gate_override) for s in streams]
        if self.mode == "shared":
            return [_channel_gate(self.gc, s) for s in streams]
        if self.mode == "individual":
            return [_channel_gate(gc, s) for gc, s in zip(self.gcs, streams)]
        B, C = streams[0].shape[:2]
        pooled = concat([ops.global_avg_pool(s) for s in streams], axis=1)  # [B,3C,1,1]
        g = self.gc(build_channel_graph(pooled)).node_features.reshape(B, 3 * C, 1, 1)
        return [take(g, np.arange(i * C, (i + 1) * C), axis=1) for i in range(3)]

    def refine(self, xa: Tensor, xb: Tensor, xc: Tensor) -> list[Tensor]:
        streams = list(self.align(xa, xb, xc))
        return [x * g + x for x, g in zip(streams, self.gates(streams))]

    def forward(self, xa: Tensor, xb: Tensor, xc: Tensor) -> Tensor:
        return self.fuse(concat(self.refine(xa, xb, xc), axis=1))


def msgf_forward(block: MSGF, xa: Tensor, xb: Tensor, xc: Tensor) -> Tensor:
    return block(xa, xb, xc)
