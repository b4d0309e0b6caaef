"""Capsules, dynamic routing, and the graph capsule convolution."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .graph import GraphConvLayer, build_channel_graph
from .nn import Conv2d, Module
from .tensor import (
    register_op,
    ConfigurationError,
    Parameter,
    ShapeError,
    Tensor,
    as_tensor,
    relu,
    sigmoid,
    transpose,
)


register_op("dynamic_routing", "agreement routing of window capsules (fused)")


@dataclass
class CapsuleTensor:
    """Tensor with axes [B, H, W, K^2, C, L, V]."""

    data: Tensor

    def __post_init__(self):
        if self.data.ndim != 7:
            raise ShapeError(f"capsule tensor needs 7 axes [B,H,W,K2,C,L,V], got {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ShapeError(f"capsule extents must be >= 1, got {self.data.shape}")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def num_capsules(self) -> int:
        return self.data.shape[5]

    @property
    def num_atoms(self) -> int:
        return self.data.shape[6]

    @property
    def kernel_positions(self) -> int:
        return self.data.shape[3]


@dataclass
class RoutingState:
    """Routing logits and couplings for one iteration.

    Both arrays have shape [C, K^2, L, P, L_upper]; every slice along the
    last axis of ``couplings`` sums to one.
    """

    logits: np.ndarray
    couplings: np.ndarray
    iteration: int


def squash(s: Tensor, axis: int = -1) -> Tensor:
    return ops.squash(s, axis=axis)


def to_primary_capsules(feat: Tensor, channels: int, capsules: int, atoms: int, kernel: int = 1,
                        projection: Optional[Conv2d] = None) -> CapsuleTensor:
    """[B, C_in, H, W] -> capsules [B, H, W, K^2, C, L, V].

    A per-pixel projection maps C_in to C*L*V channels (identity when
    ``projection`` is None), then the K x K neighbourhood of every pixel is
    gathered into the K^2 axis. Because the projection is pointwise this is
    the same as projecting each gathered window position.
    """
    feat = as_tensor(feat)
    if min(channels, capsules, atoms, kernel) < 1:
        raise ConfigurationError("capsule factors must be positive")
    if projection is not None:
        feat = projection(feat)
    B, Cp, H, W = feat.shape
    if Cp != channels * capsules * atoms:
        raise ConfigurationError(
            f"{Cp} channels cannot be factored into C={channels} x L={capsules} x V={atoms}")
    caps = transpose(feat.reshape(B, channels, capsules, atoms, H, W), (0, 4, 5, 1, 2, 3))
    caps = ops.unfold_windows(caps, kernel, axes=(1, 2))
    return CapsuleTensor(caps)


def capsules_to_feature(caps: CapsuleTensor, projection: Optional[Conv2d] = None) -> Tensor:
    """Merge the [K^2, C, L, V] axes into channels, then apply an optional 1x1 projection."""
    B, H, W, K2, C, L, V = caps.shape
    feat = transpose(caps.data.reshape(B, H, W, K2 * C * L * V), (0, 3, 1, 2))
    if projection is not None:
        feat = projection(feat)
    return feat


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def dynamic_routing(lower: CapsuleTensor, transform: Tensor, iterations: int = 3,
                    record: Optional[list] = None) -> CapsuleTensor:
    """Route window capsules to upper capsules by agreement.

    For every pixel and capsule channel c, the K^2*L lower capsules of the
    window vote for L_upper upper capsules through ``transform`` of shape
    [C, K^2, L, L_upper, V, V]. Couplings are a softmax of the logits over
    the upper axis; logits grow by the dot product of votes and outputs.
    Gradients flow through every iteration, couplings included.

    Returns [B, H, W, 1, C, L_upper, V]. When ``record`` is a list, one
    ``RoutingState`` per iteration is appended to it.
    """
    if iterations < 1:
        raise ConfigurationError(f"routing needs at least one iteration, got {iterations}")
    x = lower.data
    B, H, W, K2, C, L, V = x.shape
    transform = as_tensor(transform)
    if transform.ndim != 6 or transform.shape[:3] != (C, K2, L) or transform.shape[4:] != (V, V):
        raise ShapeError(f"transform {transform.shape} incompatible with capsules {x.shape}")
    J = transform.shape[3]
    P = B * H * W
    I = K2 * L
    N = C * P

    u = np.ascontiguousarray(x.data.reshape(P, K2, C, L, V).transpose(2, 1, 3, 0, 4)).reshape(C, I, P, V)
    wm = transform.data.transpose(0, 1, 2, 5, 3, 4).reshape(C, I, V, J * V)
    votes = np.matmul(u, wm)  # [C,I,P,J*V]
    ops._add_flops(votes.size * V)
    U = np.ascontiguousarray(votes.reshape(C, I, P, J, V).transpose(0, 2, 3, 4, 1)).reshape(N, J, V, I)
    del votes

    logits = np.zeros((N, J, I))
    couplings, pre_squash, outputs = [], [], []
    for it in range(iterations):
        c = _softmax(logits, axis=1)
        if record is not None:
            record.append(RoutingState(
                logits.reshape(C, P, J, K2, L).transpose(0, 3, 4, 1, 2).copy(),
                c.reshape(C, P, J, K2, L).transpose(0, 3, 4, 1, 2).copy(), it))
        s = np.matmul(U, c[..., None])[..., 0]  # [N,J,V]
        v = ops.squash_array(s)
        couplings.append(c)
        pre_squash.append(s)
        outputs.append(v)
        if it < iterations - 1:
            logits = logits + np.matmul(v[:, :, None, :], U)[:, :, 0, :]
    ops._add_flops(2 * iterations * U.size)
    out = v.reshape(C, P, J, V).transpose(1, 0, 2, 3).reshape(B, H, W, 1, C, J, V)

    def bw(g):
        gv = g.reshape(P, C, J, V).transpose(1, 0, 2, 3).reshape(N, J, V)
        # dU is a sum of outer products; collect their factors and contract once
        n_terms = 2 * iterations - 1
        left = np.empty((N, J, V, n_terms))
        right = np.empty((N, J, n_terms, I))
        term = 0
        g_logits = np.zeros((N, J, I))  # gradient w.r.t. logits of the following iteration
        for it in reversed(range(iterations)):
            c, s, v = couplings[it], pre_squash[it], outputs[it]
            gv_it = gv if it == iterations - 1 else np.zeros_like(v)
            if it < iterations - 1:
                # logits[it+1] = logits[it] + v . U
                gv_it = gv_it + np.matmul(U, g_logits[..., None])[..., 0]
                left[..., term] = v
                right[:, :, term, :] = g_logits
                term += 1
            gs = ops.squash_grad(s, gv_it)
            left[..., term] = gs
            right[:, :, term, :] = c
            term += 1
            gc = np.matmul(gs[:, :, None, :], U)[:, :, 0, :]
            g_logits = c * (gc - (gc * c).sum(axis=1, keepdims=True)) + g_logits
        gU = np.matmul(left, right)  # [N,J,V,I]
        gvotes = np.ascontiguousarray(gU.reshape(C, P, J * V, I).transpose(0, 3, 1, 2))  # [C,I,P,J*V]
        del gU
        gx = gw = None
        if x.requires_grad:
            gu = np.matmul(gvotes, np.swapaxes(wm, -1, -2))  # [C,I,P,V]
            gx = np.ascontiguousarray(
                gu.reshape(C, K2, L, P, V).transpose(3, 1, 0, 2, 4)).reshape(B, H, W, K2, C, L, V)
        if transform.requires_grad:
            gwm = np.matmul(np.swapaxes(u, -1, -2), gvotes)  # [C,I,V,J*V]
            gw = gwm.reshape(C, K2, L, V, J, V).transpose(0, 1, 2, 4, 5, 3)
        return gx, gw

    return CapsuleTensor(Tensor._from_op(out, (x, transform), bw, "dynamic_routing"))


class GraphCapsuleConv(Module):
    """Capsule convolution with channel and capsule-atom graph gating.

    ``use_graph=False`` gives the plain capsule convolution (no graph
    parameters). ``gate_mode="linear"`` combines the graph outputs as
    ``1 + g`` instead of ``sigmoid(g)``; with zero graph weights the graph
    path is then inert.
    """

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 capsule_channels: int = 2, capsules: int = 4, atoms: int = 4, kernel: int = 3,
                 iterations: int = 3, use_graph: bool = True, gate_mode: str = "sigmoid"):
        if gate_mode not in ("sigmoid", "linear"):
            raise ConfigurationError(f"unknown gate mode {gate_mode!r}")
        self.channels = capsule_channels
        self.capsules = capsules
        self.atoms = atoms
        self.kernel = kernel
        self.iterations = iterations
        self.use_graph = use_graph
        self.gate_mode = gate_mode
        C, L, V, K2 = capsule_channels, capsules, atoms, kernel * kernel
        self.primary = Conv2d(in_channels, C * L * V, 1, rng, activation="linear")
        self.transform = Parameter(rng.standard_normal((C, K2, L, L, V, V)) / np.sqrt(V * K2))
        if use_graph:
            self.gc_channel = GraphConvLayer(1, 1, rng, num_nodes=C, activation="linear")
            self.gc_capatom = GraphConvLayer(1, 1, rng, num_nodes=L * V, activation="linear")
        self.out_proj = Conv2d(C * L * V, out_channels, 1, rng, activation="linear")

    def primary_capsules(self, x: Tensor) -> CapsuleTensor:
        return to_primary_capsules(x, self.channels, self.capsules, self.atoms, self.kernel, self.primary)

    def graph_gate(self, caps: CapsuleTensor) -> Tensor:
        """Gate of shape [B, 1, 1, 1, C, L, V] from the pooled channel and capsule-atom views."""
        B, H, W, K2, C, L, V = caps.shape
        channel_view = caps.data.mean(axis=(1, 2, 3, 5, 6))  # [B, C]
        capatom_view = caps.data.mean(axis=(1, 2, 3, 4))  # [B, L, V]
        g_channel = self.gc_channel(build_channel_graph(channel_view.reshape(B, C, 1, 1))).node_features
        g_capatom = self.gc_capatom(build_channel_graph(capatom_view.reshape(B, L * V, 1, 1))).node_features
        g = g_channel.reshape(B, 1, 1, 1, C, 1, 1) + g_capatom.reshape(B, 1, 1, 1, 1, L, V)
        return sigmoid(g) if self.gate_mode == "sigmoid" else g + 1.0

    def forward(self, x: Tensor) -> Tensor:
        caps = self.primary_capsules(x)
        routed = dynamic_routing(caps, self.transform, self.iterations)
        if self.use_graph:
            routed = CapsuleTensor(routed.data * self.graph_gate(caps))
        return relu(capsules_to_feature(routed, self.out_proj))


def graph_capsule_conv(module: GraphCapsuleConv, x: Tensor) -> Tensor:
    return module(x)
