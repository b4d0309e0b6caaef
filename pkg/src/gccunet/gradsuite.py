"""Named finite-difference checks over every operator and block.

Each case builds a fresh random problem from a generator and returns
``(fn, inputs)`` for :func:`grad_check`. Operators are held to 1e-4 and
composed blocks to 1e-3 maximum relative error.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .capsule import CapsuleTensor, GraphCapsuleConv, capsules_to_feature, dynamic_routing, to_primary_capsules
from .fusion import BGA, CGA, MSGF, SGA, SGAF
from .gradcheck import CheckReport, grad_check
from .graph import Graph, GraphConvLayer, normalize_adjacency
from .nn import Conv2d
from .tensor import Parameter, Tensor, matmul, sigmoid
from .training import cross_entropy

OP_TOL = 1e-4
BLOCK_TOL = 1e-3


@dataclass
class Case:
    name: str
    kind: str  # "op" or "block"
    build: Callable
    n_coords: int = 12

    @property
    def tol(self) -> float:
        return OP_TOL if self.kind == "op" else BLOCK_TOL


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _params(module, n: int | None = None):
    ps = module.parameters()
    return ps if n is None else ps[:n]


def _conv(rng):
    x, w, b = _t(rng, 1, 2, 5, 5), _t(rng, 2, 2, 3, 3), _t(rng, 2)
    return (lambda: ops.conv2d(x, w, b, stride=1, padding=1)), [x, w, b]


def _conv_strided(rng):
    x, w = _t(rng, 1, 2, 5, 5), _t(rng, 3, 2, 3, 3)
    return (lambda: ops.conv2d(x, w, None, stride=2, padding=0)), [x, w]


def _pool(rng):
    x = _t(rng, 1, 2, 4, 4)
    return (lambda: ops.max_pool2d(x, 2)), [x]


def _gap(rng):
    x = _t(rng, 2, 3, 3, 4)
    return (lambda: ops.global_avg_pool(x)), [x]


def _softmax(rng):
    x = _t(rng, 2, 5, 3, scale=2.0)
    return (lambda: ops.softmax(x, axis=1)), [x]


def _upsample(rng):
    x = _t(rng, 1, 2, 3, 3)
    return (lambda: ops.upsample_nearest(x, 2)), [x]


def _unfold(rng):
    x = _t(rng, 1, 4, 4, 2)
    return (lambda: ops.unfold_windows(x, 3, axes=(1, 2))), [x]


def _squash(rng):
    x = _t(rng, 3, 4, 4)
    return (lambda: ops.squash(x, axis=-1)), [x]


def _matmul_sigmoid(rng):
    a, b = _t(rng, 3, 4), _t(rng, 4, 2)
    return (lambda: sigmoid(matmul(a, b))), [a, b]


def _routing(rng):
    caps = _t(rng, 1, 2, 2, 9, 2, 3, 4, scale=0.5)
    w = Parameter(rng.standard_normal((2, 9, 3, 2, 4, 4)) * 0.4)
    return (lambda: dynamic_routing(CapsuleTensor(caps), w, 3).data), [caps, w]


def _graph_conv_learned(rng):
    layer = GraphConvLayer(2, 3, rng, num_nodes=5, activation="sigmoid")
    layer.adjacency_logits.data[...] = rng.standard_normal((5, 5))
    x = _t(rng, 2, 5, 2)
    return (lambda: layer(Graph(x)).node_features), [x] + _params(layer)


def _graph_conv_structural(rng):
    layer = GraphConvLayer(3, 2, rng, activation="linear")
    A = (rng.random((6, 6)) < 0.4).astype(float)
    A_hat = normalize_adjacency(np.maximum(A, A.T))
    x = _t(rng, 6, 3)
    return (lambda: layer(Graph(x, A_hat, normalized=True)).node_features), [x] + _params(layer)


def _cross_entropy(rng):
    z = _t(rng, 2, 2, 3, 3, scale=2.0)
    y = (rng.random((2, 3, 3)) < 0.4).astype(np.uint8)
    f = (rng.random((2, 3, 3)) < 0.8).astype(np.uint8)
    f[0, 0, 0] = 1
    return (lambda: cross_entropy(z, y, f)), [z]


def _primary(rng):
    proj = Conv2d(3, 2 * 2 * 2, 1, rng, activation="linear")
    x = _t(rng, 1, 3, 3, 3)
    return (lambda: to_primary_capsules(x, 2, 2, 2, 3, proj).data), [x] + _params(proj)


def _to_feature(rng):
    proj = Conv2d(9 * 2 * 2 * 2, 3, 1, rng, activation="linear")
    caps = _t(rng, 1, 2, 2, 9, 2, 2, 2)
    return (lambda: capsules_to_feature(CapsuleTensor(caps), proj)), [caps] + _params(proj)


def _gc_conv(rng):
    m = GraphCapsuleConv(4, 4, rng, capsule_channels=2, capsules=2, atoms=2)
    for p in m.parameters():
        if p.name and p.name.endswith("adjacency_logits"):
            p.data[...] = rng.standard_normal(p.shape)
    x = _t(rng, 1, 4, 4, 4)
    return (lambda: m(x)), [x] + _params(m)


def _sgaf(rng):
    m = SGAF(4, rng)
    xl, xg = _t(rng, 2, 4, 3, 3), _t(rng, 2, 4, 3, 3)
    return (lambda: m(xl, xg)), [xl, xg] + _params(m)


def _cga(rng):
    m = CGA(4, rng)
    x = _t(rng, 2, 4, 3, 3)
    return (lambda: m(x)), [x] + _params(m)


def _sga(rng):
    m = SGA(3, rng, k=3)
    x = _t(rng, 2, 3, 4, 4)
    return (lambda: m(x)), [x] + _params(m)


def _bga(rng):
    m = BGA(3, rng, k=3)
    x = _t(rng, 1, 3, 4, 4)
    return (lambda: m(x)), [x] + _params(m)


def _msgf(mode):
    def build(rng):
        m = MSGF((2, 3, 4), rng, mode=mode)
        xa, xb, xc = _t(rng, 1, 2, 4, 4), _t(rng, 1, 3, 2, 2), _t(rng, 1, 4, 1, 1)
        return (lambda: m(xa, xb, xc)), [xa, xb, xc] + _params(m)
    return build


CASES = [
    Case("conv2d", "op", _conv),
    Case("conv2d_strided", "op", _conv_strided),
    Case("max_pool2d", "op", _pool),
    Case("global_avg_pool", "op", _gap),
    Case("softmax", "op", _softmax),
    Case("upsample_nearest", "op", _upsample),
    Case("unfold_windows", "op", _unfold),
    Case("squash", "op", _squash),
    Case("matmul_sigmoid", "op", _matmul_sigmoid),
    Case("dynamic_routing", "op", _routing),
    Case("graph_conv", "op", _graph_conv_learned),
    Case("graph_conv_structural", "op", _graph_conv_structural),
    Case("cross_entropy", "op", _cross_entropy),
    Case("primary_capsules", "block", _primary),
    Case("capsules_to_feature", "block", _to_feature),
    Case("gc_conv", "block", _gc_conv, n_coords=6),
    Case("sgaf", "block", _sgaf),
    Case("cga", "block", _cga),
    Case("sga", "block", _sga),
    Case("bga", "block", _bga),
    Case("msgf_shared", "block", _msgf("shared")),
    Case("msgf_individual", "block", _msgf("individual")),
    Case("msgf_concat", "block", _msgf("concat")),
]

CASE_NAMES = [c.name for c in CASES]


@dataclass
class SuiteResult:
    name: str
    kind: str
    tol: float
    trials: int
    passed: bool
    max_rel_error: float
    n_checked: int
    n_kinks: int
    excluded_ops: list
    seconds: float


def run_case(case: Case, trials: int = 50, seed: int = 0) -> SuiteResult:
    t0 = time.perf_counter()
    worst = 0.0
    passed = True
    checked = kinks = 0
    excluded: set = set()
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        fn, inputs = case.build(rng)
        rep: CheckReport = grad_check(fn, inputs, tol=case.tol, n_coords=case.n_coords, seed=trial)
        worst = max(worst, rep.max_rel_error)
        passed &= rep.passed
        checked += rep.n_checked
        kinks += rep.n_kinks
        excluded.update(rep.excluded_ops)
    return SuiteResult(case.name, case.kind, case.tol, trials, bool(passed), worst, checked, kinks,
                       sorted(excluded), time.perf_counter() - t0)


def run_suite(names=None, trials: int = 50, seed: int = 0) -> list[SuiteResult]:
    selected = CASES if not names else [c for c in CASES if c.name in set(names)]
    unknown = sorted(set(names or ()) - set(CASE_NAMES))
    if unknown:
        raise KeyError(f"unknown gradient-check cases: {unknown}; available: {CASE_NAMES}")
    return [run_case(c, trials, seed) for c in selected]
