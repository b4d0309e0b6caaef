import numpy as np
import pytest

from gccunet.fusion import BGA, CGA, MSGF, SGA, SGAF, sign_mask, sign_split
from gccunet.graph import GraphConvLayer
from gccunet.tensor import ConfigurationError, ContractError, ShapeError, Tensor, backward

from oracles import cga_ref, conv1x1, msgf_ref, sga_ref, sgaf_ref


def graph_layers(module):
    return [m for _, m in module.named_modules() if isinstance(m, GraphConvLayer)]


def randomize_graphs(module, rng):
    for layer in graph_layers(module):
        if layer.adjacency_logits is not None:
            layer.adjacency_logits.data[...] = rng.standard_normal(layer.adjacency_logits.shape)


def randn(rng, *shape):
    return rng.standard_normal(shape)


def test_sgaf_zero_gates_is_sum():
    rng = np.random.default_rng(0)
    m = SGAF(4, rng)
    m.gate_override = 0.0
    xl, xg = randn(rng, 2, 4, 3, 3), randn(rng, 2, 4, 3, 3)
    assert np.array_equal(m(Tensor(xl), Tensor(xg)).data, xl + xg)
    assert np.array_equal(m(Tensor(xl), Tensor(np.zeros_like(xl))).data, xl)


def test_sgaf_matches_oracle_and_has_two_graph_layers():
    rng = np.random.default_rng(1)
    m = SGAF(5, rng)
    randomize_graphs(m, rng)
    for _ in range(3):
        xl, xg = randn(rng, 2, 5, 4, 3), randn(rng, 2, 5, 4, 3)
        assert np.allclose(m(Tensor(xl), Tensor(xg)).data, sgaf_ref(m, xl, xg), atol=1e-12)
    assert len(graph_layers(m)) == 2
    with pytest.raises(ShapeError):
        m(Tensor(np.zeros((1, 5, 2, 2))), Tensor(np.zeros((1, 5, 2, 3))))


def test_cga_gate_identities_and_oracle():
    rng = np.random.default_rng(2)
    m = CGA(4, rng)
    x = randn(rng, 2, 4, 3, 3)
    m.gate_override = 0.0
    assert np.array_equal(m(Tensor(x)).data, x)
    m.gate_override = 1.0
    assert np.array_equal(m(Tensor(x)).data, 2 * x)
    m.gate_override = None
    randomize_graphs(m, rng)
    assert np.allclose(m(Tensor(x)).data, cga_ref(m, x), atol=1e-12)


def test_sign_split_examples_and_partition():
    y = Tensor(np.ones((1, 2, 1, 3)))
    vessel, background, mask = sign_split(Tensor(np.array([[[[0.5, 0.3, 0.4]]]])), y, 0.4)
    assert mask.data[0, 0, 0].tolist() == [1.0, 0.0, 0.0]
    rng = np.random.default_rng(3)
    for _ in range(20):
        p, yy = rng.random((2, 1, 4, 4)), randn(rng, 2, 3, 4, 4)
        v, b, mk = sign_split(Tensor(p), Tensor(yy), 0.4)
        assert np.array_equal(v.data + b.data, yy)
        assert set(np.unique(mk.data)) <= {0.0, 1.0}
    with pytest.raises(ContractError):
        sign_mask(Tensor(np.array([1.5])))
    with pytest.raises(ContractError):
        sign_mask(Tensor(np.array([-0.1])))


def test_sga_all_background_is_identity():
    rng = np.random.default_rng(4)
    m = SGA(3, rng)
    m.selector.weight.data[...] = 0.0
    m.selector.bias.data[...] = [5.0, -5.0]
    y = randn(rng, 2, 3, 4, 4)
    assert np.array_equal(m(Tensor(y)).data, y)


def test_sga_single_vessel_pixel():
    rng = np.random.default_rng(5)
    m = SGA(2, rng)
    m.selector.weight.data[...] = 0.0
    m.selector.weight.data[1, 0, 0, 0] = 10.0
    y = np.full((1, 2, 4, 4), -1.0)
    y[0, 0, 2, 1] = 1.0
    out = m(Tensor(y)).data
    assert out.shape == y.shape and np.all(np.isfinite(out))
    mask = sign_mask(m.probability(Tensor(y)), 0.4).data
    assert mask.sum() == 1
    assert np.allclose(out, sga_ref(m, y), atol=1e-10)


def test_sga_matches_oracle_with_subsampling():
    rng = np.random.default_rng(6)
    m = SGA(3, rng, max_nodes=5, k=3, seed=2)
    randomize_graphs(m, rng)
    for _ in range(3):
        y = randn(rng, 2, 3, 5, 5)
        assert np.allclose(m(Tensor(y)).data, sga_ref(m, y), atol=1e-10)


def test_bga_equals_composition_and_zero_input():
    rng = np.random.default_rng(7)
    m = BGA(3, rng, k=3)
    randomize_graphs(m, rng)
    x = randn(rng, 1, 3, 4, 4)
    assert np.array_equal(m(Tensor(x)).data, m.sga(m.cga(Tensor(x))).data)
    assert np.allclose(m(Tensor(x)).data, sga_ref(m.sga, cga_ref(m.cga, x)), atol=1e-10)
    zero = Tensor(np.zeros((1, 3, 4, 4)))
    assert np.all(sign_mask(m.sga.probability(zero), 0.4).data == 1.0)
    assert np.all(np.isfinite(m(zero).data))


def test_bga_gate_zero_and_background_is_identity():
    rng = np.random.default_rng(8)
    m = BGA(3, rng)
    m.cga.gate_override = 0.0
    m.sga.selector.weight.data[...] = 0.0
    m.sga.selector.bias.data[...] = [3.0, -3.0]
    x = randn(rng, 1, 3, 4, 4)
    assert np.array_equal(m(Tensor(x)).data, x)


def test_bga_gradients_skip_threshold_but_reach_selector():
    rng = np.random.default_rng(9)
    m = BGA(3, rng, k=3)
    x = Tensor(randn(rng, 1, 3, 4, 4), requires_grad=True)
    p = m.sga.probability(m.cga(x))
    mask = sign_mask(p, 0.4)
    assert not mask.requires_grad and mask.op == "sign_mask"
    backward((m(x) ** 2).sum(), m.parameters())
    assert np.any(m.sga.selector.weight.grad != 0)


def test_msgf_zero_gates_is_fused_concat():
    rng = np.random.default_rng(10)
    m = MSGF((2, 3, 4), rng)
    m.gate_override = 0.0
    xa, xb, xc = randn(rng, 1, 2, 4, 4), randn(rng, 1, 3, 2, 2), randn(rng, 1, 4, 1, 1)
    up = lambda z, f: np.repeat(np.repeat(z, f, axis=1), f, axis=2)
    al_b = up(np.maximum(conv1x1(m.align_b.weight.data, m.align_b.bias.data, xb[0]), 0), 2)
    al_c = up(np.maximum(conv1x1(m.align_c.weight.data, m.align_c.bias.data, xc[0]), 0), 4)
    cat = np.concatenate([xa[0], al_b, al_c])
    ref = np.maximum(conv1x1(m.fuse.weight.data, m.fuse.bias.data, cat), 0)
    assert np.allclose(m(Tensor(xa), Tensor(xb), Tensor(xc)).data[0], ref, atol=1e-12)


@pytest.mark.parametrize("mode", ["shared", "individual", "concat"])
def test_msgf_matches_oracle(mode):
    rng = np.random.default_rng(11)
    m = MSGF((3, 4, 5), rng, mode=mode)
    randomize_graphs(m, rng)
    xa, xb, xc = randn(rng, 2, 3, 4, 4), randn(rng, 2, 4, 2, 2), randn(rng, 2, 5, 1, 1)
    out = m(Tensor(xa), Tensor(xb), Tensor(xc))
    assert out.shape == (2, 3, 4, 4)
    assert np.allclose(out.data, msgf_ref(m, xa, xb, xc), atol=1e-12)


def test_msgf_shared_identical_streams():
    rng = np.random.default_rng(12)
    m = MSGF((2, 2, 2), rng)
    # identity-like alignment makes the three aligned streams equal
    for conv in (m.align_b, m.align_c):
        conv.weight.data[...] = np.eye(2).reshape(2, 2, 1, 1)
        conv.bias.data[...] = 0.0
    xa = np.abs(randn(rng, 1, 2, 4, 4))
    refined = m.refine(Tensor(xa), Tensor(xa), Tensor(xa))
    assert np.array_equal(refined[0].data, refined[1].data)
    assert np.array_equal(refined[1].data, refined[2].data)


def test_msgf_registry_and_errors():
    rng = np.random.default_rng(13)
    shared, individual = MSGF((2, 3, 4), rng), MSGF((2, 3, 4), rng, mode="individual")
    assert len(graph_layers(shared)) == 1
    assert len(graph_layers(individual)) == 3
    with pytest.raises(ConfigurationError):
        MSGF((2, 3, 4), rng, mode="sum")
    with pytest.raises(ConfigurationError):
        shared(Tensor(np.zeros((1, 2, 6, 6))), Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 4, 3, 3))))
