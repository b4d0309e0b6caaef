import numpy as np
import pytest

from gccunet.gradcheck import grad_check
from gccunet.graph import (
    EMPTY_GRAPH,
    Graph,
    GraphConvLayer,
    build_channel_graph,
    build_spatial_vessel_graph,
    graph_conv,
    knn_adjacency,
    normalize_adjacency,
)
from gccunet.nn import Module
from gccunet.tensor import ContractError, ShapeError, Tensor


def dense_normalize(A):
    n = len(A)
    At = [[A[i][j] + (1.0 if i == j else 0.0) for j in range(n)] for i in range(n)]
    deg = [sum(row) for row in At]
    return np.array([[At[i][j] / np.sqrt(deg[i] * deg[j]) for j in range(n)] for i in range(n)])


def test_channel_graph_from_pooled_features():
    g = build_channel_graph(Tensor(np.arange(1.0, 5.0).reshape(1, 4, 1, 1)))
    assert g.num_nodes == 4
    assert np.array_equal(g.node_features.data[0], [[1], [2], [3], [4]])
    single = build_channel_graph(Tensor(np.ones((1, 1, 1, 1))))
    assert single.num_nodes == 1
    two = build_channel_graph(Tensor(np.arange(6.0).reshape(2, 3, 1, 1)))
    assert [len(u.node_features.data) for u in two.unbatch()] == [3, 3]
    assert not np.array_equal(two.unbatch()[0].node_features.data, two.unbatch()[1].node_features.data)


def test_channel_graph_rejects_unpooled():
    with pytest.raises(ContractError):
        build_channel_graph(Tensor(np.ones((1, 2, 3, 3))))


def test_normalize_adjacency_examples():
    assert np.array_equal(normalize_adjacency(np.zeros((2, 2))), np.eye(2))
    assert np.allclose(normalize_adjacency(np.array([[0, 1], [1, 0]])), 0.5)
    A = np.array([[0.0, 2.0], [2.0, 0.0]])
    assert np.allclose(normalize_adjacency(A), dense_normalize(A), atol=1e-15)
    assert np.allclose(normalize_adjacency(A), [[1 / 3, 2 / 3], [2 / 3, 1 / 3]])
    with pytest.raises(ContractError):
        normalize_adjacency(np.array([[0.0, -1.0], [-1.0, 0.0]]))


def test_normalize_adjacency_symmetric_and_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        A = rng.random((6, 6))
        A = A + A.T
        out = normalize_adjacency(A)
        assert np.allclose(out, out.T, atol=1e-15)
        assert np.allclose(out, dense_normalize(A), atol=1e-14)


def test_graph_conv_identity_propagation():
    rng = np.random.default_rng(1)
    layer = GraphConvLayer(3, 3, rng, activation="linear")
    layer.weight.data[...] = np.eye(3)
    x = rng.standard_normal((4, 3))
    out = layer(Graph(Tensor(x), np.zeros((4, 4))))
    assert np.allclose(out.node_features.data, x, atol=1e-15)


def test_graph_conv_symmetric_nodes_agree():
    rng = np.random.default_rng(2)
    layer = GraphConvLayer(2, 3, rng)
    x = np.tile(rng.standard_normal((1, 2)), (2, 1))
    out = layer(Graph(Tensor(x), np.array([[0.0, 1.0], [1.0, 0.0]]))).node_features.data
    assert np.array_equal(out[0], out[1])


def test_graph_conv_matches_triple_loop():
    rng = np.random.default_rng(3)
    layer = GraphConvLayer(3, 2, rng, activation="linear")
    A = rng.random((5, 5))
    A = A + A.T
    x = rng.standard_normal((5, 3))
    out = layer(Graph(Tensor(x), A)).node_features.data
    An, W = dense_normalize(A), layer.weight.data
    ref = np.zeros((5, 2))
    for i in range(5):
        for o in range(2):
            for j in range(5):
                for f in range(3):
                    ref[i, o] += An[i, j] * x[j, f] * W[f, o]
    assert np.allclose(out, ref, atol=1e-12)


def test_graph_conv_permutation_equivariant():
    rng = np.random.default_rng(4)
    layer = GraphConvLayer(3, 4, rng)
    for _ in range(5):
        A = (rng.random((6, 6)) < 0.5).astype(float)
        A = np.maximum(A, A.T)
        x = rng.standard_normal((6, 3))
        perm = rng.permutation(6)
        out = layer(Graph(Tensor(x), A)).node_features.data
        out_p = layer(Graph(Tensor(x[perm]), A[perm][:, perm])).node_features.data
        assert np.allclose(out_p, out[perm], atol=1e-13)


def test_graph_conv_errors():
    rng = np.random.default_rng(5)
    layer = GraphConvLayer(2, 2, rng)
    with pytest.raises(ShapeError):
        layer(Graph(Tensor(np.ones((3, 3))), np.zeros((3, 3))))
    with pytest.raises(ContractError):
        layer(Graph(Tensor(np.ones((3, 2)))))
    learned = GraphConvLayer(1, 1, rng, num_nodes=3)
    with pytest.raises(ContractError):
        learned(Graph(Tensor(np.ones((3, 1))), np.zeros((3, 3))))


def test_learned_adjacency_gradcheck():
    rng = np.random.default_rng(6)
    layer = GraphConvLayer(1, 1, rng, num_nodes=4, activation="sigmoid")
    layer.adjacency_logits.data[...] = rng.standard_normal((4, 4))
    x = Tensor(rng.standard_normal((2, 4, 1)), requires_grad=True)
    rep = grad_check(lambda: graph_conv(layer, Graph(x)).node_features, [x] + layer.parameters(), tol=1e-4)
    assert rep.passed, rep


def test_shared_layer_counted_once():
    class TwoSites(Module):
        def __init__(self):
            rng = np.random.default_rng(0)
            self.a = GraphConvLayer(1, 1, rng, num_nodes=3)
            self.b = self.a

    m = TwoSites()
    assert len(m.parameters()) == 2
    assert sum(p.size for p in m.parameters()) == 1 + 9


def test_spatial_graph_single_pixel():
    mask = np.zeros((4, 4), np.uint8)
    mask[1, 2] = 1
    g = build_spatial_vessel_graph(mask, Tensor(np.random.default_rng(0).standard_normal((3, 4, 4))))
    assert g.num_nodes == 1
    assert np.array_equal(g.adjacency, [[1.0]])


def test_spatial_graph_empty_sentinel():
    g = build_spatial_vessel_graph(np.zeros((4, 4)), Tensor(np.zeros((2, 4, 4))))
    assert g is EMPTY_GRAPH and g.is_empty


def brute_force_knn(coords, k):
    n = len(coords)
    A = np.zeros((n, n))
    for i in range(n):
        d = sorted((float(np.sum((coords[i] - coords[j]) ** 2)), j) for j in range(n) if j != i)
        for _, j in d[:k]:
            A[i, j] = 1.0
    return np.maximum(A, A.T)


def test_collinear_k1_middle_joins_both_ends():
    mask = np.zeros((1, 5), np.uint8)
    mask[0, [0, 2, 4]] = 1
    coords = np.array([[0, 0], [0, 2], [0, 4]])
    A = knn_adjacency(coords, 1)
    assert A[1, 0] == 1 and A[1, 2] == 1 and A[0, 2] == 0
    assert np.array_equal(A, brute_force_knn(coords, 1))
    g = build_spatial_vessel_graph(mask, Tensor(np.ones((2, 1, 5))), k=1)
    assert np.allclose(g.adjacency, normalize_adjacency(A))


def test_knn_matches_brute_force_random():
    rng = np.random.default_rng(7)
    for _ in range(10):
        coords = rng.permutation(np.array([(i, j) for i in range(8) for j in range(8)]))[:20]
        # distinct squared distances are common but not guaranteed; ties resolve by index in both
        assert np.array_equal(knn_adjacency(coords, 3), brute_force_knn(coords, 3))


def test_spatial_graph_subsampling_deterministic():
    rng = np.random.default_rng(8)
    mask = (rng.random((20, 20)) < 0.5).astype(np.uint8)
    feat = Tensor(rng.standard_normal((2, 20, 20)))
    g1 = build_spatial_vessel_graph(mask, feat, max_nodes=30, k=4, seed=3)
    g2 = build_spatial_vessel_graph(mask, feat, max_nodes=30, k=4, seed=3)
    assert g1.num_nodes == 30
    assert np.array_equal(g1.node_index, g2.node_index)
    assert np.array_equal(g1.adjacency, g2.adjacency)
    assert np.all(mask.reshape(-1)[g1.node_index] == 1)
    flat = feat.data.reshape(2, -1)
    assert np.array_equal(g1.node_features.data, flat[:, g1.node_index].T)
