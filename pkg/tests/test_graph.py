import numpy as np
import pytest

from afdgcn.graph import (
    GraphSpec,
    NodeAdaptivePool,
    adaptive_adjacency,
    build_adjacency,
    chebyshev_supports,
    dynamic_graph_conv,
    gaussian_kernel_adjacency,
    load_adjacency_csv,
    normalized_laplacian,
    save_matrix_csv,
)
from afdgcn.tensor import Tensor, TensorError, grad_check, reduce_sum

from oracles import adaptive_adjacency_loops, dynamic_graph_conv_loops


# ---------------------------------------------------------------------------
# laplacian / chebyshev (reference utilities)


def test_laplacian_empty_graph_is_identity():
    np.testing.assert_array_equal(normalized_laplacian(np.zeros((3, 3))), np.eye(3))


def test_laplacian_two_node_edge():
    a = np.array([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_allclose(normalized_laplacian(a), [[1.0, -1.0], [-1.0, 1.0]])


def test_laplacian_eigenvalues_in_range():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 7))
        a = rng.random((n, n))
        a = (a + a.T) / 2
        np.fill_diagonal(a, 0.0)
        eig = np.linalg.eigvalsh(normalized_laplacian(a))
        assert eig.min() > -1e-9 and eig.max() < 2 + 1e-9


def test_laplacian_isolated_node_diag_one():
    a = np.zeros((3, 3))
    a[0, 1] = a[1, 0] = 2.0
    lap = normalized_laplacian(a)
    assert lap[2, 2] == 1.0


def test_laplacian_rejects_negative():
    with pytest.raises(TensorError):
        normalized_laplacian(np.array([[0.0, -1.0], [-1.0, 0.0]]))


def test_chebyshev_first_orders():
    lap = np.array([[1.0, -0.5], [-0.5, 1.0]])
    sup = chebyshev_supports(lap, 1)
    assert len(sup) == 1
    np.testing.assert_array_equal(sup[0], np.eye(2))
    sup = chebyshev_supports(lap, 2)
    np.testing.assert_allclose(sup[1], lap - np.eye(2))  # lambda_max = 2


def test_chebyshev_second_order_polynomial():
    rng = np.random.default_rng(3)
    lap = rng.standard_normal((4, 4))
    scaled = lap - np.eye(4)
    sup = chebyshev_supports(lap, 3)
    np.testing.assert_allclose(sup[2], 2.0 * scaled @ scaled - np.eye(4), atol=1e-12)


def test_chebyshev_recurrence_exact():
    for seed in range(10):
        rng = np.random.default_rng(30 + seed)
        lap = rng.standard_normal((5, 5))
        sup = chebyshev_supports(lap, 5, lambda_max=1.5)
        scaled = (2.0 / 1.5) * lap - np.eye(5)
        for k in range(2, 5):
            np.testing.assert_allclose(sup[k], 2.0 * scaled @ sup[k - 1] - sup[k - 2],
                                       atol=1e-12)


def test_chebyshev_rejects_bad_order():
    with pytest.raises(TensorError):
        chebyshev_supports(np.eye(2), 0)


# ---------------------------------------------------------------------------
# gaussian kernel adjacency


def test_kernel_zero_distance_weight_one():
    a = gaussian_kernel_adjacency([(0, 1, 0.0)], 2, sigma=1.0)
    assert a[0, 1] == 1.0


def test_kernel_decay_to_zero():
    a = gaussian_kernel_adjacency([(0, 1, 1e6)], 2, sigma=1.0, threshold=0.0)
    assert a[0, 1] == 0.0


def test_kernel_toy_hand_case():
    edges = [(0, 1, 1.0), (1, 2, 2.0), (0, 2, 3.0)]
    dists = np.array([1.0, 2.0, 3.0])
    sigma = float(dists.std())
    a = gaussian_kernel_adjacency(edges, 3, sigma=sigma, threshold=0.1)
    for i, j, dist in edges:
        w = np.exp(-dist ** 2 / sigma ** 2)
        expected = w if w >= 0.1 else 0.0
        assert a[i, j] == pytest.approx(expected, abs=1e-12)


def test_kernel_symmetric_for_symmetric_edges():
    edges = [(0, 1, 1.0), (1, 0, 1.0), (1, 2, 0.5), (2, 1, 0.5)]
    a = gaussian_kernel_adjacency(edges, 3, sigma=1.0)
    np.testing.assert_array_equal(a, a.T)
    assert np.all(np.diag(a) == 0)


def test_kernel_rejects_out_of_range():
    with pytest.raises(TensorError):
        gaussian_kernel_adjacency([(0, 5, 1.0)], 3, sigma=1.0)


def test_adjacency_csv_roundtrip(tmp_path):
    path = tmp_path / "adj.csv"
    path.write_text("from,to,cost\n0,1,2.5\n1,2,1.0\n")
    edges = load_adjacency_csv(path)
    assert (0, 1, 2.5) in edges and (1, 0, 2.5) in edges  # mirrored on load
    a = build_adjacency(path, 3, sigma=1.0, threshold=0.0)
    np.testing.assert_array_equal(a, a.T)


def test_adjacency_csv_rejects_bad_header(tmp_path):
    path = tmp_path / "adj.csv"
    path.write_text("a,b,c\n0,1,2.5\n")
    with pytest.raises(TensorError):
        load_adjacency_csv(path)


def test_save_matrix_csv(tmp_path):
    path = tmp_path / "m.csv"
    m = np.array([[0.25, 0.75], [1.0, 0.0]])
    save_matrix_csv(path, m)
    text = path.read_text()
    assert text.endswith("\n") and "\r" not in text
    loaded = np.array([[float(v) for v in line.split(",")] for line in text.splitlines()])
    np.testing.assert_array_equal(loaded, m)


# ---------------------------------------------------------------------------
# adaptive adjacency


def test_adaptive_single_node():
    out = adaptive_adjacency(Tensor(np.array([[0.3, -0.2]])))
    np.testing.assert_allclose(out.data, [[1.0]])


def test_adaptive_identical_rows_uniform():
    e = Tensor(np.tile([0.5, 1.0], (4, 1)))
    out = adaptive_adjacency(e).data
    np.testing.assert_allclose(out, 0.25, atol=1e-12)


def test_adaptive_matches_loop_oracle():
    rng = np.random.default_rng(7)
    e = rng.standard_normal((5, 3))
    out = adaptive_adjacency(Tensor(e)).data
    np.testing.assert_allclose(out, adaptive_adjacency_loops(e), atol=1e-12)


def test_adaptive_row_stochastic_everywhere():
    # zeros, moderate, and extreme-magnitude embeddings all stay row-stochastic
    cases = [np.zeros((3, 2))]
    for seed in range(10):
        rng = np.random.default_rng(50 + seed)
        scale = 10.0 ** rng.integers(-2, 4)
        cases.append(rng.standard_normal((6, 3)) * scale)
    for e in cases:
        out = adaptive_adjacency(Tensor(e)).data
        assert (out >= 0).all()
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_adaptive_permutation_equivariance():
    rng = np.random.default_rng(8)
    e = rng.standard_normal((6, 3))
    perm = rng.permutation(6)
    p = np.eye(6)[perm]
    out = adaptive_adjacency(Tensor(e)).data
    out_p = adaptive_adjacency(Tensor(p @ e)).data
    # permuted row sums reduce in a different order: equal to the last ulp
    np.testing.assert_allclose(out_p, p @ out @ p.T, atol=1e-12, rtol=0)


def test_adaptive_is_differentiable():
    rng = np.random.default_rng(9)
    e = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    c = rng.standard_normal((4, 4))
    assert grad_check(lambda t: reduce_sum(adaptive_adjacency(t) * Tensor(c)), e) < 1e-6


# ---------------------------------------------------------------------------
# dynamic graph convolution


def _make_graph(n, d, seed=0):
    rng = np.random.default_rng(seed)
    return GraphSpec(n, d, rng=rng), rng


def test_gconv_zero_pool_zero_embeddings():
    graph, rng = _make_graph(3, 2)
    graph.node_embeddings.data[:] = 0.0
    pool = NodeAdaptivePool(2, 2, 2, k_order=2, rng=rng)
    pool.w_pool.data[:] = 0.0
    x = Tensor(rng.standard_normal((3, 2)))
    out = dynamic_graph_conv(x, graph, pool)
    np.testing.assert_array_equal(out.data, np.zeros((3, 2)))


def test_gconv_scalar_expansion():
    # N=1: supports {I, A~} are both [[1]], so Z = 2wx + beta with tied blocks
    graph, rng = _make_graph(1, 1)
    graph.node_embeddings.data[:] = 1.0
    pool = NodeAdaptivePool(1, 1, 1, k_order=2, rng=rng)
    w, beta, x = 0.7, 0.3, 1.9
    pool.w_pool.data[:] = w
    pool.b_pool.data[:] = beta
    out = dynamic_graph_conv(Tensor([[x]]), graph, pool)
    assert out.data[0, 0] == pytest.approx(2 * w * x + beta, abs=1e-12)


@pytest.mark.parametrize("k_order", [1, 2, 3])
def test_gconv_matches_unrolled_oracle(k_order):
    for seed in range(10):
        graph, rng = _make_graph(4, 2, seed=60 + seed)
        pool = NodeAdaptivePool(2, 3, 2, k_order=k_order, rng=rng)
        x = rng.standard_normal((4, 3))
        out = dynamic_graph_conv(Tensor(x), graph, pool)
        expected = dynamic_graph_conv_loops(
            x, graph.node_embeddings.data, pool.w_pool.data, pool.b_pool.data, k_order)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_gconv_batched_matches_per_sample():
    graph, rng = _make_graph(4, 2, seed=70)
    pool = NodeAdaptivePool(2, 3, 2, k_order=2, rng=rng)
    x = rng.standard_normal((5, 4, 3))
    out = dynamic_graph_conv(Tensor(x), graph, pool)
    for b in range(5):
        expected = dynamic_graph_conv_loops(
            x[b], graph.node_embeddings.data, pool.w_pool.data, pool.b_pool.data, 2)
        np.testing.assert_allclose(out.data[b], expected, atol=1e-12)


def test_gconv_gradients_all_groups():
    graph, rng = _make_graph(4, 2, seed=80)
    pool = NodeAdaptivePool(2, 3, 2, k_order=2, rng=rng)
    x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    c = rng.standard_normal((4, 2))

    def conv_sum(_t):
        return reduce_sum(dynamic_graph_conv(x, graph, pool) * Tensor(c))

    assert grad_check(conv_sum, x) < 1e-6
    assert grad_check(conv_sum, graph.node_embeddings) < 1e-6
    assert grad_check(conv_sum, pool.w_pool) < 1e-6
    assert grad_check(conv_sum, pool.b_pool) < 1e-6


def test_gconv_channel_mismatch():
    graph, rng = _make_graph(3, 2)
    pool = NodeAdaptivePool(2, 3, 2, k_order=2, rng=rng)
    with pytest.raises(TensorError):
        dynamic_graph_conv(Tensor(np.zeros((3, 5))), graph, pool)


# ---------------------------------------------------------------------------
# GraphSpec invariants


def test_graphspec_zeroes_diagonal():
    a = np.array([[0.5, 1.0], [1.0, 0.5]])
    g = GraphSpec(2, 1, adjacency=a)
    assert np.all(np.diag(g.predefined_adjacency) == 0)


def test_graphspec_rejects_negative_adjacency():
    with pytest.raises(TensorError):
        GraphSpec(2, 1, adjacency=np.array([[0.0, -1.0], [1.0, 0.0]]))


def test_graphspec_embed_dim_bound():
    with pytest.raises(TensorError):
        GraphSpec(4, 4)


def test_graphspec_embedding_init_range():
    g = GraphSpec(10, 4, rng=np.random.default_rng(0))
    bound = 1.0 / np.sqrt(4)
    assert np.all(np.abs(g.node_embeddings.data) <= bound)
