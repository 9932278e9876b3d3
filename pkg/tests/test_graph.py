import numpy as np
import pytest
from pydantic import ValidationError

from neurospike.errors import ShapeError
from neurospike.graph import (
    GnnModel,
    GnnVariant,
    GraphSample,
    Mlp,
    SharedAdjacency,
    adjacency_from_dataset,
    attention_sum_pool,
    gcn_layer,
    gcs_layer,
    gin_layer,
    gnn_forward,
)
from neurospike.tensor import ClassWeights, Tensor, gradcheck
from tests.utils import double, to_double


def random_adjacency(n, seed, isolated=None):
    generator = np.random.default_rng(seed)
    A = generator.random((n, n))
    A = (A + A.T) / 2
    np.fill_diagonal(A, 0.0)
    if isolated is not None:
        A[isolated, :] = 0.0
        A[:, isolated] = 0.0
    return SharedAdjacency(A)


def test_shared_adjacency_is_symmetric_with_empty_diagonal():
    adjacency = SharedAdjacency(np.array([[1.0, 0.2], [0.6, 1.0]]))
    np.testing.assert_allclose(adjacency.A, [[0.0, 0.4], [0.4, 0.0]])
    assert not adjacency.A.flags.writeable
    with pytest.raises(ShapeError):
        SharedAdjacency(np.ones((2, 3)))


def test_gcn_layer_matches_dense_formula():
    adjacency = random_adjacency(5, seed=0)
    X, W, b = double((5, 3), 1), double((3, 4), 2), double((4,), 3)
    A_hat = adjacency.A + np.eye(5)
    d = np.diag(1 / np.sqrt(A_hat.sum(axis=1)))
    expected = d @ A_hat @ d @ X.data @ W.data + b.data
    out = gcn_layer(X, adjacency, W, b)
    np.testing.assert_allclose(out.data, expected, atol=1e-10)


def test_gcs_layer_zeroes_isolated_nodes_in_propagation():
    adjacency = random_adjacency(4, seed=4, isolated=2)
    X = double((4, 3), 5)
    W1, W2, b = double((3, 2), 6), double((3, 2), 7), double((2,), 8)
    out = gcs_layer(X, adjacency, W1, W2, b)
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(
        out.data[2], X.data[2] @ W2.data + b.data, atol=1e-10
    )
    degree = adjacency.A.sum(axis=1)
    i, j = 0, 1
    weight = adjacency.A[i, j] / np.sqrt(degree[i] * degree[j])
    assert adjacency.gcs_propagation()[i, j] == pytest.approx(weight)


def test_gin_layer_sums_neighbours():
    A = np.array([[0, 0.3, 0], [0.3, 0, 0.9], [0, 0.9, 0]])
    adjacency = SharedAdjacency(A)
    mlp = to_double_mlp(Mlp([2, 2], np.random.default_rng(0)))
    mlp.dense[0].W.data = np.eye(2)
    eps = Tensor(np.array([0.5]), dtype=np.float64)
    X = Tensor(np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 1.0]]))
    out = gin_layer(X, adjacency, eps, mlp)
    expected = 1.5 * X.data + np.array(
        [[0.0, 2.0], [4.0, 1.0], [0.0, 2.0]]
    )
    np.testing.assert_allclose(out.data, expected)


def to_double_mlp(mlp):
    for tensor in mlp.named_parameters().values():
        tensor.data = tensor.data.astype(np.float64)
    return mlp


def test_attention_pool_with_zero_weights_is_the_node_mean():
    X = double((2, 4, 3), 9)
    out = attention_sum_pool(X, Tensor(np.zeros((3, 1))))
    assert out.shape == (2, 3)
    np.testing.assert_allclose(out.data, X.data.mean(axis=1))
    with pytest.raises(ShapeError):
        attention_sum_pool(X, Tensor(np.zeros((4, 1))))


def test_adjacency_from_dataset_uses_absolute_correlation():
    t = np.linspace(0, 1, 200)
    base = np.sin(8 * t)
    noise = np.random.default_rng(10).standard_normal(200)
    epochs = [np.stack([base, -2 * base + 1, noise])[None]]
    adjacency = adjacency_from_dataset(epochs, ["a", "b", "c"])
    A = adjacency.A
    assert A[0, 1] == pytest.approx(1.0)
    assert A[0, 2] < 0.3
    np.testing.assert_array_equal(np.diag(A), 0.0)
    np.testing.assert_allclose(A, A.T)
    assert adjacency.channels == ["a", "b", "c"]


def test_adjacency_zero_variance_channel_warns(capsys):
    generator = np.random.default_rng(11)
    epoch = generator.standard_normal((3, 50))
    epoch[1] = 0.25
    adjacency = adjacency_from_dataset([epoch], ["Fz", "Cz", "Pz"])
    assert "Zero-variance" in capsys.readouterr().out
    np.testing.assert_array_equal(adjacency.A[1], 0.0)
    np.testing.assert_array_equal(adjacency.A[:, 1], 0.0)


def test_adjacency_needs_samples():
    with pytest.raises(ShapeError):
        adjacency_from_dataset([])


@pytest.mark.parametrize("variant", list(GnnVariant))
def test_gnn_forward_shapes(variant):
    adjacency = random_adjacency(6, seed=12)
    model = GnnModel(
        variant,
        8,
        adjacency,
        np.random.default_rng(13),
        sizes=(5, 3),
        hidden=4,
        mlp_hidden=(6,),
    )
    batch = np.random.default_rng(14).random((3, 6, 8))
    out = gnn_forward(batch, adjacency, model)
    assert out.shape == (3, 1)
    assert np.all((out.data > 0) & (out.data < 1))
    single = gnn_forward(GraphSample(X=batch[0]), adjacency, model)
    np.testing.assert_allclose(single.data[0], out.data[0], rtol=1e-5)
    assert set(model.predict(batch)) <= {0, 1}
    with pytest.raises(ShapeError):
        gnn_forward(np.zeros((6, 7)), adjacency, model)


@pytest.mark.parametrize("variant", list(GnnVariant))
def test_gnn_gradient(variant):
    adjacency = random_adjacency(4, seed=15)
    model = to_double(
        GnnModel(
            variant,
            3,
            adjacency,
            np.random.default_rng(16),
            sizes=(3, 2),
            hidden=3,
            mlp_hidden=(3,),
        )
    )
    # shift biases off zero so no ReLU sits on its kink
    for name, tensor in model.named_parameters().items():
        if name.endswith("b"):
            tensor.data = tensor.data + 0.05
    batch = np.random.default_rng(17).random((2, 4, 3))
    labels = np.array([0, 1])
    weights = ClassWeights(w0=0.8, w1=1.4)
    error = gradcheck(
        lambda *params: model.loss(batch, labels, weights),
        model.parameters(),
    )
    assert error < 1e-4


def sparse_adjacency(seed, n=5):
    generator = np.random.default_rng(seed)
    A = generator.random((n, n)) * (generator.random((n, n)) > 0.4)
    A = np.triu(A, 1)
    if seed % 5 == 0:
        A[seed % n, :] = 0.0
        A[:, seed % n] = 0.0
    return SharedAdjacency(A + A.T)


@pytest.mark.parametrize("seed", range(50))
def test_gcn_layer_matches_node_loop(seed):
    adjacency = sparse_adjacency(seed)
    X = double((5, 3), seed + 100)
    W, b = double((3, 2), seed + 200), double((2,), seed + 300)
    A_hat = adjacency.A + np.eye(5)
    degree = A_hat.sum(axis=1)
    expected = np.zeros((5, 2))
    for i in range(5):
        for j in range(5):
            weight = A_hat[i, j] / np.sqrt(degree[i] * degree[j])
            expected[i] += weight * X.data[j] @ W.data
        expected[i] += b.data
    out = gcn_layer(X, adjacency, W, b)
    np.testing.assert_allclose(out.data, expected, atol=1e-6)


@pytest.mark.parametrize("seed", range(50))
def test_gcs_layer_matches_node_loop(seed):
    adjacency = sparse_adjacency(seed)
    X = double((5, 3), seed + 100)
    W1, W2 = double((3, 2), seed + 200), double((3, 2), seed + 250)
    b = double((2,), seed + 300)
    A = adjacency.A
    degree = A.sum(axis=1)
    expected = np.zeros((5, 2))
    for i in range(5):
        for j in range(5):
            if A[i, j] > 0:
                weight = A[i, j] / np.sqrt(degree[i] * degree[j])
                expected[i] += weight * X.data[j] @ W1.data
        expected[i] += X.data[i] @ W2.data + b.data
    out = gcs_layer(X, adjacency, W1, W2, b)
    np.testing.assert_allclose(out.data, expected, atol=1e-6)


@pytest.mark.parametrize("seed", range(50))
def test_gin_layer_matches_node_loop(seed):
    adjacency = sparse_adjacency(seed)
    mlp = to_double_mlp(Mlp([3, 4, 2], np.random.default_rng(seed)))
    eps = Tensor(np.array([0.1 * (seed % 7)]), dtype=np.float64)
    X = double((5, 3), seed + 100)
    (W0, b0), (W1, b1) = [
        (layer.W.data, layer.b.data) for layer in mlp.dense
    ]
    expected = np.zeros((5, 2))
    for i in range(5):
        aggregated = (1 + eps.data[0]) * X.data[i]
        for j in range(5):
            if adjacency.A[i, j] > 0:
                aggregated = aggregated + X.data[j]
        hidden = np.maximum(W0 @ aggregated + b0, 0.0)
        expected[i] = W1 @ hidden + b1
    out = gin_layer(X, adjacency, eps, mlp)
    np.testing.assert_allclose(out.data, expected, atol=1e-6)


def test_gcn_layer_is_linear_without_bias():
    adjacency = sparse_adjacency(1)
    X, Y = double((5, 3), 1), double((5, 3), 2)
    W = double((3, 4), 3)
    zero = Tensor(np.zeros(4), dtype=np.float64)
    mixed = Tensor(2.5 * X.data - 0.7 * Y.data, dtype=np.float64)
    expected = (
        2.5 * gcn_layer(X, adjacency, W, zero).data
        - 0.7 * gcn_layer(Y, adjacency, W, zero).data
    )
    out = gcn_layer(mixed, adjacency, W, zero)
    np.testing.assert_allclose(out.data, expected, atol=1e-10)


@pytest.mark.parametrize("scale", [0.1, 1.0, 30.0])
def test_attention_pool_stays_in_the_convex_hull(scale):
    X = double((3, 6, 4), 20)
    a = double((4, 1), 21, scale=scale)
    out = attention_sum_pool(X, a).data
    assert np.all(out >= X.data.min(axis=1) - 1e-12)
    assert np.all(out <= X.data.max(axis=1) + 1e-12)


def test_attention_pool_saturates_on_the_top_scoring_node():
    X = double((4, 3), 22)
    X.data[:, 0] = [0.0, 3.0, 1.0, 2.0]
    a = Tensor(np.array([[1e4], [0.0], [0.0]]), dtype=np.float64)
    out = attention_sum_pool(X, a)
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, X.data[1])


def test_graph_sample_labels_are_binary():
    with pytest.raises(ValidationError):
        GraphSample(X=np.zeros((2, 2)), label=2)
