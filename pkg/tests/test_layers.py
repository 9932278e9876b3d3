import numpy as np
import pytest

from neurospike.errors import ShapeError
from neurospike.layers import (
    Activation,
    CnnModel,
    Conv2dLayer,
    DenseLayer,
    MaxPool2dLayer,
    conv2d_forward,
    conv_pool_shape,
    dense_forward,
    maxpool2d_forward,
    one_hot,
)
from neurospike.tensor import ClassWeights, Tensor, gradcheck
from tests.utils import double, to_double


def conv_oracle(x, kernels, bias):
    batch, _, height, width = x.shape
    out_ch, in_ch, k, _ = kernels.shape
    out = np.zeros((batch, out_ch, height - k + 1, width - k + 1))
    for b in range(batch):
        for o in range(out_ch):
            for i in range(height - k + 1):
                for j in range(width - k + 1):
                    patch = x[b, :, i : i + k, j : j + k]
                    out[b, o, i, j] = np.sum(patch * kernels[o]) + bias[o]
    return out


def conv_layer(in_ch, out_ch, k, seed):
    layer = Conv2dLayer(in_ch, out_ch, np.random.default_rng(seed), k)
    layer.kernels.data = layer.kernels.data.astype(np.float64)
    layer.bias.data = np.random.default_rng(seed + 1).standard_normal(
        out_ch
    )
    return layer


@pytest.mark.parametrize("seed", range(10))
def test_conv2d_matches_nested_loops(seed):
    generator = np.random.default_rng(seed)
    in_ch, out_ch, k = generator.integers(1, 4, size=3)
    k = int(k) + 1
    height, width = generator.integers(k, k + 5, size=2)
    layer = conv_layer(int(in_ch), int(out_ch), k, seed)
    x = generator.standard_normal((2, int(in_ch), int(height), int(width)))
    out = conv2d_forward(Tensor(x), layer)
    expected = conv_oracle(x, layer.kernels.data, layer.bias.data)
    np.testing.assert_allclose(out.data, expected, atol=1e-6)


def test_conv2d_gradient():
    layer = conv_layer(2, 3, 3, seed=4)
    x = double((2, 2, 6, 5), seed=5)
    error = gradcheck(
        lambda x, w, b: (conv2d_forward(x, layer) ** 2).sum(),
        [x, layer.kernels, layer.bias],
    )
    assert error < 1e-5


@pytest.mark.parametrize(
    "shape, message",
    [
        ((1, 2, 8, 8), "channels"),
        ((2, 8, 8), "B, C, H, W"),
        ((1, 1, 3, 8), "smaller"),
    ],
)
def test_conv2d_shape_errors(shape, message):
    layer = Conv2dLayer(1, 2, np.random.default_rng(0), 5)
    with pytest.raises(ShapeError, match=message):
        conv2d_forward(Tensor(np.ones(shape)), layer)


def test_maxpool_crops_odd_edges():
    x = Tensor(np.arange(35.0).reshape(1, 1, 5, 7), requires_grad=True)
    out = maxpool2d_forward(x, MaxPool2dLayer())
    assert out.shape == (1, 1, 2, 3)
    np.testing.assert_array_equal(
        out.data[0, 0], [[8.0, 10.0, 12.0], [22.0, 24.0, 26.0]]
    )
    out.sum().backward()
    assert x.grad[0, 0, 4].sum() == 0
    assert x.grad[0, 0, :, 6].sum() == 0
    assert x.grad.sum() == 6


def test_maxpool_tie_goes_to_first_position():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    maxpool2d_forward(x).sum().backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_gradient():
    # distinct values keep the argmax stable under finite differences
    values = np.random.default_rng(6).permutation(72).reshape(2, 1, 6, 6)
    x = Tensor(values.astype(np.float64) / 7.0, requires_grad=True)
    assert gradcheck(lambda x: (maxpool2d_forward(x) ** 2).sum(), [x]) < 1e-6


def test_maxpool_too_small():
    with pytest.raises(ShapeError):
        maxpool2d_forward(Tensor(np.ones((1, 1, 1, 4))))


@pytest.mark.parametrize("activation", list(Activation))
def test_dense_gradient(activation):
    layer = DenseLayer(4, 3, np.random.default_rng(7))
    layer.W.data = layer.W.data.astype(np.float64)
    layer.b.data = layer.b.data.astype(np.float64) + 0.1
    x = double((5, 4), seed=8)
    error = gradcheck(
        lambda x, w, b: dense_forward(x, layer, activation).sum(),
        [x, layer.W, layer.b],
    )
    assert error < 1e-6


def test_dense_is_x_w_transpose_plus_b():
    layer = DenseLayer(2, 1, np.random.default_rng(0))
    layer.W.data = np.array([[2.0, -1.0]], dtype=np.float32)
    layer.b.data = np.array([0.5], dtype=np.float32)
    out = dense_forward(Tensor(np.array([[1.0, 3.0]])), layer)
    np.testing.assert_allclose(out.data, [[-0.5]])
    with pytest.raises(ShapeError):
        dense_forward(Tensor(np.ones((1, 3))), layer)


def test_conv_pool_shape_for_full_epochs():
    assert conv_pool_shape(19, 1848) == (7, 922)
    assert conv_pool_shape(7, 922) == (1, 459)
    with pytest.raises(ShapeError):
        conv_pool_shape(5, 5)


def test_cnn_output_and_prediction():
    model = CnnModel((19, 24), np.random.default_rng(0), filters=(2, 3))
    batch = np.random.default_rng(1).random((4, 19, 24))
    out = model.forward(batch)
    assert out.shape == (4, 2)
    assert np.all((out.data > 0) & (out.data < 1))
    np.testing.assert_array_equal(model.predict(batch), out.data.argmax(1))
    assert list(model.named_parameters()) == [
        "conv1/kernels",
        "conv1/bias",
        "conv2/kernels",
        "conv2/bias",
        "output/W",
        "output/b",
    ]


def test_cnn_gradient():
    model = to_double(
        CnnModel((16, 16), np.random.default_rng(2), filters=(2, 2))
    )
    batch = np.random.default_rng(3).random((2, 16, 16))
    labels = np.array([0, 1])
    weights = ClassWeights(w0=0.7, w1=1.8)
    error = gradcheck(
        lambda *params: model.loss(batch, labels, weights),
        model.parameters(),
    )
    assert error < 1e-4


def test_state_round_trip_and_mismatch():
    model = CnnModel((16, 16), np.random.default_rng(4), filters=(2, 2))
    state = model.state()
    model.layers["output"].W.data += 1.0
    model.load_state(state)
    np.testing.assert_array_equal(
        model.layers["output"].W.data, state["output/W"]
    )
    state["output/W"] = state["output/W"][:, :1]
    with pytest.raises(ShapeError):
        model.load_state(state)


def test_one_hot():
    np.testing.assert_array_equal(one_hot([1, 0]), [[0, 1], [1, 0]])
