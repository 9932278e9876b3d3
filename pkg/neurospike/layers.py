"""
Convolution, pooling and dense layers shared by the CNN and the CSNN.
"""

from enum import Enum
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from neurospike.errors import ShapeError
from neurospike.tensor import (
    ClassWeights,
    Tensor,
    init_uniform,
    init_zeros,
    no_grad,
    weighted_bce,
)

KERNEL_SIZE = 5
POOL_WINDOW = 2
DEFAULT_FILTERS = (12, 64)


class Activation(str, Enum):
    linear = "linear"
    sigmoid = "sigmoid"
    relu = "relu"


class Conv2dLayer:
    """Valid 2-D cross-correlation with stride 1 and a bias per filter."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        kernel_size: int = KERNEL_SIZE,
    ) -> None:
        fan_in = in_channels * kernel_size * kernel_size
        self.kernels = init_uniform(
            (out_channels, in_channels, kernel_size, kernel_size),
            fan_in,
            rng,
        )
        self.bias = init_zeros((out_channels,))
        self.stride = 1
        self.padding = 0

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[-1]

    def named_parameters(self) -> dict[str, Tensor]:
        return {"kernels": self.kernels, "bias": self.bias}


class MaxPool2dLayer:
    """Non-overlapping max pooling; trailing odd rows/columns drop out."""

    def __init__(self, window: int = POOL_WINDOW) -> None:
        self.window = window
        self.stride = window

    def named_parameters(self) -> dict[str, Tensor]:
        return {}


class DenseLayer:
    def __init__(
        self, in_features: int, out_features: int, rng: np.random.Generator
    ) -> None:
        self.W = init_uniform((out_features, in_features), in_features, rng)
        self.b = init_zeros((out_features,))

    def named_parameters(self) -> dict[str, Tensor]:
        return {"W": self.W, "b": self.b}


def conv2d_forward(input: Tensor, layer: Conv2dLayer) -> Tensor:
    """
    Convolve a [B, C, H, W] batch with the layer's kernels.

    :return: Tensor of shape [B, out_ch, H - k + 1, W - k + 1].
    """
    x, w = input.data, layer.kernels.data
    k = layer.kernel_size
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [B, C, H, W], got {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d input has {x.shape[1]} channels, kernels expect "
            f"{w.shape[1]}"
        )
    if x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(
            f"conv2d input {x.shape[2]}x{x.shape[3]} is smaller than the "
            f"{k}x{k} kernel"
        )
    windows = sliding_window_view(x, (k, k), axis=(2, 3))
    value = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))
    value = value.transpose(0, 3, 1, 2) + layer.bias.data[:, None, None]
    out = Tensor.from_op(
        np.ascontiguousarray(value),
        (input, layer.kernels, layer.bias),
        "conv2d",
    )
    if out.requires_grad:

        def _backward():
            g = out.grad
            layer.kernels.accumulate(
                np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
            )
            layer.bias.accumulate(g.sum(axis=(0, 2, 3)))
            if input.requires_grad:
                padded = np.pad(
                    g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1))
                )
                g_windows = sliding_window_view(padded, (k, k), axis=(2, 3))
                flipped = w[:, :, ::-1, ::-1]
                grad_x = np.tensordot(
                    g_windows, flipped, axes=([1, 4, 5], [0, 2, 3])
                )
                input.accumulate(grad_x.transpose(0, 3, 1, 2))

        out._backward = _backward
    return out


def maxpool2d_forward(
    input: Tensor, layer: Optional[MaxPool2dLayer] = None
) -> Tensor:
    """
    Max over non-overlapping windows of the last two axes.

    Ties go to the first position in row-major window order, and only
    that position receives gradient.
    """
    size = (layer or MaxPool2dLayer()).window
    x = input.data
    if x.ndim < 2 or x.shape[-2] < size or x.shape[-1] < size:
        raise ShapeError(
            f"maxpool needs spatial dims >= {size}, got {x.shape}"
        )
    lead = x.shape[:-2]
    h, w = x.shape[-2] // size, x.shape[-1] // size
    cropped = x[..., : h * size, : w * size]
    blocks = cropped.reshape(*lead, h, size, w, size)
    n = len(lead)
    blocks = np.moveaxis(blocks, n + 1, n + 2).reshape(
        *lead, h, w, size * size
    )
    argmax = blocks.argmax(axis=-1)
    value = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    out = Tensor.from_op(value, (input,), "maxpool2d")
    if out.requires_grad:

        def _backward():
            routed = np.zeros(blocks.shape, dtype=out.grad.dtype)
            np.put_along_axis(
                routed, argmax[..., None], out.grad[..., None], axis=-1
            )
            routed = routed.reshape(*lead, h, w, size, size)
            routed = np.moveaxis(routed, n + 2, n + 1).reshape(
                *lead, h * size, w * size
            )
            grad = np.zeros(x.shape, dtype=out.grad.dtype)
            grad[..., : h * size, : w * size] = routed
            input.accumulate(grad)

        out._backward = _backward
    return out


def dense_forward(
    input: Tensor,
    layer: DenseLayer,
    activation: Activation = Activation.linear,
) -> Tensor:
    """y = x W^T + b, optionally squashed by a sigmoid or a ReLU."""
    if input.shape[-1] != layer.W.shape[1]:
        raise ShapeError(
            f"dense layer expects {layer.W.shape[1]} input features, got "
            f"{input.shape[-1]}"
        )
    y = input.matmul(layer.W.transpose()) + layer.b
    if activation == Activation.sigmoid:
        return y.sigmoid()
    if activation == Activation.relu:
        return y.relu()
    return y


def conv_pool_shape(
    height: int, width: int, kernel_size: int = KERNEL_SIZE
) -> tuple[int, int]:
    """Spatial shape after one valid conv followed by one 2x2 pool."""
    height, width = height - kernel_size + 1, width - kernel_size + 1
    if height < POOL_WINDOW or width < POOL_WINDOW:
        raise ShapeError(
            "input is too small for the conv/pool stack "
            f"({height}x{width} after convolution)"
        )
    return height // POOL_WINDOW, width // POOL_WINDOW


def one_hot(labels: np.ndarray, classes: int = 2) -> np.ndarray:
    return np.eye(classes, dtype=np.float32)[np.asarray(labels, dtype=int)]


class Module:
    """
    A trainable model: named parameters plus forward/loss/predict.

    Subclasses fill ``self.layers`` with ``name -> layer`` pairs.
    """

    kind = "module"

    def __init__(self) -> None:
        self.layers: dict = {}

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for layer_name, layer in self.layers.items():
            for name, tensor in layer.named_parameters().items():
                named[f"{layer_name}/{name}"] = tensor
        return named

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for tensor in self.parameters():
            tensor.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {
            name: tensor.data.copy()
            for name, tensor in self.named_parameters().items()
        }

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, tensor in self.named_parameters().items():
            if name not in arrays:
                raise ShapeError(f"state has no entry for '{name}'")
            if arrays[name].shape != tensor.shape:
                raise ShapeError(
                    f"state entry '{name}' has shape {arrays[name].shape}, "
                    f"parameter has {tensor.shape}"
                )
            tensor.data = arrays[name].astype(tensor.dtype, copy=True)

    def metadata(self) -> dict:
        return {"kind": self.kind}

    def forward(self, batch: np.ndarray) -> Tensor:
        raise NotImplementedError

    def loss(
        self, batch: np.ndarray, labels: np.ndarray, weights: ClassWeights
    ) -> Tensor:
        raise NotImplementedError

    def predict(self, batch: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def as_image_batch(batch: np.ndarray) -> Tensor:
    """[B, H, W] epochs become single-channel [B, 1, H, W] images."""
    batch = np.asarray(batch)
    if batch.ndim == 3:
        batch = batch[:, None, :, :]
    if batch.ndim != 4 or batch.shape[1] != 1:
        raise ShapeError(
            f"expected epochs of shape [B, H, W] or [B, 1, H, W], got "
            f"{batch.shape}"
        )
    return Tensor(batch.astype(np.float32))


class CnnModel(Module):
    """
    conv(12) -> pool -> conv(64) -> pool -> dense(2) -> sigmoid.
    """

    kind = "cnn"

    def __init__(
        self,
        input_shape: tuple[int, int],
        rng: np.random.Generator,
        filters: tuple[int, int] = DEFAULT_FILTERS,
        kernel_size: int = KERNEL_SIZE,
    ) -> None:
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.filters = tuple(filters)
        h, w = conv_pool_shape(*self.input_shape, kernel_size)
        h, w = conv_pool_shape(h, w, kernel_size)
        self.flat_features = filters[1] * h * w
        self.layers = {
            "conv1": Conv2dLayer(1, filters[0], rng, kernel_size),
            "conv2": Conv2dLayer(filters[0], filters[1], rng, kernel_size),
            "pool": MaxPool2dLayer(),
            "output": DenseLayer(self.flat_features, 2, rng),
        }

    def metadata(self) -> dict:
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "filters": list(self.filters),
        }

    def forward(self, batch: np.ndarray) -> Tensor:
        x = as_image_batch(batch)
        pool = self.layers["pool"]
        x = maxpool2d_forward(conv2d_forward(x, self.layers["conv1"]), pool)
        x = maxpool2d_forward(conv2d_forward(x, self.layers["conv2"]), pool)
        x = x.reshape(x.shape[0], -1)
        return dense_forward(x, self.layers["output"], Activation.sigmoid)

    def loss(
        self, batch: np.ndarray, labels: np.ndarray, weights: ClassWeights
    ) -> Tensor:
        return weighted_bce(
            self.forward(batch), one_hot(labels), weights, classes=labels
        )

    def predict(self, batch: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(batch).data.argmax(axis=1)
