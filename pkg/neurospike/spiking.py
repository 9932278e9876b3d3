"""
Leaky integrate-and-fire layers trained with a fast-sigmoid surrogate
gradient, and the convolutional spiking network built from them.
"""

from typing import Optional, Union

import numpy as np

from neurospike.errors import DomainError, NumericError, ShapeError
from neurospike.layers import (
    DEFAULT_FILTERS,
    KERNEL_SIZE,
    Activation,
    Conv2dLayer,
    DenseLayer,
    MaxPool2dLayer,
    Module,
    as_image_batch,
    conv2d_forward,
    conv_pool_shape,
    dense_forward,
    maxpool2d_forward,
    one_hot,
)
from neurospike.tensor import ClassWeights, Tensor, no_grad, weighted_bce

STEPS = 25
BETA = 0.5
THRESHOLD = 0.5
SLOPE = 0.25


def surrogate_derivative(
    u: Union[np.ndarray, float], threshold: float, slope: float
) -> np.ndarray:
    """dS/dU = 1 / (k |U - theta| + 1)^2"""
    return 1.0 / (slope * np.abs(np.asarray(u) - threshold) + 1.0) ** 2


def surrogate_spike(
    u: Tensor, threshold: float, slope: float, smooth: bool = False
) -> Tensor:
    """
    Heaviside spike with a fast-sigmoid backward pass.

    :param u: Membrane potentials.
    :param threshold: Spiking threshold.
    :param slope: Surrogate slope k.
    :param smooth: Emit the smooth surrogate (U - theta) / (1 + k|U -
        theta|) in the forward pass too, so finite differences see the
        same function the backward pass differentiates.
    :return: Spikes (0/1) or their smooth stand-in.
    """
    centred = u.data - threshold
    if smooth:
        value = centred / (1.0 + slope * np.abs(centred))
    else:
        value = (centred > 0).astype(u.dtype)
    out = Tensor.from_op(value.astype(u.dtype), (u,), "spike")
    if out.requires_grad:

        def _backward():
            u.accumulate(
                out.grad * surrogate_derivative(u.data, threshold, slope)
            )

        out._backward = _backward
    return out


class LifLayer:
    """
    A tensor of LIF neurons. The membrane takes the shape of the first
    input it receives and is cleared by :meth:`reset`.
    """

    def __init__(
        self,
        beta: float = BETA,
        threshold: float = THRESHOLD,
        slope: float = SLOPE,
        smooth: bool = False,
    ) -> None:
        if not 0 < beta <= 1:
            raise DomainError(f"beta must lie in (0, 1], got {beta}")
        if threshold <= 0 or slope <= 0:
            raise DomainError("threshold and slope must be positive")
        self.beta = beta
        self.threshold = threshold
        self.slope = slope
        self.smooth = smooth
        self.membrane: Optional[Tensor] = None

    def reset(self) -> None:
        self.membrane = None

    def named_parameters(self) -> dict[str, Tensor]:
        return {}


def lif_step(
    input_current: Tensor, layer: LifLayer
) -> tuple[Tensor, Tensor]:
    """
    Advance the layer by one step: U' = beta U + I, spike where U' > theta,
    then reset by subtracting theta from neurons that fired.

    :return: The spikes and the updated membrane.
    """
    if layer.membrane is None:
        layer.membrane = Tensor(
            np.zeros(input_current.shape, dtype=input_current.dtype)
        )
    if layer.membrane.shape != input_current.shape:
        raise ShapeError(
            f"input current {input_current.shape} does not match membrane "
            f"{layer.membrane.shape}"
        )
    potential = layer.membrane * layer.beta + input_current
    if not np.all(np.isfinite(potential.data)):
        raise NumericError("non-finite membrane potential")
    spikes = surrogate_spike(
        potential, layer.threshold, layer.slope, layer.smooth
    )
    layer.membrane = potential - spikes * layer.threshold
    return spikes, layer.membrane


class CsnnModel(Module):
    """
    Two conv-spiking blocks (conv -> pool -> LIF) and a dense -> LIF
    output block with one neuron per class.
    """

    kind = "csnn"

    def __init__(
        self,
        input_shape: tuple[int, int],
        rng: np.random.Generator,
        filters: tuple[int, int] = DEFAULT_FILTERS,
        kernel_size: int = KERNEL_SIZE,
        steps: int = STEPS,
        beta: float = BETA,
        threshold: float = THRESHOLD,
        slope: float = SLOPE,
        smooth: bool = False,
    ) -> None:
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.filters = tuple(filters)
        self.steps = steps
        h, w = conv_pool_shape(*self.input_shape, kernel_size)
        h, w = conv_pool_shape(h, w, kernel_size)
        self.flat_features = filters[1] * h * w

        def lif():
            return LifLayer(beta, threshold, slope, smooth)

        self.layers = {
            "conv1": Conv2dLayer(1, filters[0], rng, kernel_size),
            "lif1": lif(),
            "conv2": Conv2dLayer(filters[0], filters[1], rng, kernel_size),
            "lif2": lif(),
            "pool": MaxPool2dLayer(),
            "output": DenseLayer(self.flat_features, 2, rng),
            "lif_out": lif(),
        }

    @property
    def lif_layers(self) -> list[LifLayer]:
        return [self.layers[name] for name in ("lif1", "lif2", "lif_out")]

    def reset(self) -> None:
        for layer in self.lif_layers:
            layer.reset()

    def metadata(self) -> dict:
        lif = self.layers["lif_out"]
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "filters": list(self.filters),
            "steps": self.steps,
            "beta": lif.beta,
            "threshold": lif.threshold,
            "slope": lif.slope,
        }

    def forward(self, batch: np.ndarray) -> Tensor:
        rates, _ = csnn_forward(batch, self)
        return rates

    def loss(
        self, batch: np.ndarray, labels: np.ndarray, weights: ClassWeights
    ) -> Tensor:
        return weighted_bce(
            self.forward(batch), one_hot(labels), weights, classes=labels
        )

    def predict(self, batch: np.ndarray) -> np.ndarray:
        with no_grad():
            _, counts = csnn_forward(batch, self)
        return counts.argmax(axis=1)


def csnn_forward(
    epoch: np.ndarray, model: CsnnModel
) -> tuple[Tensor, np.ndarray]:
    """
    Present the same input at every step and count output spikes.

    :param epoch: One epoch [H, W] or a batch [B, H, W] / [B, 1, H, W];
        floating-point or 0/1 spike trains alike.
    :param model: The network; its membranes are zeroed first.
    :return: Rates (counts / steps) as a [B, 2] tensor and the raw
        spike counts.
    """
    epoch = np.asarray(epoch)
    if epoch.ndim == 2:
        epoch = epoch[None]
    x = as_image_batch(epoch)
    if tuple(x.shape[2:]) != model.input_shape:
        raise ShapeError(
            f"CSNN built for {model.input_shape} inputs, got "
            f"{tuple(x.shape[2:])}"
        )
    model.reset()
    layers = model.layers
    pool = layers["pool"]

    # the input is static, so the first convolution is shared by all steps
    current1 = maxpool2d_forward(conv2d_forward(x, layers["conv1"]), pool)
    counts = None
    for _ in range(model.steps):
        spikes1, _ = lif_step(current1, layers["lif1"])
        current2 = maxpool2d_forward(
            conv2d_forward(spikes1, layers["conv2"]), pool
        )
        spikes2, _ = lif_step(current2, layers["lif2"])
        flat = spikes2.reshape(spikes2.shape[0], -1)
        current3 = dense_forward(flat, layers["output"], Activation.linear)
        spikes3, _ = lif_step(current3, layers["lif_out"])
        counts = spikes3 if counts is None else counts + spikes3

    rates = counts * (1.0 / model.steps)
    if layers["lif_out"].smooth:
        return rates, counts.data.copy()
    return rates, np.rint(counts.data).astype(np.int64)
