"""
Graph baselines over the electrode graph: GCN, GCS and GIN stacks with a
global attention sum pool and a shared dense head.
"""

from enum import Enum
from typing import Iterable, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from neurospike.errors import ShapeError
from neurospike.layers import Activation, DenseLayer, Module, dense_forward
from neurospike.tensor import (
    ClassWeights,
    Tensor,
    init_uniform,
    init_zeros,
    no_grad,
    weighted_bce,
)
from neurospike.utils import warning

GCN_SIZES = (115, 28, 14, 3)
GIN_SIZES = (924, 462, 231)
GIN_MLP_HIDDEN = (256,) * 5
HEAD_HIDDEN = 32


class GnnVariant(str, Enum):
    gcn = "gcn"
    gcs = "gcs"
    gin = "gin"


class GraphSample(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    X: np.ndarray
    label: Literal[0, 1] = 0


class SharedAdjacency:
    """
    Symmetric, zero-diagonal edge weights in [0, 1] shared by all
    samples, with the normalised propagation matrices derived from it.
    """

    def __init__(
        self, A: np.ndarray, channels: Optional[Sequence[str]] = None
    ) -> None:
        A = np.array(A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ShapeError(f"adjacency must be square, got {A.shape}")
        A = np.clip((A + A.T) / 2.0, 0.0, 1.0)
        np.fill_diagonal(A, 0.0)
        A.setflags(write=False)
        self.A = A
        self.channels = list(channels) if channels else None

    @property
    def n_nodes(self) -> int:
        return self.A.shape[0]

    @property
    def D(self) -> np.ndarray:
        return np.diag(self.A.sum(axis=1))

    @property
    def A_hat(self) -> np.ndarray:
        return self.A + np.eye(self.n_nodes)

    @property
    def D_hat(self) -> np.ndarray:
        return np.diag(self.A_hat.sum(axis=1))

    def gcn_propagation(self) -> np.ndarray:
        """D_hat^-1/2 A_hat D_hat^-1/2; every D_hat entry is at least 1."""
        scale = 1.0 / np.sqrt(np.diag(self.D_hat))
        return scale[:, None] * self.A_hat * scale[None, :]

    def gcs_propagation(self) -> np.ndarray:
        """D^-1/2 A D^-1/2 with isolated nodes mapped to zero rows."""
        degree = np.diag(self.D)
        scale = np.zeros_like(degree)
        connected = degree > 0
        scale[connected] = 1.0 / np.sqrt(degree[connected])
        return scale[:, None] * self.A * scale[None, :]

    def neighbour_mask(self) -> np.ndarray:
        return (self.A > 0).astype(np.float64)

    def metadata(self) -> dict:
        return {"n_nodes": self.n_nodes, "channels": self.channels}


def adjacency_from_dataset(
    epochs: Iterable[np.ndarray], channels: Optional[Sequence[str]] = None
) -> SharedAdjacency:
    """
    A = |P| - I, where P is the Pearson correlation between channels over
    all time samples of all epochs concatenated.

    :param epochs: Arrays of shape [N, L] (or batches [B, N, L]).
    :param channels: Channel names stored with the adjacency.
    :return: The shared adjacency.
    """
    count = 0
    total = None
    products = None
    for epoch in epochs:
        epoch = np.asarray(epoch, dtype=np.float64)
        if epoch.ndim == 3:
            epoch = epoch.transpose(1, 0, 2).reshape(epoch.shape[1], -1)
        if total is None:
            total = np.zeros(epoch.shape[0])
            products = np.zeros((epoch.shape[0], epoch.shape[0]))
        total += epoch.sum(axis=1)
        products += epoch @ epoch.T
        count += epoch.shape[1]
    if total is None or count < 2:
        raise ShapeError("need at least two samples per channel")

    mean = total / count
    covariance = products / count - np.outer(mean, mean)
    variance = np.clip(np.diag(covariance), 0.0, None)
    flat = variance <= 1e-12 * max(1.0, float(variance.max()))
    if np.any(flat):
        names = (
            [channels[i] for i in np.flatnonzero(flat)]
            if channels
            else np.flatnonzero(flat).tolist()
        )
        warning(
            f"Zero-variance channel(s) {names}: correlation undefined, "
            f"their edges are set to 0."
        )
    std = np.sqrt(np.where(flat, 1.0, variance))
    P = covariance / np.outer(std, std)
    P[flat, :] = 0.0
    P[:, flat] = 0.0
    np.fill_diagonal(P, 1.0)
    return SharedAdjacency(np.abs(P) - np.eye(len(P)), channels)


def _as_nodes(X: Tensor) -> Tensor:
    if X.ndim not in (2, 3):
        raise ShapeError(
            f"node features must be [N, F] or [B, N, F], got {X.shape}"
        )
    return X


def gcn_layer(
    X: Tensor, adjacency: SharedAdjacency, W: Tensor, b: Tensor
) -> Tensor:
    """Y = D_hat^-1/2 A_hat D_hat^-1/2 X W + b"""
    X = _as_nodes(X)
    propagation = Tensor(adjacency.gcn_propagation(), dtype=X.dtype)
    return propagation.matmul(X).matmul(W) + b


def gcs_layer(
    X: Tensor,
    adjacency: SharedAdjacency,
    W1: Tensor,
    W2: Tensor,
    b: Tensor,
) -> Tensor:
    """Y = D^-1/2 A D^-1/2 X W1 + X W2 + b"""
    X = _as_nodes(X)
    propagation = Tensor(adjacency.gcs_propagation(), dtype=X.dtype)
    return propagation.matmul(X).matmul(W1) + X.matmul(W2) + b


class Mlp:
    """Dense stack with ReLU on hidden layers and a linear output."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator):
        self.dense = [
            DenseLayer(sizes[i], sizes[i + 1], rng)
            for i in range(len(sizes) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for index, layer in enumerate(self.dense):
            last = index == len(self.dense) - 1
            x = dense_forward(
                x, layer, Activation.linear if last else Activation.relu
            )
        return x

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for index, layer in enumerate(self.dense):
            for name, tensor in layer.named_parameters().items():
                named[f"dense{index}.{name}"] = tensor
        return named


def gin_layer(
    X: Tensor, adjacency: SharedAdjacency, eps: Tensor, mlp: Mlp
) -> Tensor:
    """Y_i = MLP((1 + eps) x_i + sum of x_j over neighbours j of i)"""
    X = _as_nodes(X)
    if mlp.dense and mlp.dense[0].W.shape[1] != X.shape[-1]:
        raise ShapeError(
            f"GIN MLP expects {mlp.dense[0].W.shape[1]} features, got "
            f"{X.shape[-1]}"
        )
    neighbours = Tensor(adjacency.neighbour_mask(), dtype=X.dtype)
    aggregated = X * (eps + 1.0) + neighbours.matmul(X)
    return mlp(aggregated)


def attention_sum_pool(X: Tensor, a: Tensor) -> Tensor:
    """
    alpha = softmax over nodes of X a; returns sum_i alpha_i X_i.

    :param X: Node features [N, F] or [B, N, F].
    :param a: Attention weights [F, 1].
    :return: Pooled features [F] or [B, F].
    """
    X = _as_nodes(X)
    if a.shape != (X.shape[-1], 1):
        raise ShapeError(
            f"attention vector must be [{X.shape[-1]}, 1], got {a.shape}"
        )
    alpha = X.matmul(a).softmax(axis=-2)
    return (alpha * X).sum(axis=-2)


class GcnLayer:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.W = init_uniform((n_in, n_out), n_in, rng)
        self.b = init_zeros((n_out,))

    def __call__(self, X: Tensor, adjacency: SharedAdjacency) -> Tensor:
        return gcn_layer(X, adjacency, self.W, self.b).relu()

    def named_parameters(self) -> dict[str, Tensor]:
        return {"W": self.W, "b": self.b}


class GcsLayer:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.W1 = init_uniform((n_in, n_out), n_in, rng)
        self.W2 = init_uniform((n_in, n_out), n_in, rng)
        self.b = init_zeros((n_out,))

    def __call__(self, X: Tensor, adjacency: SharedAdjacency) -> Tensor:
        return gcs_layer(X, adjacency, self.W1, self.W2, self.b).relu()

    def named_parameters(self) -> dict[str, Tensor]:
        return {"W1": self.W1, "W2": self.W2, "b": self.b}


class GinLayer:
    def __init__(
        self,
        n_in: int,
        n_out: int,
        rng: np.random.Generator,
        hidden: Sequence[int] = GIN_MLP_HIDDEN,
    ):
        self.eps = init_zeros((1,))
        self.mlp = Mlp([n_in, *hidden, n_out], rng)

    def __call__(self, X: Tensor, adjacency: SharedAdjacency) -> Tensor:
        return gin_layer(X, adjacency, self.eps, self.mlp)

    def named_parameters(self) -> dict[str, Tensor]:
        return {"eps": self.eps, **self.mlp.named_parameters()}


class AttentionPool:
    def __init__(self, n_features: int, rng: np.random.Generator):
        self.a = init_uniform((n_features, 1), n_features, rng)

    def __call__(self, X: Tensor) -> Tensor:
        return attention_sum_pool(X, self.a)

    def named_parameters(self) -> dict[str, Tensor]:
        return {"a": self.a}


_LAYER_TYPES = {
    GnnVariant.gcn: GcnLayer,
    GnnVariant.gcs: GcsLayer,
    GnnVariant.gin: GinLayer,
}


class GnnModel(Module):
    """
    Graph layers -> attention sum pool -> dense + ReLU -> dense(1) +
    sigmoid. Only the graph layers differ between variants.
    """

    def __init__(
        self,
        variant: GnnVariant,
        n_features: int,
        adjacency: SharedAdjacency,
        rng: np.random.Generator,
        sizes: Optional[Sequence[int]] = None,
        hidden: int = HEAD_HIDDEN,
        mlp_hidden: Sequence[int] = GIN_MLP_HIDDEN,
    ) -> None:
        super().__init__()
        self.variant = GnnVariant(variant)
        self.kind = self.variant.value
        self.adjacency = adjacency
        self.n_features = n_features
        if sizes is None:
            sizes = GIN_SIZES if self.variant == GnnVariant.gin else GCN_SIZES
        self.sizes = tuple(sizes)
        self.hidden = hidden
        self.mlp_hidden = tuple(mlp_hidden)

        layer_type = _LAYER_TYPES[self.variant]
        widths = [n_features, *self.sizes]
        for index in range(len(self.sizes)):
            if self.variant == GnnVariant.gin:
                layer = GinLayer(
                    widths[index], widths[index + 1], rng, mlp_hidden
                )
            else:
                layer = layer_type(widths[index], widths[index + 1], rng)
            self.layers[f"graph{index}"] = layer
        self.layers["attention"] = AttentionPool(self.sizes[-1], rng)
        self.layers["hidden"] = DenseLayer(self.sizes[-1], hidden, rng)
        self.layers["output"] = DenseLayer(hidden, 1, rng)

    @property
    def graph_layers(self) -> list:
        return [
            self.layers[f"graph{index}"] for index in range(len(self.sizes))
        ]

    def metadata(self) -> dict:
        return {
            "kind": self.kind,
            "n_features": self.n_features,
            "sizes": list(self.sizes),
            "hidden": self.hidden,
            "mlp_hidden": list(self.mlp_hidden),
            "adjacency": self.adjacency.A.tolist(),
            "channels": self.adjacency.channels,
        }

    def forward(self, batch: np.ndarray) -> Tensor:
        return gnn_forward(batch, self.adjacency, self)

    def loss(
        self, batch: np.ndarray, labels: np.ndarray, weights: ClassWeights
    ) -> Tensor:
        target = np.asarray(labels, dtype=np.float32)[:, None]
        return weighted_bce(self.forward(batch), target, weights)

    def predict(self, batch: np.ndarray) -> np.ndarray:
        with no_grad():
            return (self.forward(batch).data[:, 0] > 0.5).astype(np.int64)


def gnn_forward(
    sample, adjacency: SharedAdjacency, model: GnnModel
) -> Tensor:
    """
    :param sample: A GraphSample, one node matrix [N, F] or a batch
        [B, N, F].
    :return: Probabilities of class 1, shape [B, 1].
    """
    X = sample.X if isinstance(sample, GraphSample) else sample
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.shape[1] != adjacency.n_nodes or X.shape[2] != model.n_features:
        raise ShapeError(
            f"expected node features [B, {adjacency.n_nodes}, "
            f"{model.n_features}], got {list(X.shape)}"
        )
    dtype = model.layers["output"].W.dtype
    h = Tensor(X.astype(dtype))
    for layer in model.graph_layers:
        h = layer(h, adjacency)
    pooled = model.layers["attention"](h)
    hidden = dense_forward(pooled, model.layers["hidden"], Activation.relu)
    return dense_forward(hidden, model.layers["output"], Activation.sigmoid)
