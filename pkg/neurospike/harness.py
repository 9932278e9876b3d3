"""
Cross-validated training and evaluation of the five classifiers, and
the model comparison / delta-modulation threshold sweep built on it.
"""

from concurrent.futures import ProcessPoolExecutor
from enum import Enum
from functools import partial
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict
from sklearn.model_selection import StratifiedKFold

from neurospike import __version__
from neurospike.config import ModelName, TrainConfig
from neurospike.eeg import delta_modulate
from neurospike.errors import (
    DomainError,
    FormatError,
    NumericError,
    ShapeError,
)
from neurospike.graph import (
    GnnModel,
    GnnVariant,
    SharedAdjacency,
    adjacency_from_dataset,
)
from neurospike.layers import CnnModel, Module
from neurospike.spiking import CsnnModel
from neurospike.stats import paired_ttest, welch_ttest
from neurospike.storage import load_checkpoint
from neurospike.tensor import AdamState, ClassWeights, adam_step, no_grad
from neurospike.utils import info, rng

METRICS = ("acc", "tpr", "tnr")
EVAL_BATCH = 64


class SignificanceTest(str, Enum):
    welch = "welch"
    paired = "paired"


class Confusion(BaseModel):
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


class FoldResult(BaseModel):
    fold: int = 0
    acc: float
    tpr: float
    tnr: float
    epochs: int = 0
    confusion: Confusion


class MetricSummary(BaseModel):
    acc: float
    tpr: float
    tnr: float
    epochs: float


class ModelSummary(BaseModel):
    name: str
    threshold: Optional[float] = None
    folds: list[FoldResult]
    mean: MetricSummary
    sd: MetricSummary
    p_vs_ref: Optional[dict[str, float]] = None


class ExperimentReport(BaseModel):
    kind: str = "comparison"
    test: SignificanceTest = SignificanceTest.welch
    reference: str
    models: list[ModelSummary]
    config: dict
    seed: int
    dataset_hash: str = ""
    version: str = __version__

    def summary(self, name: str) -> ModelSummary:
        for model in self.models:
            if model.name == name:
                return model
        raise KeyError(name)


class TrainingResult(BaseModel):
    epochs: int
    losses: list[float]


class FoldOutcome(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    result: FoldResult
    state: dict[str, np.ndarray]
    metadata: dict


# -- data splitting ----------------------------------------------------------


def stratified_kfold(
    labels: np.ndarray, k: int = 10, seed: int = 0
) -> list[tuple[np.ndarray, np.ndarray]]:
    """
    Shuffled stratified (train, test) index splits.

    :raises DomainError: When a class has fewer than ``k`` samples.
    """
    labels = np.asarray(labels, dtype=int)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2 or counts.min() < k:
        raise DomainError(
            f"every class needs at least {k} samples for {k}-fold "
            f"stratification, got counts "
            f"{dict(zip(classes.tolist(), counts.tolist()))}"
        )
    state = int(rng(seed, "folds").integers(0, 2**31 - 1))
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=state)
    return list(splitter.split(np.zeros(len(labels)), labels))


def class_weights(labels: np.ndarray) -> ClassWeights:
    """w_i = N / (2 N_i)"""
    labels = np.asarray(labels, dtype=int)
    n1 = int((labels == 1).sum())
    n0 = int((labels == 0).sum())
    if n0 == 0 or n1 == 0:
        raise DomainError(
            f"class weights need both classes, got {n0} and {n1} samples"
        )
    total = labels.size
    return ClassWeights(w0=total / (2 * n0), w1=total / (2 * n1))


# -- training ----------------------------------------------------------------


class EarlyStopping:
    """
    Stop once the monitored loss has not improved by more than
    ``min_delta`` for ``patience`` epochs, remembering the best state.
    """

    def __init__(self, patience: int = 50, min_delta: float = 1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.epoch = 0
        self.best_epoch = 0
        self.best_state: Optional[dict] = None
        self.wait = 0

    def step(
        self, loss: float, snapshot: Optional[Callable[[], dict]] = None
    ) -> bool:
        """Record one epoch's loss and return True to stop."""
        self.epoch += 1
        if loss < self.best - self.min_delta:
            self.best = loss
            self.best_epoch = self.epoch
            self.wait = 0
            if snapshot is not None:
                self.best_state = snapshot()
            return False
        self.wait += 1
        return self.wait >= self.patience


def train_model(
    model: Module,
    data: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig = TrainConfig(),
    weights: ClassWeights = ClassWeights(),
    fold: int = 0,
) -> TrainingResult:
    """
    Mini-batch Adam on the class-weighted loss with early stopping on the
    training loss. The best weights are loaded back into ``model``.

    :raises NumericError: When a batch loss is not finite.
    """
    if len(data) == 0:
        raise ShapeError("cannot train on an empty split")
    params = model.parameters()
    state = AdamState(
        lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps
    )
    stopper = EarlyStopping(config.patience, config.min_delta)
    losses = []
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        shuffle = rng(config.seed, "shuffle", str(fold), str(epoch))
        order = shuffle.permutation(len(data))
        total = 0.0
        for start in range(0, len(data), config.batch_size):
            index = order[start : start + config.batch_size]
            model.zero_grad()
            loss = model.loss(data[index], labels[index], weights)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} (fold {fold})"
                )
            loss.backward()
            adam_step(params, state)
            total += value * len(index)
        losses.append(total / len(data))
        if stopper.step(losses[-1], model.state):
            break
    if stopper.best_state is not None:
        model.load_state(stopper.best_state)
    return TrainingResult(epochs=epoch, losses=losses)


def predict(model: Module, data: np.ndarray) -> np.ndarray:
    with no_grad():
        return np.concatenate([
            model.predict(data[start : start + EVAL_BATCH])
            for start in range(0, len(data), EVAL_BATCH)
        ])


def fold_metrics(
    predictions: np.ndarray,
    labels: np.ndarray,
    fold: int = 0,
    epochs: int = 0,
) -> FoldResult:
    """Confusion counts and Acc/TPR/TNR percentages; empty rates are 0."""
    predictions = np.asarray(predictions, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise ShapeError("cannot evaluate on an empty split")
    confusion = Confusion(
        tp=int(((predictions == 1) & (labels == 1)).sum()),
        tn=int(((predictions == 0) & (labels == 0)).sum()),
        fp=int(((predictions == 1) & (labels == 0)).sum()),
        fn=int(((predictions == 0) & (labels == 1)).sum()),
    )
    positives = confusion.tp + confusion.fn
    negatives = confusion.tn + confusion.fp
    return FoldResult(
        fold=fold,
        acc=100.0 * (confusion.tp + confusion.tn) / confusion.total,
        tpr=100.0 * confusion.tp / positives if positives else 0.0,
        tnr=100.0 * confusion.tn / negatives if negatives else 0.0,
        epochs=epochs,
        confusion=confusion,
    )


def evaluate(
    model: Module, data: np.ndarray, labels: np.ndarray, fold: int = 0
) -> FoldResult:
    if len(data) == 0:
        raise ShapeError("cannot evaluate on an empty split")
    return fold_metrics(predict(model, data), labels, fold)


def build_model(
    name: ModelName,
    data: np.ndarray,
    config: TrainConfig = TrainConfig(),
    channels: Optional[Sequence[str]] = None,
) -> Module:
    """
    A freshly initialised model for epochs shaped like ``data[0]``.

    Initial weights depend on the seed and model name only, so every fold
    starts from the same point. Graph models derive their adjacency from
    ``data``.
    """
    name = ModelName(name)
    generator = rng(config.seed, "init", name.value)
    shape = tuple(data.shape[1:])
    if name == ModelName.csnn:
        return CsnnModel(
            shape,
            generator,
            filters=config.filters,
            steps=config.steps,
            beta=config.beta,
            threshold=config.threshold,
            slope=config.slope,
        )
    if name == ModelName.cnn:
        return CnnModel(shape, generator, filters=config.filters)
    adjacency = adjacency_from_dataset(data, channels)
    return GnnModel(GnnVariant(name.value), shape[-1], adjacency, generator)


def restore_model(directory: Path) -> Module:
    """
    Rebuild the model a checkpoint was saved from and load its weights.

    :raises FormatError: When the metadata does not describe a model.
    """
    metadata, arrays = load_checkpoint(directory)
    generator = rng(0, "restore")
    try:
        name = ModelName(metadata["kind"])
        if name == ModelName.csnn:
            model = CsnnModel(
                tuple(metadata["input_shape"]),
                generator,
                filters=tuple(metadata["filters"]),
                steps=metadata["steps"],
                beta=metadata["beta"],
                threshold=metadata["threshold"],
                slope=metadata["slope"],
            )
        elif name == ModelName.cnn:
            model = CnnModel(
                tuple(metadata["input_shape"]),
                generator,
                filters=tuple(metadata["filters"]),
            )
        else:
            adjacency = SharedAdjacency(
                np.asarray(metadata["adjacency"]), metadata.get("channels")
            )
            model = GnnModel(
                GnnVariant(name.value),
                metadata["n_features"],
                adjacency,
                generator,
                sizes=metadata["sizes"],
                hidden=metadata["hidden"],
                mlp_hidden=metadata["mlp_hidden"],
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(
            f"'{directory}' does not describe a model: {exc}"
        ) from exc
    model.load_state(arrays)
    return model


def run_fold(
    fold: int,
    name: ModelName,
    data: np.ndarray,
    labels: np.ndarray,
    splits: Sequence[tuple[np.ndarray, np.ndarray]],
    config: TrainConfig,
    weights: ClassWeights,
    channels: Optional[Sequence[str]] = None,
) -> FoldOutcome:
    train_index, test_index = splits[fold]
    model = build_model(name, data[train_index], config, channels)
    training = train_model(
        model, data[train_index], labels[train_index], config, weights, fold
    )
    result = evaluate(model, data[test_index], labels[test_index], fold)
    result.epochs = training.epochs
    info(
        f"{ModelName(name).value} fold {fold + 1}/{len(splits)}: "
        f"acc {result.acc:.2f}% tpr {result.tpr:.2f}% "
        f"tnr {result.tnr:.2f}% after {training.epochs} epochs"
    )
    return FoldOutcome(
        result=result, state=model.state(), metadata=model.metadata()
    )


def run_folds(
    name: ModelName,
    data: np.ndarray,
    labels: np.ndarray,
    splits: Sequence[tuple[np.ndarray, np.ndarray]],
    config: TrainConfig,
    weights: ClassWeights,
    channels: Optional[Sequence[str]] = None,
) -> list[FoldOutcome]:
    """Every fold of one model; folds run in worker processes if jobs > 1."""
    task = partial(
        run_fold,
        name=name,
        data=data,
        labels=labels,
        splits=splits,
        config=config,
        weights=weights,
        channels=channels,
    )
    folds = range(len(splits))
    if config.jobs == 1:
        return [task(fold) for fold in folds]
    with ProcessPoolExecutor(max_workers=config.jobs) as executor:
        return list(executor.map(task, folds))


# -- reports -----------------------------------------------------------------


def summarise(
    name: str, folds: Sequence[FoldResult], threshold: Optional[float] = None
) -> ModelSummary:
    """Mean and sample SD (n - 1) of every metric over the folds."""
    table = {
        metric: np.array([getattr(fold, metric) for fold in folds], float)
        for metric in (*METRICS, "epochs")
    }
    ddof = 1 if len(folds) > 1 else 0
    return ModelSummary(
        name=name,
        threshold=threshold,
        folds=list(folds),
        mean=MetricSummary(**{k: v.mean() for k, v in table.items()}),
        sd=MetricSummary(**{k: v.std(ddof=ddof) for k, v in table.items()}),
    )


def compare_to(
    summary: ModelSummary,
    reference: ModelSummary,
    test: SignificanceTest = SignificanceTest.welch,
) -> dict[str, float]:
    """Two-tailed p-value per metric of ``summary`` against ``reference``."""
    ttest = paired_ttest if test == SignificanceTest.paired else welch_ttest
    return {
        metric: ttest(
            [getattr(fold, metric) for fold in reference.folds],
            [getattr(fold, metric) for fold in summary.folds],
        ).p
        for metric in METRICS
    }


def run_comparison(
    data: np.ndarray,
    labels: np.ndarray,
    models: Sequence[ModelName],
    config: TrainConfig = TrainConfig(),
    channels: Optional[Sequence[str]] = None,
    dataset_hash: str = "",
    on_fold: Optional[Callable[[ModelName, list[FoldOutcome]], None]] = None,
) -> ExperimentReport:
    """
    Cross-validate each model on the same folds; p-values compare every
    model with the first one.
    """
    if not models:
        raise DomainError("run_comparison needs at least one model")
    labels = np.asarray(labels, dtype=int)
    splits = stratified_kfold(labels, config.folds, config.seed)
    weights = class_weights(labels)
    test = SignificanceTest.paired if config.paired else SignificanceTest.welch
    summaries = []
    for name in models:
        outcomes = run_folds(
            name, data, labels, splits, config, weights, channels
        )
        if on_fold is not None:
            on_fold(name, outcomes)
        summaries.append(
            summarise(
                ModelName(name).value, [o.result for o in outcomes]
            )
        )
    reference = summaries[0]
    for summary in summaries[1:]:
        summary.p_vs_ref = compare_to(summary, reference, test)
    return ExperimentReport(
        kind="comparison",
        test=test,
        reference=reference.name,
        models=summaries,
        config=config.model_dump(mode="json"),
        seed=config.seed,
        dataset_hash=dataset_hash,
    )


def encode_dataset(
    data: np.ndarray, threshold: float, lengths: Optional[np.ndarray] = None
) -> np.ndarray:
    """Delta-modulate every epoch of a normalised dataset."""
    if lengths is None:
        lengths = [None] * len(data)
    return np.stack([
        delta_modulate(epoch, threshold, length).data
        for epoch, length in zip(data, lengths)
    ])


def run_threshold_sweep(
    data: np.ndarray,
    labels: np.ndarray,
    thresholds: Sequence[float],
    config: TrainConfig = TrainConfig(),
    lengths: Optional[np.ndarray] = None,
    dataset_hash: str = "",
) -> ExperimentReport:
    """
    Encode the normalised epochs at each threshold and cross-validate a
    CSNN on the spike trains. p-values compare every threshold with the
    one of best mean accuracy.
    """
    if not thresholds:
        raise DomainError("run_threshold_sweep needs at least one threshold")
    labels = np.asarray(labels, dtype=int)
    splits = stratified_kfold(labels, config.folds, config.seed)
    weights = class_weights(labels)
    test = SignificanceTest.paired if config.paired else SignificanceTest.welch
    summaries = []
    for threshold in thresholds:
        info(f"Delta modulation threshold {threshold:g}")
        spikes = encode_dataset(data, threshold, lengths)
        outcomes = run_folds(
            ModelName.csnn, spikes, labels, splits, config, weights
        )
        summaries.append(
            summarise(
                f"{threshold:g}",
                [o.result for o in outcomes],
                threshold=threshold,
            )
        )
    best = max(summaries, key=lambda summary: summary.mean.acc)
    for summary in summaries:
        if summary is not best:
            summary.p_vs_ref = compare_to(summary, best, test)
    return ExperimentReport(
        kind="sweep",
        test=test,
        reference=best.name,
        models=summaries,
        config=config.model_dump(mode="json"),
        seed=config.seed,
        dataset_hash=dataset_hash,
    )
