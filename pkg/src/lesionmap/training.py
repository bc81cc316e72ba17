"""Class-weighted training of the CNN: loss, optimizer, and the epoch loop.

Class imbalance is handled by weighting each sample's target-class loss
terms with the inverse-frequency weight N / (K * N_c). The classifier head
is one-vs-all: sigmoid scores with binary cross-entropy per class, argmax
for prediction. Training is fully deterministic given (seed, data, config).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import DimensionError
from .imaging import HORIZONTAL, VERTICAL, Image, flip, normalize
from .model import ModelGraph

SCORE_EPSILON = 1e-7


@dataclass
class ClassWeights:
    """One positive weight per class; all ones when classes are balanced."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if np.any(self.weights <= 0):
            raise ValueError(f"class weights must be positive, got {self.weights}")


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 16
    learning_rate: float = 0.01
    momentum: float = 0.9
    optimizer: str = "sgd"
    seed: int = 0
    augment_flips: bool = True
    norm_mean: float = 0.5
    norm_std: float = 0.5

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.optimizer != "sgd":
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    accuracy: float


def class_weights(counts: Sequence[int]) -> ClassWeights:
    """Inverse-frequency weights w_c = N / (K * N_c)."""
    counts = np.asarray(counts, dtype=np.int64)
    if np.any(counts < 1):
        raise ValueError(f"every class needs at least one sample, got counts {counts}")
    total = counts.sum()
    return ClassWeights(weights=total / (len(counts) * counts.astype(np.float64)))


def weighted_loss(
    scores: Tensor, target: int, w: ClassWeights, tape: Tape | None = None
) -> Tensor:
    """One-vs-all binary cross-entropy with the target class's terms reweighted.

    Scores are clamped to [eps, 1-eps] before the logs; gradients are zero
    where the clamp binds.
    """
    k = scores.shape[0] if scores.data.ndim == 1 else 0
    if scores.data.ndim != 1:
        raise DimensionError(f"scores must be a vector, got {scores.shape}")
    if not 0 <= target < k:
        raise ValueError(f"target {target} out of range for {k} classes")
    if w.weights.shape != (k,):
        raise DimensionError(f"{len(w.weights)} class weights for {k} scores")

    s = np.clip(scores.data, SCORE_EPSILON, 1.0 - SCORE_EPSILON)
    onehot = np.zeros(k)
    onehot[target] = 1.0
    multiplier = np.ones(k)
    multiplier[target] = w.weights[target]
    terms = multiplier * (onehot * np.log(s) + (1.0 - onehot) * np.log(1.0 - s))
    out = Tensor(-terms.sum())

    if tape is not None:
        unclamped = (scores.data > SCORE_EPSILON) & (scores.data < 1.0 - SCORE_EPSILON)

        def bwd(gout: np.ndarray):
            grad = -multiplier * (onehot / s - (1.0 - onehot) / (1.0 - s))
            return (float(gout) * grad * unclamped,)

        tape.record(out, (scores,), bwd)
    return out


def sgd_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    velocity: dict[str, np.ndarray],
) -> None:
    """v <- momentum * v + g; p <- p - lr * v. Mutates params and velocity."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    for name, grad in grads.items():
        param = params[name]
        if grad.shape != param.shape:
            raise DimensionError(f"gradient for {name} has shape {grad.shape}, parameter {param.shape}")
        v = velocity.get(name)
        v = grad.copy() if v is None else momentum * v + grad
        velocity[name] = v
        params[name] = Tensor(param.data - lr * v)


def train(
    model: ModelGraph,
    dataset: Sequence[tuple[Image, int]],
    config: TrainConfig = TrainConfig(),
) -> tuple[ModelGraph, list[EpochStats]]:
    """Seeded epoch loop: shuffle, flip-augment, accumulate batch gradients, step.

    `dataset` pairs raw images (already at the model's input size) with class
    labels. Every class must be present; weights come from the label counts.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    k = model.num_classes
    counts = np.bincount([label for _, label in dataset], minlength=k)
    if np.any(counts == 0):
        missing = [c for c in range(k) if counts[c] == 0]
        raise ValueError(f"classes {missing} have no training samples")
    weights = class_weights(counts)

    velocity: dict[str, np.ndarray] = {}
    log: list[EpochStats] = []
    for epoch in range(config.epochs):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, epoch])))
        order = rng.permutation(len(dataset))
        loss_sum = 0.0
        correct = 0
        batch_grads: dict[str, np.ndarray] = {}
        batch_count = 0

        def apply_step():
            nonlocal batch_grads, batch_count
            if batch_count == 0:
                return
            mean_grads = {name: g / batch_count for name, g in batch_grads.items()}
            sgd_step(model.params, mean_grads, config.learning_rate, config.momentum, velocity)
            batch_grads = {}
            batch_count = 0

        for idx in order:
            img, label = dataset[idx]
            if config.augment_flips:
                if rng.random() < 0.5:
                    img = flip(img, HORIZONTAL)
                if rng.random() < 0.5:
                    img = flip(img, VERTICAL)
            dropout_seed = int(rng.integers(0, 2**63))
            x = normalize(img, config.norm_mean, config.norm_std)

            run = model.forward(x, train_mode=True, seed=dropout_seed)
            loss = weighted_loss(run.scores, label, weights, tape=run.tape)
            loss_sum += loss.item()
            if int(np.argmax(run.scores.data)) == label:
                correct += 1

            grads = ad.backward(run.tape, Tensor(1.0))
            for name, param in model.params.items():
                g = grads[param]
                if name in batch_grads:
                    batch_grads[name] += g
                else:
                    batch_grads[name] = g.copy()
            batch_count += 1
            if batch_count == config.batch_size:
                apply_step()
        apply_step()

        log.append(
            EpochStats(
                epoch=epoch,
                mean_loss=loss_sum / len(dataset),
                accuracy=correct / len(dataset),
            )
        )
    return model, log


def write_epoch_log(path, log: list[EpochStats]) -> None:
    """Epoch log as CSV: epoch,mean_loss,train_accuracy."""
    from .image_io import atomic_write_bytes

    lines = ["epoch,mean_loss,train_accuracy"]
    lines += [f"{e.epoch},{e.mean_loss:.6f},{e.accuracy:.6f}" for e in log]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))
