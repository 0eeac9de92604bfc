"""Mini-batch SGD on the logistic loss, with epoch checkpointing.

The loss for a label y in {0, 1} and scalar output f is
``log(1 + exp(f)) - y * f`` (binary cross-entropy on sigmoid(f)); its
derivative w.r.t. f is ``sigmoid(f) - y``. Training shuffles examples
every epoch with the run's seeded generator and is a deterministic
function of (network, data, config).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import AugmentConfig, Dataset, augment, example_rng
from .errors import InputError
from .network import Checkpoint, Network

DEFAULT_EPOCH_SCHEDULE = (0, 1, 3, 10, 30, 100, 200)


@dataclass(frozen=True)
class TrainConfig:
    """SGD hyperparameters. Defaults mirror the standard training stack:
    learning rate 0.01, no momentum, batch size 32."""

    epochs: int
    learning_rate: float = 0.01
    momentum: float = 0.0
    batch_size: int = 32
    checkpoint_epochs: tuple = None
    loss: str = "logistic"
    seed: int = 0
    augment: AugmentConfig | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise InputError("epochs must be >= 0")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if self.loss != "logistic":
            raise InputError(f"unsupported loss {self.loss!r}")
        eps = self.checkpoint_epochs
        if eps is None:
            eps = tuple(e for e in DEFAULT_EPOCH_SCHEDULE if e <= self.epochs)
        eps = tuple(sorted(set(int(e) for e in eps) | {0}))
        if eps and (eps[0] < 0 or eps[-1] > self.epochs):
            raise InputError(
                f"checkpoint epochs {eps} must lie in [0, {self.epochs}]"
            )
        object.__setattr__(self, "checkpoint_epochs", eps)

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=seed)


def sigmoid(f: np.ndarray) -> np.ndarray:
    out = np.empty_like(f)
    pos = f >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-f[pos]))
    ef = np.exp(f[~pos])
    out[~pos] = ef / (1.0 + ef)
    return out


def mean_logistic_loss(net: Network, data: Dataset) -> float:
    f = net.forward_batch(data.images)
    y = data.labels
    return float(np.mean(np.logaddexp(0.0, f) - y * f))


def _check_labels(data: Dataset):
    if len(data.labels) == 0:
        raise InputError("training dataset is empty")
    bad = set(np.unique(data.labels)) - {0, 1}
    if bad:
        raise InputError(f"labels must be in {{0, 1}}; found {sorted(bad)}")


def train_sgd(net: Network, data: Dataset, cfg: TrainConfig) -> list:
    """Train in place; return a checkpoint for every epoch in the schedule.

    Epoch 0 is the untrained network. When augmentation is configured,
    each example is replaced by one augmented draw per epoch, with draws
    keyed by (seed, epoch, original example index) so the result does not
    depend on shuffle order.
    """
    _check_labels(data)
    rng = np.random.default_rng(cfg.seed)
    n = len(data.labels)
    y = data.labels.astype(np.float64)
    arch = net.arch
    checkpoints = []

    def emit(epoch):
        checkpoints.append(
            Checkpoint(epoch=epoch, params=net.get_params(), arch=arch, seed=cfg.seed)
        )

    if 0 in cfg.checkpoint_epochs:
        emit(0)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        if cfg.augment is not None:
            images = np.stack(
                [
                    augment(data.images[i], example_rng(cfg.seed, epoch, i), cfg.augment)
                    for i in range(n)
                ]
            )
        else:
            images = data.images
        velocity = None
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            X = images[idx]
            f = net.forward_batch(X)
            upstream = ((sigmoid(f) - y[idx]) / len(idx))[:, None]
            g = net.backward_mean(upstream)
            if cfg.momentum != 0.0:
                if velocity is None:
                    velocity = np.zeros_like(g)
                velocity = cfg.momentum * velocity - cfg.learning_rate * g
                net.set_params(net.get_params() + velocity)
            else:
                net.set_params(net.get_params() - cfg.learning_rate * g)
        if epoch in cfg.checkpoint_epochs:
            emit(epoch)
    return checkpoints
