"""Adam optimizer and the mini-batch training loop.

Training minimizes mean logloss plus an L2 penalty. The penalty gradient is
scaled per batch by lambda * (batch_size / n_train) so one full epoch
applies exactly lambda times the penalty gradient regardless of batching.
Validation AUC drives early stopping and best-parameter selection.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics as metrics_mod
from . import model as model_mod
from .data import Dataset, EncodedDataset
from .errors import ConfigError, DataError, DimensionError, TrainingError
from .numerics import Rng, derive_seed


@dataclass
class AdamState:
    lr: float
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, size: int, lr: float) -> "AdamState":
        return cls(lr=lr, m=np.zeros(size), v=np.zeros(size))


def adam_step(flat: np.ndarray, grads: np.ndarray, state: AdamState) -> None:
    """One in-place update with bias-corrected moments."""
    if flat.shape != grads.shape or flat.shape != state.m.shape:
        raise DimensionError(
            f"parameter/gradient/moment shapes disagree: "
            f"{flat.shape}, {grads.shape}, {state.m.shape}"
        )
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    flat -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 4096
    max_epochs: int = 20
    lam: float = 0.0001
    patience: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float | None
    valid_auc: float | None
    seconds: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "valid_loss": self.valid_loss,
            "valid_auc": self.valid_auc,
            "seconds": self.seconds,
        }


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict()) + "\n" for r in self.records)


def train(
    spec: model_mod.ModelSpec,
    train_ds: Dataset,
    valid_ds: Dataset | None,
    cfg: TrainConfig,
) -> tuple[model_mod.ModelParams, TrainHistory]:
    """Mini-batch Adam training with early stopping on validation AUC.

    Epoch batch order comes from a permutation seeded by (cfg.seed, epoch),
    so runs are reproducible bit for bit. With a validation set, training
    stops after `patience` consecutive epochs without a strict AUC
    improvement (patience 0 disables early stopping) and the returned
    parameters are the best-AUC snapshot; without one, the loop runs all
    epochs and returns the final parameters.
    """
    if len(train_ds) == 0:
        raise DataError("training set is empty")
    schema = train_ds.schema
    enc_train = EncodedDataset(train_ds)
    enc_valid = (
        EncodedDataset(valid_ds) if valid_ds is not None and len(valid_ds) > 0 else None
    )
    n = enc_train.n

    params = model_mod.init_params(
        spec, schema.n_features, schema.field_count, cfg.seed
    )
    adam = AdamState.fresh(params.size, cfg.lr)
    frozen = (
        params.slices["fm.weight"]
        if params.has("fm.weight") and not spec.fm_weight_trainable
        else None
    )

    history = TrainHistory()
    best_auc = -np.inf
    best_flat: np.ndarray | None = None
    stale = 0

    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        order = Rng(derive_seed(cfg.seed, epoch)).permutation(n)
        loss_sum = 0.0
        for batch_index, start in enumerate(range(0, n, cfg.batch_size)):
            batch = enc_train.batch(order[start : start + cfg.batch_size])
            preds, cache = model_mod.forward_batch(params, batch)
            data_loss = model_mod.logloss(preds, batch.labels)
            if not np.isfinite(data_loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {batch_index}"
                )
            loss_sum += data_loss * batch.size
            grad_z = (preds - batch.labels) / batch.size
            grads = model_mod.backward_batch(params, batch, cache, grad_z)
            model_mod.add_regularization_gradient(
                params, grads, cfg.lam * batch.size / n
            )
            if frozen is not None:
                grads[frozen] = 0.0
            adam_step(params.flat, grads, adam)

        valid_loss = valid_auc = None
        if enc_valid is not None:
            scores = model_mod.score_dataset(params, enc_valid)
            valid_loss = model_mod.logloss(scores, enc_valid.labels)
            valid_auc = metrics_mod.auc(scores, enc_valid.labels)

        history.records.append(
            EpochRecord(
                epoch=epoch,
                train_loss=loss_sum / n,
                valid_loss=valid_loss,
                valid_auc=valid_auc,
                seconds=time.perf_counter() - started,
            )
        )

        if valid_auc is not None:
            if valid_auc > best_auc:
                best_auc = valid_auc
                best_flat = params.flat.copy()
                stale = 0
            else:
                stale += 1
                if cfg.patience > 0 and stale >= cfg.patience:
                    break

    if best_flat is not None:
        params.flat[:] = best_flat
    return params, history
