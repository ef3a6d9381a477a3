"""Embedding lookup: active feature ids to a per-field matrix and back.

The table is a dense (n_features, dim) array indexed by global feature id.
A univalent field contributes its single feature's row; a multivalent field
contributes the elementwise sum of its active features' rows (an empty cell
contributes a zero row). The adjoint copies each field's gradient row to
every summand.
"""

from __future__ import annotations

import numpy as np

from .data import EncodedBatch, Instance
from .errors import DataError, DimensionError


def _check_ids(ids, n_rows: int) -> None:
    for fid in ids:
        if fid < 0 or fid >= n_rows:
            raise DataError(f"feature id {fid} outside table of {n_rows} rows")


def embed_forward(instance: Instance, table: np.ndarray) -> np.ndarray:
    """Per-instance lookup, returning the (field_count, dim) matrix."""
    m = len(instance.features)
    out = np.zeros((m, table.shape[1]), dtype=np.float64)
    for f, ids in enumerate(instance.features):
        _check_ids(ids, table.shape[0])
        for fid in ids:
            out[f] += table[fid]
    return out


def embed_backward(
    instance: Instance, grad_x0: np.ndarray, table: np.ndarray
) -> dict[int, np.ndarray]:
    """Adjoint of embed_forward as a sparse map feature id -> gradient row."""
    m = len(instance.features)
    if grad_x0.shape != (m, table.shape[1]):
        raise DimensionError(
            f"gradient shape {grad_x0.shape} does not match ({m}, {table.shape[1]})"
        )
    grads: dict[int, np.ndarray] = {}
    for f, ids in enumerate(instance.features):
        _check_ids(ids, table.shape[0])
        for fid in ids:
            if fid in grads:
                grads[fid] = grads[fid] + grad_x0[f]
            else:
                grads[fid] = grad_x0[f].copy()
    return grads


def embed_batch(table: np.ndarray, batch: EncodedBatch) -> np.ndarray:
    """Vectorized lookup for an encoded batch, shape (B, field_count, dim)."""
    b, dim = batch.size, table.shape[1]
    x0 = np.zeros((b, len(batch.fields), dim), dtype=np.float64)
    for f, entry in enumerate(batch.fields):
        if entry[0] == "uni":
            x0[:, f, :] = table[entry[1]]
        else:
            _, rows, ids = entry
            acc = np.zeros((b, dim), dtype=np.float64)
            np.add.at(acc, rows, table[ids])
            x0[:, f, :] = acc
    return x0


def embed_batch_backward(
    n_features: int, batch: EncodedBatch, grad_x0: np.ndarray
) -> np.ndarray:
    """Dense (n_features, dim) gradient of the table for one batch."""
    if grad_x0.shape[0] != batch.size or grad_x0.shape[1] != len(batch.fields):
        raise DimensionError(
            f"gradient shape {grad_x0.shape} does not match batch "
            f"({batch.size}, {len(batch.fields)}, dim)"
        )
    grad = np.zeros((n_features, grad_x0.shape[2]), dtype=np.float64)
    for f, entry in enumerate(batch.fields):
        if entry[0] == "uni":
            np.add.at(grad, entry[1], grad_x0[:, f, :])
        else:
            _, rows, ids = entry
            np.add.at(grad, ids, grad_x0[rows, f, :])
    return grad
