"""Interaction components: linear part, pairwise products, feed-forward
stack, cross layers and the compressed interaction network.

Every component comes as a batch forward that returns a cache and a batch
backward that consumes it, so gradients are analytic end to end. Shapes:
``x0`` is (B, m, D) with one embedding row per field; flattened inputs are
(B, m*D). Weight matrices are (n_out, n_in).
"""

from __future__ import annotations

import numpy as np

from .data import EncodedBatch, Instance
from .errors import ConfigError, DimensionError

ACTIVATIONS = ("identity", "relu", "sigmoid", "tanh")

SIGMOID_CLAMP = 35.0


def stable_sigmoid(z: np.ndarray | float) -> np.ndarray | float:
    """Logistic function with inputs clamped to +-35 to avoid overflow.

    Beyond the clamp the true value differs from 0/1 by under 1e-15, below
    f64 resolution around those saturation points.
    """
    z = np.clip(z, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    return 1.0 / (1.0 + np.exp(-z))


def apply_activation(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "identity":
        return pre
    if name == "relu":
        return np.maximum(pre, 0.0)
    if name == "sigmoid":
        return stable_sigmoid(pre)
    if name == "tanh":
        return np.tanh(pre)
    raise ConfigError(f"unknown activation {name!r}; choose from {ACTIVATIONS}")


def activation_grad(name: str, pre: np.ndarray, out: np.ndarray) -> np.ndarray:
    """d out / d pre, elementwise, from the cached forward pair."""
    if name == "identity":
        return np.ones_like(pre)
    if name == "relu":
        return (pre > 0).astype(np.float64)
    if name == "sigmoid":
        return out * (1.0 - out)
    if name == "tanh":
        return 1.0 - out * out
    raise ConfigError(f"unknown activation {name!r}; choose from {ACTIVATIONS}")


# ---------------------------------------------------------------------------
# Linear part over raw active features (implicit value 1 per active id).


def linear_forward(instance: Instance, weights: np.ndarray) -> float:
    return float(sum(weights[fid] for ids in instance.features for fid in ids))


def linear_batch(weights: np.ndarray, batch: EncodedBatch) -> np.ndarray:
    out = np.zeros(batch.size, dtype=np.float64)
    for entry in batch.fields:
        if entry[0] == "uni":
            out += weights[entry[1]]
        else:
            _, rows, ids = entry
            np.add.at(out, rows, weights[ids])
    return out


def linear_batch_backward(
    n_features: int, batch: EncodedBatch, grad_out: np.ndarray
) -> np.ndarray:
    grad = np.zeros(n_features, dtype=np.float64)
    for entry in batch.fields:
        if entry[0] == "uni":
            np.add.at(grad, entry[1], grad_out)
        else:
            _, rows, ids = entry
            np.add.at(grad, ids, grad_out[rows])
    return grad


# ---------------------------------------------------------------------------
# FM pairwise term: sum of inner products over distinct field pairs.


def fm_pairwise(x0: np.ndarray) -> float:
    """Sum_{i<j} <row_i, row_j> via the O(mD) square identity."""
    if x0.ndim != 2 or x0.shape[0] < 2:
        raise DimensionError(f"need a (m>=2, D) matrix, got shape {x0.shape}")
    return float(fm_pairwise_batch(x0[None, :, :])[0])


def fm_pairwise_batch(x0: np.ndarray) -> np.ndarray:
    s = x0.sum(axis=1)
    return 0.5 * ((s * s).sum(axis=1) - (x0 * x0).sum(axis=(1, 2)))


def fm_pairwise_batch_backward(x0: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. x0; d/d row_i = sum of the other rows."""
    s = x0.sum(axis=1, keepdims=True)
    return grad_out[:, None, None] * (s - x0)


# ---------------------------------------------------------------------------
# Plain feed-forward stack. Returns the last hidden layer; the combination
# into the output unit happens in the model.


def dnn_batch_forward(
    x: np.ndarray,
    weights: list[np.ndarray],
    biases: list[np.ndarray],
    activation: str,
) -> tuple[np.ndarray, list]:
    if len(weights) != len(biases):
        raise DimensionError("weights and biases differ in layer count")
    cache = []
    h = x
    for w, b in zip(weights, biases):
        if h.shape[1] != w.shape[1]:
            raise DimensionError(
                f"layer expects input width {w.shape[1]}, got {h.shape[1]}"
            )
        pre = h @ w.T + b
        out = apply_activation(activation, pre)
        cache.append((h, pre, out))
        h = out
    return h, cache


def dnn_batch_backward(
    cache: list,
    weights: list[np.ndarray],
    activation: str,
    grad_out: np.ndarray,
) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    grad_ws: list[np.ndarray] = [None] * len(weights)
    grad_bs: list[np.ndarray] = [None] * len(weights)
    g = grad_out
    for k in range(len(weights) - 1, -1, -1):
        h_prev, pre, out = cache[k]
        g_pre = g * activation_grad(activation, pre, out)
        grad_ws[k] = g_pre.T @ h_prev
        grad_bs[k] = g_pre.sum(axis=0)
        g = g_pre @ weights[k]
    return grad_ws, grad_bs, g


def dnn_forward(
    e: np.ndarray, weights: list[np.ndarray], biases: list[np.ndarray], activation: str
) -> np.ndarray:
    """Single-vector convenience wrapper."""
    out, _ = dnn_batch_forward(e[None, :], weights, biases, activation)
    return out[0]


# ---------------------------------------------------------------------------
# Cross layers: x_k = x0 * (x_{k-1}.w_k) + b_k + x_{k-1} on the flattened
# embedding vector. With all biases zero the output stays collinear with x0
# at any depth; training uses the biased form.


def crossnet_batch_forward(
    x0: np.ndarray, ws: list[np.ndarray], bs: list[np.ndarray]
) -> tuple[np.ndarray, list]:
    n = x0.shape[1]
    for w, b in zip(ws, bs):
        if w.shape != (n,) or b.shape != (n,):
            raise DimensionError(f"cross layer wants length-{n} vectors")
    cache = []
    x = x0
    for w, b in zip(ws, bs):
        s = x @ w
        cache.append((x, s))
        x = x0 * s[:, None] + b[None, :] + x
    return x, cache


def crossnet_batch_backward(
    x0: np.ndarray,
    cache: list,
    ws: list[np.ndarray],
    grad_out: np.ndarray,
) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    grad_ws: list[np.ndarray] = [None] * len(ws)
    grad_bs: list[np.ndarray] = [None] * len(ws)
    g = grad_out
    g_x0 = np.zeros_like(x0)
    for k in range(len(ws) - 1, -1, -1):
        x_prev, s = cache[k]
        g_s = (g * x0).sum(axis=1)
        grad_ws[k] = x_prev.T @ g_s
        grad_bs[k] = g.sum(axis=0)
        g_x0 += g * s[:, None]
        g = g + g_s[:, None] * ws[k][None, :]
    return grad_ws, grad_bs, g + g_x0


def crossnet_forward(
    x0: np.ndarray, ws: list[np.ndarray], bs: list[np.ndarray]
) -> np.ndarray:
    out, _ = crossnet_batch_forward(x0[None, :], ws, bs)
    return out[0]


# ---------------------------------------------------------------------------
# Compressed interaction network. Layer k contracts the outer product of
# the previous layer's rows with x0's rows against per-neuron filters:
#
#   pre[h, d] = sum_{i, j} filters[h, i, j] * x_prev[i, d] * x0[j, d]
#
# then applies the activation and sum-pools each row over d.


def cin_layer(
    x_prev: np.ndarray,
    x0: np.ndarray,
    filters: np.ndarray,
    activation: str = "identity",
) -> np.ndarray:
    """One per-instance layer: (H_prev, D) x (m, D) -> (H_next, D)."""
    if x_prev.shape[1] != x0.shape[1]:
        raise DimensionError(
            f"column counts differ: {x_prev.shape[1]} vs {x0.shape[1]}"
        )
    filters = np.asarray(filters, dtype=np.float64)
    if filters.ndim != 3 or filters.shape[1:] != (x_prev.shape[0], x0.shape[0]):
        raise DimensionError(
            f"filters must be (H_next, {x_prev.shape[0]}, {x0.shape[0]}), "
            f"got {filters.shape}"
        )
    pre = np.einsum("id,jd,hij->hd", x_prev, x0, filters, optimize=True)
    return apply_activation(activation, pre)


def cin_batch_forward(
    x0: np.ndarray, filters: list[np.ndarray], activation: str
) -> tuple[np.ndarray, list[np.ndarray], list]:
    """Chain all layers; returns (pooled (B, sum H_k), hidden maps, cache)."""
    b, m, _ = x0.shape
    h_prev = m
    cache = []
    hidden = []
    pooled_parts = []
    x = x0
    for w in filters:
        if w.shape[1] != h_prev or w.shape[2] != m:
            raise DimensionError(
                f"filter block {w.shape} incompatible with ({h_prev}, {m}) layer"
            )
        pre = np.einsum("bid,bjd,hij->bhd", x, x0, w, optimize=True)
        out = apply_activation(activation, pre)
        cache.append((x, pre, out))
        hidden.append(out)
        pooled_parts.append(out.sum(axis=2))
        x = out
        h_prev = w.shape[0]
    pooled = (
        np.concatenate(pooled_parts, axis=1)
        if pooled_parts
        else np.zeros((b, 0), dtype=np.float64)
    )
    return pooled, hidden, cache


def cin_batch_backward(
    x0: np.ndarray,
    filters: list[np.ndarray],
    cache: list,
    activation: str,
    grad_pooled: np.ndarray,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients of the filters and of x0 given pooled-output gradients."""
    widths = [w.shape[0] for w in filters]
    if grad_pooled.shape[1] != sum(widths):
        raise DimensionError(
            f"pooled gradient width {grad_pooled.shape[1]} != {sum(widths)}"
        )
    splits = np.cumsum(widths)[:-1]
    per_layer = np.split(grad_pooled, splits, axis=1)
    grad_filters: list[np.ndarray] = [None] * len(filters)
    grad_x0 = np.zeros_like(x0)
    d = x0.shape[2]
    carry = None
    for k in range(len(filters) - 1, -1, -1):
        x_prev, pre, out = cache[k]
        g_out = np.repeat(per_layer[k][:, :, None], d, axis=2)
        if carry is not None:
            g_out = g_out + carry
        g_pre = g_out * activation_grad(activation, pre, out)
        grad_filters[k] = np.einsum("bhd,bid,bjd->hij", g_pre, x_prev, x0, optimize=True)
        grad_x0 += np.einsum("bhd,hij,bid->bjd", g_pre, filters[k], x_prev, optimize=True)
        carry = np.einsum("bhd,hij,bjd->bid", g_pre, filters[k], x0, optimize=True)
    if carry is not None:
        grad_x0 += carry
    return grad_filters, grad_x0


def cin_forward(
    x0: np.ndarray, filters: list[np.ndarray], activation: str = "identity"
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Per-instance wrapper: returns (pooled vector, hidden feature maps)."""
    pooled, hidden, _ = cin_batch_forward(x0[None, :, :], filters, activation)
    return pooled[0], [h[0] for h in hidden]


def cin_score(p_plus: np.ndarray, w_o: np.ndarray) -> float:
    if p_plus.shape != w_o.shape:
        raise DimensionError(f"length mismatch: {p_plus.shape} vs {w_o.shape}")
    return float(stable_sigmoid(float(p_plus @ w_o)))


# ---------------------------------------------------------------------------
# Low-rank filter factorization: filter row h is U[h] @ V[h].T, cutting
# parameters from H_prev*m to L*(H_prev + m) per neuron.


def cin_low_rank_materialize(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """One neuron's (H_prev, L) x (m, L) factors -> dense (H_prev, m)."""
    if u.ndim != 2 or v.ndim != 2 or u.shape[1] != v.shape[1]:
        raise DimensionError(
            f"factor shapes {u.shape} and {v.shape} share no inner dimension"
        )
    return u @ v.T

def materialize_filter_block(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Stacked per-layer factors (H, H_prev, L), (H, m, L) -> (H, H_prev, m)."""
    if u.shape[0] != v.shape[0] or u.shape[2] != v.shape[2]:
        raise DimensionError(f"factor blocks {u.shape} and {v.shape} disagree")
    return np.einsum("hil,hjl->hij", u, v, optimize=True)


def lowrank_block_backward(
    u: np.ndarray, v: np.ndarray, grad_w: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    grad_u = np.einsum("hij,hjl->hil", grad_w, v, optimize=True)
    grad_v = np.einsum("hij,hil->hjl", grad_w, u, optimize=True)
    return grad_u, grad_v
