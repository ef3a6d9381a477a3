"""Minimal dense numeric kernel.

Everything downstream works on plain float64 numpy arrays. This module adds
the three primitives the rest of the library is built from: the Hadamard
product, the per-dimension outer-product tensor between two embedding
matrices, and a central finite-difference gradient probe that serves as the
independent oracle for every hand-written backward pass.

Randomness comes from :class:`Rng`, a counter-based splitmix64 stream.
Output ``i`` of a stream seeded with ``s`` is ``mix64(s + (i+1)*GAMMA)``
with ``GAMMA = 0x9E3779B97F4A7C15`` and the standard splitmix64 finalizer

    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27;  z *= 0x94D049BB133111EB
    z ^= z >> 31

Uniform doubles take the top 53 bits (``(z >> 11) * 2**-53``); normal
deviates come from Box-Muller pairs over consecutive uniforms. The stream
depends only on (seed, counter), so identical seeds reproduce identical
parameter initializations across runs and platforms.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DimensionError, EvaluationError

GAMMA = 0x9E3779B97F4A7C15
_MASK64 = 0xFFFFFFFFFFFFFFFF
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_INV_2_53 = 2.0 ** -53


def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer, vectorized over uint64 arrays (wrapping multiply)
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MIX1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MIX2)
    z ^= z >> np.uint64(31)
    return z


def _mix64_int(z: int) -> int:
    z &= _MASK64
    z ^= z >> 30
    z = (z * _MIX1) & _MASK64
    z ^= z >> 27
    z = (z * _MIX2) & _MASK64
    z ^= z >> 31
    return z


def derive_seed(seed: int, *tags: int) -> int:
    """Fold integer tags into a seed, producing an independent child seed.

    Deterministic: ``derive_seed(s, a, b)`` is a pure function of its
    arguments. Used to give epochs, grid combinations, and trial loops their
    own streams without correlated overlap.
    """
    s = seed & _MASK64
    for tag in tags:
        s = _mix64_int(s ^ _mix64_int((tag & _MASK64) + GAMMA))
    return s


class Rng:
    """Seeded splitmix64 stream of uniforms, normals, and integers."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self._pos = 0

    def _raw(self, n: int) -> np.ndarray:
        counters = np.arange(self._pos + 1, self._pos + n + 1, dtype=np.uint64)
        self._pos += n
        base = np.uint64(self.seed)
        return _mix64(base + counters * np.uint64(GAMMA))

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles in [0, 1), 53-bit resolution."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def normals(self, n: int, std: float = 1.0) -> np.ndarray:
        """n standard-normal deviates (Box-Muller), scaled by std."""
        pairs = (n + 1) // 2
        u1 = self.uniforms(pairs)
        u2 = self.uniforms(pairs)
        r = np.sqrt(-2.0 * np.log1p(-u1))  # 1-u1 in (0,1], log never hits 0
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z * std

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n int64 values uniform over [0, bound)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return np.minimum((self.uniforms(n) * bound).astype(np.int64), bound - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n): argsort of n uniforms."""
        return np.argsort(self.uniforms(n), kind="stable")

    def spawn(self, tag: int) -> "Rng":
        """Independent child stream keyed by an integer tag."""
        return Rng(derive_seed(self.seed, tag))


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product of two equal-length vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shapes {a.shape} and {b.shape} differ")
    return a * b


def interaction_tensor(x_prev: np.ndarray, x0: np.ndarray) -> np.ndarray:
    """Per-dimension outer products between two row-matrices of embeddings.

    Given ``x_prev`` of shape (H, D) and ``x0`` of shape (m, D), returns the
    (D, H, m) tensor Z with ``Z[d, i, j] = x_prev[i, d] * x0[j, d]``. This is
    the intermediate tensor that interaction filters are contracted against.
    """
    x_prev = np.asarray(x_prev, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if x_prev.ndim != 2 or x0.ndim != 2:
        raise DimensionError("interaction_tensor: inputs must be 2-D")
    if x_prev.shape[1] != x0.shape[1]:
        raise DimensionError(
            f"interaction_tensor: column counts {x_prev.shape[1]} and "
            f"{x0.shape[1]} differ"
        )
    return np.einsum("id,jd->dij", x_prev, x0)


def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    point: np.ndarray,
    eps: float = 1e-5,
) -> np.ndarray:
    """Central finite-difference gradient of a scalar function.

    ``g[i] = (f(point + eps*e_i) - f(point - eps*e_i)) / (2*eps)``.

    The workhorse oracle for every analytic backward pass in the package:
    it never shares code with the gradients it checks.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    point = np.asarray(point, dtype=np.float64).ravel()
    grad = np.zeros_like(point)
    probe = point.copy()
    for i in range(point.size):
        probe[i] = point[i] + eps
        hi = float(f(probe))
        probe[i] = point[i] - eps
        lo = float(f(probe))
        probe[i] = point[i]
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise EvaluationError(
                f"finite_diff_grad: non-finite evaluation at coordinate {i}"
            )
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a-n| / max(|a|, |n|, 1e-8) between two gradients."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    if analytic.shape != numeric.shape:
        raise DimensionError("gradient shapes differ")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
