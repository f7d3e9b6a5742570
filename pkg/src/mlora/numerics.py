"""Dense float64 linear algebra with a fixed accumulation order, and a portable RNG.

Tensors are plain ``numpy.ndarray`` objects of dtype float64; ``Tensor2D`` and
``Tensor1D`` are aliases used in signatures.  Every product is accumulated
strictly left to right over the shared dimension, so results are bit-exact
across runs and independent of any BLAS threading.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ParameterError, ShapeError

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None

Tensor2D = np.ndarray
Tensor1D = np.ndarray

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def tensor2d(data) -> Tensor2D:
    a = np.array(data, dtype=np.float64, order="C")
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D tensor, got shape {a.shape}")
    return a


def tensor1d(data) -> Tensor1D:
    a = np.array(data, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"expected a 1-D tensor, got shape {a.shape}")
    return a


def _matmul_numpy(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k:k + 1] * b[k:k + 1, :]
    return out


if njit is not None:
    @njit(cache=True)
    def _matmul_kernel(a, b):  # pragma: no cover - compiled
        m, n_inner = a.shape
        n = b.shape[1]
        out = np.zeros((m, n))
        for i in range(m):
            for k in range(n_inner):
                aik = a[i, k]
                for j in range(n):
                    out[i, j] += aik * b[k, j]
        return out
else:  # pragma: no cover
    _matmul_kernel = _matmul_numpy


def matmul(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    """Matrix product ``a @ b`` accumulated left to right over the shared axis.

    Both operands are left untouched; the result is a fresh array.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if a.shape[0] == 0 or b.shape[1] == 0:
        return np.zeros((a.shape[0], b.shape[1]))
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return _matmul_kernel(a, b)


def matvec(w: Tensor2D, x: Tensor1D) -> Tensor1D:
    if w.ndim != 2 or x.ndim != 1:
        raise ShapeError(f"matvec needs a 2-D and a 1-D operand, got {w.shape} and {x.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec shape mismatch: {w.shape} . {x.shape}")
    return matmul(w, x.reshape(-1, 1))[:, 0]


def zeros(rows: int, cols: int) -> Tensor2D:
    if rows < 1 or cols < 1:
        raise ParameterError(f"zeros needs positive dimensions, got ({rows}, {cols})")
    return np.zeros((rows, cols))


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def _mix_int(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """SplitMix64 generator.

    The stream is a pure function of the seed: output ``i`` is
    ``mix(seed + (i + 1) * gamma)``, which lets blocks of draws be produced
    with vectorised integer arithmetic while staying identical to the scalar
    definition.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def derive(self, *keys: int) -> "Rng":
        """Independent child stream keyed by ``keys``; does not advance ``self``."""
        s = self.state
        for k in keys:
            s = _mix_int(s ^ _mix_int(int(k) + _GAMMA))
        return Rng(s)

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GAMMA)
        out = _mix64(steps + np.uint64(self.state))
        self.state = (self.state + n * _GAMMA) & _MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` floats on [0, 1) with 53 random bits each."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def normal(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Box-Muller normals; pairs come from consecutive uniforms."""
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n] * std + mean

    def integers(self, high: int, n: int) -> np.ndarray:
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.next_u64(n), kind="stable")


def gaussian_fill(t: np.ndarray, rng: Rng, mean: float, std: float) -> None:
    """Overwrite ``t`` in place with i.i.d. N(mean, std**2) draws, row-major."""
    if std < 0:
        raise ParameterError(f"standard deviation must be non-negative, got {std}")
    t[...] = rng.normal(t.size, mean, std).reshape(t.shape)
