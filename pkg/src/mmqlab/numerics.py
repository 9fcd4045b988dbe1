"""Dense linear-algebra helpers and deterministic randomness.

Conventions used across the package:

* a "matrix" is a 2-D, C-contiguous ``float32`` ndarray with finite entries;
  numerically sensitive reductions (Gram matrices, Frobenius norms, solver
  internals) are carried out in ``float64`` and cast back on exit.
* randomness is counter-based splitmix64 feeding Box-Muller, so any
  (seed, counter) pair maps to the same value on every platform and golden
  files survive refactors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_TWO_PI = 2.0 * math.pi


class NotPositiveDefiniteError(ValueError):
    """Raised when a pivot is non-positive during Cholesky factorization."""

    def __init__(self, column: int, pivot: float):
        self.column = column
        self.pivot = pivot
        super().__init__(
            f"matrix is not positive definite: column {column} has pivot "
            f"{pivot:.6e} <= 0 after damping"
        )


def mix64(x: int) -> int:
    """splitmix64 output function (a 64-bit bijective mixer)."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * _MIX_A) & _MASK64
    x = ((x ^ (x >> 27)) * _MIX_B) & _MASK64
    return x ^ (x >> 31)


def derive_seed(seed: int, *tags: int | str) -> int:
    """Fold string/int tags into a seed to get an independent substream key.

    Pure integer arithmetic (no ``hash()``), so derived seeds are stable
    across processes and platforms.
    """
    h = mix64((seed & _MASK64) ^ 0x5CA1AB1E5EED0001)
    for tag in tags:
        if isinstance(tag, str):
            data = tag.encode("utf-8")
        else:
            data = (int(tag) & _MASK64).to_bytes(8, "little")
        for b in data:
            h = mix64(h ^ b)
            h = (h * _GOLDEN) & _MASK64
    return mix64(h)


def _mix64_array(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64, copy=True)
    x ^= x >> np.uint64(30)
    x *= np.uint64(_MIX_A)
    x ^= x >> np.uint64(27)
    x *= np.uint64(_MIX_B)
    x ^= x >> np.uint64(31)
    return x


@dataclass
class RngStream:
    """Counter-based random stream: value ``i`` is ``mix64(seed + (i+1)*GOLDEN)``.

    The counter advances as values are drawn; constructing two streams with
    the same (seed, counter) always replays the same sequence.
    """

    seed: int
    counter: int = 0

    def raw64(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs as uint64."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        state = np.uint64(self.seed & _MASK64) + idx * np.uint64(_GOLDEN)
        return _mix64_array(state)

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` float64 uniforms on (0, 1]."""
        bits = self.raw64(n) >> np.uint64(11)
        return (bits.astype(np.float64) + 1.0) * (0.5**53)

    def normals(self, n: int, std: float = 1.0) -> np.ndarray:
        """``n`` float64 normals via Box-Muller (two uniforms per value)."""
        u = self.uniforms(2 * n)
        u1, u2 = u[0::2], u[1::2]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2) * std

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of ``range(n)`` (argsort of uniforms)."""
        return np.argsort(self.uniforms(n), kind="stable")

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices out of ``range(n)``, returned sorted."""
        if k > n:
            raise ValueError(f"cannot choose {k} of {n}")
        return np.sort(self.permutation(n)[:k])

    def spawn(self, *tags: int | str) -> "RngStream":
        """Independent child stream keyed by tags."""
        return RngStream(derive_seed(self.seed, *tags))


def randn_matrix(stream: RngStream, rows: int, cols: int, std: float) -> np.ndarray:
    """Deterministic i.i.d. normal(0, std^2) matrix, float32, row-major."""
    if rows < 1 or cols < 1:
        raise ValueError("empty matrix")
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    values = stream.normals(rows * cols, std=std)
    return values.reshape(rows, cols).astype(np.float32)


def _check_square_symmetric(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    a64 = a.astype(np.float64)
    scale = np.max(np.abs(a64)) if a64.size else 0.0
    if scale > 0 and np.max(np.abs(a64 - a64.T)) > 1e-5 * scale:
        raise ValueError("matrix is not symmetric to within 1e-5 relative")
    return a64


def _cholesky64(m: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of an SPD float64 matrix, column by column.

    Kept hand-rolled (rather than LAPACK) so failures can name the
    offending column.
    """
    n = m.shape[0]
    lower = np.zeros((n, n), dtype=np.float64)
    for j in range(n):
        pivot = m[j, j] - lower[j, :j] @ lower[j, :j]
        if pivot <= 0.0:
            raise NotPositiveDefiniteError(column=j, pivot=float(pivot))
        lower[j, j] = math.sqrt(pivot)
        if j + 1 < n:
            lower[j + 1 :, j] = (m[j + 1 :, j] - lower[j + 1 :, :j] @ lower[j, :j]) / lower[j, j]
    return lower


def _damped(a64: np.ndarray, damping: float) -> np.ndarray:
    if damping < 0:
        raise ValueError("damping must be >= 0")
    lam = damping * float(np.mean(np.diag(a64))) if damping > 0 else 0.0
    return a64 + lam * np.eye(a64.shape[0], dtype=np.float64)


def _invert_spd64(a64: np.ndarray, damping: float) -> np.ndarray:
    lower = _cholesky64(_damped(a64, damping))
    inv_lower = np.linalg.solve(lower, np.eye(lower.shape[0], dtype=np.float64))
    return inv_lower.T @ inv_lower


def cholesky_spd(a: np.ndarray, damping: float = 0.0) -> np.ndarray:
    """Lower-triangular L with L L^T = A + damping*mean(diag A)*I."""
    a64 = _check_square_symmetric(a)
    return _cholesky64(_damped(a64, damping)).astype(np.float32)


def invert_spd(a: np.ndarray, damping: float = 0.0) -> np.ndarray:
    """Inverse of A + damping*mean(diag A)*I, via the Cholesky factor."""
    a64 = _check_square_symmetric(a)
    return _invert_spd64(a64, damping).astype(np.float32)
