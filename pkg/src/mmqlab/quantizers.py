"""Weight-only quantization of a single linear layer.

Three methods operate on a (out_features x in_features) float32 weight matrix:

* ``uniform_quantize``   - per-tensor min/max grid, round to nearest level.
* ``rtn_group_quantize`` - the same rounding with per-row input-channel
  groups; this is the inner grid shared by the calibrated methods.
* ``gptq_quantize``      - sequential column quantization where the not yet
  quantized columns absorb the rounding error, driven by the Cholesky factor
  of the damped inverse Gram matrix of calibration activations.
* ``awq_quantize``       - grid search over a per-channel scaling exponent,
  scaling salient input channels up before rounding and folding the scales
  back into the stored grids.

All methods are pure functions of (weights, activations, config); the stored
form is a ``QuantizedMatrix`` whose ``dequantize`` fully reproduces the
effective weights.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import NotPositiveDefiniteError, _cholesky64, _invert_spd64

ALPHA_GRID = tuple(i / 20.0 for i in range(21))
SCALE_CLAMP = (1e-4, 1e4)


class Method(enum.Enum):
    """Quantization methods accepted across the package."""

    UNIFORM = "uniform"
    RTN = "rtn"
    GPTQ = "gptq"
    AWQ = "awq"


class GridScheme(enum.Enum):
    PER_TENSOR = "per_tensor"
    PER_GROUP = "per_group"


@dataclass
class QuantizedMatrix:
    """Integer codes plus per-group (min, max) grids for one weight matrix.

    Groups run along input channels within each row; ``group_size`` equal to
    the element count encodes a single per-tensor grid. ``grid_lo``/``grid_hi``
    have shape (1, 1) for per-tensor and (rows, ceil(cols/group_size)) for
    per-group storage.
    """

    codes: np.ndarray
    bits: int
    scheme: GridScheme
    group_size: int
    grid_lo: np.ndarray
    grid_hi: np.ndarray
    rows: int
    cols: int

    def __post_init__(self):
        levels = (1 << self.bits) - 1
        if not (2 <= self.bits <= 16):
            raise ValueError(f"bits must be in [2, 16], got {self.bits}")
        if self.codes.shape != (self.rows, self.cols):
            raise ValueError("codes shape does not match rows/cols")
        if int(self.codes.max(initial=0)) > levels:
            raise ValueError(f"code exceeds 2^{self.bits}-1")
        if np.any(self.grid_lo > self.grid_hi):
            raise ValueError("grid_lo must be <= grid_hi per group")
        n_groups = _group_count(self.cols, self.group_size)
        expect = (1, 1) if self.scheme is GridScheme.PER_TENSOR else (self.rows, n_groups)
        if self.grid_lo.shape != expect or self.grid_hi.shape != expect:
            raise ValueError(f"grid shape {self.grid_lo.shape}, expected {expect}")

    @property
    def code_bits(self) -> int:
        """Storage bits for the integer codes alone."""
        return self.bits * self.rows * self.cols


@dataclass
class CalibrationSet:
    """Per-layer input activations recorded from probe pairs."""

    layers: dict[str, np.ndarray] = field(default_factory=dict)
    sample_count: int = 0

    def activations_for(self, layer_name: str) -> np.ndarray:
        if layer_name not in self.layers:
            raise KeyError(f"no calibration activations for layer {layer_name!r}")
        return self.layers[layer_name]


@dataclass
class GptqState:
    """Damped second-order state for one layer: H = 2 X^T X."""

    hessian: np.ndarray
    damping: float
    block_size: int

    @classmethod
    def from_activations(cls, x: np.ndarray, damping: float = 0.01, block_size: int = 32) -> "GptqState":
        x64 = np.asarray(x, dtype=np.float64)
        return cls(hessian=2.0 * (x64.T @ x64), damping=damping, block_size=block_size)


@dataclass
class AwqSearch:
    """Per-channel activation magnitudes and the chosen scaling exponent."""

    channel_magnitude: np.ndarray
    alpha_grid: tuple[float, ...]
    chosen_alpha: float


def _check_weight(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w)
    if w.ndim != 2:
        raise ValueError(f"expected a 2-D weight matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("weight matrix contains non-finite entries")
    return w.astype(np.float32, copy=False)


def _check_bits(k: int) -> int:
    if not (2 <= int(k) <= 16):
        raise ValueError(f"bit width must be in [2, 16], got {k}")
    return int(k)


def _group_count(cols: int, group_size: int) -> int:
    return max(1, -(-cols // group_size))


def _group_bounds(cols: int, group_size: int) -> list[tuple[int, int]]:
    return [(g * group_size, min((g + 1) * group_size, cols)) for g in range(_group_count(cols, group_size))]


def _encode(w64: np.ndarray, lo: np.ndarray, hi: np.ndarray, levels: int) -> np.ndarray:
    """Round-half-to-even codes against a (lo, hi) grid, clipped to range."""
    span = hi - lo
    ratio = np.where(span > 0, (w64 - lo) / np.where(span > 0, span, 1.0), 0.0)
    return np.clip(np.rint(levels * ratio), 0, levels).astype(np.uint16)


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    """Map codes back to weights: (hi - lo) * code / (2^k - 1) + lo."""
    levels = (1 << q.bits) - 1
    codes = q.codes.astype(np.float64)
    if q.scheme is GridScheme.PER_TENSOR:
        lo = np.float64(q.grid_lo[0, 0])
        hi = np.float64(q.grid_hi[0, 0])
    else:
        col_group = np.arange(q.cols) // q.group_size
        lo = q.grid_lo.astype(np.float64)[:, col_group]
        hi = q.grid_hi.astype(np.float64)[:, col_group]
    return ((hi - lo) * (codes / levels) + lo).astype(np.float32)


def uniform_quantize(w: np.ndarray, k: int) -> QuantizedMatrix:
    """Per-tensor min/max quantization to k bits."""
    w = _check_weight(w)
    k = _check_bits(k)
    rows, cols = w.shape
    lo = np.float32(w.min())
    hi = np.float32(w.max())
    codes = _encode(w.astype(np.float64), np.float64(lo), np.float64(hi), (1 << k) - 1)
    return QuantizedMatrix(
        codes=codes,
        bits=k,
        scheme=GridScheme.PER_TENSOR,
        group_size=rows * cols,
        grid_lo=np.full((1, 1), lo, dtype=np.float32),
        grid_hi=np.full((1, 1), hi, dtype=np.float32),
        rows=rows,
        cols=cols,
    )


def rtn_group_quantize(w: np.ndarray, k: int, group_size: int) -> QuantizedMatrix:
    """Round-to-nearest with per-row min/max grids over input-channel groups."""
    w = _check_weight(w)
    k = _check_bits(k)
    if group_size <= 0:
        raise ValueError(f"group_size must be >= 1, got {group_size}")
    rows, cols = w.shape
    if group_size >= rows * cols:
        return uniform_quantize(w, k)

    levels = (1 << k) - 1
    w64 = w.astype(np.float64)
    bounds = _group_bounds(cols, group_size)
    grid_lo = np.empty((rows, len(bounds)), dtype=np.float32)
    grid_hi = np.empty((rows, len(bounds)), dtype=np.float32)
    codes = np.empty((rows, cols), dtype=np.uint16)
    for g, (c0, c1) in enumerate(bounds):
        lo = w[:, c0:c1].min(axis=1)
        hi = w[:, c0:c1].max(axis=1)
        grid_lo[:, g] = lo
        grid_hi[:, g] = hi
        codes[:, c0:c1] = _encode(
            w64[:, c0:c1], lo.astype(np.float64)[:, None], hi.astype(np.float64)[:, None], levels
        )
    return QuantizedMatrix(
        codes=codes,
        bits=k,
        scheme=GridScheme.PER_GROUP,
        group_size=group_size,
        grid_lo=grid_lo,
        grid_hi=grid_hi,
        rows=rows,
        cols=cols,
    )


def proxy_loss(w: np.ndarray, w_hat: np.ndarray, x: np.ndarray) -> float:
    """Calibration-set objective ||X (W - W_hat)^T||_F^2, float64 accumulation."""
    w = np.asarray(w)
    w_hat = np.asarray(w_hat)
    x = np.asarray(x)
    if w.shape != w_hat.shape:
        raise ValueError(f"weight shapes differ: {w.shape} vs {w_hat.shape}")
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"activation shape {x.shape} incompatible with weights {w.shape}")
    err = x.astype(np.float64) @ (w.astype(np.float64) - w_hat.astype(np.float64)).T
    return float(np.sum(err * err))


def _check_activations(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"activations {x.shape} do not match in_features {w.shape[1]}")
    if x.shape[0] < 1:
        raise ValueError("calibration requires at least one sample")
    if not np.all(np.isfinite(x)):
        raise ValueError("calibration activations contain non-finite entries")
    return x


def _inverse_hessian_factor(hessian: np.ndarray, damping: float) -> np.ndarray:
    """Upper factor U with (H + lambda I)^-1 = U^T U; retries once at 10x damping."""
    try:
        inv = _invert_spd64(hessian, damping)
    except NotPositiveDefiniteError:
        inv = _invert_spd64(hessian, damping * 10.0)
    return _cholesky64(inv).T


def gptq_quantize(
    w: np.ndarray,
    x: np.ndarray,
    k: int,
    group_size: int = 128,
    damping: float = 0.01,
    block_size: int = 32,
) -> tuple[QuantizedMatrix, float]:
    """Quantize columns left to right, compensating error into later columns.

    After column q is rounded, the remaining columns move by
    ``(w_q - dq_q) / U_qq * U[q, q:]`` where U is the upper Cholesky factor of
    the damped inverse Hessian (H = 2 X^T X). Grids are per-row min/max over
    input-channel groups, computed from the compensated weights at each group
    boundary. Returns the stored matrix and ``||X (W - W_hat)^T||_F^2``.
    """
    w = _check_weight(w)
    k = _check_bits(k)
    if group_size <= 0:
        raise ValueError(f"group_size must be >= 1, got {group_size}")
    x = _check_activations(x, w)
    rows, cols = w.shape
    levels = (1 << k) - 1
    per_tensor = group_size >= rows * cols

    state = GptqState.from_activations(x, damping=damping, block_size=block_size)
    hessian = state.hessian
    work = w.astype(np.float64)
    dead = np.diag(hessian) == 0.0
    if dead.any():
        hessian = hessian.copy()
        hessian[dead, dead] = 1.0
        work[:, dead] = 0.0
    upper = _inverse_hessian_factor(hessian, damping)

    codes = np.empty((rows, cols), dtype=np.uint16)
    if per_tensor:
        n_groups = 1
        grid_lo = np.full((1, 1), np.float32(work.min()), dtype=np.float32)
        grid_hi = np.full((1, 1), np.float32(work.max()), dtype=np.float32)
    else:
        n_groups = _group_count(cols, group_size)
        grid_lo = np.zeros((rows, n_groups), dtype=np.float32)
        grid_hi = np.zeros((rows, n_groups), dtype=np.float32)

    for b0 in range(0, cols, block_size):
        b1 = min(b0 + block_size, cols)
        err_block = np.zeros((rows, b1 - b0), dtype=np.float64)
        for col in range(b0, b1):
            if not per_tensor and col % group_size == 0:
                g = col // group_size
                g1 = min(col + group_size, cols)
                grid_lo[:, g] = work[:, col:g1].min(axis=1).astype(np.float32)
                grid_hi[:, g] = work[:, col:g1].max(axis=1).astype(np.float32)
            if per_tensor:
                lo = grid_lo[0, 0].astype(np.float64)
                hi = grid_hi[0, 0].astype(np.float64)
            else:
                g = col // group_size
                lo = grid_lo[:, g].astype(np.float64)
                hi = grid_hi[:, g].astype(np.float64)
            w_col = work[:, col]
            c = _encode(w_col, lo, hi, levels)
            codes[:, col] = c
            dq = (hi - lo) * (c.astype(np.float64) / levels) + lo
            err = (w_col - dq) / upper[col, col]
            if col + 1 < b1:
                work[:, col + 1 : b1] -= np.outer(err, upper[col, col + 1 : b1])
            err_block[:, col - b0] = err
        if b1 < cols:
            work[:, b1:] -= err_block @ upper[b0:b1, b1:]

    qm = QuantizedMatrix(
        codes=codes,
        bits=k,
        scheme=GridScheme.PER_TENSOR if per_tensor else GridScheme.PER_GROUP,
        group_size=rows * cols if per_tensor else group_size,
        grid_lo=grid_lo,
        grid_hi=grid_hi,
        rows=rows,
        cols=cols,
    )
    return qm, proxy_loss(w, dequantize(qm), x)


def _channel_scales(magnitude: np.ndarray, alpha: float) -> np.ndarray:
    """Geomean-normalized per-channel scales; zero-activation channels stay at 1."""
    active = magnitude > 0
    scales = np.ones_like(magnitude)
    if active.any() and alpha != 0.0:
        geomean = math.exp(float(np.mean(np.log(magnitude[active]))))
        scales[active] = np.clip((magnitude[active] / geomean) ** alpha, *SCALE_CLAMP)
    return scales


def awq_quantize(
    w: np.ndarray, x: np.ndarray, k: int, group_size: int = 128
) -> tuple[QuantizedMatrix, float, float]:
    """Activation-aware quantization via per-channel scaling search.

    Channels with larger mean |activation| are scaled up by
    ``(a_j / geomean(a))^alpha`` before rounding, spending grid resolution on
    salient channels; alpha is picked from a 21-point grid by the proxy loss
    of the descaled reconstruction. The chosen scales are folded into the
    stored grids (one (lo, hi) pair per channel) so plain ``dequantize``
    reproduces the effective weights.
    """
    w = _check_weight(w)
    k = _check_bits(k)
    if group_size <= 0:
        raise ValueError(f"group_size must be >= 1, got {group_size}")
    x = _check_activations(x, w)

    magnitude = np.mean(np.abs(x.astype(np.float64)), axis=0)
    best: tuple[float, float, QuantizedMatrix, np.ndarray] | None = None
    for alpha in ALPHA_GRID:
        scales = _channel_scales(magnitude, alpha)
        scaled = (w.astype(np.float64) * scales).astype(np.float32)
        qm_scaled = rtn_group_quantize(scaled, k, group_size)
        w_eff = (dequantize(qm_scaled).astype(np.float64) / scales).astype(np.float32)
        loss = proxy_loss(w, w_eff, x)
        if best is None or loss < best[0]:
            best = (loss, alpha, qm_scaled, scales)

    loss, alpha, qm_scaled, scales = best
    search = AwqSearch(channel_magnitude=magnitude, alpha_grid=ALPHA_GRID, chosen_alpha=alpha)
    if np.all(scales == 1.0):
        # alpha = 0 (or flat activations): identical to plain RTN, stored as such.
        return qm_scaled, search.chosen_alpha, loss

    rows, cols = w.shape
    col_group = np.arange(cols) // qm_scaled.group_size
    if qm_scaled.scheme is GridScheme.PER_TENSOR:
        lo_scaled = np.full((rows, cols), qm_scaled.grid_lo[0, 0], dtype=np.float64)
        hi_scaled = np.full((rows, cols), qm_scaled.grid_hi[0, 0], dtype=np.float64)
    else:
        lo_scaled = qm_scaled.grid_lo.astype(np.float64)[:, col_group]
        hi_scaled = qm_scaled.grid_hi.astype(np.float64)[:, col_group]
    qm = QuantizedMatrix(
        codes=qm_scaled.codes,
        bits=k,
        scheme=GridScheme.PER_GROUP,
        group_size=1,
        grid_lo=(lo_scaled / scales).astype(np.float32),
        grid_hi=(hi_scaled / scales).astype(np.float32),
        rows=rows,
        cols=cols,
    )
    return qm, search.chosen_alpha, proxy_loss(w, dequantize(qm), x)
