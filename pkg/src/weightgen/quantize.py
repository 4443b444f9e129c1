"""Symmetric fake quantization for factor tensors, plus distinct-value bounds.

A tensor quantized to ``bits`` lives on the grid

    {scale * c / n_pos : c in [-n_pos, n_pos]},    n_pos = 2**(bits-1) - 1,

which has 2**bits - 1 levels including an exact zero.  ``scale`` is the
largest magnitude in the tensor (1.0 for an all-zero tensor), so the grid
always covers the data and the maximal element maps onto +-scale exactly.
Ties round away from zero.  ``bits == 1`` degenerates to the single-level
grid {0}.

Re-quantizing a quantized tensor is a bitwise no-op: the max element keeps
the scale identical, and every value sits within a fraction of a grid step
of its own code, so the round-to-integer recovers the same code and the
reconstruction repeats the same float operations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CardinalityError, NonFiniteError, QuantRangeError

MAX_BITS = 16


def positive_levels(bits: int) -> int:
    """Number of strictly positive grid levels, n_pos = 2**(bits-1) - 1."""
    if not isinstance(bits, (int, np.integer)) or bits < 1 or bits > MAX_BITS:
        raise QuantRangeError(f"bits must be an int in [1, {MAX_BITS}], got {bits!r}")
    return 2 ** (bits - 1) - 1


def grid_levels(bits: int) -> int:
    """Total grid levels, 2**bits - 1 (positives, negatives, and zero)."""
    return 2 * positive_levels(bits) + 1


def quantize_codes(m, bits: int):
    """Quantize to integer codes.  Returns (codes, scale).

    codes is int64 in [-n_pos, n_pos]; the represented values are
    scale * codes / n_pos.  Ties round away from zero.
    """
    n_pos = positive_levels(bits)
    m = np.asarray(m, dtype=np.float64)
    if not np.isfinite(m).all():
        raise NonFiniteError("quantize input contains non-finite entries")
    scale = float(np.max(np.abs(m))) if m.size else 0.0
    if scale == 0.0:
        scale = 1.0
    if n_pos == 0:
        return np.zeros(m.shape, dtype=np.int64), scale
    mag = np.floor(np.abs(m) / scale * n_pos + 0.5)
    codes = np.where(m < 0, -mag, mag)
    codes = np.clip(codes, -n_pos, n_pos).astype(np.int64)
    return codes, scale


def dequantize(codes, scale: float, bits: int) -> np.ndarray:
    """Map integer codes back to their float64 grid values."""
    n_pos = positive_levels(bits)
    codes = np.asarray(codes)
    if n_pos == 0:
        if codes.size and np.any(codes != 0):
            raise QuantRangeError("nonzero codes are invalid at bits=1")
        return np.zeros(codes.shape, dtype=np.float64)
    if codes.size and (np.max(codes) > n_pos or np.min(codes) < -n_pos):
        raise QuantRangeError(
            f"codes out of range [-{n_pos}, {n_pos}] for bits={bits}"
        )
    return scale * (codes.astype(np.float64) / n_pos)


def fake_quantize(m, bits: int) -> np.ndarray:
    """Quantize and reconstruct in one step (the training-time view)."""
    codes, scale = quantize_codes(m, bits)
    return dequantize(codes, scale, bits)


def ste_grad(m, scale: float, upstream) -> np.ndarray:
    """Straight-through gradient of fake quantization, clipped at the scale.

    Inside [-scale, scale] the quantizer is treated as identity; outside it
    is flat, so the gradient is zeroed.  With the per-tensor max scale the
    mask is all-ones, but callers may pass a frozen scale.
    """
    m = np.asarray(m, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if m.shape != upstream.shape:
        raise QuantRangeError(
            f"ste_grad shape mismatch: value {m.shape} vs upstream {upstream.shape}"
        )
    return np.where(np.abs(m) <= scale, upstream, 0.0)


@dataclass(frozen=True)
class DistinctValueBound:
    """Counting bound on distinct generated values (see distinct_value_bound)."""

    coeff_count: int
    coeff_bits: float
    weight_bits: float | None = None


def distinct_value_bound(
    q_basis: int,
    q_coeff: int,
    n_basis: int,
    q_mixer: int | None = None,
    n_cross: int | None = None,
) -> DistinctValueBound:
    """Bound the value diversity of generated coefficients and weights.

    A generated coefficient entry is a sum of n_basis products of one
    q_basis-bit value and one q_coeff-bit value, so it takes at most

        coeff_count = (2**q_basis - 1) * (2**q_coeff - 1) * n_basis + 1

    distinct values (every nonzero product contributes at most that many
    lattice points, plus the shared zero), i.e. an equivalent bit-width of
    at most coeff_bits = q_basis + q_coeff + log2(n_basis).  When the
    cross-kernel mixer width q_mixer and its cardinality n_cross are given,
    the generated weight bit-width is bounded the same way one level up:
    weight_bits = q_mixer + coeff_bits + log2(n_cross).
    """
    for name, v in (("q_basis", q_basis), ("q_coeff", q_coeff)):
        if not isinstance(v, (int, np.integer)) or v < 1 or v > MAX_BITS:
            raise QuantRangeError(f"{name} must be an int in [1, {MAX_BITS}], got {v!r}")
    if not isinstance(n_basis, (int, np.integer)) or n_basis < 1:
        raise CardinalityError(f"n_basis must be a positive int, got {n_basis!r}")
    count = (2**q_basis - 1) * (2**q_coeff - 1) * n_basis + 1
    coeff_bits = q_basis + q_coeff + math.log2(n_basis)
    weight_bits = None
    if (q_mixer is None) != (n_cross is None):
        raise CardinalityError("q_mixer and n_cross must be given together")
    if q_mixer is not None:
        if not isinstance(q_mixer, (int, np.integer)) or q_mixer < 1 or q_mixer > MAX_BITS:
            raise QuantRangeError(f"q_mixer must be an int in [1, {MAX_BITS}], got {q_mixer!r}")
        if not isinstance(n_cross, (int, np.integer)) or n_cross < 1:
            raise CardinalityError(f"n_cross must be a positive int, got {n_cross!r}")
        weight_bits = q_mixer + coeff_bits + math.log2(n_cross)
    return DistinctValueBound(int(count), float(coeff_bits), weight_bits)
