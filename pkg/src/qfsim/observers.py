"""Range-statistics observers that turn value streams into quantizer params.

An observer tracks per-group lower/upper bounds of the values it sees, either
as plain min/max or as empirical quantiles, smoothed across observations with
an exponential moving average (``running = m * running + (1-m) * batch``).
``finalize`` converts the bounds into a step size and zero point.

Activations are observed per tensor; per-channel observation (``axis``) is
meant for weights, where a single pass suffices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyGroupError,
    InvalidParamsError,
    NotObservedError,
    QOutOfRangeError,
)
from .quant import Granularity, QuantMode, QuantParams, QuantizerSpec
from .tensor import Tensor

_DEGENERATE_EPS = 1e-8


def empirical_quantile(x: Tensor, q: float) -> float:
    """Linear-interpolation quantile over sorted order statistics.

    Position p = q * (N - 1); the value interpolates between the two
    neighbouring order statistics.
    """
    if not 0.0 <= q <= 1.0:
        raise QOutOfRangeError(f"quantile {q} outside [0, 1]")
    flat = np.asarray(x, dtype=np.float64).ravel()
    if flat.size == 0:
        raise EmptyGroupError("quantile of empty data")
    s = np.sort(flat)
    p = q * (s.size - 1)
    i = int(math.floor(p))
    frac = p - i
    if frac == 0.0 or i + 1 >= s.size:
        return float(s[i])
    return float(s[i] + frac * (s[i + 1] - s[i]))


def _sorted_rows_quantile(rows_sorted: Tensor, q: float) -> Tensor:
    """Vectorized linear-interpolation quantile per pre-sorted row."""
    n = rows_sorted.shape[1]
    p = q * (n - 1)
    i = int(math.floor(p))
    frac = p - i
    if frac == 0.0 or i + 1 >= n:
        return rows_sorted[:, i].copy()
    return rows_sorted[:, i] + frac * (rows_sorted[:, i + 1] - rows_sorted[:, i])


@dataclass
class ObserverState:
    """Running per-group range bounds.

    kind "minmax" pins the quantile pair to (0, 1); "quantile" uses
    (q_lo, q_hi). The first observation initializes the running bounds
    directly; later ones apply the moving average.
    """

    kind: str = "quantile"
    q_lo: float = 0.0
    q_hi: float = 1.0
    momentum: float = 0.99
    axis: int | None = None
    running_lo: Tensor | None = None
    running_hi: Tensor | None = None
    count: int = 0

    def __post_init__(self):
        if self.kind not in ("minmax", "quantile"):
            raise InvalidParamsError(f"unknown observer kind {self.kind!r}")
        if self.kind == "minmax":
            self.q_lo, self.q_hi = 0.0, 1.0
        if not 0.0 <= self.q_lo < 0.5:
            raise QOutOfRangeError(f"q_lo {self.q_lo} outside [0, 0.5)")
        if not 0.5 < self.q_hi <= 1.0:
            raise QOutOfRangeError(f"q_hi {self.q_hi} outside (0.5, 1]")
        if not 0.0 < self.momentum < 1.0:
            raise InvalidParamsError(f"momentum {self.momentum} outside (0, 1)")


def _group_rows(x: Tensor, axis: int | None) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise EmptyGroupError("observe() got an empty tensor")
    if axis is None:
        return x.reshape(1, -1)
    if not 0 <= axis < x.ndim:
        raise InvalidParamsError(f"observer axis {axis} invalid for shape {x.shape}")
    moved = np.moveaxis(x, axis, 0)
    return moved.reshape(moved.shape[0], -1)


def observe(state: ObserverState, x: Tensor) -> ObserverState:
    """Fold one tensor into the running bounds; returns the mutated state."""
    rows = _group_rows(x, state.axis)
    if rows.shape[1] == 0:
        raise EmptyGroupError("observe() got empty groups")
    rows_sorted = np.sort(rows, axis=1)
    batch_lo = _sorted_rows_quantile(rows_sorted, state.q_lo)
    batch_hi = _sorted_rows_quantile(rows_sorted, state.q_hi)
    if state.count == 0:
        state.running_lo = batch_lo.copy()
        state.running_hi = batch_hi.copy()
    else:
        m = state.momentum
        state.running_lo = m * state.running_lo + (1.0 - m) * batch_lo
        state.running_hi = m * state.running_hi + (1.0 - m) * batch_hi
    state.count += 1
    return state


def finalize(state: ObserverState, spec: QuantizerSpec) -> QuantParams:
    """Convert running bounds into (delta, zero_point) for ``spec``.

    Symmetric signed: delta = max(|lo|, hi) / 2^(n-1), zero point 0.
    Affine:           delta = (hi - lo) / (t_max - t_min),
                      z = clamp(round(-lo/delta), t_min, t_max).
    A degenerate group (hi == lo) falls back to delta = max(|hi|, 1e-8)/t_max.
    """
    if state.count < 1 or state.running_lo is None:
        raise NotObservedError("finalize() before any observation")
    lo = np.asarray(state.running_lo, dtype=np.float64)
    hi = np.asarray(state.running_hi, dtype=np.float64)
    degenerate = hi == lo
    fallback = np.maximum(np.abs(hi), _DEGENERATE_EPS) / spec.t_max

    if spec.mode is QuantMode.SYMMETRIC_SIGNED:
        denom = max(abs(spec.t_min), spec.t_max)
        delta = np.maximum(np.abs(lo), np.abs(hi)) / denom
        delta = np.where(degenerate, fallback, delta)
        zero = np.zeros_like(delta)
    else:
        span = spec.t_max - spec.t_min
        with np.errstate(divide="ignore", invalid="ignore"):
            delta = np.where(degenerate, fallback, (hi - lo) / span)
        zero = np.clip(np.rint(-lo / delta), spec.t_min, spec.t_max)

    if not np.all(delta > 0.0):
        raise InvalidParamsError("finalize produced a nonpositive delta")
    if spec.granularity is Granularity.PER_TENSOR and delta.shape != (1,):
        raise InvalidParamsError(
            f"per-tensor spec finalized from {delta.shape[0]} observer groups"
        )
    return QuantParams(delta=delta, zero_point=zero)


def observe_weight_once(
    w: Tensor, spec: QuantizerSpec, q_lo: float, q_hi: float
) -> QuantParams:
    """Single-pass quantile calibration for a static weight tensor."""
    axis = spec.axis if spec.granularity is Granularity.PER_CHANNEL else None
    kind = "minmax" if (q_lo, q_hi) == (0.0, 1.0) else "quantile"
    state = ObserverState(kind=kind, q_lo=q_lo, q_hi=q_hi, axis=axis)
    observe(state, w)
    return finalize(state, spec)
