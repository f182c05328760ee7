"""Uniform fake-quantizers and their backward estimators.

A quantizer maps a real value x onto the integer grid
``delta * (clamp(round(x / delta + z), t_min, t_max) - z)`` and back to the
reals in one step ("fake" quantization: the forward pass sees the rounding
error, the arithmetic stays float64). Symmetric signed quantizers pin z = 0
and use the range [-2^(n-1), 2^(n-1)-1]; affine quantizers use [0, 2^n - 1]
with a flexible zero point.

Note the zero point is added *before* rounding (round(x/delta + z)); some
libraries instead round x/delta and add z afterwards. The difference only
shows up for fractional shadow zero points during learning.

Three backward estimators are provided:

* STE      - clipped straight-through: gradient passes where the pre-clamp
             integer coordinate is in range, else zero.
* LSQ      - learned-step-size gradients for delta and (for affine mode) the
             zero point, scaled by 1/sqrt(N_group * t_max).
* AdaRound - per-weight soft rounding logits with a rectified sigmoid and an
             annealed binarization regularizer.

Rounding everywhere is round-half-to-even.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import InvalidParamsError, NonFiniteError
from .tensor import Tensor


class QuantMode(str, Enum):
    SYMMETRIC_SIGNED = "symmetric_signed"
    AFFINE = "affine"


class Granularity(str, Enum):
    PER_TENSOR = "per_tensor"
    PER_CHANNEL = "per_channel"


class RoundMode(str, Enum):
    HALF_TO_EVEN = "half_to_even"


class Estimator(str, Enum):
    STE = "ste"
    LSQ = "lsq"
    ADAROUND = "adaround"


@dataclass(frozen=True)
class QuantizerSpec:
    """Static description of a uniform quantizer."""

    bits: int
    mode: QuantMode = QuantMode.SYMMETRIC_SIGNED
    granularity: Granularity = Granularity.PER_TENSOR
    axis: int | None = None
    round_mode: RoundMode = RoundMode.HALF_TO_EVEN
    estimator: Estimator = Estimator.STE

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise InvalidParamsError(f"bits must be in [2, 8], got {self.bits}")
        if self.granularity is Granularity.PER_CHANNEL and self.axis is None:
            raise InvalidParamsError("per-channel spec needs an axis")
        if self.granularity is Granularity.PER_TENSOR and self.axis is not None:
            raise InvalidParamsError("per-tensor spec must not set an axis")

    @property
    def t_min(self) -> int:
        return -(2 ** (self.bits - 1)) if self.mode is QuantMode.SYMMETRIC_SIGNED else 0

    @property
    def t_max(self) -> int:
        if self.mode is QuantMode.SYMMETRIC_SIGNED:
            return 2 ** (self.bits - 1) - 1
        return 2**self.bits - 1

    def group_count(self, x: Tensor) -> int:
        if self.granularity is Granularity.PER_TENSOR:
            return 1
        if not 0 <= self.axis < x.ndim:
            raise InvalidParamsError(
                f"per-channel axis {self.axis} invalid for shape {x.shape}"
            )
        return x.shape[self.axis]

    def to_json(self) -> dict:
        return {
            "bits": self.bits,
            "mode": self.mode.value,
            "granularity": self.granularity.value,
            "axis": self.axis,
            "round_mode": self.round_mode.value,
            "estimator": self.estimator.value,
        }

    @staticmethod
    def from_json(obj: dict) -> "QuantizerSpec":
        return QuantizerSpec(
            bits=int(obj["bits"]),
            mode=QuantMode(obj["mode"]),
            granularity=Granularity(obj["granularity"]),
            axis=obj.get("axis"),
            round_mode=RoundMode(obj.get("round_mode", "half_to_even")),
            estimator=Estimator(obj.get("estimator", "ste")),
        )


@dataclass
class QuantParams:
    """Calibrated or learned quantizer state: one (delta, zero_point) per group.

    ``zero_point`` keeps a continuous shadow value so LSQ can learn it;
    forward evaluation always rounds it to an integer.
    """

    delta: Tensor
    zero_point: Tensor

    def __post_init__(self):
        self.delta = np.atleast_1d(np.asarray(self.delta, dtype=np.float64))
        self.zero_point = np.atleast_1d(np.asarray(self.zero_point, dtype=np.float64))

    def copy(self) -> "QuantParams":
        return QuantParams(self.delta.copy(), self.zero_point.copy())

    def to_json(self) -> dict:
        return {
            "delta": self.delta.tolist(),
            "zero_point": self.zero_point.tolist(),
        }

    @staticmethod
    def from_json(obj: dict) -> "QuantParams":
        return QuantParams(np.asarray(obj["delta"]), np.asarray(obj["zero_point"]))


@dataclass
class AdaRoundState:
    """Continuous rounding logits plus the regularizer schedule constants."""

    v: Tensor
    zeta: float = 1.1
    gamma: float = -0.1
    beta_start: float = 20.0
    beta_end: float = 2.0
    lambda_reg: float = 0.01

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.lambda_reg < 0:
            raise InvalidParamsError("lambda_reg must be >= 0")

    def copy(self) -> "AdaRoundState":
        return AdaRoundState(
            self.v.copy(), self.zeta, self.gamma, self.beta_start, self.beta_end, self.lambda_reg
        )


def rect_sigmoid(v: Tensor, zeta: float = 1.1, gamma: float = -0.1) -> Tensor:
    """h(v) = clamp(sigmoid(v) * (zeta - gamma) + gamma, 0, 1)."""
    sig = 1.0 / (1.0 + np.exp(-v))
    return np.clip(sig * (zeta - gamma) + gamma, 0.0, 1.0)


def rect_sigmoid_grad(v: Tensor, zeta: float = 1.1, gamma: float = -0.1) -> Tensor:
    """dh/dv, zero where the rectified sigmoid is clamped."""
    sig = 1.0 / (1.0 + np.exp(-v))
    raw = sig * (zeta - gamma) + gamma
    inside = (raw > 0.0) & (raw < 1.0)
    return np.where(inside, (zeta - gamma) * sig * (1.0 - sig), 0.0)


def init_adaround_state(w: Tensor, spec: QuantizerSpec, params: QuantParams, **kwargs) -> AdaRoundState:
    """Logits chosen so the soft rounding initially reproduces w's fractional part."""
    state = AdaRoundState(v=np.zeros_like(w), **kwargs)
    delta = _broadcast_groups(params.delta, spec, w)
    rest = w / delta - np.floor(w / delta)
    p = np.clip((rest - state.gamma) / (state.zeta - state.gamma), 1e-4, 1 - 1e-4)
    state.v = np.log(p / (1.0 - p))
    return state


def binarize_adaround_state(state: AdaRoundState) -> None:
    """Commit each soft rounding decision: h >= 0.5 rounds up, else down.

    Saturating the logits at +-20 makes the rectified sigmoid exactly 0 or 1,
    so soft and hard evaluation agree from here on.
    """
    h = rect_sigmoid(state.v, state.zeta, state.gamma)
    state.v = np.where(h >= 0.5, 20.0, -20.0)


def _broadcast_groups(vals: Tensor, spec: QuantizerSpec, x: Tensor) -> Tensor:
    """Reshape per-group values (G,) so they broadcast against x."""
    if spec.granularity is Granularity.PER_TENSOR:
        return vals.reshape(())
    shape = [1] * x.ndim
    shape[spec.axis] = len(vals)
    return vals.reshape(shape)


def _group_sums(x: Tensor, spec: QuantizerSpec) -> Tensor:
    """Sum x over each quantization group; returns shape (G,)."""
    if spec.granularity is Granularity.PER_TENSOR:
        return np.array([float(np.sum(x))])
    moved = np.moveaxis(x, spec.axis, 0)
    return moved.reshape(moved.shape[0], -1).sum(axis=1)


def group_elem_count(x: Tensor, spec: QuantizerSpec) -> int:
    """Elements per group (N_g in the LSQ gradient scale)."""
    g = spec.group_count(x)
    return x.size // g


def validate_params(spec: QuantizerSpec, params: QuantParams, x: Tensor) -> None:
    g = spec.group_count(x)
    if params.delta.shape != (g,) or params.zero_point.shape != (g,):
        raise InvalidParamsError(
            f"expected {g} parameter group(s), got delta {params.delta.shape} "
            f"zero_point {params.zero_point.shape}"
        )
    if not np.all(params.delta > 0.0):
        raise InvalidParamsError("delta must be positive in every group")
    if not np.all(np.isfinite(params.delta)) or not np.all(np.isfinite(params.zero_point)):
        raise InvalidParamsError("non-finite quantizer parameters")
    if spec.mode is QuantMode.SYMMETRIC_SIGNED and np.any(params.zero_point != 0.0):
        raise InvalidParamsError("symmetric signed mode requires zero_point == 0")
    zr = np.rint(params.zero_point)
    if np.any(zr < spec.t_min) or np.any(zr > spec.t_max):
        raise InvalidParamsError("zero_point outside the integer range")
    if not np.isfinite(x).all():
        raise NonFiniteError("fake_quant input contains NaN/Inf")


def fake_quant(x: Tensor, spec: QuantizerSpec, params: QuantParams) -> Tensor:
    """delta * (clamp(round(x/delta + z), t_min, t_max) - z) per group."""
    validate_params(spec, params, x)
    delta = _broadcast_groups(params.delta, spec, x)
    z = _broadcast_groups(np.rint(params.zero_point), spec, x)
    k = np.clip(np.rint(x / delta + z), spec.t_min, spec.t_max)
    return delta * (k - z)


def quantize_weight_adaround(
    w: Tensor,
    spec: QuantizerSpec,
    params: QuantParams,
    state: AdaRoundState,
    hard: bool = False,
) -> Tensor:
    """delta * clamp(floor(w/delta) + h(v), t_min, t_max).

    Soft mode uses the rectified sigmoid h(v) in [0, 1]; hard mode commits to
    the binary decision 1[h >= 0.5], landing exactly on the grid.
    """
    if spec.mode is not QuantMode.SYMMETRIC_SIGNED:
        raise InvalidParamsError("adaptive rounding supports symmetric signed weights only")
    validate_params(spec, params, w)
    if state.v.shape != w.shape:
        raise InvalidParamsError(
            f"rounding logits shape {state.v.shape} != weight shape {w.shape}"
        )
    delta = _broadcast_groups(params.delta, spec, w)
    h = rect_sigmoid(state.v, state.zeta, state.gamma)
    if hard:
        h = (h >= 0.5).astype(np.float64)
    k = np.clip(np.floor(w / delta) + h, spec.t_min, spec.t_max)
    return delta * k


def adaround_weight_grad_v(
    grad_out: Tensor,
    w: Tensor,
    spec: QuantizerSpec,
    params: QuantParams,
    state: AdaRoundState,
) -> Tensor:
    """Gradient of the soft-rounded weight w.r.t. the logits v."""
    delta = _broadcast_groups(params.delta, spec, w)
    h = rect_sigmoid(state.v, state.zeta, state.gamma)
    k = np.floor(w / delta) + h
    in_range = (k >= spec.t_min) & (k <= spec.t_max)
    return grad_out * delta * np.where(in_range, 1.0, 0.0) * rect_sigmoid_grad(
        state.v, state.zeta, state.gamma
    )


def backward_ste(
    grad_out: Tensor, x: Tensor, spec: QuantizerSpec, params: QuantParams
) -> Tensor:
    """Clipped straight-through gradient: pass where t_min <= x/delta + z <= t_max."""
    validate_params(spec, params, x)
    if grad_out.shape != x.shape:
        raise InvalidParamsError(
            f"grad shape {grad_out.shape} != input shape {x.shape}"
        )
    delta = _broadcast_groups(params.delta, spec, x)
    z = _broadcast_groups(params.zero_point, spec, x)
    s = x / delta + z
    mask = (s >= spec.t_min) & (s <= spec.t_max)
    return np.where(mask, grad_out, 0.0)


def lsq_grad_scale(spec: QuantizerSpec, n_group: int) -> float:
    """LSQ gradient scale g = 1/sqrt(N_g * t_max)."""
    return 1.0 / np.sqrt(float(n_group) * float(spec.t_max))


def backward_lsq(
    grad_out: Tensor, x: Tensor, spec: QuantizerSpec, params: QuantParams
) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients (grad_x, grad_delta, grad_zero) of the LSQ surrogate.

    With s = x/delta + z (continuous shadow z):

    * d/d delta = round(s) - s in range, t_min - z below, t_max - z above
    * d/d z     = 0 in range, -delta outside
    * d/d x     = the clipped STE mask

    Per-group gradients are element sums scaled by 1/sqrt(N_g * t_max).
    """
    validate_params(spec, params, x)
    if grad_out.shape != x.shape:
        raise InvalidParamsError(
            f"grad shape {grad_out.shape} != input shape {x.shape}"
        )
    delta = _broadcast_groups(params.delta, spec, x)
    z = _broadcast_groups(params.zero_point, spec, x)
    s = x / delta + z
    low = s < spec.t_min
    high = s > spec.t_max
    inside = ~(low | high)

    d_delta = np.where(
        inside, np.rint(s) - s, np.where(low, spec.t_min - z, spec.t_max - z)
    )
    d_zero = np.where(inside, 0.0, -delta)

    gscale = lsq_grad_scale(spec, group_elem_count(x, spec))
    grad_delta = _group_sums(grad_out * d_delta, spec) * gscale
    grad_zero = _group_sums(grad_out * d_zero, spec) * gscale
    grad_x = np.where(inside, grad_out, 0.0)
    return grad_x, grad_delta, grad_zero


def adaround_beta(
    state: AdaRoundState, step: int, total_steps: int, warmup_steps: int
) -> float:
    """Cosine anneal of the regularizer exponent over the post-warmup window."""
    span = max(1, total_steps - warmup_steps)
    t = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return state.beta_end + 0.5 * (state.beta_start - state.beta_end) * (
        1.0 + np.cos(np.pi * t)
    )


def adaround_regularizer(
    state: AdaRoundState, step: int, total_steps: int, warmup_steps: int
) -> tuple[float, Tensor]:
    """Binarization penalty lambda * sum(1 - |2h - 1|^beta) and its v-gradient.

    Inactive (zero loss and gradient) during the warmup window.
    """
    if not 0 <= step < total_steps:
        raise InvalidParamsError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return 0.0, np.zeros_like(state.v)
    beta = adaround_beta(state, step, total_steps, warmup_steps)
    h = rect_sigmoid(state.v, state.zeta, state.gamma)
    u = 2.0 * h - 1.0
    au = np.abs(u)
    loss = state.lambda_reg * float(np.sum(1.0 - au**beta))
    with np.errstate(divide="ignore", invalid="ignore"):
        pw = np.where(au > 0.0, au ** (beta - 1.0), 0.0)
    dd_h = -state.lambda_reg * beta * pw * np.sign(u) * 2.0
    grad_v = dd_h * rect_sigmoid_grad(state.v, state.zeta, state.gamma)
    return loss, grad_v
