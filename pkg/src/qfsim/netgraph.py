"""Typed layer graphs: forward evaluation and exact reverse-mode gradients.

A ``Model`` is an ordered list of ``BlockGraph``s; a block is an ordered list
of layers (linear, conv2d, leaky-relu, nearest upsample). Linear and conv
layers may carry a weight quantizer, any layer may carry an activation
quantizer applied to its output, and the model may quantize its raw input.

Forward supports four modes used by the pipelines:

* plain quantized inference (``quantized=True``, default hard rounding),
* full-precision evaluation (``quantized=False``), bypassing every quantizer,
* calibration (``observers=...`` with ``observe_only=True``): full-precision
  pass that feeds activation observers,
* moving-average QAT (``observers=...`` with ``observe_only=False``): observe,
  refresh the quantizer params, then quantize with the fresh params.

``backward`` consumes the trace written by ``forward(record=True)`` and
differentiates every quantizer node by its estimator (clipped STE, LSQ, or
the soft AdaRound relaxation for weights).
"""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import (
    AlreadyQuantizedError,
    InvalidParamsError,
    MissingTraceError,
    ShapeMismatchError,
)
from .observers import ObserverState, finalize, observe
from .quant import (
    AdaRoundState,
    Estimator,
    Granularity,
    QuantParams,
    QuantizerSpec,
    adaround_weight_grad_v,
    backward_lsq,
    backward_ste,
    fake_quant,
    quantize_weight_adaround,
)
from .tensor import (
    Tensor,
    check_finite,
    col2im,
    conv2d,
    conv_output_hw,
    im2col,
    leaky_relu,
    matmul,
)


@dataclass
class WeightQuantizer:
    spec: QuantizerSpec
    params: QuantParams | None = None
    adaround: AdaRoundState | None = None


@dataclass
class ActQuantizer:
    spec: QuantizerSpec
    params: QuantParams | None = None


@dataclass
class Linear:
    in_features: int
    out_features: int
    weight: Tensor  # [out_features, in_features]
    bias: Tensor | None = None
    weight_quant: WeightQuantizer | None = None
    act_quant: ActQuantizer | None = None
    kind: str = field(default="linear", init=False, repr=False)


@dataclass
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    weight: Tensor = None  # [out_channels, in_channels, kernel, kernel]
    bias: Tensor | None = None
    weight_quant: WeightQuantizer | None = None
    act_quant: ActQuantizer | None = None
    kind: str = field(default="conv2d", init=False, repr=False)


@dataclass
class LeakyRelu:
    slope: float = 0.2
    act_quant: ActQuantizer | None = None
    kind: str = field(default="leaky_relu", init=False, repr=False)


@dataclass
class Upsample:
    factor: int = 2
    act_quant: ActQuantizer | None = None
    kind: str = field(default="upsample", init=False, repr=False)


Layer = Union[Linear, Conv2d, LeakyRelu, Upsample]

WEIGHTED_KINDS = ("linear", "conv2d")


@dataclass
class BlockGraph:
    """Ordered layer sequence; the unit of reconstruction.

    ``input_reshape`` optionally reinterprets each incoming sample as the
    given per-sample shape (e.g. a feature vector viewed as C x H x W when a
    linear stage feeds a convolutional one).
    """

    name: str
    layers: list[Layer] = field(default_factory=list)
    input_reshape: tuple[int, ...] | None = None


@dataclass
class Model:
    blocks: list[BlockGraph] = field(default_factory=list)
    input_quant: ActQuantizer | None = None


@dataclass
class LayerTrace:
    x: Tensor
    y_pre: Tensor
    w_eff: Tensor | None = None
    cols: Tensor | None = None
    quantized_weight: bool = False
    quantized_act: bool = False
    hard: bool = True


@dataclass
class BlockTrace:
    input_shape: tuple[int, ...]
    entries: list[LayerTrace]
    output: Tensor


@dataclass
class ModelTrace:
    raw_input: Tensor
    input_quant_applied: bool
    block_inputs: list[Tensor]
    block_outputs: list[Tensor]
    block_traces: list[BlockTrace]
    output: Tensor


Gradients = dict[str, Tensor]


def _matmul_fast(a: Tensor, b: Tensor) -> Tensor:
    """Deterministic 2-d product for backward reductions.

    Gradient contractions run over batch*spatial axes (thousands of terms),
    where the strict ascending-k accumulation of :func:`tensor.matmul` is too
    slow. einsum without optimization uses a fixed, BLAS-free reduction order,
    so results stay bit-reproducible for identical inputs.
    """
    return np.einsum("ik,kj->ij", a, b, optimize=False)


def _apply_act_node(
    quant: ActQuantizer | None,
    y_pre: Tensor,
    *,
    quantized: bool,
    observer: ObserverState | None,
    observe_only: bool,
) -> tuple[Tensor, bool]:
    """Shared activation-quantizer node logic; returns (output, was_quantized)."""
    if quant is None:
        return y_pre, False
    if observer is not None:
        observe(observer, y_pre)
        if observe_only:
            return y_pre, False
        quant.params = finalize(observer, quant.spec)
        return fake_quant(y_pre, quant.spec, quant.params), True
    if not quantized:
        return y_pre, False
    if quant.params is None:
        raise InvalidParamsError("activation quantizer has no calibrated params")
    return fake_quant(y_pre, quant.spec, quant.params), True


def _effective_weight(layer, *, quantized: bool, hard: bool) -> tuple[Tensor, bool]:
    wq = layer.weight_quant
    if wq is None or not quantized:
        return layer.weight, False
    if wq.params is None:
        raise InvalidParamsError(f"{layer.kind} weight quantizer has no calibrated params")
    if wq.spec.estimator is Estimator.ADAROUND:
        if wq.adaround is None:
            raise InvalidParamsError("adaround estimator without rounding state")
        return (
            quantize_weight_adaround(layer.weight, wq.spec, wq.params, wq.adaround, hard=hard),
            True,
        )
    return fake_quant(layer.weight, wq.spec, wq.params), True


def _layer_forward(
    layer: Layer,
    x: Tensor,
    *,
    quantized: bool,
    hard: bool,
    record: bool,
    observer: ObserverState | None,
    observe_only: bool,
) -> tuple[Tensor, LayerTrace | None]:
    w_eff = None
    cols = None
    q_weight = False

    if layer.kind == "linear":
        if x.ndim != 2 or x.shape[1] != layer.in_features:
            raise ShapeMismatchError(
                f"linear expects [N, {layer.in_features}], got {x.shape}"
            )
        w_eff, q_weight = _effective_weight(layer, quantized=quantized, hard=hard)
        y_pre = matmul(x, np.ascontiguousarray(w_eff.T))
        if layer.bias is not None:
            y_pre = y_pre + layer.bias
    elif layer.kind == "conv2d":
        w_eff, q_weight = _effective_weight(layer, quantized=quantized, hard=hard)
        if record:
            # Cache the unfolded input so backward can reuse it.
            cols = im2col(x, layer.kernel, layer.kernel, layer.stride, layer.padding)
            n = x.shape[0]
            ho, wo = conv_output_hw(
                x.shape[2], x.shape[3], layer.kernel, layer.kernel, layer.stride, layer.padding
            )
            wmat = w_eff.reshape(layer.out_channels, -1)
            flat = matmul(cols, np.ascontiguousarray(wmat.T))
            y_pre = np.ascontiguousarray(
                flat.reshape(n, ho, wo, layer.out_channels).transpose(0, 3, 1, 2)
            )
        else:
            y_pre = conv2d(x, w_eff, layer.stride, layer.padding)
        if layer.bias is not None:
            y_pre = y_pre + layer.bias.reshape(1, -1, 1, 1)
    elif layer.kind == "leaky_relu":
        y_pre = leaky_relu(x, layer.slope)
    elif layer.kind == "upsample":
        if x.ndim != 4:
            raise ShapeMismatchError(f"upsample expects [N,C,H,W], got {x.shape}")
        f = layer.factor
        y_pre = np.repeat(np.repeat(x, f, axis=2), f, axis=3)
    else:  # pragma: no cover - closed layer vocabulary
        raise InvalidParamsError(f"unknown layer kind {layer.kind!r}")

    check_finite(y_pre, f"{layer.kind} forward")
    y, q_act = _apply_act_node(
        layer.act_quant,
        y_pre,
        quantized=quantized,
        observer=observer,
        observe_only=observe_only,
    )

    trace = None
    if record:
        trace = LayerTrace(
            x=x,
            y_pre=y_pre,
            w_eff=w_eff,
            cols=cols,
            quantized_weight=q_weight,
            quantized_act=q_act,
            hard=hard,
        )
    return y, trace


def block_forward(
    block: BlockGraph,
    x: Tensor,
    record: bool = False,
    *,
    quantized: bool = True,
    hard_rounding: bool = True,
    observers: dict[int, ObserverState] | None = None,
    observe_only: bool = False,
) -> tuple[Tensor, BlockTrace | None]:
    input_shape = x.shape
    if block.input_reshape is not None:
        per_sample = math.prod(block.input_reshape)
        if x.ndim < 1 or x[0].size != per_sample:
            raise ShapeMismatchError(
                f"block {block.name!r}: cannot view sample of {x[0].size} elements "
                f"as {block.input_reshape}"
            )
        x = x.reshape((x.shape[0], *block.input_reshape))
    entries: list[LayerTrace] = []
    for i, layer in enumerate(block.layers):
        obs = observers.get(i) if observers else None
        x, entry = _layer_forward(
            layer,
            x,
            quantized=quantized,
            hard=hard_rounding,
            record=record,
            observer=obs,
            observe_only=observe_only,
        )
        if record:
            entries.append(entry)
    trace = BlockTrace(input_shape=input_shape, entries=entries, output=x) if record else None
    return x, trace


def model_forward(
    model: Model,
    x: Tensor,
    record: bool = False,
    *,
    quantized: bool = True,
    hard_rounding: bool = True,
    observers: dict | None = None,
    observe_only: bool = False,
) -> tuple[Tensor, ModelTrace | None]:
    raw = x
    obs_in = observers.get("input") if observers else None
    x, input_applied = _apply_act_node(
        model.input_quant,
        x,
        quantized=quantized,
        observer=obs_in,
        observe_only=observe_only,
    )
    block_inputs, block_outputs, block_traces = [], [], []
    for bi, block in enumerate(model.blocks):
        block_obs = None
        if observers:
            block_obs = {
                key[1]: st
                for key, st in observers.items()
                if isinstance(key, tuple) and key[0] == bi
            } or None
        block_inputs.append(x)
        x, btr = block_forward(
            block,
            x,
            record,
            quantized=quantized,
            hard_rounding=hard_rounding,
            observers=block_obs,
            observe_only=observe_only,
        )
        block_outputs.append(x)
        if record:
            block_traces.append(btr)
    trace = None
    if record:
        trace = ModelTrace(
            raw_input=raw,
            input_quant_applied=input_applied,
            block_inputs=block_inputs,
            block_outputs=block_outputs,
            block_traces=block_traces,
            output=x,
        )
    return x, trace


def forward(model_or_block, x: Tensor, record: bool = False, **kwargs):
    """Dispatch to :func:`model_forward` or :func:`block_forward`."""
    if isinstance(model_or_block, Model):
        return model_forward(model_or_block, x, record, **kwargs)
    return block_forward(model_or_block, x, record, **kwargs)


def _act_node_backward(
    quant: ActQuantizer, entry_y_pre: Tensor, grad: Tensor, grads: Gradients, prefix: str
) -> Tensor:
    est = quant.spec.estimator
    if est is Estimator.LSQ:
        grad, g_delta, g_zero = backward_lsq(grad, entry_y_pre, quant.spec, quant.params)
        grads[prefix + "a_delta"] = g_delta
        grads[prefix + "a_zero"] = g_zero
        return grad
    return backward_ste(grad, entry_y_pre, quant.spec, quant.params)


def _weight_node_backward(
    layer, grad_w_eff: Tensor, grads: Gradients, prefix: str
) -> None:
    wq = layer.weight_quant
    est = wq.spec.estimator
    if est is Estimator.ADAROUND:
        # AdaRound freezes the underlying weight; only the logits learn.
        grads[prefix + "v"] = adaround_weight_grad_v(
            grad_w_eff, layer.weight, wq.spec, wq.params, wq.adaround
        )
    elif est is Estimator.LSQ:
        grad_w, g_delta, g_zero = backward_lsq(grad_w_eff, layer.weight, wq.spec, wq.params)
        grads[prefix + "weight"] = grad_w
        grads[prefix + "w_delta"] = g_delta
        grads[prefix + "w_zero"] = g_zero
    else:
        grads[prefix + "weight"] = backward_ste(grad_w_eff, layer.weight, wq.spec, wq.params)


def _layer_backward(
    layer: Layer, entry: LayerTrace, grad: Tensor, grads: Gradients, prefix: str
) -> Tensor:
    if entry.quantized_act:
        grad = _act_node_backward(layer.act_quant, entry.y_pre, grad, grads, prefix)

    if layer.kind == "linear":
        grad_w_eff = _matmul_fast(np.ascontiguousarray(grad.T), entry.x)
        if layer.bias is not None:
            grads[prefix + "bias"] = grad.sum(axis=0)
        grad_x = _matmul_fast(grad, entry.w_eff)
    elif layer.kind == "conv2d":
        n, cout, ho, wo = grad.shape
        g_mat = np.ascontiguousarray(grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout))
        grad_wmat = _matmul_fast(np.ascontiguousarray(g_mat.T), entry.cols)
        grad_w_eff = grad_wmat.reshape(entry.w_eff.shape)
        if layer.bias is not None:
            grads[prefix + "bias"] = grad.sum(axis=(0, 2, 3))
        grad_cols = _matmul_fast(g_mat, entry.w_eff.reshape(cout, -1))
        grad_x = col2im(
            grad_cols, entry.x.shape, layer.kernel, layer.kernel, layer.stride, layer.padding
        )
    elif layer.kind == "leaky_relu":
        return grad * np.where(entry.x >= 0.0, 1.0, layer.slope)
    elif layer.kind == "upsample":
        f = layer.factor
        n, c, hf, wf = grad.shape
        return grad.reshape(n, c, hf // f, f, wf // f, f).sum(axis=(3, 5))
    else:  # pragma: no cover
        raise InvalidParamsError(f"unknown layer kind {layer.kind!r}")

    if entry.quantized_weight:
        _weight_node_backward(layer, grad_w_eff, grads, prefix)
    else:
        grads[prefix + "weight"] = grad_w_eff
    return grad_x


def block_backward(
    block: BlockGraph, trace: BlockTrace | None, grad_out: Tensor, key_prefix: str = ""
) -> tuple[Tensor, Gradients]:
    """Reverse-mode gradients of a recorded block forward.

    Returns the gradient w.r.t. the block input plus a dict keyed
    ``l{i}.{weight,bias,w_delta,w_zero,v,a_delta,a_zero}``.
    """
    if trace is None or len(trace.entries) != len(block.layers):
        raise MissingTraceError("block backward needs the trace from forward(record=True)")
    if grad_out.shape != trace.output.shape:
        raise MissingTraceError(
            f"grad_out shape {grad_out.shape} != traced output {trace.output.shape}"
        )
    grads: Gradients = {}
    grad = grad_out
    for i in range(len(block.layers) - 1, -1, -1):
        grad = _layer_backward(
            block.layers[i], trace.entries[i], grad, grads, f"{key_prefix}l{i}."
        )
    if block.input_reshape is not None:
        grad = grad.reshape(trace.input_shape)
    return grad, grads


def model_backward(
    model: Model, trace: ModelTrace | None, grad_out: Tensor
) -> tuple[Tensor, Gradients]:
    """Chain block backwards in reverse; keys gain a ``b{i}.`` prefix."""
    if trace is None or len(trace.block_traces) != len(model.blocks):
        raise MissingTraceError("model backward needs the trace from forward(record=True)")
    grads: Gradients = {}
    grad = grad_out
    for bi in range(len(model.blocks) - 1, -1, -1):
        grad, bg = block_backward(model.blocks[bi], trace.block_traces[bi], grad, f"b{bi}.")
        grads.update(bg)
    if trace.input_quant_applied:
        grad = _act_node_backward(model.input_quant, trace.raw_input, grad, grads, "input.")
    return grad, grads


def backward(block: BlockGraph, trace: BlockTrace, grad_out: Tensor):
    """Alias for :func:`block_backward` (trace carries the forward's input)."""
    return block_backward(block, trace, grad_out)


def attach_quantizers(
    model: Model,
    weight_spec: QuantizerSpec,
    act_spec: QuantizerSpec,
    quantize_input: bool = True,
) -> Model:
    """Return a copy of ``model`` with uninitialized quantizers attached.

    Linear/conv layers gain a weight quantizer; every nonlinearity and every
    block output gains an activation quantizer; optionally the raw model
    input is quantized too. Params stay ``None`` until calibration.
    """
    if act_spec.estimator is Estimator.ADAROUND:
        raise InvalidParamsError("adaround is a weight estimator")
    if act_spec.granularity is not Granularity.PER_TENSOR:
        raise InvalidParamsError("activation quantization is per-tensor only")
    if weight_spec.granularity is Granularity.PER_CHANNEL and weight_spec.axis != 0:
        raise InvalidParamsError("per-channel weight axis must be the output axis (0)")

    out = copy.deepcopy(model)
    if out.input_quant is not None:
        raise AlreadyQuantizedError("model already has an input quantizer")
    for block in out.blocks:
        for i, layer in enumerate(block.layers):
            if layer.act_quant is not None or getattr(layer, "weight_quant", None) is not None:
                raise AlreadyQuantizedError(f"block {block.name!r} already quantized")
            if layer.kind in WEIGHTED_KINDS:
                layer.weight_quant = WeightQuantizer(spec=weight_spec)
            if layer.kind == "leaky_relu" or i == len(block.layers) - 1:
                layer.act_quant = ActQuantizer(spec=act_spec)
    if quantize_input:
        out.input_quant = ActQuantizer(spec=act_spec)
    return out


def set_estimators(
    model: Model,
    weight_estimator: Estimator | None = None,
    act_estimator: Estimator | None = None,
) -> None:
    """Swap the backward estimator on all attached quantizer specs in place."""
    for _, _, layer in iter_layers(model):
        if weight_estimator is not None and getattr(layer, "weight_quant", None):
            layer.weight_quant.spec = dataclasses.replace(
                layer.weight_quant.spec, estimator=weight_estimator
            )
        if act_estimator is not None and layer.act_quant is not None:
            layer.act_quant.spec = dataclasses.replace(
                layer.act_quant.spec, estimator=act_estimator
            )
    if act_estimator is not None and model.input_quant is not None:
        model.input_quant.spec = dataclasses.replace(
            model.input_quant.spec, estimator=act_estimator
        )


def iter_layers(model: Model):
    for bi, block in enumerate(model.blocks):
        for li, layer in enumerate(block.layers):
            yield bi, li, layer


def act_sites(model: Model) -> list:
    """Keys of every activation-quantizer site ('input' or (block, layer))."""
    sites = []
    if model.input_quant is not None:
        sites.append("input")
    for bi, li, layer in iter_layers(model):
        if layer.act_quant is not None:
            sites.append((bi, li))
    return sites


def get_act_quant(model: Model, site) -> ActQuantizer:
    if site == "input":
        return model.input_quant
    bi, li = site
    return model.blocks[bi].layers[li].act_quant


def param_arrays(model: Model) -> dict[str, Tensor]:
    """Name -> live array view of every mutable parameter in the model.

    Keys follow the gradient naming scheme (``b{i}.l{j}.weight`` ...), so a
    training loop can zip gradients onto parameters directly. Re-collect after
    any operation that replaces QuantParams objects.
    """
    out: dict[str, Tensor] = {}
    if model.input_quant is not None and model.input_quant.params is not None:
        out["input.a_delta"] = model.input_quant.params.delta
        out["input.a_zero"] = model.input_quant.params.zero_point
    for bi, li, layer in iter_layers(model):
        prefix = f"b{bi}.l{li}."
        if layer.kind in WEIGHTED_KINDS:
            out[prefix + "weight"] = layer.weight
            if layer.bias is not None:
                out[prefix + "bias"] = layer.bias
            wq = layer.weight_quant
            if wq is not None and wq.params is not None:
                out[prefix + "w_delta"] = wq.params.delta
                out[prefix + "w_zero"] = wq.params.zero_point
            if wq is not None and wq.adaround is not None:
                out[prefix + "v"] = wq.adaround.v
        if layer.act_quant is not None and layer.act_quant.params is not None:
            out[prefix + "a_delta"] = layer.act_quant.params.delta
            out[prefix + "a_zero"] = layer.act_quant.params.zero_point
    return out


def architecture_signature(model: Model) -> list:
    """Structural fingerprint used to compare two models' architectures."""
    sig = []
    for block in model.blocks:
        bsig = {"reshape": list(block.input_reshape) if block.input_reshape else None}
        lsig = []
        for layer in block.layers:
            if layer.kind == "linear":
                lsig.append(("linear", layer.in_features, layer.out_features))
            elif layer.kind == "conv2d":
                lsig.append(
                    (
                        "conv2d",
                        layer.in_channels,
                        layer.out_channels,
                        layer.kernel,
                        layer.stride,
                        layer.padding,
                    )
                )
            elif layer.kind == "leaky_relu":
                lsig.append(("leaky_relu", layer.slope))
            else:
                lsig.append(("upsample", layer.factor))
        bsig["layers"] = lsig
        sig.append(bsig)
    return sig
