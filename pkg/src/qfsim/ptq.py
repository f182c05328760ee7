"""Post-training quantization pipelines.

``vanilla_ptq`` calibrates attached quantizers from data: weights by a
single-pass per-group quantile observation, activations by a moving average
of per-sample quantiles streamed one sample at a time.

``brecq_pipeline`` then reconstructs each block against the full-precision
model by minimizing the mean squared error between the quantized block's
output and the full-precision output on cached intermediate activations.
Two variants:

* "ste":      weights learn through the clipped straight-through estimator
              while every step size (weights and activations) learns through
              LSQ gradients.
* "adaround": weights are frozen and a per-weight soft rounding decision is
              learned instead (with an annealed binarization regularizer and
              warmup); activation step sizes still learn through LSQ. The
              rounding is committed (binarized) when the block finishes.

Both variants checkpoint the best iterate of the hard-rounded objective, so
a reconstructed block is never worse than its calibrated starting point.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DivergedLossError,
    EmptyDatasetError,
    InvalidConfigError,
    NotObservedError,
    ShapeMismatchError,
)
from .netgraph import (
    BlockGraph,
    Model,
    act_sites,
    block_backward,
    block_forward,
    get_act_quant,
    iter_layers,
    model_forward,
    param_arrays,
    set_estimators,
)
from .observers import ObserverState, observe_weight_once
from .quant import Estimator, QuantMode, init_adaround_state
from .tensor import Rng, Tensor

logger = logging.getLogger(__name__)

DELTA_FLOOR = 1e-8


@dataclass
class AdamState:
    """Bias-corrected Adam over a named parameter set."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)
    step_count: int = 0


def adam_step(
    state: AdamState,
    params: dict[str, Tensor],
    grads: dict[str, Tensor],
    lr_scale: float = 1.0,
) -> None:
    """One in-place Adam update of every parameter that has a gradient."""
    state.step_count += 1
    bc1 = 1.0 - state.beta1**state.step_count
    bc2 = 1.0 - state.beta2**state.step_count
    step_size = state.lr * lr_scale / bc1
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatchError(
                f"adam: grad {name} shape {g.shape} != param shape {p.shape}"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(state.v[name] / bc2) + state.eps
        p -= step_size * state.m[name] / denom


@dataclass
class PtqConfig:
    """Configuration shared by vanilla PTQ and both BRECQ variants.

    ``steps`` defaults to 2000 for the STE variant and 20000 for adaround;
    ``warmup_steps`` only matters for adaround. Quantile pairs are stored as
    (q_lo, q_hi).
    """

    variant: str = "vanilla"  # vanilla | ste | adaround
    steps: int | None = None
    warmup_steps: int = 4000
    batch_size: int = 16
    sample_size: int = 896
    lr_weights: float = 1e-2
    lr_quant: float = 1e-5
    quantile_pair: tuple[float, float] = (0.0001, 0.9999)
    weight_quantile_pair: tuple[float, float] = (0.0001, 0.9999)
    momentum: float = 0.99
    eval_every: int = 50
    adaround_lambda: float = 0.01

    def __post_init__(self):
        if self.variant not in ("vanilla", "ste", "adaround"):
            raise InvalidConfigError(f"unknown ptq variant {self.variant!r}")
        if self.batch_size < 1 or self.sample_size < self.batch_size:
            raise InvalidConfigError("need sample_size >= batch_size >= 1")
        if self.variant == "adaround" and self.warmup_steps >= self.resolved_steps():
            raise InvalidConfigError("warmup_steps must be < steps")

    def resolved_steps(self) -> int:
        if self.steps is not None:
            return self.steps
        return 20000 if self.variant == "adaround" else 2000

    @staticmethod
    def from_json(obj: dict) -> "PtqConfig":
        kwargs = {}
        for key in (
            "variant",
            "steps",
            "warmup_steps",
            "batch_size",
            "sample_size",
            "lr_weights",
            "lr_quant",
            "momentum",
            "eval_every",
            "adaround_lambda",
        ):
            if key in obj:
                kwargs[key] = obj[key]
        if "quantile_pair" in obj:
            kwargs["quantile_pair"] = tuple(obj["quantile_pair"])
        if "weight_quantile_pair" in obj:
            kwargs["weight_quantile_pair"] = tuple(obj["weight_quantile_pair"])
        return PtqConfig(**kwargs)


def calibrate_weight_quantizers(model: Model, q_lo: float, q_hi: float) -> None:
    """Single-pass quantile calibration of every attached weight quantizer."""
    for _, _, layer in iter_layers(model):
        wq = getattr(layer, "weight_quant", None)
        if wq is not None:
            wq.params = observe_weight_once(layer.weight, wq.spec, q_lo, q_hi)


def vanilla_ptq(model: Model, calib_inputs, config: PtqConfig) -> Model:
    """Quantile-based calibration of all weight and activation quantizers.

    ``calib_inputs`` is an iterable of single-sample input tensors (leading
    batch dim of 1 is added if missing); activations are observed on a
    full-precision pass, one sample at a time, with the configured momentum.
    """
    out = copy.deepcopy(model)
    calibrate_weight_quantizers(out, *config.weight_quantile_pair)

    q_lo, q_hi = config.quantile_pair
    kind = "minmax" if (q_lo, q_hi) == (0.0, 1.0) else "quantile"
    observers = {
        site: ObserverState(kind=kind, q_lo=q_lo, q_hi=q_hi, momentum=config.momentum)
        for site in act_sites(out)
    }
    seen = 0
    for sample in calib_inputs:
        x = np.asarray(sample, dtype=np.float64)
        model_forward(out, x, quantized=False, observers=observers, observe_only=True)
        seen += 1
    if seen == 0:
        raise NotObservedError("calibration stream is empty")
    from .observers import finalize

    for site, state in observers.items():
        quant = get_act_quant(out, site)
        quant.params = finalize(state, quant.spec)
    return out


@dataclass
class BrecqConfig:
    """Per-block view of :class:`PtqConfig` (same knobs, resolved variant)."""

    variant: str
    steps: int
    warmup_steps: int
    batch_size: int
    sample_size: int
    lr_weights: float
    lr_quant: float
    eval_every: int
    adaround_lambda: float

    @staticmethod
    def from_ptq(config: PtqConfig) -> "BrecqConfig":
        if config.variant not in ("ste", "adaround"):
            raise InvalidConfigError(f"brecq needs variant ste|adaround, got {config.variant!r}")
        return BrecqConfig(
            variant=config.variant,
            steps=config.resolved_steps(),
            warmup_steps=config.warmup_steps,
            batch_size=config.batch_size,
            sample_size=config.sample_size,
            lr_weights=config.lr_weights,
            lr_quant=config.lr_quant,
            eval_every=config.eval_every,
            adaround_lambda=config.adaround_lambda,
        )


def _block_objective(block: BlockGraph, x: Tensor, y_ref: Tensor) -> float:
    """Hard-rounded reconstruction error (mean squared over all elements)."""
    out, _ = block_forward(block, x, quantized=True, hard_rounding=True)
    return float(np.mean((out - y_ref) ** 2))


def _collect_block_training(block: BlockGraph, variant: str, lambda_reg: float):
    """Set estimators, create rounding state if needed, split param groups.

    Returns (weight_group, quant_group): name -> array maps whose entries are
    live views into the block. Weight-group params use lr_weights, quant-group
    params use lr_quant.
    """
    weight_group: dict[str, Tensor] = {}
    quant_group: dict[str, Tensor] = {}
    for i, layer in enumerate(block.layers):
        prefix = f"l{i}."
        wq = getattr(layer, "weight_quant", None)
        if wq is not None:
            if variant == "adaround":
                wq.spec = replace(wq.spec, estimator=Estimator.ADAROUND)
                wq.adaround = init_adaround_state(
                    layer.weight, wq.spec, wq.params, lambda_reg=lambda_reg
                )
                weight_group[prefix + "v"] = wq.adaround.v
            else:
                wq.spec = replace(wq.spec, estimator=Estimator.LSQ)
                weight_group[prefix + "weight"] = layer.weight
                quant_group[prefix + "w_delta"] = wq.params.delta
                if wq.spec.mode is QuantMode.AFFINE:
                    quant_group[prefix + "w_zero"] = wq.params.zero_point
            if layer.bias is not None:
                weight_group[prefix + "bias"] = layer.bias
        aq = layer.act_quant
        if aq is not None and aq.params is not None:
            aq.spec = replace(aq.spec, estimator=Estimator.LSQ)
            quant_group[prefix + "a_delta"] = aq.params.delta
            if aq.spec.mode is QuantMode.AFFINE:
                quant_group[prefix + "a_zero"] = aq.params.zero_point
    return weight_group, quant_group


def brecq_reconstruct_block(
    block_fp: BlockGraph,
    block_q: BlockGraph,
    inputs: Tensor,
    config: BrecqConfig,
    rng: Rng,
) -> tuple[BlockGraph, dict]:
    """Optimize one quantized block to match the full-precision block.

    ``inputs`` are the full-precision intermediate activations feeding this
    block (shape [S, ...]); targets are recomputed from ``block_fp``. Returns
    the reconstructed block and a small report dict.
    """
    n = inputs.shape[0]
    if n == 0:
        raise EmptyDatasetError("brecq got an empty sample set")
    if n > config.sample_size:
        inputs = inputs[: config.sample_size]
        n = inputs.shape[0]
    batch = min(config.batch_size, n)

    y_ref, _ = block_forward(block_fp, inputs, quantized=False)
    block = copy.deepcopy(block_q)
    weight_group, quant_group = _collect_block_training(
        block, config.variant, config.adaround_lambda
    )

    adam_w = AdamState(lr=config.lr_weights, beta1=0.9, beta2=0.999)
    adam_q = AdamState(lr=config.lr_quant, beta1=0.9, beta2=0.999)

    initial = _block_objective(block, inputs, y_ref)
    best_obj = initial
    best_snap = {k: v.copy() for k, v in {**weight_group, **quant_group}.items()}

    from .quant import adaround_regularizer

    for step in range(config.steps):
        idx = rng.integers(0, n, batch)
        xb, yb = inputs[idx], y_ref[idx]
        out, trace = block_forward(block, xb, record=True, hard_rounding=False)
        diff = out - yb
        loss = float(np.mean(diff**2))
        if not np.isfinite(loss):
            raise DivergedLossError(f"block loss diverged at step {step}")
        grad_out = 2.0 * diff / diff.size
        _, grads = block_backward(block, trace, grad_out)

        if config.variant == "adaround":
            for i, layer in enumerate(block.layers):
                wq = getattr(layer, "weight_quant", None)
                if wq is not None and wq.adaround is not None:
                    _, gv = adaround_regularizer(
                        wq.adaround, step, config.steps, config.warmup_steps
                    )
                    key = f"l{i}.v"
                    grads[key] = grads.get(key, 0.0) + gv

        gw = {k: grads[k] for k in weight_group if k in grads}
        gq = {k: grads[k] for k in quant_group if k in grads}
        adam_step(adam_w, weight_group, gw)
        adam_step(adam_q, quant_group, gq)
        for name, arr in quant_group.items():
            if name.endswith("delta"):
                np.maximum(arr, DELTA_FLOOR, out=arr)

        if (step + 1) % config.eval_every == 0:
            obj = _block_objective(block, inputs, y_ref)
            if obj < best_obj:
                best_obj = obj
                best_snap = {k: v.copy() for k, v in {**weight_group, **quant_group}.items()}

    final = _block_objective(block, inputs, y_ref)
    if final < best_obj:
        best_obj = final
    else:
        for k, v in {**weight_group, **quant_group}.items():
            v[...] = best_snap[k]

    if config.variant == "adaround":
        from .quant import binarize_adaround_state

        for layer in block.layers:
            wq = getattr(layer, "weight_quant", None)
            if wq is not None and wq.adaround is not None:
                binarize_adaround_state(wq.adaround)

    final = _block_objective(block, inputs, y_ref)
    report = {"initial_objective": initial, "final_objective": final}
    logger.info("block %s: objective %.3e -> %.3e", block.name, initial, final)
    return block, report


def record_block_io(model: Model, data: Tensor) -> tuple[list[Tensor], list[Tensor]]:
    """Full-precision inputs and outputs of every block over a sample set."""
    _, trace = model_forward(model, data, record=True, quantized=False)
    return trace.block_inputs, trace.block_outputs


def brecq_pipeline(
    model: Model, data: Tensor, config: PtqConfig, rng: Rng
) -> tuple[Model, list[dict]]:
    """Reconstruct every block in order against full-precision activations.

    ``model`` must already be calibrated (vanilla_ptq). Block inputs come
    from the full-precision model, recorded once up front, so per-block
    optimization is independent of earlier blocks' reconstruction.
    """
    bconfig = BrecqConfig.from_ptq(config)
    data = np.asarray(data, dtype=np.float64)
    if data.shape[0] == 0:
        raise EmptyDatasetError("brecq got an empty sample set")
    out = copy.deepcopy(model)
    block_inputs, _ = record_block_io(out, data)

    reports = []
    for bi, block in enumerate(out.blocks):
        block_rng = rng.spawn(bi)
        rebuilt, report = brecq_reconstruct_block(
            block, block, block_inputs[bi], bconfig, block_rng
        )
        out.blocks[bi] = rebuilt
        report["block"] = block.name
        reports.append(report)
    return out, reports
