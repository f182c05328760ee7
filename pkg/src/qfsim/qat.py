"""Quantization-aware training loops.

All strategies start from a quantile-calibrated model (vanilla PTQ) and train
weights through the clipped straight-through estimator. They differ in how
the quantizer parameters evolve:

* "ma"     - moving-average quantile tracking: every step re-observes
             activation quantiles (and re-derives weight step sizes from the
             current weights) until ``freeze_epoch``, then the params stay
             fixed for good.
* "lsq"    - step sizes and zero points are trained by LSQ gradients with
             their own learning rate.
* "hybrid" - moving-average until ``switch_epoch``, LSQ afterwards.
* "fixed"  - params frozen at their calibrated values; weights-only training
             (a deliberately weak baseline).

The training loss is ``w_adv * L_adv + beta * L_rec`` with a pluggable
reconstruction distance (builtin per-pixel MSE) and an optional adversarial
term built from user-provided discriminator scores combined with the
least-squares GAN criterion. The returned model is the best iterate by
held-out reconstruction distance.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import (
    ArchitectureMismatchError,
    DivergedLossError,
    EmptyDatasetError,
    InvalidConfigError,
    ShapeMismatchError,
)
from .netgraph import (
    Model,
    act_sites,
    architecture_signature,
    iter_layers,
    model_backward,
    model_forward,
    param_arrays,
    set_estimators,
)
from .observers import ObserverState
from .ptq import DELTA_FLOOR, AdamState, adam_step, calibrate_weight_quantizers
from .quant import Estimator, QuantMode
from .tensor import Rng, Tensor

logger = logging.getLogger(__name__)

# distance(out, target) -> (loss, grad_wrt_out)
Distance = Callable[[Tensor, Tensor], tuple[float, Tensor]]
# adversarial(out_q, out_fp) -> (loss, grad_wrt_out_q)
Adversarial = Callable[[Tensor, Tensor], tuple[float, Tensor]]


def mse_distance(out: Tensor, target: Tensor) -> tuple[float, Tensor]:
    """Per-pixel mean squared error and its gradient."""
    if out.shape != target.shape:
        raise ShapeMismatchError(f"mse: shapes {out.shape} and {target.shape} differ")
    diff = out - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def composite_distance(
    content: Distance, style: Distance, w_content: float = 3.0, w_style: float = 3e4
) -> Distance:
    """Weighted sum of two pluggable distances (content + style slots)."""

    def dist(out: Tensor, target: Tensor) -> tuple[float, Tensor]:
        lc, gc = content(out, target)
        ls, gs = style(out, target)
        return w_content * lc + w_style * ls, w_content * gc + w_style * gs

    return dist


def lsgan_generator_loss(
    scores_q: Tensor, scores_fp: Tensor, matching: bool = False
) -> float:
    """Least-squares GAN generator loss over discriminator scores.

    Default drives quantized-output scores to the real label 1; the
    "matching" variant instead matches them to the full-precision scores.
    """
    scores_q = np.asarray(scores_q, dtype=np.float64)
    scores_fp = np.asarray(scores_fp, dtype=np.float64)
    if scores_q.shape != scores_fp.shape:
        raise ShapeMismatchError(
            f"lsgan: score shapes {scores_q.shape} and {scores_fp.shape} differ"
        )
    target = scores_fp if matching else 1.0
    return float(np.mean((scores_q - target) ** 2))


def lsgan_generator_loss_grad(
    scores_q: Tensor, scores_fp: Tensor, matching: bool = False
) -> tuple[float, Tensor]:
    target = scores_fp if matching else 1.0
    diff = scores_q - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def make_lsgan_adversarial(discriminator, matching: bool = False) -> Adversarial:
    """Adapt a discriminator with forward/backward methods into a loss term.

    ``discriminator.forward(x)`` returns scores; ``discriminator.backward(x,
    grad_scores)`` returns the gradient w.r.t. x. The discriminator itself is
    fixed: only generator-side gradients flow.
    """

    def adv(out_q: Tensor, out_fp: Tensor) -> tuple[float, Tensor]:
        scores_q = discriminator.forward(out_q)
        scores_fp = discriminator.forward(out_fp)
        loss, g_scores = lsgan_generator_loss_grad(scores_q, scores_fp, matching)
        return loss, discriminator.backward(out_q, g_scores)

    return adv


@dataclass
class LossSpec:
    """Loss composition ``w_adv * L_adv + beta * L_rec``."""

    beta: float = 1.0
    distance: Distance | None = None  # defaults to mse_distance
    adversarial: Adversarial | None = None
    w_adv: float = 0.01
    w_content: float = 3.0
    w_style: float = 3e4

    def __post_init__(self):
        if self.beta < 0:
            raise InvalidConfigError("beta must be >= 0")
        if self.beta == 0 and self.adversarial is None:
            raise InvalidConfigError("at least one loss term must be enabled")

    def resolved_distance(self) -> Distance:
        return self.distance if self.distance is not None else mse_distance

    def evaluate(self, out: Tensor, target: Tensor) -> tuple[float, Tensor]:
        total = 0.0
        grad = np.zeros_like(out)
        if self.beta > 0:
            l, g = self.resolved_distance()(out, target)
            total += self.beta * l
            grad += self.beta * g
        if self.adversarial is not None:
            l, g = self.adversarial(out, target)
            total += self.w_adv * l
            grad += self.w_adv * g
        return total, grad


@dataclass
class QatConfig:
    strategy: str = "lsq"  # ma | lsq | hybrid | fixed
    epochs: int = 200
    freeze_epoch: int = 50
    switch_epoch: int = 50
    batch_size: int = 8
    lr_weights: float = 1e-5
    lr_quant: float = 1e-6
    beta1: float = 0.5
    beta2: float = 0.999
    cosine_schedule: bool = True
    holdout_fraction: float = 0.1
    momentum: float = 0.99
    ma_quantile_pair: tuple[float, float] = (0.001, 0.999)
    weight_quantile_pair: tuple[float, float] = (0.0001, 0.9999)

    def __post_init__(self):
        if self.strategy not in ("ma", "lsq", "hybrid", "fixed"):
            raise InvalidConfigError(f"unknown qat strategy {self.strategy!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidConfigError("need epochs >= 0 and batch_size >= 1")
        if self.freeze_epoch > self.epochs and self.strategy in ("ma", "hybrid"):
            raise InvalidConfigError("freeze_epoch must be <= epochs")
        if self.strategy == "hybrid" and self.switch_epoch > self.epochs:
            raise InvalidConfigError("switch_epoch must be <= epochs")

    @staticmethod
    def from_json(obj: dict) -> "QatConfig":
        kwargs = {k: obj[k] for k in (
            "strategy",
            "epochs",
            "freeze_epoch",
            "switch_epoch",
            "batch_size",
            "lr_weights",
            "lr_quant",
            "beta1",
            "beta2",
            "cosine_schedule",
            "holdout_fraction",
            "momentum",
        ) if k in obj}
        for key in ("ma_quantile_pair", "weight_quantile_pair"):
            if key in obj:
                kwargs[key] = tuple(obj[key])
        return QatConfig(**kwargs)


def _as_arrays(data) -> tuple[Tensor, Tensor]:
    if isinstance(data, tuple) and len(data) == 2:
        x, t = data
    else:
        pairs = list(data)
        if not pairs:
            raise EmptyDatasetError("distillation dataset is empty")
        x = np.stack([p[0] for p in pairs])
        t = np.stack([p[1] for p in pairs])
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptyDatasetError("distillation dataset is empty")
    if x.shape[0] != t.shape[0]:
        raise ShapeMismatchError("inputs and targets disagree on sample count")
    return x, t


def _learnable_quant_names(model: Model) -> set[str]:
    """Delta is always learnable; zero points only in affine mode."""
    names: set[str] = set()
    if model.input_quant is not None:
        names.add("input.a_delta")
        if model.input_quant.spec.mode is QuantMode.AFFINE:
            names.add("input.a_zero")
    for bi, li, layer in iter_layers(model):
        prefix = f"b{bi}.l{li}."
        wq = getattr(layer, "weight_quant", None)
        if wq is not None:
            names.add(prefix + "w_delta")
            if wq.spec.mode is QuantMode.AFFINE:
                names.add(prefix + "w_zero")
        if layer.act_quant is not None:
            names.add(prefix + "a_delta")
            if layer.act_quant.spec.mode is QuantMode.AFFINE:
                names.add(prefix + "a_zero")
    return names


def _clamp_deltas(model: Model) -> int:
    clamped = 0
    params = param_arrays(model)
    for name, arr in params.items():
        if name.endswith("delta"):
            below = arr < DELTA_FLOOR
            if below.any():
                clamped += int(below.sum())
                np.maximum(arr, DELTA_FLOOR, out=arr)
    return clamped


def qat_train(
    model_fp: Model,
    model_q: Model,
    data,
    cfg: QatConfig,
    loss: LossSpec | None = None,
    rng: Rng | None = None,
) -> tuple[Model, dict]:
    """Train a calibrated quantized model against distillation targets.

    ``data`` is either an (inputs, targets) array pair or a sequence of
    (input, target) samples where targets come from the full-precision model.
    Returns the epoch with the best held-out reconstruction distance.
    """
    loss = loss if loss is not None else LossSpec()
    rng = rng if rng is not None else Rng(0)
    x_all, t_all = _as_arrays(data)
    if architecture_signature(model_fp) != architecture_signature(model_q):
        raise ArchitectureMismatchError("full-precision and quantized models differ")

    n = x_all.shape[0]
    n_hold = max(1, int(round(cfg.holdout_fraction * n))) if n >= 2 else 0
    if n - n_hold < 1:
        n_hold = 0
    x_train, t_train = x_all[: n - n_hold], t_all[: n - n_hold]
    x_hold, t_hold = (x_all[n - n_hold :], t_all[n - n_hold :]) if n_hold else (x_all, t_all)

    model = copy.deepcopy(model_q)
    trains_quant_by_lsq = cfg.strategy == "lsq"
    set_estimators(
        model,
        weight_estimator=Estimator.LSQ if trains_quant_by_lsq else Estimator.STE,
        act_estimator=Estimator.LSQ if trains_quant_by_lsq else Estimator.STE,
    )

    adam_w = AdamState(lr=cfg.lr_weights, beta1=cfg.beta1, beta2=cfg.beta2)
    adam_q = AdamState(lr=cfg.lr_quant, beta1=cfg.beta1, beta2=cfg.beta2)
    distance = loss.resolved_distance()

    def holdout_distance() -> float:
        out, _ = model_forward(model, x_hold)
        return distance(out, t_hold)[0]

    q_lo, q_hi = cfg.ma_quantile_pair
    kind = "minmax" if (q_lo, q_hi) == (0.0, 1.0) else "quantile"
    ma_observers = {
        site: ObserverState(kind=kind, q_lo=q_lo, q_hi=q_hi, momentum=cfg.momentum)
        for site in act_sites(model)
    }

    best = holdout_distance()
    best_snapshot = {k: v.copy() for k, v in param_arrays(model).items()}
    report: dict = {"epochs": [], "delta_clamp_events": 0}
    ma_limit = min(cfg.freeze_epoch, cfg.switch_epoch) if cfg.strategy == "hybrid" else cfg.freeze_epoch

    n_train = x_train.shape[0]
    for epoch in range(cfg.epochs):
        if cfg.strategy == "hybrid" and epoch == cfg.switch_epoch:
            set_estimators(model, weight_estimator=Estimator.LSQ, act_estimator=Estimator.LSQ)
        ma_active = cfg.strategy in ("ma", "hybrid") and epoch < ma_limit
        lsq_active = cfg.strategy == "lsq" or (
            cfg.strategy == "hybrid" and epoch >= cfg.switch_epoch
        )
        lr_scale = (
            0.5 * (1.0 + math.cos(math.pi * epoch / max(1, cfg.epochs)))
            if cfg.cosine_schedule
            else 1.0
        )

        perm = rng.permutation(n_train)
        losses = []
        for start in range(0, n_train, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb, tb = x_train[idx], t_train[idx]

            if ma_active:
                calibrate_weight_quantizers(model, *cfg.weight_quantile_pair)
            out, trace = model_forward(
                model, xb, record=True, observers=ma_observers if ma_active else None
            )
            total, grad_out = loss.evaluate(out, tb)
            if not np.isfinite(total):
                raise DivergedLossError(f"qat loss diverged at epoch {epoch}")
            losses.append(total)
            _, grads = model_backward(model, trace, grad_out)

            params = param_arrays(model)
            gw = {
                k: g for k, g in grads.items() if k.endswith(".weight") or k.endswith(".bias")
            }
            adam_step(adam_w, params, gw, lr_scale)
            if lsq_active:
                learnable = _learnable_quant_names(model)
                gq = {k: g for k, g in grads.items() if k in learnable}
                adam_step(adam_q, params, gq, lr_scale)
                clamped = _clamp_deltas(model)
                if clamped:
                    report["delta_clamp_events"] += clamped
                    logger.warning("clamped %d step sizes to %g", clamped, DELTA_FLOOR)

        hd = holdout_distance()
        if hd < best:
            best = hd
            best_snapshot = {k: v.copy() for k, v in param_arrays(model).items()}
        report["epochs"].append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)) if losses else 0.0,
                "holdout_distance": hd,
                "best_so_far": best,
            }
        )

    params = param_arrays(model)
    for k, v in best_snapshot.items():
        params[k][...] = v
    report["best_holdout"] = best
    return model, report


def fixed_params_baseline(
    model_fp: Model,
    model_q: Model,
    data,
    cfg: QatConfig,
    loss: LossSpec | None = None,
    rng: Rng | None = None,
) -> tuple[Model, dict]:
    """Weights-only QAT with quantizer params frozen at their PTQ values."""
    return qat_train(model_fp, model_q, data, replace(cfg, strategy="fixed"), loss, rng)
