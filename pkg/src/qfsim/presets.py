"""Synthetic desk-scale generator models and their distillation data.

Three presets:

* "styled-ish": a mapping stack of (linear, leaky-relu) blocks feeding a
  convolutional synthesis stack through a feature->image reshape.
* "resnet-ish": a plain stride-1 convolutional stack (image to image). The
  layer vocabulary has no skip-add, so this is the residual-body shape
  without the skips.
* "plain-mlp": (linear, leaky-relu) blocks.

Generated networks can embed "outlier channels": a few channels whose
incoming weights are boosted so their activations dwarf the rest of the
tensor, while the consuming layer scales them down to near irrelevance.
This reproduces, at desk scale, the activation outliers that make min-max
activation ranges so much worse than quantile-clipped ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidSpecError
from .modelio import save_model
from .netgraph import BlockGraph, Conv2d, LeakyRelu, Linear, Model, Upsample, model_forward
from .tensor import Rng, Tensor

PRESETS = ("styled-ish", "resnet-ish", "plain-mlp")


@dataclass
class ToySpec:
    preset: str = "styled-ish"
    depth: int = 2  # mapping pairs (styled), body blocks (resnet), hidden blocks (mlp)
    width: int = 128  # linear width (styled mapping / mlp)
    in_dim: int = 8  # latent size (styled / mlp)
    channels: tuple[int, ...] = (8, 8, 4)  # conv stack channel progression
    out_channels: int = 2
    out_dim: int = 16  # mlp output size
    base_hw: int = 4  # styled starting resolution; resnet uses 2x this
    samples: int = 128
    leaky_slope: float = 0.2
    outlier_channels: int = 1
    outlier_boost: float = 32.0
    outlier_leak: float = 0.02

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise InvalidSpecError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.depth < 1:
            raise InvalidSpecError("depth must be >= 1")
        if self.width < 1 or self.in_dim < 1 or self.out_channels < 1 or self.out_dim < 1:
            raise InvalidSpecError("widths and channel counts must be positive")
        if len(self.channels) < 2:
            raise InvalidSpecError("need at least two synthesis channel counts")
        if self.samples < 1:
            raise InvalidSpecError("samples must be >= 1")
        if self.outlier_channels < 0 or self.outlier_boost <= 0 or self.outlier_leak <= 0:
            raise InvalidSpecError("bad outlier-channel settings")

    @staticmethod
    def from_json(obj: dict) -> "ToySpec":
        kwargs = dict(obj)
        if "channels" in kwargs:
            kwargs["channels"] = tuple(kwargs["channels"])
        try:
            return ToySpec(**kwargs)
        except TypeError as exc:
            raise InvalidSpecError(f"bad toy spec: {exc}") from exc

    def input_shape(self) -> tuple[int, ...]:
        """Per-sample input shape of the generated model."""
        if self.preset == "resnet-ish":
            return (self.out_channels, 2 * self.base_hw, 2 * self.base_hw)
        return (self.in_dim,)


def _linear(rng: Rng, n_in: int, n_out: int) -> Linear:
    scale = math.sqrt(2.0 / n_in)
    return Linear(
        n_in, n_out, weight=rng.normal((n_out, n_in), scale), bias=rng.normal(n_out, 0.1)
    )


def _conv(rng: Rng, c_in: int, c_out: int, k: int = 3, pad: int = 1) -> Conv2d:
    scale = math.sqrt(2.0 / (c_in * k * k))
    return Conv2d(
        c_in,
        c_out,
        k,
        stride=1,
        padding=pad,
        weight=rng.normal((c_out, c_in, k, k), scale),
        bias=rng.normal(c_out, 0.1),
    )


def _inject_outliers(model: Model, spec: ToySpec, rng: Rng) -> None:
    """Boost a few producer channels and damp them in their consumers.

    Only linear->linear pairs with an intact channel correspondence (no
    reshape boundary between them) host outliers: a boosted channel is one
    element of a wide feature vector, sparse enough for per-sample quantiles
    to clip it. A boosted conv channel would occupy a whole feature map and
    defeat quantile clipping at desk scale.
    """
    if spec.outlier_channels == 0:
        return
    pairs = []
    prev = None
    for block in model.blocks:
        if block.input_reshape is not None:
            prev = None
        for layer in block.layers:
            if layer.kind in ("linear", "conv2d"):
                if prev is not None and prev.kind == "linear" and layer.kind == "linear":
                    pairs.append((prev, layer))
                prev = layer
    for producer, consumer in pairs:
        n_out = producer.weight.shape[0]
        k = min(spec.outlier_channels, n_out)
        chans = rng.permutation(n_out)[:k]
        for ch in chans:
            producer.weight[ch] *= spec.outlier_boost
            producer.bias[ch] *= spec.outlier_boost
            consumer.weight[:, ch] *= spec.outlier_leak / spec.outlier_boost


def build_toy_model(spec: ToySpec, rng: Rng) -> Model:
    """Random-weight full-precision model for the given preset."""
    wrng = rng.spawn(101)
    blocks: list[BlockGraph] = []
    slope = spec.leaky_slope

    if spec.preset == "plain-mlp":
        widths = [spec.in_dim] + [spec.width] * spec.depth
        for i in range(spec.depth):
            blocks.append(
                BlockGraph(
                    name=f"mlp{i}",
                    layers=[_linear(wrng, widths[i], widths[i + 1]), LeakyRelu(slope)],
                )
            )
        blocks.append(
            BlockGraph(name="head", layers=[_linear(wrng, spec.width, spec.out_dim)])
        )
    elif spec.preset == "resnet-ish":
        c = spec.channels[0]
        blocks.append(
            BlockGraph(name="stem", layers=[_conv(wrng, spec.out_channels, c), LeakyRelu(slope)])
        )
        for i in range(spec.depth):
            blocks.append(
                BlockGraph(
                    name=f"body{i}",
                    layers=[_conv(wrng, c, c), LeakyRelu(slope), _conv(wrng, c, c), LeakyRelu(slope)],
                )
            )
        blocks.append(BlockGraph(name="head", layers=[_conv(wrng, c, spec.out_channels)]))
    else:  # styled-ish
        c0 = spec.channels[0]
        feat = c0 * spec.base_hw * spec.base_hw
        widths = [spec.in_dim] + [spec.width] * (spec.depth - 1) + [feat]
        for i in range(spec.depth):
            blocks.append(
                BlockGraph(
                    name=f"map{i}",
                    layers=[_linear(wrng, widths[i], widths[i + 1]), LeakyRelu(slope)],
                )
            )
        for i in range(len(spec.channels) - 1):
            layers = [
                Upsample(2),
                _conv(wrng, spec.channels[i], spec.channels[i + 1]),
                LeakyRelu(slope),
            ]
            blocks.append(
                BlockGraph(
                    name=f"synth{i}",
                    layers=layers,
                    input_reshape=(c0, spec.base_hw, spec.base_hw) if i == 0 else None,
                )
            )
        blocks.append(
            BlockGraph(name="to_image", layers=[_conv(wrng, spec.channels[-1], spec.out_channels)])
        )

    model = Model(blocks=blocks)
    _inject_outliers(model, spec, rng.spawn(202))
    return model


def make_toy_inputs(spec: ToySpec, rng: Rng, count: int | None = None) -> Tensor:
    n = count if count is not None else spec.samples
    return rng.normal((n, *spec.input_shape()))


def gen_toy_bundle(spec: ToySpec, seed: int, out_dir: str | Path):
    """Write a random model container plus its distillation dataset.

    Layout: ``<out_dir>/model/`` (model container) and ``<out_dir>/data/``
    (paired input/target tensors with an index). Returns (model, X, Y).
    """
    from .dataset import save_dataset

    rng = Rng(seed)
    model = build_toy_model(spec, rng)
    x = make_toy_inputs(spec, rng.spawn(303))
    y, _ = model_forward(model, x, quantized=False)
    out = Path(out_dir)
    save_model(out / "model", model)
    save_dataset(out / "data", x, y)
    return model, x, y
