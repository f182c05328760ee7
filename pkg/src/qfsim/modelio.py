"""Model container: manifest.json plus one tensor blob per weight.

The manifest lists every layer with its quantizer specs/params inline and
groups layers into blocks by index. Tensors live next to the manifest under
``tensors/`` in the binary tensor-container format and are referenced by
relative path. Serialization is deterministic: identical models produce
byte-identical directories.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .container import load_tensor, save_tensor
from .errors import CorruptContainerError, IoError
from .netgraph import (
    ActQuantizer,
    BlockGraph,
    Conv2d,
    LeakyRelu,
    Linear,
    Model,
    Upsample,
    WeightQuantizer,
)
from .quant import AdaRoundState, QuantParams, QuantizerSpec
from .tensor import Tensor

FORMAT = "qfsim-model-v1"


class _TensorWriter:
    def __init__(self, root: Path):
        self.root = root
        self.count = 0

    def add(self, t: Tensor) -> str:
        rel = f"tensors/t{self.count:04d}.qt"
        self.count += 1
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        save_tensor(path, t)
        return rel


def _act_quant_json(q: ActQuantizer | None) -> dict | None:
    if q is None:
        return None
    return {
        "spec": q.spec.to_json(),
        "params": q.params.to_json() if q.params is not None else None,
    }


def _weight_quant_json(q: WeightQuantizer | None, w: _TensorWriter) -> dict | None:
    if q is None:
        return None
    obj = {
        "spec": q.spec.to_json(),
        "params": q.params.to_json() if q.params is not None else None,
        "adaround": None,
    }
    if q.adaround is not None:
        a = q.adaround
        obj["adaround"] = {
            "v": w.add(a.v),
            "zeta": a.zeta,
            "gamma": a.gamma,
            "beta_start": a.beta_start,
            "beta_end": a.beta_end,
            "lambda_reg": a.lambda_reg,
        }
    return obj


def save_model(out_dir: str | Path, model: Model) -> None:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    writer = _TensorWriter(root)

    layers_json = []
    blocks_json = []
    idx = 0
    for block in model.blocks:
        indices = []
        for layer in block.layers:
            entry: dict = {"kind": layer.kind, "act_quant": _act_quant_json(layer.act_quant)}
            if layer.kind == "linear":
                entry.update(
                    in_features=layer.in_features,
                    out_features=layer.out_features,
                    weight=writer.add(layer.weight),
                    bias=writer.add(layer.bias) if layer.bias is not None else None,
                    weight_quant=_weight_quant_json(layer.weight_quant, writer),
                )
            elif layer.kind == "conv2d":
                entry.update(
                    in_channels=layer.in_channels,
                    out_channels=layer.out_channels,
                    kernel=layer.kernel,
                    stride=layer.stride,
                    padding=layer.padding,
                    weight=writer.add(layer.weight),
                    bias=writer.add(layer.bias) if layer.bias is not None else None,
                    weight_quant=_weight_quant_json(layer.weight_quant, writer),
                )
            elif layer.kind == "leaky_relu":
                entry["slope"] = layer.slope
            else:
                entry["factor"] = layer.factor
            layers_json.append(entry)
            indices.append(idx)
            idx += 1
        blocks_json.append(
            {
                "name": block.name,
                "layer_indices": indices,
                "input_reshape": list(block.input_reshape) if block.input_reshape else None,
            }
        )

    manifest = {
        "format": FORMAT,
        "input_quant": _act_quant_json(model.input_quant),
        "layers": layers_json,
        "blocks": blocks_json,
    }
    try:
        (root / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise IoError(f"cannot write manifest in {root}: {exc}") from exc


def _act_quant_from_json(obj: dict | None) -> ActQuantizer | None:
    if obj is None:
        return None
    return ActQuantizer(
        spec=QuantizerSpec.from_json(obj["spec"]),
        params=QuantParams.from_json(obj["params"]) if obj.get("params") else None,
    )


def _weight_quant_from_json(obj: dict | None, root: Path) -> WeightQuantizer | None:
    if obj is None:
        return None
    ada = None
    if obj.get("adaround"):
        a = obj["adaround"]
        ada = AdaRoundState(
            v=load_tensor(root / a["v"]),
            zeta=a["zeta"],
            gamma=a["gamma"],
            beta_start=a["beta_start"],
            beta_end=a["beta_end"],
            lambda_reg=a["lambda_reg"],
        )
    return WeightQuantizer(
        spec=QuantizerSpec.from_json(obj["spec"]),
        params=QuantParams.from_json(obj["params"]) if obj.get("params") else None,
        adaround=ada,
    )


def _layer_from_json(entry: dict, root: Path):
    kind = entry.get("kind")
    act = _act_quant_from_json(entry.get("act_quant"))
    if kind == "linear":
        return Linear(
            in_features=entry["in_features"],
            out_features=entry["out_features"],
            weight=load_tensor(root / entry["weight"]),
            bias=load_tensor(root / entry["bias"]) if entry.get("bias") else None,
            weight_quant=_weight_quant_from_json(entry.get("weight_quant"), root),
            act_quant=act,
        )
    if kind == "conv2d":
        return Conv2d(
            in_channels=entry["in_channels"],
            out_channels=entry["out_channels"],
            kernel=entry["kernel"],
            stride=entry["stride"],
            padding=entry["padding"],
            weight=load_tensor(root / entry["weight"]),
            bias=load_tensor(root / entry["bias"]) if entry.get("bias") else None,
            weight_quant=_weight_quant_from_json(entry.get("weight_quant"), root),
            act_quant=act,
        )
    if kind == "leaky_relu":
        return LeakyRelu(slope=entry["slope"], act_quant=act)
    if kind == "upsample":
        return Upsample(factor=entry["factor"], act_quant=act)
    raise CorruptContainerError(f"unknown layer kind {kind!r} in manifest")


def load_model(model_dir: str | Path) -> Model:
    root = Path(model_dir)
    manifest_path = root / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptContainerError(f"{manifest_path}: invalid JSON: {exc}") from exc

    if manifest.get("format") != FORMAT:
        raise CorruptContainerError(
            f"{manifest_path}: unsupported format {manifest.get('format')!r}"
        )
    try:
        layers = [_layer_from_json(e, root) for e in manifest["layers"]]
        blocks = []
        for b in manifest["blocks"]:
            blocks.append(
                BlockGraph(
                    name=b["name"],
                    layers=[layers[i] for i in b["layer_indices"]],
                    input_reshape=tuple(b["input_reshape"]) if b.get("input_reshape") else None,
                )
            )
    except (KeyError, IndexError, TypeError) as exc:
        raise CorruptContainerError(f"{manifest_path}: malformed manifest: {exc}") from exc
    return Model(blocks=blocks, input_quant=_act_quant_from_json(manifest.get("input_quant")))


def models_bitwise_equal(a: Model, b: Model) -> bool:
    """True when architectures, weights and quantizer state match exactly."""
    from .netgraph import architecture_signature, param_arrays

    if architecture_signature(a) != architecture_signature(b):
        return False
    pa, pb = param_arrays(a), param_arrays(b)
    if pa.keys() != pb.keys():
        return False
    return all(np.array_equal(pa[k], pb[k]) for k in pa)
