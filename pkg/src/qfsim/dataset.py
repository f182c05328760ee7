"""Distillation dataset: paired input/target tensor files plus an index.

Layout: ``index.json`` with ``{"count": N, "pairs": [{"input": ...,
"target": ...}, ...]}`` next to the referenced tensor containers.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .container import load_tensor, save_tensor
from .errors import CorruptContainerError, EmptyDatasetError, IoError
from .tensor import Tensor


def save_dataset(out_dir: str | Path, inputs: Tensor, targets: Tensor) -> None:
    if inputs.shape[0] != targets.shape[0]:
        raise EmptyDatasetError(
            f"inputs ({inputs.shape[0]}) and targets ({targets.shape[0]}) disagree"
        )
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in range(inputs.shape[0]):
        in_name = f"input_{i:04d}.qt"
        tg_name = f"target_{i:04d}.qt"
        save_tensor(root / in_name, inputs[i])
        save_tensor(root / tg_name, targets[i])
        pairs.append({"input": in_name, "target": tg_name})
    index = {"count": int(inputs.shape[0]), "pairs": pairs}
    try:
        (root / "index.json").write_text(
            json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise IoError(f"cannot write dataset index in {root}: {exc}") from exc


def load_dataset(data_dir: str | Path) -> tuple[Tensor, Tensor]:
    """Load all pairs; returns stacked (inputs [S,...], targets [S,...])."""
    root = Path(data_dir)
    index_path = root / "index.json"
    try:
        index = json.loads(index_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"cannot read dataset index {index_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptContainerError(f"{index_path}: invalid JSON: {exc}") from exc

    pairs = index.get("pairs")
    if not isinstance(pairs, list) or not pairs:
        raise EmptyDatasetError(f"{index_path}: no pairs listed")
    if index.get("count") != len(pairs):
        raise CorruptContainerError(f"{index_path}: count does not match pair list")
    inputs, targets = [], []
    for p in pairs:
        inputs.append(load_tensor(root / p["input"]))
        targets.append(load_tensor(root / p["target"]))
    try:
        return np.stack(inputs), np.stack(targets)
    except ValueError as exc:
        raise CorruptContainerError(f"{index_path}: inconsistent sample shapes: {exc}") from exc
