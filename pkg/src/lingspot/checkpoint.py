"""Checkpoint container: one ``.npy`` blob per parameter plus a JSON manifest."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    meta: dict

    def state_dict(self, dtype: torch.dtype | None = None) -> dict[str, torch.Tensor]:
        out = {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}
        if dtype is not None:
            out = {k: v.to(dtype) for k, v in out.items()}
        return out


def _blob_name(name: str) -> str:
    return name.replace("/", "_") + ".npy"


def snapshot(module: nn.Module, meta: dict | None = None) -> Checkpoint:
    params = {
        name: t.detach().cpu().numpy().astype(_le(t.detach().cpu().numpy().dtype), copy=True)
        for name, t in module.state_dict().items()
    }
    return Checkpoint(params, dict(meta or {}))


def _le(dtype: np.dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in ckpt.params.items():
        arr = np.ascontiguousarray(arr, dtype=_le(arr.dtype))
        blob = _blob_name(name)
        np.save(path / blob, arr, allow_pickle=False)
        entries.append({"name": name, "file": blob, "shape": list(arr.shape),
                        "dtype": arr.dtype.name, "byteorder": "little"})
    manifest = {"format_version": FORMAT_VERSION, "parameters": entries, "meta": ckpt.meta}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')}")
    params = {}
    for e in manifest["parameters"]:
        arr = np.load(path / e["file"], allow_pickle=False)
        if list(arr.shape) != e["shape"]:
            raise ValueError(f"parameter {e['name']} shape {arr.shape} != manifest {e['shape']}")
        params[e["name"]] = arr
    return Checkpoint(params, manifest.get("meta", {}))
