"""Binary checkpoint container for model weights and token sets.

Layout: magic bytes ``CTOK``, format version (u16 little-endian), a
u32-length-prefixed JSON manifest listing named tensors with shapes, then
the raw tensor data as little-endian float32 in manifest order.  Token
checkpoints reuse the container with a ``mode`` field in the manifest.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelWeights, TokenSet

MAGIC = b"CTOK"
VERSION = 1


def _write_container(path: str | Path, manifest: dict, tensors: list[np.ndarray]) -> None:
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<I", len(body)))
        f.write(body)
        for t in tensors:
            f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def _read_container(path: str | Path) -> tuple[dict, list[np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a CTOK checkpoint")
        (version,) = struct.unpack("<H", f.read(2))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (length,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(length).decode("utf-8"))
        tensors = []
        for entry in manifest["tensors"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = f.read(count * 4)
            if len(buf) != count * 4:
                raise ValueError(f"{path}: truncated tensor data")
            arr = np.frombuffer(buf, dtype="<f4").reshape(entry["shape"])
            tensors.append(arr.astype(np.float64))
    return manifest, tensors


def save_model(model: ModelWeights, path: str | Path) -> None:
    names = list(model.params.keys())
    manifest = {
        "kind": "model",
        "config": model.cfg.to_json_dict(),
        "tensors": [
            {"name": n, "shape": list(model.params[n].shape)} for n in names
        ],
    }
    _write_container(path, manifest, [model.params[n] for n in names])


def load_model(path: str | Path) -> ModelWeights:
    manifest, tensors = _read_container(path)
    if manifest.get("kind") != "model":
        raise ValueError(f"{path}: checkpoint does not hold model weights")
    cfg = ModelConfig.from_json_dict(manifest["config"])
    params = {
        entry["name"]: tensor
        for entry, tensor in zip(manifest["tensors"], tensors)
    }
    return ModelWeights(cfg=cfg, params=params)


def save_tokens(tokens: TokenSet, path: str | Path) -> None:
    manifest = {
        "kind": "tokens",
        "mode": tokens.mode,
        "tensors": [{"name": "tokens", "shape": list(tokens.tokens.shape)}],
    }
    _write_container(path, manifest, [tokens.tokens])


def load_tokens(path: str | Path) -> TokenSet:
    manifest, tensors = _read_container(path)
    if manifest.get("kind") != "tokens":
        raise ValueError(f"{path}: checkpoint does not hold tokens")
    return TokenSet(tokens=tensors[0], mode=manifest["mode"])


def quantize_model(model: ModelWeights) -> ModelWeights:
    """Round weights through float32, matching a save/load round trip."""
    params = {
        n: p.astype(np.float32).astype(np.float64) for n, p in model.params.items()
    }
    return ModelWeights(cfg=model.cfg, params=params)
