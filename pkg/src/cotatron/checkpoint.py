"""Versioned checkpoint container.

A checkpoint is a ``torch.save`` dict with a fixed envelope::

    format, version, kind ("cotatron" | "vc"), step,
    model_config, params (name -> tensor), symbols (JSON), symbol_table_sha256,
    speakers (row-ordered ids), train_config, optimizer, extra

Loading uses ``weights_only=True``; tensors round-trip bit-exactly.
"""
from __future__ import annotations

import hashlib
import os
from pathlib import Path
from typing import Any

import torch
from torch import nn

from .text import SymbolTable

FORMAT = "cotatron-vc-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in name order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, *, kind: str, params: dict, model_config: dict, table: SymbolTable,
                    speakers: list[str], step: int = 0, train_config: dict | None = None,
                    optimizer: dict | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "step": int(step),
        "model_config": model_config,
        "params": {k: v.detach().cpu().clone() for k, v in params.items()},
        "symbols": table.to_json(),
        "symbol_table_sha256": table.digest(),
        "speakers": list(speakers),
        "train_config": train_config or {},
        "optimizer": optimizer or {},
        "extra": extra or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, kind: str | None = None) -> dict[str, Any]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint of this package")
    if payload["version"] != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload['version']}")
    if kind is not None and payload["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, got {payload['kind']!r}")
    table = SymbolTable.from_json(payload["symbols"])
    if table.digest() != payload["symbol_table_sha256"]:
        raise CheckpointError(f"{path}: symbol table hash mismatch")
    return payload
