"""Versioned checkpoint container.

A checkpoint is a torch archive with three top-level keys:

  * ``format_version`` — integer, currently 1; readers refuse newer versions;
  * ``metadata_json`` — a JSON string (iteration, resolution, config digest,
    free-form extras), kept as text so archives stay ``weights_only``-safe;
  * ``states`` — ``{name: state_dict}`` for each network, and
    ``optim/<name>`` entries for optimizer states when training state is
    included.

Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .errors import CheckpointError

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    version: int
    metadata: dict
    states: dict

    def net_state(self, name: str) -> dict:
        if name not in self.states:
            raise CheckpointError(f"checkpoint holds no network '{name}'")
        return self.states[name]

    def optimizer_state(self, name: str) -> dict:
        key = f"optim/{name}"
        if key not in self.states:
            raise CheckpointError(f"checkpoint holds no optimizer '{name}'")
        return self.states[key]

    @property
    def has_optimizers(self) -> bool:
        return any(k.startswith("optim/") for k in self.states)


def save_checkpoint(path: Path, nets: dict[str, nn.Module],
                    metadata: dict,
                    optimizers: dict[str, torch.optim.Optimizer] | None = None
                    ) -> None:
    path = Path(path)
    states: dict = {name: net.state_dict() for name, net in nets.items()}
    for name, opt in (optimizers or {}).items():
        states[f"optim/{name}"] = opt.state_dict()
    payload = {
        "format_version": FORMAT_VERSION,
        "metadata_json": json.dumps(metadata, sort_keys=True),
        "states": states,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if not isinstance(version, int) or version > FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {version!r} "
            f"(this build reads <= {FORMAT_VERSION})")
    return Checkpoint(version=version,
                      metadata=json.loads(payload["metadata_json"]),
                      states=payload["states"])
