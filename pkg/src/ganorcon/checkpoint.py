"""Self-describing checkpoint container shared by every stage."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import torch

from ganorcon.errors import CheckpointError

FORMAT = "ganorcon-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    meta: dict
    state: dict[str, torch.Tensor]
    children: dict[str, "Checkpoint"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "kind": self.kind,
            "meta": self.meta,
            "state": {k: v.detach().cpu().clone() for k, v in self.state.items()},
            "children": {k: c.to_dict() for k, c in self.children.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        if d.get("format") != FORMAT:
            raise CheckpointError(f"not a {FORMAT} file (format={d.get('format')!r})")
        if d.get("version") != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {d.get('version')!r}")
        return cls(d["kind"], d["meta"], d["state"],
                   {k: cls.from_dict(c) for k, c in d.get("children", {}).items()})

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        os.close(fd)
        torch.save(self.to_dict(), tmp)
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            d = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:  # torch raises several unrelated types here
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_dict(d)

    def expect(self, kind: str) -> "Checkpoint":
        if self.kind != kind:
            raise CheckpointError(f"expected a {kind!r} checkpoint, got {self.kind!r}")
        return self


def load_state_strict(module: torch.nn.Module, state: dict[str, torch.Tensor], what: str) -> None:
    """Load ``state`` into ``module``; on any mismatch list the offending names."""
    own = module.state_dict()
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    shape = sorted(k for k in set(own) & set(state) if own[k].shape != state[k].shape)
    if missing or unexpected or shape:
        parts = []
        if missing:
            parts.append(f"missing: {', '.join(missing[:20])}")
        if unexpected:
            parts.append(f"unexpected: {', '.join(unexpected[:20])}")
        if shape:
            parts.append("shape mismatch: " + ", ".join(
                f"{k} {tuple(state[k].shape)} vs {tuple(own[k].shape)}" for k in shape[:20]))
        raise CheckpointError(f"{what} weights do not fit the architecture; " + "; ".join(parts))
    module.load_state_dict(state)


def state_snapshot(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}
