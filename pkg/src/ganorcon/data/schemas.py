"""Label schemas, label masks and remaps between schemas."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ganorcon.errors import RemapError, SchemaViolationError


@dataclass(frozen=True)
class LabelSchema:
    name: str
    classes: tuple[str, ...]

    def __post_init__(self):
        if not self.classes:
            raise SchemaViolationError(f"schema {self.name!r} has no classes")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def index(self, class_name: str) -> int:
        return self.classes.index(class_name)

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSchema":
        pairs = sorted((int(i), str(c)) for i, c in d["classes"])
        indices = [i for i, _ in pairs]
        if indices != list(range(len(pairs))):
            raise SchemaViolationError(
                f"schema {d.get('name')!r}: class indices must be 0..C-1 without gaps, got {indices}"
            )
        return cls(name=d["name"], classes=tuple(c for _, c in pairs))

    def to_dict(self) -> dict:
        return {"name": self.name, "classes": [[str(i), c] for i, c in enumerate(self.classes)]}

    @classmethod
    def generic(cls, num_classes: int, name: str | None = None) -> "LabelSchema":
        classes = ("background",) + tuple(f"class_{i}" for i in range(1, num_classes))
        return cls(name=name or f"generic{num_classes}", classes=classes)


@dataclass
class LabelMask:
    """An H x W class-index map tagged with the schema it is expressed in."""

    values: np.ndarray
    schema_id: str

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise SchemaViolationError(f"mask must be 2-D, got shape {self.values.shape}")
        if not np.issubdtype(self.values.dtype, np.integer):
            raise SchemaViolationError(f"mask must hold integers, got {self.values.dtype}")

    @property
    def shape(self):
        return self.values.shape


def validate_mask(values: np.ndarray, schema: LabelSchema, where: str = "mask") -> None:
    """Raise SchemaViolationError naming the first out-of-range pixel."""
    bad = (values < 0) | (values >= schema.num_classes)
    if bad.any():
        r, c = (int(v) for v in np.argwhere(bad)[0])
        raise SchemaViolationError(
            f"{where}: pixel ({r}, {c}) has value {int(values[r, c])}, "
            f"schema {schema.name!r} allows 0..{schema.num_classes - 1}"
        )


@dataclass(frozen=True)
class LabelRemap:
    source: str
    target: str
    mapping: tuple[int, ...]  # mapping[source_index] -> target_index
    note: str = field(default="", compare=False)

    def lookup(self) -> np.ndarray:
        return np.asarray(self.mapping, dtype=np.int64)

    @classmethod
    def from_dict(cls, d: dict, source_schema: LabelSchema | None = None,
                  target_schema: LabelSchema | None = None) -> "LabelRemap":
        raw = {int(k): int(v) for k, v in d["map"].items()}
        n = source_schema.num_classes if source_schema else max(raw) + 1
        missing = [i for i in range(n) if i not in raw]
        if missing:
            raise RemapError(f"remap {d['source']}->{d['target']} is not total; missing source indices {missing}")
        extra = [k for k in raw if k >= n or k < 0]
        if extra:
            raise RemapError(f"remap {d['source']}->{d['target']} maps unknown source indices {extra}")
        mapping = tuple(raw[i] for i in range(n))
        if target_schema is not None:
            bad = [v for v in mapping if not 0 <= v < target_schema.num_classes]
            if bad:
                raise RemapError(f"remap targets {bad} outside schema {target_schema.name!r}")
        return cls(d["source"], d["target"], mapping, d.get("note", ""))

    def to_dict(self) -> dict:
        d = {"source": self.source, "target": self.target,
             "map": {str(i): v for i, v in enumerate(self.mapping)}}
        if self.note:
            d["note"] = self.note
        return d

    @classmethod
    def identity(cls, schema: LabelSchema) -> "LabelRemap":
        return cls(schema.name, schema.name, tuple(range(schema.num_classes)))

    def then(self, other: "LabelRemap") -> "LabelRemap":
        """Compose: apply ``self`` first, then ``other``."""
        if self.target != other.source:
            raise RemapError(f"cannot compose {self.source}->{self.target} with {other.source}->{other.target}")
        return LabelRemap(self.source, other.target, tuple(other.mapping[v] for v in self.mapping))


def remap_labels(mask: LabelMask, remap: LabelRemap) -> LabelMask:
    if mask.schema_id != remap.source:
        raise RemapError(f"mask is in schema {mask.schema_id!r}, remap expects {remap.source!r}")
    table = remap.lookup()
    v = mask.values
    if v.size and (v.min() < 0 or v.max() >= len(table)):
        raise RemapError(f"mask values outside the {len(table)} source classes of {remap.source!r}")
    return LabelMask(table[v].astype(v.dtype, copy=False), remap.target)


def load_schema(path_or_name: str | Path) -> LabelSchema:
    """Load a schema from a JSON file, or by name from the shipped set."""
    p = Path(path_or_name)
    if p.suffix == ".json" and p.exists():
        return LabelSchema.from_dict(json.loads(p.read_text()))
    res = resources.files("ganorcon.resources") / "schemas" / f"{path_or_name}.json"
    if not res.is_file():
        raise SchemaViolationError(f"unknown schema {path_or_name!r}")
    return LabelSchema.from_dict(json.loads(res.read_text()))


def load_remap(path_or_name: str | Path) -> LabelRemap:
    """Load a remap from a JSON file, or a shipped one named ``<source>_to_<target>``."""
    p = Path(path_or_name)
    if p.suffix == ".json" and p.exists():
        d = json.loads(p.read_text())
    else:
        res = resources.files("ganorcon.resources") / "remaps" / f"{path_or_name}.json"
        if not res.is_file():
            raise RemapError(f"unknown remap {path_or_name!r}")
        d = json.loads(res.read_text())
    src = tgt = None
    try:
        src, tgt = load_schema(d["source"]), load_schema(d["target"])
    except SchemaViolationError:
        pass
    return LabelRemap.from_dict(d, src, tgt)


def shipped_schemas() -> list[str]:
    root = resources.files("ganorcon.resources") / "schemas"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))
