from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import CheckpointIncompatibleError

CHECKPOINT_KINDS = ("backbone", "domain_expert", "adapter", "transport_map")


@dataclass(eq=False)
class ModelCheckpoint:
    """Named float64 tensors plus JSON-serialisable metadata.

    Tensor order is significant: it is the order used on disk.
    """

    name: str
    tensors: dict[str, np.ndarray]
    kind: str = "backbone"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tensors = {k: np.array(v, dtype=np.float64) for k, v in self.tensors.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.tensors[name]
        except KeyError:
            raise CheckpointIncompatibleError(
                f"checkpoint '{self.name}' has no tensor named '{name}'"
            ) from None

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __eq__(self, other):
        if not isinstance(other, ModelCheckpoint):
            return NotImplemented
        return (
            self.name == other.name
            and self.kind == other.kind
            and _canon(self.metadata) == _canon(other.metadata)
            and list(self.tensors) == list(other.tensors)
            and all(
                a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in zip(self.tensors.values(), other.tensors.values())
            )
        )

    __hash__ = None

    @property
    def weight_names(self) -> list[str]:
        return [k for k, v in self.tensors.items() if v.ndim == 2]

    def copy(self, name: str | None = None, kind: str | None = None, **metadata) -> "ModelCheckpoint":
        meta = json.loads(_canon(self.metadata))
        meta.update(metadata)
        return ModelCheckpoint(
            name=self.name if name is None else name,
            tensors={k: v.copy() for k, v in self.tensors.items()},
            kind=self.kind if kind is None else kind,
            metadata=meta,
        )

    def replace(self, updates: Mapping[str, np.ndarray], name: str | None = None, **metadata) -> "ModelCheckpoint":
        out = self.copy(name=name, **metadata)
        for key, value in updates.items():
            if key not in out.tensors:
                raise CheckpointIncompatibleError(f"checkpoint '{self.name}' has no tensor named '{key}'")
            value = np.asarray(value, dtype=np.float64)
            if value.shape != out.tensors[key].shape:
                raise CheckpointIncompatibleError(
                    f"tensor '{key}': shape {value.shape} does not match {out.tensors[key].shape}"
                )
            out.tensors[key] = value.copy()
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for key, value in self.tensors.items():
            h.update(key.encode())
            h.update(repr(value.shape).encode())
            h.update(np.ascontiguousarray(value, dtype="<f8").tobytes())
        return h.hexdigest()


def _canon(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def check_same_architecture(checkpoints: Iterable[ModelCheckpoint], names: Iterable[str] | None = None) -> None:
    """Raise unless every checkpoint holds the same tensor names and shapes."""
    checkpoints = list(checkpoints)
    ref = checkpoints[0]
    keys = list(ref.tensors) if names is None else list(names)
    for ckpt in checkpoints:
        for key in keys:
            if key not in ckpt.tensors:
                raise CheckpointIncompatibleError(f"layer '{key}' missing from checkpoint '{ckpt.name}'")
            if key not in ref.tensors:
                raise CheckpointIncompatibleError(f"layer '{key}' missing from checkpoint '{ref.name}'")
            if ckpt.tensors[key].shape != ref.tensors[key].shape:
                raise CheckpointIncompatibleError(
                    f"layer '{key}': shape {ckpt.tensors[key].shape} in '{ckpt.name}' "
                    f"vs {ref.tensors[key].shape} in '{ref.name}'"
                )
        if names is None and set(ckpt.tensors) != set(keys):
            extra = sorted(set(ckpt.tensors) ^ set(keys))
            raise CheckpointIncompatibleError(
                f"checkpoints '{ref.name}' and '{ckpt.name}' differ in tensors {extra}"
            )
