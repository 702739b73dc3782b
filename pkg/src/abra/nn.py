"""Tiny tanh MLP with hand-written reverse-mode gradients and a plain SGD loop.

Parameters live in a :class:`~abra.checkpoint.ModelCheckpoint` under the names
``layer{i}.weight`` (d x d), ``layer{i}.bias`` (d,), ``head.weight`` (o x d)
and ``head.bias`` (o,).  Layer activations are listed in
``metadata["activations"]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .checkpoint import ModelCheckpoint
from .errors import ConfigError, DimensionError, TrainingFailure

ACTIVATIONS = ("tanh", "identity")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Inputs with masked regression targets.

    ``mask[i, j]`` is 1 where output ``j`` of sample ``i`` is supervised.
    ``class_ids`` and ``present`` carry the semantic labels; objectified data
    uses ``OBJECT_LABEL`` for every class id.  ``class_columns[c]`` is the
    output column that holds the class-specific label of class ``c``.
    """

    x: np.ndarray
    y: np.ndarray
    mask: np.ndarray
    class_ids: np.ndarray
    present: np.ndarray
    domain: str = ""
    class_columns: tuple[int, ...] = ()

    def __post_init__(self):
        n = self.x.shape[0]
        if self.y.shape[0] != n or self.mask.shape != self.y.shape or self.class_ids.shape != (n,):
            raise DimensionError(
                f"dataset arrays disagree: x{self.x.shape} y{self.y.shape} mask{self.mask.shape} "
                f"class_ids{self.class_ids.shape}"
            )
        for a in (self.x, self.y, self.mask, self.class_ids, self.present):
            a.setflags(write=False)

    def __len__(self) -> int:
        return self.x.shape[0]

    @classmethod
    def regression(cls, x, y, domain: str = "") -> "LabeledDataset":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return cls(
            x=x.copy(),
            y=y.copy(),
            mask=np.ones_like(y),
            class_ids=np.zeros(x.shape[0], dtype=np.int64),
            present=np.ones(x.shape[0], dtype=bool),
            domain=domain,
        )

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64) if len(idx) == 0 else np.asarray(idx)
        return LabeledDataset(
            x=self.x[idx].copy(),
            y=self.y[idx].copy(),
            mask=self.mask[idx].copy(),
            class_ids=self.class_ids[idx].copy(),
            present=self.present[idx].copy(),
            domain=self.domain,
            class_columns=self.class_columns,
        )

    def digest_bytes(self) -> bytes:
        return b"".join(
            np.ascontiguousarray(a).tobytes()
            for a in (self.x, self.y, self.mask, self.class_ids, self.present)
        )


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 12
    lr: float = 1e-2
    lr_drop_epochs: tuple[int, ...] | None = None
    lr_drop_factor: float = 0.1
    batch_size: int = 4

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"schedule.epochs must be >= 0, got {self.epochs}")
        if self.lr < 0:
            raise ConfigError(f"schedule.lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"schedule.batch_size must be >= 1, got {self.batch_size}")
        if self.lr_drop_epochs is None:
            object.__setattr__(self, "lr_drop_epochs", default_drop_epochs(self.epochs))
        drops = tuple(int(e) for e in self.lr_drop_epochs)
        if any(e < 0 or (self.epochs and e >= self.epochs) for e in drops):
            raise ConfigError(f"schedule.lr_drop_epochs {drops} must lie inside [0, {self.epochs})")
        object.__setattr__(self, "lr_drop_epochs", drops)

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_drop_epochs if e <= epoch)
        return self.lr * self.lr_drop_factor**drops

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "lr": self.lr,
            "lr_drop_epochs": list(self.lr_drop_epochs),
            "lr_drop_factor": self.lr_drop_factor,
            "batch_size": self.batch_size,
        }


def default_drop_epochs(epochs: int) -> tuple[int, ...]:
    """Drops at 7/12 and 9/12 of the run (epochs 7 and 9 of a 12-epoch run)."""
    if epochs < 2:
        return ()
    drops = sorted({round(7 * epochs / 12), round(9 * epochs / 12)})
    return tuple(e for e in drops if 0 < e < epochs)


# ---------------------------------------------------------------- network


def init_network(
    rng: np.random.Generator,
    width: int,
    depth: int,
    n_outputs: int,
    name: str = "theta0",
    activation: str = "tanh",
) -> ModelCheckpoint:
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation '{activation}'")
    tensors = {}
    for i in range(depth):
        tensors[f"layer{i}.weight"] = rng.standard_normal((width, width)) / np.sqrt(width)
        tensors[f"layer{i}.bias"] = np.zeros(width)
    tensors["head.weight"] = rng.standard_normal((n_outputs, width)) / np.sqrt(width)
    tensors["head.bias"] = np.zeros(n_outputs)
    return ModelCheckpoint(name, tensors, metadata={"activations": [activation] * depth})


def hidden_layers(ckpt: ModelCheckpoint) -> list[str]:
    return [f"layer{i}" for i in range(len(ckpt.metadata["activations"]))]


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if kind == "tanh" else z


def forward(
    ckpt: ModelCheckpoint, x: np.ndarray, weights: Mapping[str, np.ndarray] | None = None
) -> np.ndarray:
    """Batch forward pass; ``weights`` overrides individual weight matrices."""
    weights = weights or {}
    h = np.asarray(x, dtype=np.float64)
    for i, kind in enumerate(ckpt.metadata["activations"]):
        w = weights.get(f"layer{i}.weight", ckpt.tensors[f"layer{i}.weight"])
        if h.shape[1] != w.shape[1]:
            raise DimensionError(f"layer{i}: input width {h.shape[1]} vs weight {w.shape}")
        h = _act(kind, h @ w.T + ckpt.tensors[f"layer{i}.bias"])
    w = weights.get("head.weight", ckpt.tensors["head.weight"])
    return h @ w.T + ckpt.tensors["head.bias"]


def masked_mse(pred: np.ndarray, y: np.ndarray, mask: np.ndarray) -> float:
    return float(np.sum(mask * (pred - y) ** 2) / max(float(np.sum(mask)), 1.0))


def loss_and_grads(
    ckpt: ModelCheckpoint,
    x: np.ndarray,
    y: np.ndarray,
    mask: np.ndarray,
    weights: Mapping[str, np.ndarray] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Masked MSE and its gradient with respect to every tensor.

    Gradients for overridden weights are taken with respect to the override.
    """
    weights = weights or {}
    acts = ckpt.metadata["activations"]
    hs = [np.asarray(x, dtype=np.float64)]
    ws = []
    for i, kind in enumerate(acts):
        w = weights.get(f"layer{i}.weight", ckpt.tensors[f"layer{i}.weight"])
        ws.append(w)
        hs.append(_act(kind, hs[-1] @ w.T + ckpt.tensors[f"layer{i}.bias"]))
    w_head = weights.get("head.weight", ckpt.tensors["head.weight"])
    pred = hs[-1] @ w_head.T + ckpt.tensors["head.bias"]

    denom = max(float(np.sum(mask)), 1.0)
    diff = mask * (pred - y)
    loss = float(np.sum(diff * (pred - y)) / denom)

    grads: dict[str, np.ndarray] = {}
    g = 2.0 * diff / denom
    grads["head.weight"] = g.T @ hs[-1]
    grads["head.bias"] = g.sum(axis=0)
    g = g @ w_head
    for i in reversed(range(len(acts))):
        if acts[i] == "tanh":
            g = g * (1.0 - hs[i + 1] ** 2)
        grads[f"layer{i}.weight"] = g.T @ hs[i]
        grads[f"layer{i}.bias"] = g.sum(axis=0)
        g = g @ ws[i]
    return loss, grads


# ---------------------------------------------------------------- training


def run_sgd(
    params: dict[str, np.ndarray],
    batch_grads: Callable[[dict[str, np.ndarray], np.ndarray], tuple[float, dict[str, np.ndarray]]],
    full_loss: Callable[[dict[str, np.ndarray]], float],
    n_samples: int,
    schedule: TrainSchedule,
    seed: int,
    lr_scale: Mapping[str, float] | None = None,
) -> list[float]:
    """Minibatch gradient descent, updating ``params`` in place.

    ``lr_scale`` multiplies the learning rate of individual parameters.
    Returns the full-data loss before training and after every epoch.
    """
    lr_scale = lr_scale or {}
    if n_samples < 1:
        raise ConfigError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    history = [full_loss(params)]
    if not np.isfinite(history[0]):
        raise TrainingFailure("initial loss is not finite", epoch=0)
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        order = rng.permutation(n_samples)
        # overflow is expected on divergence; it is caught by the finiteness check below
        with np.errstate(over="ignore", invalid="ignore"):
            for start in range(0, n_samples, schedule.batch_size):
                _, grads = batch_grads(params, order[start : start + schedule.batch_size])
                if lr:
                    for key, value in params.items():
                        value -= (lr * lr_scale.get(key, 1.0)) * grads[key]
            loss = full_loss(params)
        if not np.isfinite(loss):
            raise TrainingFailure(f"loss diverged to {loss} in epoch {epoch + 1}", epoch=epoch + 1)
        history.append(loss)
    return history


def train_network(
    ckpt: ModelCheckpoint,
    data: LabeledDataset,
    schedule: TrainSchedule,
    trainable: list[str],
    seed: int,
    name: str | None = None,
    kind: str | None = None,
    lr_scale: Mapping[str, float] | None = None,
    **metadata,
) -> tuple[ModelCheckpoint, list[float]]:
    """Full fine-tuning of the named tensors; every other tensor is copied untouched."""
    if len(data) == 0:
        raise ConfigError("cannot train on an empty dataset")
    missing = [t for t in trainable if t not in ckpt.tensors]
    if missing:
        raise ConfigError(f"trainable tensors {missing} not in checkpoint '{ckpt.name}'")
    out = ckpt.copy(name=name, kind=kind, **metadata)
    params = {k: out.tensors[k] for k in trainable}

    def batch_grads(p, idx):
        loss, grads = loss_and_grads(out, data.x[idx], data.y[idx], data.mask[idx])
        return loss, grads

    def full_loss(p):
        return masked_mse(forward(out, data.x), data.y, data.mask)

    history = run_sgd(params, batch_grads, full_loss, len(data), schedule, seed, lr_scale)
    return out, history
