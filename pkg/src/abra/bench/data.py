"""Synthetic domains, classes and datasets.

Every sample is one object of one class.  Its latent code ``z`` is drawn
around the class centre; the domain maps ``z`` to the observed feature
vector.  Targets are laid out as ``[box (box_dim) | class value (K) | presence (K)]``:
the box part is a class-agnostic linear readout of ``z``, the class value
column ``c`` holds the class-conditional regression target of class ``c`` and
the presence columns hold a one-hot class indicator.  Presence is supervised
only in pretraining data.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, LeakageError
from ..nn import LabeledDataset

BOX_DIM = 4
OBJECT_LABEL = -1


@dataclass(frozen=True)
class SyntheticDomain:
    """Observed features ``smooth(R(angle) @ (scale * z)) + noise * eps``.

    ``R(angle)`` is a product of Givens rotations on disjoint coordinate pairs
    whose per-plane angles are ``angle`` times seeded weights; the pairing and
    the per-coordinate scales come from ``seed`` as well.
    """

    name: str
    seed: int = 0
    angle: float = 0.0
    scale_spread: float = 0.0
    smoothing: float = 0.0
    noise: float = 0.0

    def __post_init__(self):
        if self.scale_spread < 0 or self.smoothing < 0 or self.noise < 0:
            raise ConfigError(f"domain '{self.name}': scale_spread, smoothing and noise must be >= 0")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "angle": self.angle,
            "scale_spread": self.scale_spread,
            "smoothing": self.smoothing,
            "noise": self.noise,
        }

    def _stream(self, dim: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.seed, dim, 0xD0])
        pairing = rng.permutation(dim)
        weights = rng.uniform(0.5, 1.5, size=dim // 2)
        log_scale = rng.uniform(-1.0, 1.0, size=dim)
        return pairing, weights, log_scale

    def rotation(self, dim: int) -> np.ndarray:
        pairing, weights, _ = self._stream(dim)
        r = np.eye(dim)
        for p in range(dim // 2):
            i, j = pairing[2 * p], pairing[2 * p + 1]
            a = self.angle * weights[p]
            c, s = np.cos(a), np.sin(a)
            r[[i, i, j, j], [i, j, i, j]] = [c, -s, s, c]
        return r

    def scales(self, dim: int) -> np.ndarray:
        _, _, log_scale = self._stream(dim)
        return np.exp(self.scale_spread * log_scale)

    def smoother(self, dim: int) -> np.ndarray:
        if self.smoothing == 0:
            return np.eye(dim)
        offsets = np.arange(dim)
        dist = np.minimum(offsets, dim - offsets)
        kernel = np.exp(-0.5 * (dist / self.smoothing) ** 2)
        kernel /= kernel.sum()
        return np.stack([np.roll(kernel, i) for i in range(dim)])

    def linear_map(self, dim: int) -> np.ndarray:
        return self.smoother(dim) @ self.rotation(dim) @ np.diag(self.scales(dim))

    def transform(self, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = z @ self.linear_map(z.shape[1]).T
        if self.noise:
            x = x + self.noise * rng.standard_normal(x.shape)
        return x


@dataclass(frozen=True, eq=False)
class SyntheticClass:
    id: int
    center: np.ndarray
    coef: np.ndarray
    shift: np.ndarray


@dataclass(frozen=True, eq=False)
class World:
    """Latent structure shared by every domain: classes and the box readout."""

    dim: int
    classes: tuple[SyntheticClass, ...]
    box: np.ndarray
    spread: float
    concept_shift: float = 0.0

    @classmethod
    def create(
        cls, dim: int, n_classes: int, seed: int, spread: float = 0.6, center_scale: float = 1.0,
        box_dim: int = BOX_DIM, concept_shift: float = 0.0,
    ) -> "World":
        rng = np.random.default_rng([seed, 0xC1A55])
        classes = tuple(
            SyntheticClass(
                id=c,
                center=center_scale * rng.standard_normal(dim),
                coef=rng.standard_normal(dim) / np.sqrt(dim),
                shift=rng.standard_normal(dim) / np.sqrt(dim),
            )
            for c in range(n_classes)
        )
        box = rng.standard_normal((box_dim, dim)) / np.sqrt(dim)
        return cls(dim=dim, classes=classes, box=box, spread=spread, concept_shift=concept_shift)

    @property
    def n_outputs(self) -> int:
        return self.box_dim + 2 * len(self.classes)

    @property
    def presence_columns(self) -> tuple[int, ...]:
        k = len(self.classes)
        return tuple(range(self.box_dim + k, self.box_dim + 2 * k))

    @property
    def box_dim(self) -> int:
        return self.box.shape[0]

    def class_target(self, c: int, z: np.ndarray, pretraining: bool = False) -> np.ndarray:
        """Class-value label; benchmark labels differ from pretraining ones by the concept shift."""
        cls_ = self.classes[c]
        t = np.tanh(z @ cls_.coef) + 0.5 * np.tanh(z - cls_.center) @ np.roll(cls_.coef, 1)
        if not pretraining:
            t = t + self.concept_shift * ((z - cls_.center) @ cls_.shift / self.spread)
        return t


def generate_dataset(
    domain: SyntheticDomain, classes, n: int, seed: int, world: World, pretraining: bool = False
) -> LabeledDataset:
    """``n`` samples of every class in ``classes``, ordered by class id.

    Deterministic in ``(domain, classes, n, seed)``; the domain name does not
    enter the random stream, so two identically parameterised domains yield
    identical data.
    """
    classes = sorted(set(int(c) for c in classes))
    if not classes:
        raise ConfigError("generate_dataset: class set is empty")
    if n < 1:
        raise ConfigError(f"generate_dataset: n must be >= 1, got {n}")
    unknown = [c for c in classes if not 0 <= c < len(world.classes)]
    if unknown:
        raise ConfigError(f"generate_dataset: unknown classes {unknown}")
    xs, ys, masks, ids = [], [], [], []
    k = len(world.classes)
    for c in classes:
        rng = np.random.default_rng([seed, domain.seed, c, 0x5A])
        z = world.classes[c].center + world.spread * rng.standard_normal((n, world.dim))
        x = domain.transform(z, rng)
        y = np.zeros((n, world.n_outputs))
        mask = np.zeros_like(y)
        y[:, : world.box_dim] = z @ world.box.T
        y[:, world.box_dim + c] = world.class_target(c, z, pretraining)
        mask[:, : world.box_dim] = 1.0 / world.box_dim
        mask[:, world.box_dim + c] = 1.0
        if pretraining:
            y[:, world.presence_columns[c]] = 1.0
            mask[:, list(world.presence_columns)] = 1.0 / k
        xs.append(x)
        ys.append(y)
        masks.append(mask)
        ids.append(np.full(n, c, dtype=np.int64))
    return LabeledDataset(
        x=np.concatenate(xs),
        y=np.concatenate(ys),
        mask=np.concatenate(masks),
        class_ids=np.concatenate(ids),
        present=np.ones(n * len(classes), dtype=bool),
        domain=domain.name,
        class_columns=tuple(range(world.box_dim, world.box_dim + k)),
    )


def objectify(ds: LabeledDataset, top_k: int = 3) -> LabeledDataset:
    """Keep the ``top_k`` most frequent classes under one anonymous object label.

    Class-value targets are erased, so only the class-agnostic box remains
    supervised.  Count ties are broken by ascending class id.
    """
    if top_k < 1:
        raise ConfigError(f"objectify: top_k must be >= 1, got {top_k}")
    counts = Counter(int(c) for c in ds.class_ids if c != OBJECT_LABEL)
    if len(counts) < top_k:
        raise ConfigError(f"objectify: need {top_k} distinct classes, dataset has {len(counts)}")
    ranked = sorted(counts, key=lambda c: (-counts[c], c))[:top_k]
    keep = np.isin(ds.class_ids, ranked)
    y = ds.y[keep].copy()
    mask = ds.mask[keep].copy()
    cols = list(ds.class_columns)
    y[:, cols] = 0.0
    mask[:, cols] = 0.0
    return LabeledDataset(
        x=ds.x[keep].copy(),
        y=y,
        mask=mask,
        class_ids=np.full(int(keep.sum()), OBJECT_LABEL, dtype=np.int64),
        present=ds.present[keep].copy(),
        domain=ds.domain,
        class_columns=ds.class_columns,
    )


def supervised_domain_data(ds: LabeledDataset, top_k: int = 3) -> LabeledDataset:
    """Like :func:`objectify` but keeps the true class-value labels."""
    counts = Counter(int(c) for c in ds.class_ids)
    if len(counts) < top_k:
        raise ConfigError(f"need {top_k} distinct classes, dataset has {len(counts)}")
    ranked = sorted(counts, key=lambda c: (-counts[c], c))[:top_k]
    return ds.subset(np.flatnonzero(np.isin(ds.class_ids, ranked)))


def class_subset(ds: LabeledDataset, classes) -> LabeledDataset:
    """Samples of ``classes`` with every other class-value label masked out."""
    classes = sorted(set(int(c) for c in classes))
    keep = np.flatnonzero(np.isin(ds.class_ids, classes))
    if keep.size == 0:
        raise ConfigError(f"no samples of classes {classes} in dataset '{ds.domain}'")
    sub = ds.subset(keep)
    mask = sub.mask.copy()
    other = [col for c, col in enumerate(ds.class_columns) if c not in classes]
    mask[:, other] = 0.0
    y = sub.y.copy()
    y[:, other] = 0.0
    return LabeledDataset(
        sub.x.copy(), y, mask, sub.class_ids.copy(), sub.present.copy(), sub.domain, ds.class_columns
    )


# ---------------------------------------------------------------- leakage audit


@dataclass(frozen=True)
class Access:
    consumer: str
    role: str
    split: str
    classes: tuple[int, ...]


@dataclass
class AccessLog:
    entries: list[Access] = field(default_factory=list)

    def record(self, consumer: str, role: str, split: str, classes) -> None:
        self.entries.append(Access(consumer, role, split, tuple(sorted(int(c) for c in classes))))

    def violations(self, unavailable, allowed=("finetune_upper",)) -> list[Access]:
        unavailable = set(unavailable)
        return [
            a
            for a in self.entries
            if a.role == "target" and a.split == "train" and a.consumer not in allowed
            and unavailable.intersection(a.classes)
        ]

    def audit(self, unavailable, allowed=("finetune_upper",)) -> None:
        bad = self.violations(unavailable, allowed)
        if bad:
            first = bad[0]
            raise LeakageError(
                f"'{first.consumer}' read target-domain training samples of unavailable classes "
                f"{sorted(set(first.classes) & set(unavailable))} ({len(bad)} violating reads)"
            )


class AuditedDataset:
    """Read-logging wrapper: every ``read`` is recorded against the consumer."""

    def __init__(self, data: LabeledDataset, role: str, split: str, log: AccessLog):
        self._data = data
        self.role = role
        self.split = split
        self._log = log
        self.classes = tuple(sorted(set(int(c) for c in data.class_ids)))

    def __len__(self) -> int:
        return len(self._data)

    def read(self, consumer: str, classes=None) -> LabeledDataset:
        if classes is None:
            self._log.record(consumer, self.role, self.split, self.classes)
            return self._data
        classes = sorted(set(int(c) for c in classes))
        self._log.record(consumer, self.role, self.split, classes)
        keep = np.flatnonzero(np.isin(self._data.class_ids, classes))
        if keep.size == 0:
            raise ConfigError(f"no {self.role}/{self.split} samples of classes {classes}")
        return self._data.subset(keep)
