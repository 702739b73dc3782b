"""Banded residuals on frozen singular-value matrices.

A layer ``W = U diag(sigma) V^T`` is adapted as ``U (diag(sigma) + R) V^T`` where
only the band ``|i - j| <= b`` of the k x k residual ``R`` is trainable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .checkpoint import ModelCheckpoint
from .errors import CheckpointIncompatibleError, ConfigError, DimensionError, TrainingFailure
from .linalg import SvdFactors, svd
from .nn import LabeledDataset, TrainSchedule, forward, loss_and_grads, masked_mse, run_sgd

__all__ = [
    "BandSpec",
    "SpectralResidual",
    "AdapterModel",
    "band_indices",
    "residual_param_count",
    "adapter_forward",
    "materialize",
    "make_adapter",
    "residual_loss_and_grads",
    "fit_residual",
]


@dataclass(frozen=True)
class BandSpec:
    half_width: int = 2

    def __post_init__(self):
        if int(self.half_width) != self.half_width or self.half_width < 0:
            raise ConfigError(f"band.half_width must be a non-negative integer, got {self.half_width}")

    def check(self, k: int) -> None:
        if self.half_width >= k:
            raise ConfigError(f"band.half_width={self.half_width} too wide for a {k}-dimensional spectrum")


@lru_cache(maxsize=64)
def _band_indices(k: int, b: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = [], []
    for i in range(k):
        for j in range(max(0, i - b), min(k, i + b + 1)):
            rows.append(i)
            cols.append(j)
    r, c = np.array(rows, dtype=np.intp), np.array(cols, dtype=np.intp)
    r.setflags(write=False)
    c.setflags(write=False)
    return r, c


def band_indices(k: int, band: BandSpec) -> tuple[np.ndarray, np.ndarray]:
    """Row-major (row, col) coordinates of the representable band cells."""
    band.check(k)
    return _band_indices(k, band.half_width)


def residual_param_count(k: int, band: BandSpec) -> int:
    band.check(k)
    b = band.half_width
    return k + 2 * sum(k - d for d in range(1, b + 1))


@dataclass(frozen=True, eq=False)
class SpectralResidual:
    k: int
    band: BandSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        expected = residual_param_count(self.k, self.band)
        if values.shape != (expected,):
            raise DimensionError(
                f"residual with k={self.k}, half_width={self.band.half_width} needs {expected} values, "
                f"got shape {values.shape}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __eq__(self, other):
        if not isinstance(other, SpectralResidual):
            return NotImplemented
        return self.k == other.k and self.band == other.band and np.array_equal(self.values, other.values)

    __hash__ = None

    @classmethod
    def zeros(cls, k: int, band: BandSpec) -> "SpectralResidual":
        return cls(k, band, np.zeros(residual_param_count(k, band)))

    @classmethod
    def from_dense(cls, matrix: np.ndarray, band: BandSpec) -> "SpectralResidual":
        """Keep the band of a square matrix and drop everything else."""
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise DimensionError(f"residual matrix must be square, got {matrix.shape}")
        r, c = band_indices(matrix.shape[0], band)
        return cls(matrix.shape[0], band, matrix[r, c])

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.k, self.k))
        r, c = band_indices(self.k, self.band)
        out[r, c] = self.values
        return out


def _check_pair(factors: SvdFactors, residual: SpectralResidual, layer: str) -> None:
    if residual.k != factors.k:
        raise DimensionError(f"{layer}: residual k={residual.k} but factors have k={factors.k}")


def adapter_forward(factors: SvdFactors, residual: SpectralResidual, x, layer: str = "layer") -> np.ndarray:
    """``U (Sigma + R) V^T x`` without forming the dense weight.

    ``x`` is a vector of length cols or a (cols, batch) array.
    """
    _check_pair(factors, residual, layer)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != factors.v_t.shape[1]:
        raise DimensionError(f"{layer}: input length {x.shape[0]} but layer has {factors.v_t.shape[1]} columns")
    z = factors.v_t @ x
    z = (factors.sigma * z.T).T + residual.to_dense() @ z
    return factors.u @ z


def materialize(factors: SvdFactors, residual: SpectralResidual | np.ndarray, layer: str = "layer") -> np.ndarray:
    """Dense ``U (Sigma + R) V^T``; ``residual`` may also be a dense k x k matrix."""
    if isinstance(residual, SpectralResidual):
        _check_pair(factors, residual, layer)
        dense = residual.to_dense()
    else:
        dense = np.asarray(residual, dtype=np.float64)
        if dense.shape != (factors.k, factors.k):
            raise DimensionError(f"{layer}: dense residual {dense.shape} but factors have k={factors.k}")
    return factors.u @ (np.diag(factors.sigma) + dense) @ factors.v_t


@dataclass(eq=False)
class AdapterModel:
    """A frozen base network with a spectral residual on each adapted layer."""

    base: ModelCheckpoint
    factors: dict[str, SvdFactors]
    residuals: dict[str, SpectralResidual]
    adapted_layers: list[str]
    name: str = "adapter"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for layer in self.adapted_layers:
            if layer not in self.base.tensors:
                raise CheckpointIncompatibleError(f"adapted layer '{layer}' not in base '{self.base.name}'")
            if layer not in self.factors or layer not in self.residuals:
                raise CheckpointIncompatibleError(f"adapted layer '{layer}' lacks factors or residual")
            f, r = self.factors[layer], self.residuals[layer]
            if f.shape != self.base.tensors[layer].shape:
                raise DimensionError(
                    f"{layer}: factors describe {f.shape} but base weight is {self.base.tensors[layer].shape}"
                )
            if r.k != min(f.shape):
                raise DimensionError(f"{layer}: residual k={r.k} but layer needs k={min(f.shape)}")

    @property
    def band(self) -> BandSpec:
        return self.residuals[self.adapted_layers[0]].band

    def adapted_weights(self) -> dict[str, np.ndarray]:
        return {l: materialize(self.factors[l], self.residuals[l], l) for l in self.adapted_layers}

    def with_residuals(self, residuals: dict[str, SpectralResidual], name: str | None = None, **metadata) -> "AdapterModel":
        meta = dict(self.metadata)
        meta.update(metadata)
        return AdapterModel(
            base=self.base,
            factors=self.factors,
            residuals={**self.residuals, **residuals},
            adapted_layers=list(self.adapted_layers),
            name=self.name if name is None else name,
            metadata=meta,
        )

    def to_checkpoint(self, name: str | None = None, kind: str = "domain_expert", **metadata) -> ModelCheckpoint:
        """The class expert as a plain network with adapted weights materialised."""
        return self.base.replace(self.adapted_weights(), name=name or self.name, **metadata).copy(kind=kind)

    def param_count(self) -> int:
        return sum(r.values.size for r in self.residuals.values())


def make_adapter(
    base: ModelCheckpoint,
    layers: list[str],
    band: BandSpec,
    name: str = "adapter",
    **metadata,
) -> AdapterModel:
    """Decompose the named layers of ``base`` and attach zero residuals."""
    factors, residuals = {}, {}
    for layer in layers:
        f = svd(base[layer])
        factors[layer] = f
        residuals[layer] = SpectralResidual.zeros(f.k, band)
    return AdapterModel(base, factors, residuals, list(layers), name=name, metadata=dict(metadata))


def residual_loss_and_grads(
    adapter: AdapterModel, x: np.ndarray, y: np.ndarray, mask: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss of the adapted network and its gradient w.r.t. each packed band vector.

    Chain rule through ``W = U (Sigma + R) V^T``: dL/dR = U^T (dL/dW) V, restricted to the band.
    """
    weights = adapter.adapted_weights()
    loss, grads = loss_and_grads(adapter.base, x, y, mask, weights)
    out = {}
    for layer in adapter.adapted_layers:
        f, r = adapter.factors[layer], adapter.residuals[layer]
        g = f.u.T @ grads[layer] @ f.v_t.T
        rows, cols = band_indices(r.k, r.band)
        out[layer] = g[rows, cols]
    return loss, out


def fit_residual(
    base: AdapterModel,
    dataset: LabeledDataset,
    schedule: TrainSchedule = TrainSchedule(),
    seed: int = 0,
    name: str | None = None,
) -> AdapterModel:
    """Train only the band residuals; U, sigma, V^T and every other tensor stay frozen."""
    if len(dataset) == 0:
        raise ConfigError("fit_residual: dataset is empty")
    if schedule.epochs < 1:
        raise ConfigError(f"fit_residual: schedule.epochs must be >= 1, got {schedule.epochs}")
    layers = base.adapted_layers
    params = {l: np.array(base.residuals[l].values) for l in layers}

    def current(p) -> AdapterModel:
        res = {l: SpectralResidual(base.residuals[l].k, base.residuals[l].band, p[l]) for l in layers}
        return base.with_residuals(res)

    def batch_grads(p, idx):
        return residual_loss_and_grads(current(p), dataset.x[idx], dataset.y[idx], dataset.mask[idx])

    def full_loss(p):
        return masked_mse(forward(base.base, dataset.x, current(p).adapted_weights()), dataset.y, dataset.mask)

    history = run_sgd(params, batch_grads, full_loss, len(dataset), schedule, seed)
    if history[-1] > history[0]:
        raise TrainingFailure(
            f"residual training ended above its starting loss ({history[-1]:.6g} > {history[0]:.6g})",
            epoch=schedule.epochs,
        )
    fitted = current(params)
    fitted.metadata = {**base.metadata, "loss_history": [float(v) for v in history]}
    if name is not None:
        fitted.name = name
    return fitted
