"""Moving class residuals between domain experts.

Singular bases of the source and target experts are aligned with orthogonal
Procrustes, the residual is carried across with ``L @ R_s @ R.T`` and laid on
top of the target spectrum.  Task-analogy and identity-transport baselines
live here too.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .checkpoint import ModelCheckpoint, check_same_architecture
from .errors import (
    CheckpointIncompatibleError,
    CompositionError,
    ConfigError,
    DegenerateAlignmentWarning,
    DimensionError,
    NumericError,
)
from .linalg import SvdFactors, is_orthogonal, orthogonality_residual, svd
from .spectral import AdapterModel, SpectralResidual, materialize

__all__ = [
    "TransportMap",
    "TaskVector",
    "procrustes",
    "build_transport_map",
    "transport_residual",
    "compose_abra",
    "compose_task_analogy",
    "compose_param_delta",
    "subspace_alignment_error",
    "transport_discrepancy",
]

BASIS_TOL = 1e-8
MAP_TOL = 1e-9
RANK_TOL = 1e-12


def _check_basis(q: np.ndarray, name: str) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] < q.shape[1]:
        raise DimensionError(f"{name}: expected an n x k basis with n >= k, got shape {q.shape}")
    res = orthogonality_residual(q)
    if res > BASIS_TOL:
        raise ConfigError(f"{name}: columns are not orthonormal (||Q^T Q - I||_F = {res:.3e})")
    return q


def procrustes(source_basis, target_basis) -> np.ndarray:
    """Orthogonal L minimising ``||source - target @ L||_F``.

    With ``M = target^T source = P S Q^T`` the minimiser is ``P Q^T``.  If M is
    rank deficient a :class:`DegenerateAlignmentWarning` is issued because the
    minimiser is not unique; the returned L is still optimal.
    """
    u_s = _check_basis(source_basis, "source basis")
    u_t = _check_basis(target_basis, "target basis")
    if u_s.shape != u_t.shape:
        raise DimensionError(f"basis shapes differ: {u_s.shape} vs {u_t.shape}")
    m = u_t.T @ u_s
    f = svd(m)
    if f.sigma[-1] < RANK_TOL:
        warnings.warn(
            f"Procrustes cross-product is rank deficient (smallest singular value {f.sigma[-1]:.3e})",
            DegenerateAlignmentWarning,
            stacklevel=2,
        )
    l = f.u @ f.v_t
    if not is_orthogonal(l, MAP_TOL):
        raise NumericError(f"Procrustes solution lost orthogonality ({orthogonality_residual(l):.3e})")
    return l


@dataclass(eq=False)
class TransportMap:
    """Per-layer (L, R) rotations taking source spectral coordinates to target ones."""

    entries: dict[str, tuple[np.ndarray, np.ndarray]]
    degenerate: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for layer, (l, r) in self.entries.items():
            for tag, q in (("l", l), ("r", r)):
                if not is_orthogonal(q, MAP_TOL):
                    raise NumericError(
                        f"transport map {layer}.{tag} is not orthogonal "
                        f"(||Q^T Q - I||_F = {orthogonality_residual(q):.3e})"
                    )

    @property
    def layers(self) -> list[str]:
        return list(self.entries)

    def __getitem__(self, layer: str) -> tuple[np.ndarray, np.ndarray]:
        try:
            return self.entries[layer]
        except KeyError:
            raise CompositionError(f"transport map has no entry for layer '{layer}'") from None

    def __eq__(self, other):
        if not isinstance(other, TransportMap):
            return NotImplemented
        return self.layers == other.layers and all(
            np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
            for a, b in zip(self.entries.values(), other.entries.values())
        )

    __hash__ = None

    @classmethod
    def identity(cls, factors: Mapping[str, SvdFactors]) -> "TransportMap":
        return cls({layer: (np.eye(f.k), np.eye(f.k)) for layer, f in factors.items()})


def build_transport_map(
    source: ModelCheckpoint,
    target: ModelCheckpoint,
    layers: Iterable[str],
    source_factors: Mapping[str, SvdFactors] | None = None,
) -> TransportMap:
    """Align the singular bases of every named layer.

    ``source_factors`` may pass precomputed decompositions of ``source`` (as
    held by an adapter); they must be the decomposition of those weights.
    """
    layers = list(layers)
    check_same_architecture([source, target], layers)
    entries, degenerate = {}, []
    for layer in layers:
        if source[layer].ndim != 2:
            raise CheckpointIncompatibleError(f"layer '{layer}' is not a weight matrix")
        f_s = (source_factors or {}).get(layer) or svd(source[layer])
        f_t = svd(target[layer])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", DegenerateAlignmentWarning)
            l = procrustes(f_s.u, f_t.u)
            r = procrustes(f_s.v, f_t.v)
        if any(issubclass(w.category, DegenerateAlignmentWarning) for w in caught):
            degenerate.append(layer)
            warnings.warn(f"degenerate alignment in layer '{layer}'", DegenerateAlignmentWarning, stacklevel=2)
        entries[layer] = (l, r)
    return TransportMap(
        entries,
        degenerate=degenerate,
        metadata={"source": source.name, "target": target.name,
                  "source_digest": source.digest(), "target_digest": target.digest()},
    )


def _dense(residual: SpectralResidual | np.ndarray) -> np.ndarray:
    if isinstance(residual, SpectralResidual):
        return residual.to_dense()
    return np.asarray(residual, dtype=np.float64)


def transport_residual(residual: SpectralResidual | np.ndarray, map_entry: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """``L @ R_s @ R.T``; the band structure is generally lost."""
    l, r = (np.asarray(m, dtype=np.float64) for m in map_entry)
    dense = _dense(residual)
    if dense.shape != l.shape or dense.shape != r.shape:
        raise DimensionError(f"residual {dense.shape} vs map entries l{l.shape} r{r.shape}")
    return l @ dense @ r.T


def _compose(target_domain: ModelCheckpoint, residuals: Mapping[str, np.ndarray], name: str, **metadata) -> ModelCheckpoint:
    updates = {}
    for layer, dense in residuals.items():
        if layer not in target_domain.tensors:
            raise CompositionError(f"layer '{layer}' missing from target checkpoint '{target_domain.name}'")
        f_t = svd(target_domain[layer])
        if dense.shape != (f_t.k, f_t.k):
            raise DimensionError(f"{layer}: residual {dense.shape} does not fit target spectrum k={f_t.k}")
        updates[layer] = materialize(f_t, dense, layer)
    return target_domain.replace(updates, name=name, **metadata)


def compose_abra(
    target_domain: ModelCheckpoint,
    source_adapter: AdapterModel,
    transport_map: TransportMap,
    name: str | None = None,
) -> ModelCheckpoint:
    """Target expert with each source residual rotated into its spectral basis."""
    missing = [l for l in source_adapter.adapted_layers if l not in transport_map.entries]
    if missing:
        raise CompositionError(f"transport map lacks adapted layers {missing}")
    meta = transport_map.metadata
    if "source_digest" in meta and meta["source_digest"] != source_adapter.base.digest():
        raise CompositionError(
            f"transport map was built from '{meta.get('source')}', not the adapter base '{source_adapter.base.name}'"
        )
    if "target_digest" in meta and meta["target_digest"] != target_domain.digest():
        raise CompositionError(
            f"transport map was built for '{meta.get('target')}', not '{target_domain.name}'"
        )
    moved = {
        layer: transport_residual(source_adapter.residuals[layer], transport_map[layer])
        for layer in source_adapter.adapted_layers
    }
    return _compose(target_domain, moved, name or f"{source_adapter.name}@abra", method="abra")


def compose_param_delta(
    target_domain: ModelCheckpoint, source_adapter: AdapterModel, name: str | None = None
) -> ModelCheckpoint:
    """Reuse the source residual unchanged in the target spectral basis."""
    moved = {layer: source_adapter.residuals[layer].to_dense() for layer in source_adapter.adapted_layers}
    return _compose(target_domain, moved, name or f"{source_adapter.name}@param_delta", method="param_delta")


@dataclass(eq=False)
class TaskVector:
    """Per-tensor weight deltas against a reference checkpoint."""

    deltas: dict[str, np.ndarray]

    @classmethod
    def between(cls, finetuned: ModelCheckpoint, reference: ModelCheckpoint) -> "TaskVector":
        check_same_architecture([reference, finetuned])
        return cls({k: finetuned.tensors[k] - reference.tensors[k] for k in reference.tensors})

    def __add__(self, other: "TaskVector") -> "TaskVector":
        self._check(other)
        return TaskVector({k: v + other.deltas[k] for k, v in self.deltas.items()})

    def __sub__(self, other: "TaskVector") -> "TaskVector":
        self._check(other)
        return TaskVector({k: v - other.deltas[k] for k, v in self.deltas.items()})

    def _check(self, other: "TaskVector") -> None:
        for k, v in self.deltas.items():
            if k not in other.deltas or other.deltas[k].shape != v.shape:
                raise CheckpointIncompatibleError(f"task vectors disagree on tensor '{k}'")
        if set(other.deltas) != set(self.deltas):
            raise CheckpointIncompatibleError("task vectors cover different tensors")

    def apply_to(self, reference: ModelCheckpoint, name: str, **metadata) -> ModelCheckpoint:
        return reference.replace({k: reference.tensors[k] + v for k, v in self.deltas.items()}, name=name, **metadata)


def compose_task_analogy(
    theta0: ModelCheckpoint,
    source_dom: ModelCheckpoint,
    target_dom: ModelCheckpoint,
    source_class: ModelCheckpoint,
    name: str = "task_analogy",
) -> ModelCheckpoint:
    """``theta0 + tau_T + tau_Sc - tau_S`` with every tau taken against theta0."""
    check_same_architecture([theta0, source_dom, target_dom, source_class])
    tau_t = TaskVector.between(target_dom, theta0)
    tau_sc = TaskVector.between(source_class, theta0)
    tau_s = TaskVector.between(source_dom, theta0)
    out = (tau_t + tau_sc - tau_s).apply_to(theta0, name=name, method="task_analogy")
    return out.copy(kind=target_dom.kind)


def subspace_alignment_error(u_s, u_t, l) -> float:
    """``||U_S - U_T L||_F^2``, cross-checked against ``2k - 2 tr(U_S^T U_T L)``."""
    u_s = _check_basis(u_s, "u_s")
    u_t = _check_basis(u_t, "u_t")
    l = np.asarray(l, dtype=np.float64)
    if u_s.shape != u_t.shape or l.shape != (u_s.shape[1], u_s.shape[1]):
        raise DimensionError(f"shapes u_s{u_s.shape} u_t{u_t.shape} l{l.shape} are inconsistent")
    if not is_orthogonal(l, BASIS_TOL):
        raise ConfigError(f"l is not orthogonal ({orthogonality_residual(l):.3e})")
    direct = float(np.sum((u_s - u_t @ l) ** 2))
    k = u_s.shape[1]
    trace_form = 2.0 * k - 2.0 * float(np.trace(u_s.T @ u_t @ l))
    if abs(direct - trace_form) > 1e-9 * max(1.0, direct):
        raise NumericError(f"trace identity violated: {direct!r} vs {trace_form!r}")
    return direct


def transport_discrepancy(
    source_factors: SvdFactors, target_factors: SvdFactors, residual, map_entry
) -> float:
    """``||U_S R_s V_S^T - U_T (L R_s R^T) V_T^T||_F``: how far the moved residual is from the source one."""
    dense = _dense(residual)
    src = source_factors.u @ dense @ source_factors.v_t
    moved = target_factors.u @ transport_residual(dense, map_entry) @ target_factors.v_t
    return float(np.linalg.norm(src - moved))
