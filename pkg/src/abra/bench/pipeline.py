"""The end-to-end transfer experiment on synthetic domains.

One seed runs: pretraining of theta0 on a neutral base domain, domain experts
on objectified source and target data, spectral class experts on source
data, composition of every requested method and evaluation on held-out
target data of the target-unavailable classes.  All target-domain training
reads go through an :class:`~abra.bench.data.AuditedDataset`, and the log is
audited before a report is returned.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import __version__
from ..checkpoint import ModelCheckpoint
from ..errors import ConfigError
from ..nn import LabeledDataset, forward, init_network, masked_mse, train_network
from ..spectral import AdapterModel, fit_residual, make_adapter, residual_param_count
from ..transport import build_transport_map, compose_abra, compose_param_delta, compose_task_analogy
from .config import METHODS, OPTIONAL_METHODS, ExperimentConfig
from .data import AccessLog, AuditedDataset, World, class_subset, generate_dataset, objectify, supervised_domain_data

UPPER = "finetune_upper"
FEWSHOT = "fewshot"
FEWSHOT_CURVES = ("theta0_init", "abra_init")
_SPLIT_OFFSET = {"train": 0, "eval": 1, "heldout": 2}


# ---------------------------------------------------------------- per-seed data


def make_world(config: ExperimentConfig, seed: int) -> World:
    w = config.world
    return World.create(
        config.width,
        w["n_classes"],
        seed,
        spread=w["spread"],
        center_scale=w["center_scale"],
        box_dim=w["box_dim"],
        concept_shift=w["concept_shift"],
    )


def _data_seed(seed: int, split: str) -> int:
    return 4 * seed + _SPLIT_OFFSET[split]


class SeedData:
    """Lazily generated, audited datasets of one seed."""

    def __init__(self, config: ExperimentConfig, seed: int, log: AccessLog | None = None):
        self.config = config
        self.seed = seed
        self.world = make_world(config, seed)
        self.log = log if log is not None else AccessLog()
        self._cache: dict[tuple[str, str], AuditedDataset] = {}

    def dataset(self, role: str, split: str) -> AuditedDataset:
        key = (role, split)
        if key not in self._cache:
            sp = self.config.split
            n = sp.samples_per_class if split == "train" else sp.eval_samples_per_class
            if role == "source":
                classes = sp.source_classes
            else:
                classes = range(len(self.world.classes))
            data = generate_dataset(
                self.config.domain(role), classes, n, _data_seed(self.seed, split), self.world,
                pretraining=(role == "base"),
            )
            self._cache[key] = AuditedDataset(data, role, split, self.log)
        return self._cache[key]


# ---------------------------------------------------------------- stages


def _access_records(log: AccessLog, start: int) -> list[list]:
    return [[a.consumer, a.role, a.split, list(a.classes)] for a in log.entries[start:]]


def replay_access(log: AccessLog, records) -> None:
    """Re-enter the data reads recorded in an artifact's metadata."""
    for consumer, role, split, classes in records:
        log.record(consumer, role, split, classes)


def _stage_meta(config: ExperimentConfig, seed: int, stage: str, log: AccessLog, start: int, **extra) -> dict:
    return {
        "stage": stage,
        "seed": seed,
        "config_hash": config.config_hash(),
        "data_access": _access_records(log, start),
        **extra,
    }


def presence_accuracy(ckpt: ModelCheckpoint, data: LabeledDataset, world: World) -> float:
    scores = forward(ckpt, data.x)[:, list(world.presence_columns)]
    return float(np.mean(np.argmax(scores, axis=1) == data.class_ids))


def majority_baseline(class_ids) -> float:
    """Accuracy of always predicting the most frequent class."""
    _, counts = np.unique(np.asarray(class_ids), return_counts=True)
    return float(counts.max() / counts.sum())


def pretrain_backbone(config: ExperimentConfig, seed: int, data: SeedData | None = None) -> ModelCheckpoint:
    """theta0: every tensor trained on all classes of the neutral base domain."""
    data = data or SeedData(config, seed)
    start = len(data.log.entries)
    train = data.dataset("base", "train").read("pretrain")
    net = init_network(
        np.random.default_rng([seed, 0x7E7A0]), config.width, config.depth, data.world.n_outputs,
        name="theta0", activation=config.activation,
    )
    theta0, history = train_network(net, train, config.schedule("pretrain"), list(net.tensors), seed)
    heldout = data.dataset("base", "heldout").read("pretrain_eval")
    meta = _stage_meta(
        config, seed, "pretrain", data.log, start,
        loss_history=history,
        presence_accuracy=presence_accuracy(theta0, heldout, data.world),
        majority_baseline=majority_baseline(heldout.class_ids),
    )
    return theta0.copy(name="theta0", kind="backbone", **meta)


def train_domain_expert(
    theta0: ModelCheckpoint,
    role: str,
    config: ExperimentConfig,
    seed: int,
    data: SeedData | None = None,
    supervised: bool = False,
) -> ModelCheckpoint:
    """Fine-tune the designated layers of theta0 on objectified data of one domain.

    Target-domain experts only read the target-available classes.  With
    ``supervised`` the true class-value labels are kept instead of objectified.
    """
    data = data or SeedData(config, seed)
    sp = config.split
    classes = {"source": sp.source_classes, "target": sp.target_available, "base": None}
    if role not in classes:
        raise ConfigError(f"unknown domain role '{role}'")
    start = len(data.log.entries)
    consumer = f"domain_{role}" + ("_supervised" if supervised else "")
    raw = data.dataset(role, "train").read(consumer, classes[role])
    train = supervised_domain_data(raw, sp.top_k) if supervised else objectify(raw, sp.top_k)
    name = f"theta_{role}" + ("_supervised" if supervised else "")
    expert, history = train_network(
        theta0, train, config.schedule("domain"), config.domain_trainable, seed, lr_scale=config.domain_lr_scale
    )
    meta = _stage_meta(config, seed, consumer, data.log, start, loss_history=history, domain=role)
    return expert.copy(name=name, kind="domain_expert", **meta)


def train_class_expert(
    domain_expert: ModelCheckpoint,
    classes,
    config: ExperimentConfig,
    seed: int,
    data: SeedData | None = None,
    name: str | None = None,
) -> AdapterModel:
    """Banded spectral residual on the class layers, trained on source samples of ``classes``.

    Labels of every other class are masked.  A zero-epoch class schedule
    yields the zero residual.
    """
    data = data or SeedData(config, seed)
    classes = sorted({int(classes)} if np.isscalar(classes) else {int(c) for c in classes})
    missing = [c for c in classes if c not in config.split.source_classes]
    if missing:
        raise ConfigError(f"classes {missing} are not in split.source_classes")
    start = len(data.log.entries)
    label = "+".join(str(c) for c in classes)
    consumer = f"class_{label}@{domain_expert.name}"
    train = class_subset(data.dataset("source", "train").read(consumer, classes), classes)
    name = name or f"class_{label}@{domain_expert.name}"
    adapter = make_adapter(domain_expert, config.class_layers, config.band, name=name)
    schedule = config.schedule("class")
    if schedule.epochs > 0:
        adapter = fit_residual(adapter, train, schedule, seed, name=name)
        history = adapter.metadata.pop("loss_history")
    else:
        history = []
    adapter.metadata = _stage_meta(
        config, seed, "class", data.log, start, loss_history=history, classes=classes, base=domain_expert.name
    )
    return adapter


def finetune(
    init: ModelCheckpoint, train: LabeledDataset, config: ExperimentConfig, stage: str, seed: int, name: str
) -> ModelCheckpoint:
    """Plain fine-tuning of the domain layers (upper bound and few-shot runs)."""
    out, _ = train_network(init, train, config.schedule(stage), config.domain_trainable, seed, name=name)
    return out


# ---------------------------------------------------------------- evaluation


def evaluate(ckpt: ModelCheckpoint, data: LabeledDataset, class_id: int, tolerance: float) -> dict[str, float]:
    """Task error (MSE of the class value) and hit rate (|error| <= tolerance)."""
    col = data.class_columns[class_id]
    keep = data.class_ids == class_id
    pred = forward(ckpt, data.x[keep])[:, col]
    err = pred - data.y[keep, col]
    return {"task_error": float(np.mean(err**2)), "accuracy": float(np.mean(np.abs(err) <= tolerance))}


def domain_error(ckpt: ModelCheckpoint, data: LabeledDataset, top_k: int) -> float:
    """Objectified (box) loss: the domain experts' own training criterion."""
    obj = objectify(data, top_k)
    return masked_mse(forward(ckpt, obj.x), obj.y, obj.mask)


# ---------------------------------------------------------------- stage cache


class StageStore:
    """Optional on-disk cache of stage artifacts for one seed.

    An artifact is reused only if its metadata carries the same config hash
    and seed; otherwise it is recomputed and overwritten.
    """

    def __init__(self, root: Path, config: ExperimentConfig, seed: int):
        self.dir = Path(root) / f"seed{seed}"
        self.hash = config.config_hash()
        self.seed = seed

    def path(self, key: str) -> Path:
        return self.dir / f"{key}.abra"

    def get(self, key: str):
        from ..io import load_checkpoint

        p = self.path(key)
        if not p.exists():
            return None
        art = load_checkpoint(p)
        meta = art.metadata
        if meta.get("config_hash") != self.hash or meta.get("seed") != self.seed:
            return None
        return art

    def put(self, key: str, artifact) -> None:
        from ..io import save_checkpoint

        save_checkpoint(artifact, self.path(key))


def _cached(store: StageStore | None, key: str, log: AccessLog, build: Callable[[], object]):
    if store is not None:
        art = store.get(key)
        if art is not None:
            replay_access(log, art.metadata.get("data_access", []))
            return art
    art = build()
    if store is not None:
        store.put(key, art)
    return art


@dataclass
class SeedArtifacts:
    """Stage products of one seed, built on demand."""

    config: ExperimentConfig
    seed: int
    data: SeedData
    store: StageStore | None = None
    _memo: dict = field(default_factory=dict)

    def _get(self, key: str, build):
        if key not in self._memo:
            self._memo[key] = _cached(self.store, key, self.data.log, build)
        return self._memo[key]

    @property
    def theta0(self) -> ModelCheckpoint:
        return self._get("theta0", lambda: pretrain_backbone(self.config, self.seed, self.data))

    def domain(self, role: str, supervised: bool = False) -> ModelCheckpoint:
        key = f"domain_{role}" + ("_supervised" if supervised else "")
        return self._get(
            key, lambda: train_domain_expert(self.theta0, role, self.config, self.seed, self.data, supervised)
        )

    def class_expert(self, classes, base: str = "source") -> AdapterModel:
        """``base`` is 'source', 'theta0' or 'source_supervised'."""
        classes = sorted({int(c) for c in classes})
        label = "+".join(str(c) for c in classes)
        key = f"class_{label}_on_{base}"
        bases = {
            "source": lambda: self.domain("source"),
            "source_supervised": lambda: self.domain("source", supervised=True),
            "theta0": lambda: self.theta0,
        }
        return self._get(key, lambda: train_class_expert(bases[base](), classes, self.config, self.seed, self.data))

    def transport_map(self, supervised: bool = False):
        key = "map" + ("_supervised" if supervised else "")
        if key not in self._memo:
            src = self.domain("source", supervised)
            tgt = self.domain("target", supervised)
            self._memo[key] = build_transport_map(src, tgt, self.config.class_layers)
        return self._memo[key]


def stage_keys(config: ExperimentConfig) -> list[str]:
    """Cache keys the stage subcommands produce for one seed."""
    keys = ["theta0", "domain_source", "domain_target"]
    for c in config.split.target_unavailable:
        keys += [f"class_{c}_on_source", f"class_{c}_on_theta0"]
    return keys


# ---------------------------------------------------------------- methods


def _compose(method: str, c: int, arts: SeedArtifacts) -> ModelCheckpoint:
    config, seed = arts.config, arts.seed
    if method == UPPER:
        raw = arts.data.dataset("target", "train").read(UPPER, [c])
        return finetune(arts.theta0, class_subset(raw, [c]), config, "upper", seed, f"upper_{c}")
    if method == "zero_shot":
        return arts.theta0
    if method == "source_only":
        return arts.class_expert([c]).to_checkpoint(name=f"source_only_{c}")
    if method == "task_analogy":
        return compose_task_analogy(
            arts.theta0, arts.domain("source"), arts.domain("target"),
            arts.class_expert([c], base="theta0").to_checkpoint(), name=f"task_analogy_{c}",
        )
    if method == "param_delta":
        return compose_param_delta(arts.domain("target"), arts.class_expert([c]))
    if method == "abra":
        return compose_abra(arts.domain("target"), arts.class_expert([c]), arts.transport_map())
    if method == "abra_merged":
        unav = config.split.target_unavailable
        if len(unav) < 2:
            raise ConfigError("method 'abra_merged' needs at least 2 target-unavailable classes")
        return compose_abra(arts.domain("target"), arts.class_expert(unav), arts.transport_map())
    if method == "domain_supervised":
        return compose_abra(
            arts.domain("target", supervised=True),
            arts.class_expert([c], base="source_supervised"),
            arts.transport_map(supervised=True),
        )
    raise ConfigError(f"unknown method '{method}'")


def _diagnostics(arts: SeedArtifacts) -> dict:
    """Recorded sanity numbers: each stage should improve on what it starts from."""
    config = arts.config
    top_k = config.split.top_k
    out = {
        "pretrain_presence_accuracy": arts.theta0.metadata["presence_accuracy"],
        "pretrain_majority_baseline": arts.theta0.metadata["majority_baseline"],
    }
    for role, classes in (("source", config.split.source_classes), ("target", config.split.target_available)):
        ev = arts.data.dataset(role, "eval").read("diagnostics", classes)
        out[f"{role}_domain_error_theta0"] = domain_error(arts.theta0, ev, top_k)
        out[f"{role}_domain_error_expert"] = domain_error(arts.domain(role), ev, top_k)
    src_ev = arts.data.dataset("source", "eval")
    for c in config.split.target_unavailable:
        ev = class_subset(src_ev.read("diagnostics", [c]), [c])
        out[f"class_{c}_source_error_domain_expert"] = evaluate(arts.domain("source"), ev, c, config.hit_tolerance)["task_error"]
        out[f"class_{c}_source_error_class_expert"] = evaluate(
            arts.class_expert([c]).to_checkpoint(), ev, c, config.hit_tolerance
        )["task_error"]
    return out


@dataclass
class SeedResult:
    seed: int
    metrics: dict[str, dict[int, dict[str, float]]]
    accesses: list[list]
    diagnostics: dict


def run_seed(config: ExperimentConfig, seed: int, store_root: str | None = None) -> SeedResult:
    log = AccessLog()
    data = SeedData(config, seed, log)
    store = StageStore(Path(store_root), config, seed) if store_root else None
    arts = SeedArtifacts(config, seed, data, store)
    tol = config.hit_tolerance
    target_eval = data.dataset("target", "eval")
    metrics: dict[str, dict[int, dict[str, float]]] = {}
    for method in config.methods:
        metrics[method] = {}
        for c in config.split.target_unavailable:
            ckpt = _compose(method, c, arts)
            ev = class_subset(target_eval.read("evaluation", [c]), [c])
            metrics[method][c] = evaluate(ckpt, ev, c, tol)
    diagnostics = _diagnostics(arts)
    return SeedResult(seed, metrics, _access_records(log, 0), diagnostics)


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    """Per-seed metrics plus their seed-averaged table.

    ``rows`` has exactly one entry per (method, class[, shots]); values are
    means over seeds, with the per-seed values alongside.
    """

    kind: str
    config: ExperimentConfig
    methods: list[str]
    classes: list[int]
    per_seed: dict[int, dict]
    shots: list[int] | None = None
    audit: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def _keys(self):
        for m in self.methods:
            for c in self.classes:
                if self.shots is None:
                    yield m, c, None
                else:
                    for k in self.shots:
                        yield m, c, k

    def _cell(self, seed: int, m: str, c: int, k):
        cell = self.per_seed[seed][m][c]
        return cell if k is None else cell[k]

    @property
    def rows(self) -> list[dict]:
        seeds = sorted(self.per_seed)
        out = []
        for m, c, k in self._keys():
            cells = [self._cell(s, m, c, k) for s in seeds]
            row = {"method": m, "class": c}
            if k is not None:
                row["shots"] = k
            for metric in ("task_error", "accuracy"):
                row[metric] = float(np.mean([x[metric] for x in cells]))
                row[f"seed_{metric}"] = [x[metric] for x in cells]
            out.append(row)
        return out

    def mean(self, method: str, metric: str = "task_error", shots: int | None = None) -> float:
        vals = [r[metric] for r in self.rows if r["method"] == method and r.get("shots") == shots]
        if not vals:
            raise ConfigError(f"report has no rows for method '{method}'")
        return float(np.mean(vals))

    def value(self, method: str, class_id: int, metric: str = "task_error", shots: int | None = None) -> float:
        for r in self.rows:
            if r["method"] == method and r["class"] == class_id and r.get("shots") == shots:
                return r[metric]
        raise ConfigError(f"report has no row for ({method}, {class_id}, {shots})")

    def to_dict(self) -> dict:
        means = []
        for m in self.methods:
            for k in self.shots or [None]:
                row = {"method": m, "task_error": self.mean(m, "task_error", k), "accuracy": self.mean(m, "accuracy", k)}
                if k is not None:
                    row["shots"] = k
                means.append(row)
        doc = {
            "format": "abra-report",
            "tool_version": __version__,
            "kind": self.kind,
            "config": self.config.science_dict(),
            "config_hash": self.config.config_hash(),
            "seeds": sorted(self.per_seed),
            "methods": list(self.methods),
            "classes": list(self.classes),
            "rows": self.rows,
            "means": means,
            "audit": self.audit,
            "diagnostics": {str(s): d for s, d in sorted(self.diagnostics.items())},
        }
        if self.shots is not None:
            doc["shots"] = list(self.shots)
        doc.update(self.extra)
        return doc


def resolve_jobs(jobs: int | None) -> int:
    if jobs is None:
        env = os.environ.get("ABRA_JOBS")
        if env is None or env == "":
            return 1
        try:
            jobs = int(env)
        except ValueError:
            raise ConfigError(f"environment variable ABRA_JOBS must be an integer, got {env!r}") from None
    if jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {jobs}")
    return jobs


def _map_seeds(fn, config: ExperimentConfig, jobs: int | None, *args) -> list:
    jobs = min(resolve_jobs(jobs), len(config.seeds))
    if jobs <= 1:
        return [fn(config, s, *args) for s in config.seeds]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, config, s, *args) for s in config.seeds]
        return [f.result() for f in futures]


def _audit(results, unavailable, allowed=(UPPER,)) -> dict:
    log = AccessLog()
    for r in results:
        replay_access(log, r.accesses)
    log.audit(unavailable, allowed)
    return {
        "reads": len(log.entries),
        "target_train_reads": sum(1 for a in log.entries if a.role == "target" and a.split == "train"),
        "allowed_consumers": sorted(allowed),
        "violations": 0,
    }


def run_pipeline(
    config: ExperimentConfig, jobs: int | None = None, store_root: str | None = None, kind: str = "benchmark"
) -> EvalReport:
    """All configured methods on every seed; raises LeakageError if the audit fails."""
    unknown = [m for m in config.methods if m not in METHODS + OPTIONAL_METHODS]
    if unknown:
        raise ConfigError(f"unknown methods {unknown}")
    results = _map_seeds(run_seed, config, jobs, store_root)
    audit = _audit(results, config.split.target_unavailable)
    return EvalReport(
        kind=kind,
        config=config,
        methods=config.methods,
        classes=list(config.split.target_unavailable),
        per_seed={r.seed: r.metrics for r in results},
        audit=audit,
        diagnostics={r.seed: r.diagnostics for r in results},
    )


def run_merged_ablation(
    config: ExperimentConfig, jobs: int | None = None, store_root: str | None = None
) -> EvalReport:
    """Per-class ABRA against one residual trained on all unavailable classes jointly."""
    unav = config.split.target_unavailable
    if len(unav) < 2:
        raise ConfigError(f"merged ablation needs at least 2 target-unavailable classes, got {list(unav)}")
    report = run_pipeline(config.with_overrides(methods=["abra", "abra_merged"]), jobs, store_root, kind="merged_ablation")
    report.config = config
    count = sum(residual_param_count(config.width, config.band) for _ in config.class_layers)
    report.extra = {"residual_params": {"abra": count, "abra_merged": count}}
    return report


def run_fewshot_seed(config: ExperimentConfig, seed: int, shots, store_root: str | None = None) -> SeedResult:
    log = AccessLog()
    data = SeedData(config, seed, log)
    store = StageStore(Path(store_root), config, seed) if store_root else None
    arts = SeedArtifacts(config, seed, data, store)
    tol = config.hit_tolerance
    target_eval = data.dataset("target", "eval")
    metrics = {curve: {} for curve in FEWSHOT_CURVES}
    for c in config.split.target_unavailable:
        ev = class_subset(target_eval.read("evaluation", [c]), [c])
        pool = class_subset(data.dataset("target", "train").read(FEWSHOT, [c]), [c])
        inits = {"theta0_init": arts.theta0, "abra_init": _compose("abra", c, arts)}
        for curve, init in inits.items():
            metrics[curve][c] = {}
            for k in shots:
                tuned = finetune(init, pool.subset(np.arange(k)), config, "fewshot", seed, f"{curve}_{c}_{k}")
                metrics[curve][c][k] = evaluate(tuned, ev, c, tol)
    return SeedResult(seed, metrics, _access_records(log, 0), {})


def run_fewshot(
    config: ExperimentConfig, shots=None, jobs: int | None = None, store_root: str | None = None
) -> EvalReport:
    """Fine-tune from theta0 and from the ABRA composition on the first k target samples of each class."""
    shots = list(config.shots if shots is None else shots)
    if not shots:
        raise ConfigError("few-shot run needs at least one shot count")
    pool = config.split.samples_per_class
    for k in shots:
        if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or k < 1:
            raise ConfigError(f"shot counts must be integers >= 1, got {k!r}")
        if k > pool:
            raise ConfigError(f"{k} shots requested but only {pool} target samples per class exist")
    results = _map_seeds(run_fewshot_seed, config, jobs, shots, store_root)
    audit = _audit(results, config.split.target_unavailable, allowed=(UPPER, FEWSHOT))
    return EvalReport(
        kind="fewshot",
        config=config,
        methods=list(FEWSHOT_CURVES),
        classes=list(config.split.target_unavailable),
        per_seed={r.seed: r.metrics for r in results},
        shots=shots,
        audit=audit,
    )


def render_table(report: EvalReport, metric: str = "task_error") -> str:
    """Methods as rows, classes as columns, mean last."""
    head = ["method"] + [f"class {c}" for c in report.classes] + ["mean"]
    lines = []
    for k in report.shots or [None]:
        if k is not None:
            lines.append(f"shots = {k}")
        rows = []
        for m in report.methods:
            vals = [report.value(m, c, metric, k) for c in report.classes]
            rows.append([m] + [f"{v:.4f}" for v in vals] + [f"{report.mean(m, metric, k):.4f}"])
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        fmt = lambda r: "  ".join(x.ljust(w) if i == 0 else x.rjust(w) for i, (x, w) in enumerate(zip(r, widths)))
        lines.append(fmt(head))
        lines.append("  ".join("-" * w for w in widths))
        lines.extend(fmt(r) for r in rows)
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"
