"""Command-line front end.

Science parameters live in the JSON config; flags only pick stages and paths.
Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 numeric failure, 5 leakage-audit failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import ModelCheckpoint
from .errors import AbraError, ArtifactIOError, ConfigError
from .io import load_checkpoint, save_checkpoint, write_report
from .linalg import orthogonality_residual
from .spectral import AdapterModel
from .transport import TransportMap, build_transport_map, compose_abra, compose_param_delta, compose_task_analogy

EXIT_OK = 0


def _config(path):
    from .bench.config import load_config

    return load_config(path)


def _seed_dirs(config) -> list[tuple[int, Path]]:
    return [(s, config.output_dir / f"seed{s}") for s in config.seeds]


def _stage(config, build_key, build) -> None:
    from .bench.pipeline import SeedArtifacts, SeedData, StageStore

    for seed, _ in _seed_dirs(config):
        store = StageStore(config.output_dir, config, seed)
        arts = SeedArtifacts(config, seed, SeedData(config, seed), store)
        build(arts)
        print(store.path(build_key))


def cmd_pretrain(args) -> int:
    config = _config(args.config)
    _stage(config, "theta0", lambda a: a.theta0)
    return EXIT_OK


def cmd_domain(args) -> int:
    config = _config(args.config)
    _stage(config, f"domain_{args.domain}", lambda a: a.domain(args.domain))
    return EXIT_OK


def cmd_class(args) -> int:
    config = _config(args.config)
    c = args.class_id
    if c not in config.split.source_classes:
        raise ConfigError(f"--class-id {c} is not in split.source_classes {list(config.split.source_classes)}")
    from .bench.pipeline import SeedArtifacts, SeedData, StageStore

    for seed in config.seeds:
        store = StageStore(config.output_dir, config, seed)
        arts = SeedArtifacts(config, seed, SeedData(config, seed), store)
        for base in ("source", "theta0"):
            arts.class_expert([c], base=base)
            print(store.path(f"class_{c}_on_{base}"))
    return EXIT_OK


def _load_kind(path, kinds: tuple[str, ...], flag: str):
    art = load_checkpoint(path)
    kind = "adapter" if isinstance(art, AdapterModel) else "transport_map" if isinstance(art, TransportMap) else art.kind
    if kind not in kinds:
        raise ConfigError(f"{flag} '{path}' holds a {kind} artifact, expected {' or '.join(kinds)}")
    return art


def cmd_transport(args) -> int:
    source = _load_kind(args.source_domain, ("domain_expert", "backbone"), "--source-domain")
    target = _load_kind(args.target_domain, ("domain_expert", "backbone"), "--target-domain")
    adapter = _load_kind(args.adapter, ("adapter",), "--adapter")
    if args.method == "abra":
        tmap = build_transport_map(source, target, adapter.adapted_layers, source_factors=adapter.factors)
        try:
            out = compose_abra(target, adapter, tmap)
        except ConfigError as exc:
            raise ConfigError(f"--adapter '{args.adapter}': {exc}") from None
        if args.map_output:
            save_checkpoint(tmap, args.map_output)
    elif args.method == "param_delta":
        out = compose_param_delta(target, adapter)
    else:
        if not args.theta0:
            raise ConfigError("--method task_analogy requires --theta0")
        theta0 = _load_kind(args.theta0, ("backbone",), "--theta0")
        out = compose_task_analogy(theta0, source, target, adapter.to_checkpoint())
    out = out.copy(kind="domain_expert", source=str(args.source_domain), target=str(args.target_domain))
    save_checkpoint(out, args.output)
    print(args.output)
    return EXIT_OK


def _print_report(report, path, metric) -> None:
    from .bench.pipeline import render_table

    print(render_table(report, metric), end="")
    print(f"report: {path}")


def cmd_bench(args) -> int:
    from .bench.pipeline import run_pipeline

    config = _config(args.config)
    report = run_pipeline(config, jobs=args.jobs, store_root=str(config.output_dir))
    path = Path(args.report) if args.report else config.output_dir / "report.json"
    write_report(report.to_dict(), path)
    _print_report(report, path, args.metric)
    return EXIT_OK


def cmd_fewshot(args) -> int:
    from .bench.pipeline import run_fewshot

    config = _config(args.config)
    shots = None
    if args.shots:
        try:
            shots = [int(s) for s in args.shots.split(",")]
        except ValueError:
            raise ConfigError(f"--shots must be a comma-separated list of integers, got {args.shots!r}") from None
    report = run_fewshot(config, shots=shots, jobs=args.jobs, store_root=str(config.output_dir))
    path = Path(args.report) if args.report else config.output_dir / "fewshot_report.json"
    write_report(report.to_dict(), path)
    _print_report(report, path, args.metric)
    return EXIT_OK


def _as_checkpoint(art) -> ModelCheckpoint:
    if isinstance(art, AdapterModel):
        return art.to_checkpoint()
    if isinstance(art, TransportMap):
        return ModelCheckpoint(
            "transport_map", {f"{k}/{t}": m for k, (l, r) in art.entries.items() for t, m in (("l", l), ("r", r))}
        )
    return art


def describe(art, path) -> list[str]:
    if isinstance(art, AdapterModel):
        lines = [
            f"{path}: adapter '{art.name}'",
            f"  base: {art.base.name} ({art.base.kind}), {len(art.base.tensors)} tensors",
            f"  band half-width: {art.band.half_width if art.adapted_layers else '-'}",
            f"  trainable residual parameters: {art.param_count()}",
        ]
        for layer in art.adapted_layers:
            f, r = art.factors[layer], art.residuals[layer]
            lines.append(
                f"  {layer}: shape {f.shape[0]}x{f.shape[1]}, sigma[0]={f.sigma[0]:.6g}, "
                f"|residual|={np.linalg.norm(r.values):.6g}"
            )
        return lines
    if isinstance(art, TransportMap):
        lines = [f"{path}: transport_map ({len(art.layers)} layers)"]
        if art.degenerate:
            lines.append(f"  degenerate alignment in: {', '.join(art.degenerate)}")
        for layer, (l, r) in art.entries.items():
            lines.append(
                f"  {layer}: l {l.shape[0]}x{l.shape[1]} orth.res {orthogonality_residual(l):.3e}, "
                f"r {r.shape[0]}x{r.shape[1]} orth.res {orthogonality_residual(r):.3e}"
            )
        return lines
    lines = [f"{path}: {art.kind} '{art.name}'"]
    for key in ("stage", "seed", "config_hash"):
        if key in art.metadata:
            lines.append(f"  {key}: {art.metadata[key]}")
    for name, t in art.tensors.items():
        shape = "x".join(str(s) for s in t.shape)
        lines.append(f"  {name}: {shape} |.|={np.linalg.norm(t):.6g}")
    return lines


def cmd_inspect(args) -> int:
    art = load_checkpoint(args.path)
    if not args.diff:
        print("\n".join(describe(art, args.path)))
        return EXIT_OK
    a = _as_checkpoint(art)
    b = _as_checkpoint(load_checkpoint(args.diff))
    names = [n for n in a.tensors if n in b.tensors]
    only = sorted(set(a.tensors) ^ set(b.tensors))
    worst = 0.0
    print(f"diff {args.path} vs {args.diff}")
    for n in names:
        if a.tensors[n].shape != b.tensors[n].shape:
            print(f"  {n}: shape {a.tensors[n].shape} vs {b.tensors[n].shape}")
            worst = float("inf")
            continue
        d = float(np.linalg.norm(a.tensors[n] - b.tensors[n]))
        worst = max(worst, d)
        print(f"  {n}: frobenius {d:.3e}")
    for n in only:
        print(f"  {n}: only in one file")
    print(f"max frobenius distance: {worst:.3e}")
    if args.tol is not None and (worst > args.tol or only):
        print(f"files differ by more than {args.tol:g}")
        return 1
    return EXIT_OK


def cmd_default_config(args) -> int:
    from .bench.config import ExperimentConfig

    text = json.dumps(ExperimentConfig.default().to_dict(), indent=2, sort_keys=True) + "\n"
    if args.output:
        from .io import atomic_write

        atomic_write(args.output, text.encode("utf-8"))
    else:
        print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="abra", description="Spectral class-residual transport between domain experts.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def jobs(sp):
        sp.add_argument("--jobs", type=int, default=None, help="worker processes (default: $ABRA_JOBS or 1)")

    sp = sub.add_parser("pretrain", help="train theta0 for every seed")
    sp.add_argument("config")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("domain", help="train a domain expert for every seed")
    sp.add_argument("config")
    sp.add_argument("--domain", choices=("source", "target"), required=True)
    sp.set_defaults(func=cmd_domain)

    sp = sub.add_parser("class", help="train the class experts of one class for every seed")
    sp.add_argument("config")
    sp.add_argument("--class-id", type=int, required=True)
    sp.set_defaults(func=cmd_class)

    sp = sub.add_parser("transport", help="compose a target class expert from stage artifacts")
    sp.add_argument("--source-domain", required=True)
    sp.add_argument("--target-domain", required=True)
    sp.add_argument("--adapter", required=True)
    sp.add_argument("--method", choices=("abra", "param_delta", "task_analogy"), default="abra")
    sp.add_argument("--theta0")
    sp.add_argument("--output", required=True)
    sp.add_argument("--map-output", help="also save the transport map (abra only)")
    sp.set_defaults(func=cmd_transport)

    for name, func, help_ in (
        ("bench", cmd_bench, "run every configured method and write a report"),
        ("fewshot", cmd_fewshot, "few-shot fine-tuning from theta0 and from the ABRA composition"),
    ):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config")
        sp.add_argument("--report", help="report path (default: <output_dir>/...)")
        sp.add_argument("--metric", choices=("task_error", "accuracy"), default="task_error")
        jobs(sp)
        if name == "fewshot":
            sp.add_argument("--shots", help="comma-separated shot counts overriding the config")
        sp.set_defaults(func=func)

    sp = sub.add_parser("inspect", help="summarise an artifact file, or diff two")
    sp.add_argument("path")
    sp.add_argument("--diff", metavar="OTHER", help="per-tensor distance to another artifact (adapters are materialised)")
    sp.add_argument("--tol", type=float, help="with --diff: exit 1 if any distance exceeds this")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("default-config", help="print or write the default experiment config")
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_default_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AbraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {ArtifactIOError(str(exc))}", file=sys.stderr)
        return ArtifactIOError.exit_code


if __name__ == "__main__":
    sys.exit(main())
