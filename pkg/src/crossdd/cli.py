"""``crossdd`` command line: gen, train, bench, report."""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .config import OUT_ENV, ConfigFileError, RunConfig, load_run_config
from .harness import (
    Layout,
    ProtocolError,
    ProtocolKind,
    ProtocolSpec,
    TrainerKind,
    emit_report,
    load_results,
    run_protocol,
)
from .models import Fusion
from .schedulers import Strategy
from .synthetic import (
    benchmark_manifest,
    make_benchmark,
    parse_kv,
    read_dataset,
    write_dataset,
)

log = logging.getLogger("crossdd")

MANIFEST_NAME = "benchmark.manifest"
STRATEGIES = [s.value for s in Strategy]
FUSIONS = [f.value for f in Fusion]
TRAINERS = [t.value for t in TrainerKind]


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# dataset directory helpers
# ---------------------------------------------------------------------------


def dataset_path(data_dir: Path, domain_id: str) -> Path:
    return data_dir / f"{domain_id}.xdg"


def load_benchmark(data_dir) -> Tuple[list, str]:
    """Datasets plus manifest text from a directory written by ``gen``."""
    data_dir = Path(data_dir)
    manifest_path = data_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise CommandError(f"{manifest_path}: no benchmark found; run 'crossdd gen' first")
    text = manifest_path.read_text()
    ids = parse_kv(text)["benchmark.domains"].split(",")
    return [read_dataset(dataset_path(data_dir, d)) for d in ids], text


_WORKER_CACHE: Dict[str, tuple] = {}


def _cached_benchmark(data_dir: str):
    if data_dir not in _WORKER_CACHE:
        _WORKER_CACHE.clear()
        _WORKER_CACHE[data_dir] = load_benchmark(data_dir)
    return _WORKER_CACHE[data_dir]


def _run_one(job) -> Tuple[str, Optional[str], List[Tuple[int, float]]]:
    """Worker entry point; returns (label, error or None, [(seed, accuracy)])."""
    label, spec, trainer_cfg, data_dir, out_dir = job
    try:
        datasets, manifest = _cached_benchmark(str(data_dir))
        results = run_protocol(spec, datasets, trainer_cfg, out_dir=out_dir, bench_manifest=manifest)
        return label, None, [(r.seed, r.accuracy) for r in results]
    except Exception as exc:  # reported per run, never fatal for the batch
        return label, f"{type(exc).__name__}: {exc}", []


def run_jobs(jobs: Sequence[tuple], n_workers: int) -> int:
    failures = []
    if n_workers <= 1:
        outcomes = map(_run_one, jobs)
    else:
        pool = ProcessPoolExecutor(max_workers=n_workers)
        outcomes = pool.map(_run_one, jobs)
    for label, err, accs in outcomes:
        if err:
            failures.append((label, err))
            log.error("FAILED %s: %s", label, err)
        else:
            for seed, acc in accs:
                print(f"{label} seed={seed} accuracy={acc:.2f}")
    if n_workers > 1:
        pool.shutdown()
    if failures:
        print(f"{len(failures)} of {len(jobs)} run(s) failed:", file=sys.stderr)
        for label, err in failures:
            print(f"  {label}: {err}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if getattr(args, "out", None):
        cfg.output_dir = Path(args.out)
    if getattr(args, "data", None):
        cfg.data_dir = Path(args.data)
    if getattr(args, "epochs", None) is not None:
        cfg.trainer = replace(cfg.trainer, epochs=args.epochs)
    if getattr(args, "alpha", None) is not None:
        cfg.trainer = replace(cfg.trainer, alpha=args.alpha)
    cfg.trainer.validate()
    return cfg


def cmd_gen(args) -> int:
    cfg = load_run_config(args.config)
    bench = cfg.benchmark if args.seed is None else replace(cfg.benchmark, seed=args.seed)
    out = Path(args.out) if args.out else cfg.dataset_dir
    targets = [out / MANIFEST_NAME] + [dataset_path(out, d) for d in bench.domain_ids]
    existing = [p for p in targets if p.exists()]
    if existing and not args.force:
        raise CommandError(f"{existing[0]} already exists; pass --force to overwrite")
    try:
        out.mkdir(parents=True, exist_ok=True)
        datasets = make_benchmark(bench)
        for ds in datasets:
            write_dataset(ds, dataset_path(out, ds.domain_id))
            print(dataset_path(out, ds.domain_id))
        (out / MANIFEST_NAME).write_text(benchmark_manifest(bench, datasets))
    except OSError as exc:
        raise CommandError(f"cannot write to {exc.filename or out}: {exc.strerror}") from None
    print(out / MANIFEST_NAME)
    return 0


def _kind_for(train: Sequence[str], test: str) -> ProtocolKind:
    if tuple(train) == (test,):
        return ProtocolKind.INTRA_DOMAIN
    return ProtocolKind.SINGLE_TO_SINGLE if len(train) == 1 else ProtocolKind.MULTI_TO_SINGLE


def _seeds(args, fallback=(0,)) -> tuple:
    return tuple(args.seed) if args.seed else tuple(fallback)


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.train and args.test:
        train = tuple(s.strip() for s in args.train.split(",") if s.strip())
        spec = ProtocolSpec(
            kind=_kind_for(train, args.test), train_domains=train, test_domain=args.test,
            strategy=args.strategy or Strategy.SIMULTANEOUS, fusion=args.fusion or Fusion.ATTEN_MIXER,
            trainer=args.trainer or TrainerKind.ERM_ADAM, grl=args.grl, seeds=_seeds(args),
        )
        specs = {"cli": spec}
    elif cfg.protocols:
        specs = {tag: replace(s, seeds=_seeds(args, s.seeds)) for tag, s in cfg.protocols.items()}
    else:
        raise CommandError("give --train and --test, or protocol.* entries in --config")
    for spec in specs.values():
        spec.validate()
    jobs = [(f"{tag}[{s.task}, {s.strategy.value}, {s.trainer.value}, {s.fusion.value}]",
             s, cfg.trainer, cfg.dataset_dir, cfg.output_dir) for tag, s in specs.items()]
    _cached_benchmark(str(cfg.dataset_dir))  # fail fast on a missing benchmark
    return run_jobs(jobs, args.jobs)


def bench_grid(domain_ids: Sequence[str], strategies, fusions, trainers, seeds,
               grl: Optional[float] = None) -> List[ProtocolSpec]:
    """Leave-one-domain-out multi-to-single tasks crossed with the method grid."""
    specs = []
    for strategy in strategies:
        for trainer in trainers:
            for fusion in fusions:
                for test in domain_ids:
                    train = tuple(d for d in domain_ids if d != test)
                    specs.append(ProtocolSpec(ProtocolKind.MULTI_TO_SINGLE, train, test,
                                              strategy=strategy, fusion=fusion, trainer=trainer,
                                              grl=grl, seeds=tuple(seeds)))
    return specs


def cmd_bench(args) -> int:
    cfg = _config(args)
    datasets, _ = _cached_benchmark(str(cfg.dataset_dir))
    if cfg.protocols and not (args.strategy or args.fusion or args.trainer):
        specs = [replace(s, seeds=_seeds(args, s.seeds)) for s in cfg.protocols.values()]
    else:
        specs = bench_grid(
            [d.domain_id for d in datasets],
            args.strategy or STRATEGIES, args.fusion or FUSIONS,
            args.trainer or TRAINERS, _seeds(args), args.grl,
        )
    jobs = [(f"[{s.task}, {s.strategy.value}, {s.trainer.value}, {s.fusion.value}]",
             s, cfg.trainer, cfg.dataset_dir, cfg.output_dir) for s in specs]
    code = run_jobs(jobs, args.jobs)
    report = cfg.output_dir / f"report.{args.format}"
    emit_report(load_results(cfg.output_dir), args.format, report)
    print(report)
    return code


def cmd_report(args) -> int:
    out = Path(args.out) if args.out else load_run_config(args.config).output_dir
    if not out.exists():
        raise CommandError(f"{out}: no such results directory")
    text = emit_report(load_results(out), args.format, args.output)
    if args.output is None:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="crossdd",
        description="Synthetic multimodal domain-generalization benchmark.",
        epilog=f"The default results directory is ./runs, or ${OUT_ENV} when set.",
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="results directory"):
        sp.add_argument("--config", help="key = value run configuration file")
        sp.add_argument("--out", help=out_help)

    g = sub.add_parser("gen", help="generate the synthetic benchmark")
    common(g, "dataset directory (default: <results>/data)")
    g.add_argument("--seed", type=int, help="benchmark seed override")
    g.add_argument("--force", action="store_true", help="overwrite existing files")
    g.set_defaults(func=cmd_gen)

    def run_flags(sp, multi: bool):
        action = "append" if multi else "store"
        suffix = " (repeatable)" if multi else ""
        sp.add_argument("--data", help="dataset directory written by 'gen'")
        sp.add_argument("--strategy", choices=STRATEGIES, action=action, help="batch scheduler" + suffix)
        sp.add_argument("--fusion", choices=FUSIONS, action=action, help="fusion method" + suffix)
        sp.add_argument("--trainer", choices=TRAINERS, action=action, help="training algorithm" + suffix)
        sp.add_argument("--grl", type=float, help="attach domain heads behind a gradient reversal of strength c")
        sp.add_argument("--seed", type=int, action="append", help="run seed (repeatable)")
        sp.add_argument("--epochs", type=int, help="training epochs")
        sp.add_argument("--alpha", type=float, help="inner step size for idgm / mm-idgm")
        sp.add_argument("--jobs", type=int, default=1, help="parallel runs (default 1)")

    t = sub.add_parser("train", help="run one protocol")
    common(t)
    run_flags(t, multi=False)
    t.add_argument("--train", help="comma-separated training domains, e.g. S2,S3")
    t.add_argument("--test", help="held-out test domain, e.g. S1")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("bench", help="run the strategy x fusion x trainer grid")
    common(b)
    run_flags(b, multi=True)
    b.add_argument("--format", choices=[l.value for l in Layout], default="csv")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="tabulate persisted results")
    common(r)
    r.add_argument("--format", choices=[l.value for l in Layout], default="csv")
    r.add_argument("--output", help="write the table here instead of stdout")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigFileError, ProtocolError) as exc:
        print(f"crossdd: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
