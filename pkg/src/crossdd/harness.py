"""Evaluation protocols, run persistence and table reports.

A protocol trains on one or more source domains and measures accuracy on a
held-out domain. Each (protocol, seed) run can persist a directory with:

``manifest.txt``     written before training starts
``loss.log``         one line per optimisation batch
``predictions.csv``  per-sample prediction and label on the test domain
``model.xdgw``       final parameters (plus ``model.xdgw.index``)
``result.txt``       accuracy and timing once the run completes
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from . import __version__
from .models import Fusion, ModelBundle, ModelConfig, save_checkpoint
from .schedulers import Strategy
from .synthetic import MODALITIES, DomainDataset, format_kv, parse_kv, spec_manifest
from .trainers import (
    Optimizer,
    TrainerConfig,
    train_erm,
    train_idgm,
    train_mm_idgm,
)

logger = logging.getLogger(__name__)

CODE_VERSION = f"crossdd-{__version__}"


class ProtocolError(ValueError):
    pass


class EvaluationError(ValueError):
    pass


class ProtocolKind(str, enum.Enum):
    SINGLE_TO_SINGLE = "single"
    MULTI_TO_SINGLE = "multi"
    INTRA_DOMAIN = "intra"


class TrainerKind(str, enum.Enum):
    ERM_SGD = "sgd"
    ERM_ADAM = "adam"
    IDGM = "idgm"
    MM_IDGM = "mm-idgm"

    @classmethod
    def parse(cls, value) -> "TrainerKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            valid = ", ".join(t.value for t in cls)
            raise ProtocolError(f"unknown trainer {value!r}; valid: {valid}") from None


@dataclass
class ProtocolSpec:
    kind: ProtocolKind
    train_domains: tuple
    test_domain: str
    strategy: Strategy = Strategy.SIMULTANEOUS
    fusion: Fusion = Fusion.ATTEN_MIXER
    trainer: TrainerKind = TrainerKind.ERM_ADAM
    grl: Optional[float] = None
    seeds: tuple = (0,)
    modalities: tuple = MODALITIES

    def __post_init__(self):
        self.kind = ProtocolKind(getattr(self.kind, "value", self.kind))
        self.train_domains = tuple(str(d) for d in self.train_domains)
        self.strategy = Strategy.parse(self.strategy)
        self.fusion = Fusion.parse(self.fusion)
        self.trainer = TrainerKind.parse(self.trainer)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.modalities = tuple(self.modalities)

    def validate(self) -> None:
        if not self.train_domains:
            raise ProtocolError("no training domains")
        if len(set(self.train_domains)) != len(self.train_domains):
            raise ProtocolError("duplicate training domains")
        if self.kind is ProtocolKind.INTRA_DOMAIN:
            if self.train_domains != (self.test_domain,):
                raise ProtocolError("an intra-domain protocol trains and tests on one domain")
        elif self.test_domain in self.train_domains:
            raise ProtocolError(
                f"test domain {self.test_domain!r} is also a training domain; "
                "the test domain must be unseen"
            )
        if self.kind is ProtocolKind.SINGLE_TO_SINGLE and len(self.train_domains) != 1:
            raise ProtocolError("single-to-single protocols take exactly one training domain")
        if self.kind is ProtocolKind.MULTI_TO_SINGLE and len(self.train_domains) < 2:
            raise ProtocolError("multi-to-single protocols take at least two training domains")
        if self.trainer in (TrainerKind.IDGM, TrainerKind.MM_IDGM) and len(self.train_domains) < 2:
            raise ProtocolError(f"{self.trainer.value} needs at least two source domains")
        if self.grl is not None and (self.grl < 0 or len(self.train_domains) < 2):
            raise ProtocolError("GRL needs a nonnegative constant and at least two source domains")
        if not self.seeds:
            raise ProtocolError("at least one seed is required")

    @property
    def task(self) -> str:
        if self.kind is ProtocolKind.INTRA_DOMAIN:
            return f"{self.test_domain} to {self.test_domain}"
        return f"{'&'.join(self.train_domains)} to {self.test_domain}"

    @property
    def modality_label(self) -> str:
        return "+".join(self.modalities)

    def canonical(self) -> Dict[str, str]:
        """Every field except seeds, as ordered key/value text."""
        return {
            "protocol.kind": self.kind.value,
            "protocol.train": ",".join(self.train_domains),
            "protocol.test": self.test_domain,
            "protocol.strategy": self.strategy.value,
            "protocol.fusion": self.fusion.value,
            "protocol.trainer": self.trainer.value,
            "protocol.grl": "none" if self.grl is None else repr(float(self.grl)),
            "protocol.modalities": ",".join(self.modalities),
        }


def trainer_manifest(cfg: TrainerConfig) -> Dict[str, str]:
    out = {}
    for k, v in asdict(cfg).items():
        if k == "seed":
            continue
        v = getattr(v, "value", v)
        if isinstance(v, (tuple, list)):
            v = ",".join(str(getattr(x, "value", x)) for x in v)
        out[f"trainer.{k}"] = repr(v) if isinstance(v, float) else str(v)
    return out


def spec_hash(spec: ProtocolSpec, bench_manifest: str, cfg: TrainerConfig,
              model_overrides: Optional[Mapping] = None) -> str:
    text = format_kv(spec.canonical()) + format_kv(trainer_manifest(cfg))
    if model_overrides:
        text += format_kv({f"model.{k}": repr(v) for k, v in sorted(model_overrides.items())})
    text += bench_manifest + CODE_VERSION
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class RunResult:
    spec_hash: str
    seed: int
    accuracy: float
    loss_trace: list
    wall_time: float
    checkpoint: Optional[str]
    spec: ProtocolSpec
    predictions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    run_dir: Optional[str] = None


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def predict(model: ModelBundle, dataset: DomainDataset, indices=None, batch_size: int = 64) -> np.ndarray:
    """Argmax class per sample from the fused scores."""
    idx = dataset.indices("all") if indices is None else np.asarray(indices, dtype=np.int64)
    preds = []
    for start in range(0, len(idx), batch_size):
        batch = dataset.batch(idx[start:start + batch_size])
        preds.append(np.argmax(model.predict_scores(batch), axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy_from_predictions(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if labels.size == 0:
        raise EvaluationError("cannot compute accuracy on an empty dataset")
    if predictions.shape != labels.shape:
        raise EvaluationError(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")
    return 100.0 * float(np.count_nonzero(predictions == labels)) / labels.size


def evaluate_accuracy(model: ModelBundle, dataset: DomainDataset, indices=None) -> float:
    """Percentage of samples whose argmax prediction matches the label."""
    idx = dataset.indices("all") if indices is None else np.asarray(indices, dtype=np.int64)
    if len(idx) == 0:
        raise EvaluationError(f"domain {dataset.domain_id!r} has no samples to evaluate")
    return accuracy_from_predictions(predict(model, dataset, idx), dataset.labels[idx])


# ---------------------------------------------------------------------------
# running protocols
# ---------------------------------------------------------------------------


def _trainer_config(spec: ProtocolSpec, base: TrainerConfig, seed: int) -> TrainerConfig:
    kw = dict(seed=seed)
    if spec.kind is ProtocolKind.MULTI_TO_SINGLE:
        kw["strategy"] = spec.strategy
    else:
        kw["strategy"] = Strategy.SIMULTANEOUS  # one domain: plain shuffled batching
    kw["split"] = "train" if spec.kind is ProtocolKind.INTRA_DOMAIN else "all"
    if spec.trainer is TrainerKind.ERM_SGD:
        kw["optimizer"] = Optimizer.SGD
    elif spec.trainer is TrainerKind.ERM_ADAM:
        kw["optimizer"] = Optimizer.ADAM
    return replace(base, **kw)


def _write_loss_log(path: Path, trace) -> None:
    lines = ["step\tL_f\tL_b\tL_a\tL_g\ttotal"]
    lines += [f"{i}\t{b.as_row()}" for i, b in enumerate(trace, 1)]
    path.write_text("\n".join(lines) + "\n")


def read_loss_log(path) -> List[List[float]]:
    rows = Path(path).read_text().splitlines()[1:]
    return [[float(c) for c in r.split("\t")[1:]] for r in rows if r]


def run_protocol(spec: ProtocolSpec, benchmark: Sequence[DomainDataset],
                 trainer_cfg: Optional[TrainerConfig] = None,
                 model_overrides: Optional[Mapping] = None,
                 out_dir=None, bench_manifest: Optional[str] = None) -> List[RunResult]:
    """Train and evaluate ``spec`` once per seed."""
    spec.validate()
    by_id = {d.domain_id: d for d in benchmark}
    missing = [d for d in spec.train_domains + (spec.test_domain,) if d not in by_id]
    if missing:
        raise ProtocolError(f"unknown domain(s): {', '.join(sorted(set(missing)))}")
    base = trainer_cfg or TrainerConfig()
    if spec.trainer is TrainerKind.MM_IDGM:
        bad = [m for m in base.mm_idgm_modalities if m not in spec.modalities]
        if bad:
            raise ProtocolError(f"MM-IDGM modalities {bad} are not part of the model")
    sources = [by_id[d] for d in spec.train_domains]
    target = by_id[spec.test_domain]
    test_idx = target.indices("test" if spec.kind is ProtocolKind.INTRA_DOMAIN else "all")
    if len(test_idx) == 0:
        raise EvaluationError(f"domain {target.domain_id!r} has no test samples")
    if bench_manifest is None:
        bench_manifest = "".join(
            format_kv({f"domain.{d.domain_id}.{k}": v for k, v in spec_manifest(d.spec).items()})
            for d in benchmark)
    overrides = dict(model_overrides or {})
    h = spec_hash(spec, bench_manifest, base, overrides)

    results = []
    for seed in spec.seeds:
        cfg = _trainer_config(spec, base, seed)
        dims = {m: sources[0].spec.mix_matrices[m].shape[0] for m in spec.modalities}
        mcfg = ModelConfig(modalities=spec.modalities, input_dims=dims,
                           n_tokens=sources[0].spec.n_tokens, fusion=spec.fusion,
                           grl=spec.grl, n_domains=len(sources) if spec.grl is not None else 0,
                           seed=seed, **overrides)
        model = ModelBundle(mcfg)

        run_dir = None
        if out_dir is not None:
            run_dir = Path(out_dir) / h[:16] / f"seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            manifest = {"spec_hash": h, "seed": str(seed), "code_version": CODE_VERSION,
                        "benchmark_sha256": hashlib.sha256(bench_manifest.encode()).hexdigest(),
                        "status": "started"}
            manifest.update(spec.canonical())
            manifest.update(trainer_manifest(cfg))
            manifest.update({f"model.{k}": repr(v) for k, v in sorted(overrides.items())})
            (run_dir / "manifest.txt").write_text(format_kv(manifest))

        t0 = time.perf_counter()
        if spec.trainer is TrainerKind.IDGM:
            state = train_idgm(model, sources, cfg)
        elif spec.trainer is TrainerKind.MM_IDGM:
            state = train_mm_idgm(model, sources, cfg)
        else:
            state = train_erm(model, sources, cfg)
        preds = predict(model, target, test_idx)
        labels = target.labels[test_idx].astype(np.int64)
        acc = accuracy_from_predictions(preds, labels)
        wall = time.perf_counter() - t0
        logger.info("%s seed=%d %s: %.2f%% (%.1fs)", spec.task, seed, spec.trainer.value, acc, wall)

        ckpt = None
        if run_dir is not None:
            ckpt = str(save_checkpoint(model.params, run_dir / "model.xdgw"))
            _write_loss_log(run_dir / "loss.log", state.trace)
            with open(run_dir / "predictions.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["index", "prediction", "label"])
                w.writerows(zip(test_idx.tolist(), preds.tolist(), labels.tolist()))
            result = {"spec_hash": h, "seed": str(seed), "accuracy": repr(acc),
                      "wall_time": f"{wall:.3f}", "task": spec.task,
                      "n_test": str(len(test_idx))}
            result.update(spec.canonical())
            (run_dir / "result.txt").write_text(format_kv(result))
            manifest["status"] = "completed"
            (run_dir / "manifest.txt").write_text(format_kv(manifest))
        results.append(RunResult(h, seed, acc, state.trace, wall, ckpt, spec, preds, labels,
                                 None if run_dir is None else str(run_dir)))
    return results


def spec_from_canonical(kv: Mapping[str, str], seeds=(0,)) -> ProtocolSpec:
    grl = kv["protocol.grl"]
    return ProtocolSpec(
        kind=kv["protocol.kind"],
        train_domains=tuple(kv["protocol.train"].split(",")),
        test_domain=kv["protocol.test"],
        strategy=kv["protocol.strategy"],
        fusion=kv["protocol.fusion"],
        trainer=kv["protocol.trainer"],
        grl=None if grl == "none" else float(grl),
        seeds=tuple(seeds),
        modalities=tuple(kv["protocol.modalities"].split(",")),
    )


def load_results(out_dir) -> List[RunResult]:
    """Read every completed run below ``out_dir``."""
    results = []
    for path in sorted(Path(out_dir).rglob("result.txt")):
        kv = parse_kv(path.read_text())
        seed = int(kv["seed"])
        pred_path = path.with_name("predictions.csv")
        preds, labels = [], []
        if pred_path.exists():
            with open(pred_path, newline="") as fh:
                for row in list(csv.reader(fh))[1:]:
                    preds.append(int(row[1]))
                    labels.append(int(row[2]))
        ckpt = path.with_name("model.xdgw")
        results.append(RunResult(
            kv["spec_hash"], seed, float(kv["accuracy"]), [], float(kv["wall_time"]),
            str(ckpt) if ckpt.exists() else None, spec_from_canonical(kv, (seed,)),
            np.array(preds, dtype=np.int64), np.array(labels, dtype=np.int64), str(path.parent),
        ))
    return results


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


class Layout(str, enum.Enum):
    CSV = "csv"
    MARKDOWN = "md"


def report_table(results: Iterable[RunResult]) -> List[List[str]]:
    """Rows of the report grid, header first.

    One row per (strategy, trainer, modalities, fusion); one column per
    transfer task, then ``Average`` (row mean of the task cells) and
    ``Seeds``. Each strategy closes with an ``Average`` row of column means.
    """
    results = list(results)
    tasks: List[str] = []
    cells: Dict[tuple, Dict[str, List[float]]] = {}
    seeds: Dict[tuple, set] = {}
    for r in results:
        s = r.spec
        if s.task not in tasks:
            tasks.append(s.task)
        strategy = s.strategy.value if s.kind is ProtocolKind.MULTI_TO_SINGLE else s.kind.value
        key = (strategy, s.trainer.value + ("+grl" if s.grl is not None else ""),
               s.modality_label, s.fusion.value)
        cells.setdefault(key, {}).setdefault(s.task, []).append(r.accuracy)
        seeds.setdefault(key, set()).add(r.seed)
    header = ["Strategy", "Trainer", "Modalities", "Fusion"] + tasks + ["Average", "Seeds"]
    rows = [header]

    def fmt(v):
        return "" if v is None else f"{v:.2f}"

    by_strategy: Dict[str, List[tuple]] = {}
    for key in cells:
        by_strategy.setdefault(key[0], []).append(key)
    for strategy, keys in by_strategy.items():
        col_values: Dict[str, List[float]] = {t: [] for t in tasks + ["Average"]}
        for key in keys:
            means = {t: float(np.mean(v)) for t, v in cells[key].items()}
            avg = float(np.mean(list(means.values())))
            for t, v in means.items():
                col_values[t].append(v)
            col_values["Average"].append(avg)
            rows.append(list(key) + [fmt(means.get(t)) for t in tasks]
                        + [fmt(avg), str(len(seeds[key]))])
        if len(keys) > 1:
            rows.append([strategy, "Average", "", ""]
                        + [fmt(float(np.mean(col_values[t])) if col_values[t] else None)
                           for t in tasks + ["Average"]] + [""])
    return rows


def emit_report(results: Iterable[RunResult], layout="csv", path=None) -> str:
    layout = Layout(getattr(layout, "value", layout))
    rows = report_table(results)
    if layout is Layout.CSV:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        text = buf.getvalue()
    else:
        def line(cells):
            return "| " + " | ".join(c.replace("|", "\\|") for c in cells) + " |"
        out = [line(rows[0]), "|" + "|".join(" --- " for _ in rows[0]) + "|"]
        out += [line(r) for r in rows[1:]]
        text = "\n".join(out) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
