"""Flat ``key = value`` run configuration.

Recognised keys (every key is optional; unknown keys are rejected)::

    output.dir = runs                  # results root (XDG_BENCH_OUT overrides the default)
    data.dir = runs/data               # where ``gen`` writes and ``train``/``bench`` read datasets

    benchmark.domains = S1,S2,S3
    benchmark.sizes = 325,320,108
    benchmark.dims.face = 512          # also dims.behavior, dims.audio
    benchmark.<field> = ...            # n_tokens, latent_dim, gap, class_margin, latent_sigma,
                                       # noise_sigma, noise_spread, shift_scale, rotation_scale,
                                       # label_flip_rate, test_fraction, seed

    trainer.<field> = ...              # lr, momentum, weight_decay, epochs, batch_size, alpha,
                                       # epsilon, lam, mm_idgm_modalities, adam_betas, ...

    protocol.<tag>.kind = multi        # single | multi | intra
    protocol.<tag>.train = S2,S3
    protocol.<tag>.test = S1
    protocol.<tag>.strategy = simultaneous
    protocol.<tag>.fusion = atten-mixer
    protocol.<tag>.trainer = mm-idgm
    protocol.<tag>.grl = none          # or a constant c >= 0
    protocol.<tag>.seeds = 0,1,2
    protocol.<tag>.modalities = face,behavior,audio

Lines starting with ``#`` are comments. Lists are comma separated.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional

from .harness import ProtocolError, ProtocolSpec
from .synthetic import MODALITIES, BenchmarkConfig, SpecError, parse_kv
from .trainers import TrainerConfig

DEFAULT_OUT = "runs"
OUT_ENV = "XDG_BENCH_OUT"

_PROTOCOL_FIELDS = ("kind", "train", "test", "strategy", "fusion", "trainer", "grl", "seeds", "modalities")


class ConfigFileError(ValueError):
    pass


def default_output_dir() -> Path:
    return Path(os.environ.get(OUT_ENV) or DEFAULT_OUT)


@dataclass
class RunConfig:
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    protocols: Dict[str, ProtocolSpec] = field(default_factory=dict)
    output_dir: Path = field(default_factory=default_output_dir)
    data_dir: Optional[Path] = None

    @property
    def dataset_dir(self) -> Path:
        return self.data_dir if self.data_dir is not None else self.output_dir / "data"


def _convert(key: str, raw: str, default):
    """Parse ``raw`` into the type of ``default``."""
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int) and not isinstance(default, bool):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], (int, float)) and not isinstance(default[0], bool):
                kind = type(default[0])
                return tuple(kind(s) for s in items)
            return tuple(items)
        if hasattr(default, "value"):  # enums are validated by the owning dataclass
            return raw
        return raw
    except ValueError:
        raise ConfigFileError(f"{key}: cannot parse {raw!r}") from None


def _dataclass_kwargs(prefix: str, pairs: Mapping[str, str], template, skip=()) -> dict:
    names = {f.name for f in fields(template)} - set(skip)
    out = {}
    for k, raw in pairs.items():
        name = k[len(prefix):]
        if name not in names:
            raise ConfigFileError(f"unknown key {k!r}")
        out[name] = _convert(k, raw, getattr(template, name))
    return out


def _protocol(tag: str, values: Mapping[str, str]) -> ProtocolSpec:
    for req in ("kind", "train", "test"):
        if req not in values:
            raise ConfigFileError(f"protocol.{tag}: missing {req!r}")
    kw = dict(
        kind=values["kind"],
        train_domains=tuple(s.strip() for s in values["train"].split(",") if s.strip()),
        test_domain=values["test"],
    )
    for name in ("strategy", "fusion", "trainer"):
        if name in values:
            kw[name] = values[name]
    if "grl" in values and values["grl"].lower() != "none":
        kw["grl"] = float(values["grl"])
    if "seeds" in values:
        kw["seeds"] = tuple(int(s) for s in values["seeds"].split(","))
    if "modalities" in values:
        kw["modalities"] = tuple(s.strip() for s in values["modalities"].split(","))
    try:
        spec = ProtocolSpec(**kw)
        spec.validate()
    except (ProtocolError, ValueError) as exc:
        raise ConfigFileError(f"protocol.{tag}: {exc}") from None
    return spec


def parse_run_config(text: str) -> RunConfig:
    try:
        pairs = parse_kv(text)
    except SpecError as exc:
        raise ConfigFileError(str(exc)) from None
    groups: Dict[str, Dict[str, str]] = {"benchmark.": {}, "trainer.": {}}
    protocols: Dict[str, Dict[str, str]] = {}
    dims: Dict[str, int] = {}
    cfg = RunConfig()
    for k, v in pairs.items():
        if k == "output.dir":
            cfg.output_dir = Path(v)
        elif k == "data.dir":
            cfg.data_dir = Path(v)
        elif k.startswith("benchmark.dims."):
            m = k[len("benchmark.dims."):]
            if m not in MODALITIES:
                raise ConfigFileError(f"unknown key {k!r}")
            dims[m] = _convert(k, v, 0)
        elif k == "benchmark.domains":
            groups["benchmark."]["benchmark.domain_ids"] = v
        elif k.startswith("protocol."):
            parts = k.split(".")
            if len(parts) != 3 or parts[2] not in _PROTOCOL_FIELDS:
                raise ConfigFileError(f"unknown key {k!r}")
            protocols.setdefault(parts[1], {})[parts[2]] = v
        elif k.startswith(("benchmark.", "trainer.")):
            groups[k[:k.index(".") + 1]][k] = v
        else:
            raise ConfigFileError(f"unknown key {k!r}")

    bkw = _dataclass_kwargs("benchmark.", groups["benchmark."], BenchmarkConfig(), skip=("dims",))
    if dims:
        bkw["dims"] = {**BenchmarkConfig().dims, **dims}
    tkw = _dataclass_kwargs("trainer.", groups["trainer."], TrainerConfig(), skip=("seed", "strategy", "split"))
    try:
        cfg.benchmark = BenchmarkConfig(**bkw)
        cfg.benchmark.validate()
        cfg.trainer = TrainerConfig(**tkw)
        cfg.trainer.validate()
    except ValueError as exc:
        raise ConfigFileError(str(exc)) from None
    cfg.protocols = {tag: _protocol(tag, vals) for tag, vals in protocols.items()}
    return cfg


def load_run_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_run_config(Path(path).read_text())
