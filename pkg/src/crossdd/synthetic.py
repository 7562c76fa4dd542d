"""Synthetic multi-domain, three-modality classification data.

Each sample carries a latent vector ``z`` whose first coordinate encodes the
class (``+margin`` for label 1, ``-margin`` for label 0) and whose remaining
coordinates hold within-class Gaussian variation. Every modality observes
``n_tokens`` frames of ``mix @ z + shift + noise``. Domains share the base
mixing matrices; the domain gap comes from a per-domain latent rotation, a
per-domain feature offset and a per-domain noise level.

All randomness comes from :mod:`crossdd.rng` so a :class:`DomainSpec` fully
determines its dataset.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import rng

MODALITIES = ("face", "behavior", "audio")
DEFAULT_DIMS = {"face": 512, "behavior": 50, "audio": 512}

MAGIC = b"XDG1"
VERSION = 1


class SpecError(ValueError):
    """Invalid domain or benchmark settings."""


@dataclass
class DomainSpec:
    domain_id: str
    n_samples: int
    latent_dim: int
    mix_matrices: Dict[str, np.ndarray]  # modality -> [D_m, latent_dim]
    shift_bias: Dict[str, np.ndarray]  # modality -> [D_m]
    noise_sigma: float
    label_flip_rate: float
    seed: int
    n_tokens: int = 64
    class_margin: float = 1.0
    latent_sigma: float = 1.0
    test_fraction: float = 0.2

    @property
    def dims(self) -> Dict[str, int]:
        return {m: int(self.mix_matrices[m].shape[0]) for m in MODALITIES}

    def validate(self) -> None:
        if not self.domain_id or any(c.isspace() for c in self.domain_id):
            raise SpecError(f"domain_id must be a non-empty token, got {self.domain_id!r}")
        for name in ("n_samples", "latent_dim", "n_tokens"):
            if int(getattr(self, name)) < 1:
                raise SpecError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("noise_sigma", "label_flip_rate", "class_margin",
                     "latent_sigma", "test_fraction"):
            if not math.isfinite(float(getattr(self, name))):
                raise SpecError(f"{name} must be finite, got {getattr(self, name)}")
        if self.noise_sigma < 0 or self.latent_sigma < 0:
            raise SpecError("noise_sigma and latent_sigma must be nonnegative")
        if not 0.0 <= self.label_flip_rate < 0.5:
            raise SpecError(f"label_flip_rate must lie in [0, 0.5), got {self.label_flip_rate}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise SpecError(f"test_fraction must lie in [0, 1), got {self.test_fraction}")
        for m in MODALITIES:
            if m not in self.mix_matrices or m not in self.shift_bias:
                raise SpecError(f"missing mix matrix or shift bias for modality {m!r}")
            A = np.asarray(self.mix_matrices[m])
            b = np.asarray(self.shift_bias[m])
            if A.ndim != 2 or A.shape[1] != self.latent_dim or A.shape[0] < 1:
                raise SpecError(f"mix matrix for {m} has shape {A.shape}, "
                                f"expected [D, {self.latent_dim}]")
            if b.shape != (A.shape[0],):
                raise SpecError(f"shift bias for {m} has shape {b.shape}, expected ({A.shape[0]},)")
            if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
                raise SpecError(f"non-finite mix/shift values for modality {m}")


@dataclass
class Sample:
    x_f: np.ndarray
    x_b: np.ndarray
    x_a: np.ndarray
    y: int
    domain_id: str


@dataclass
class DomainDataset:
    """Generated samples of one domain.

    ``features[m]`` has shape ``[n_samples, n_tokens, D_m]``.
    """

    spec: DomainSpec
    features: Dict[str, np.ndarray]
    labels: np.ndarray  # observed (possibly flipped) labels, uint8
    flipped: np.ndarray  # bool mask of flipped labels
    train_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def domain_id(self) -> str:
        return self.spec.domain_id

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def sample(self, i: int) -> Sample:
        return Sample(
            self.features["face"][i], self.features["behavior"][i],
            self.features["audio"][i], int(self.labels[i]), self.domain_id,
        )

    @property
    def samples(self) -> List[Sample]:
        return [self.sample(i) for i in range(len(self))]

    def indices(self, split: str = "all") -> np.ndarray:
        if split == "all":
            return np.arange(len(self))
        if split == "train":
            return self.train_idx
        if split == "test":
            return self.test_idx
        raise ValueError(f"unknown split {split!r}")

    def batch(self, idx: Sequence[int]) -> dict:
        idx = np.asarray(idx, dtype=np.int64)
        out = {m: self.features[m][idx] for m in MODALITIES}
        out["y"] = self.labels[idx].astype(np.int64)
        return out


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def generate_domain(spec: DomainSpec) -> DomainDataset:
    spec.validate()
    n, L, T = int(spec.n_samples), int(spec.latent_dim), int(spec.n_tokens)
    seed = int(spec.seed)

    y_true = np.zeros(n, dtype=np.uint8)
    y_true[rng.stream(seed, "labels").permutation(n)[: n // 2]] = 1

    z = np.zeros((n, L))
    z[:, 0] = spec.class_margin * (2.0 * y_true - 1.0)
    if L > 1:
        z[:, 1:] = spec.latent_sigma * rng.stream(seed, "latent").normal(n * (L - 1)).reshape(n, L - 1)

    features = {}
    for m in MODALITIES:
        A = np.asarray(spec.mix_matrices[m], dtype=np.float64)
        D = A.shape[0]
        clean = z @ A.T + np.asarray(spec.shift_bias[m], dtype=np.float64)
        x = np.repeat(clean[:, None, :], T, axis=1)
        if spec.noise_sigma > 0:
            x += spec.noise_sigma * rng.stream(seed, "noise", m).normal(n * T * D).reshape(n, T, D)
        features[m] = x

    # flip an exact per-class quota so label balance survives the noise
    flipped = np.zeros(n, dtype=bool)
    for c in (0, 1):
        members = np.flatnonzero(y_true == c)
        k = int(round(spec.label_flip_rate * members.size))
        if k:
            pick = rng.stream(seed, "flips", c).permutation(members.size)[:k]
            flipped[members[pick]] = True
    labels = np.where(flipped, 1 - y_true, y_true).astype(np.uint8)

    order = rng.stream(seed, "split").permutation(n)
    n_test = int(round(spec.test_fraction * n))
    test_idx = np.sort(order[:n_test])
    train_idx = np.sort(order[n_test:])
    return DomainDataset(spec, features, labels, flipped, train_idx, test_idx)


@dataclass
class BenchmarkConfig:
    domain_ids: tuple = ("S1", "S2", "S3")
    sizes: tuple = (325, 320, 108)
    dims: dict = field(default_factory=lambda: dict(DEFAULT_DIMS))
    n_tokens: int = 64
    latent_dim: int = 8
    gap: float = 1.0
    class_margin: float = 1.0
    latent_sigma: float = 1.0
    noise_sigma: float = 1.0
    noise_spread: float = 0.5
    shift_scale: float = 0.75
    rotation_scale: float = 0.6
    label_flip_rate: float = 0.02
    test_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if len(self.domain_ids) < 2:
            raise SpecError("a benchmark needs at least 2 domains")
        if len(set(self.domain_ids)) != len(self.domain_ids):
            dupes = sorted({d for d in self.domain_ids if list(self.domain_ids).count(d) > 1})
            raise SpecError(f"duplicate domain_id(s): {', '.join(dupes)}")
        if len(self.sizes) != len(self.domain_ids):
            raise SpecError(f"{len(self.sizes)} sizes given for {len(self.domain_ids)} domains")
        if set(self.dims) != set(MODALITIES):
            raise SpecError(f"dims must name exactly {MODALITIES}")
        if self.gap < 0 or not math.isfinite(self.gap):
            raise SpecError(f"gap must be finite and nonnegative, got {self.gap}")


def _rotation(L: int, angle: float, s: rng.Stream) -> np.ndarray:
    """Rotation by ``angle`` inside a random 2-plane of R^L."""
    if L < 2 or angle == 0.0:
        return np.eye(L)
    v = s.normal(2 * L).reshape(2, L)
    a = v[0] / np.linalg.norm(v[0])
    b = v[1] - (v[1] @ a) * a
    b /= np.linalg.norm(b)
    c, sn = math.cos(angle), math.sin(angle)
    return (np.eye(L) + (c - 1.0) * (np.outer(a, a) + np.outer(b, b))
            + sn * (np.outer(b, a) - np.outer(a, b)))


def benchmark_specs(config: BenchmarkConfig) -> List[DomainSpec]:
    config.validate()
    L, seed = int(config.latent_dim), int(config.seed)
    base_mix = {
        m: rng.stream(seed, "mix", m).normal(config.dims[m] * L).reshape(config.dims[m], L)
        / math.sqrt(L)
        for m in MODALITIES
    }
    specs = []
    for j, (did, n) in enumerate(zip(config.domain_ids, config.sizes)):
        R = _rotation(L, config.gap * config.rotation_scale, rng.stream(seed, "rotation", j))
        shift = {
            m: config.gap * config.shift_scale * rng.stream(seed, "shift", j, m).normal(config.dims[m])
            for m in MODALITIES
        }
        spread = float(rng.stream(seed, "noise-level", j).uniform(1)[0])
        dseed = int(rng.stream(seed, "domain-seed", j).words(1)[0])
        specs.append(DomainSpec(
            domain_id=str(did),
            n_samples=int(n),
            latent_dim=L,
            mix_matrices={m: base_mix[m] @ R for m in MODALITIES},
            shift_bias=shift,
            noise_sigma=config.noise_sigma * (1.0 + config.gap * config.noise_spread * spread),
            label_flip_rate=config.label_flip_rate,
            seed=dseed,
            n_tokens=config.n_tokens,
            class_margin=config.class_margin,
            latent_sigma=config.latent_sigma,
            test_fraction=config.test_fraction,
        ))
    return specs


def make_benchmark(config: Optional[BenchmarkConfig] = None) -> List[DomainDataset]:
    """Generate every domain of a benchmark (see :func:`benchmark_manifest`)."""
    config = config or BenchmarkConfig()
    return [generate_domain(s) for s in benchmark_specs(config)]


def domain_divergence(a: DomainDataset, b: DomainDataset, modality: str = "behavior") -> float:
    """Symmetric KL between diagonal Gaussians fit to token-averaged features."""
    xa = a.features[modality].mean(axis=1)
    xb = b.features[modality].mean(axis=1)
    ma, mb = xa.mean(axis=0), xb.mean(axis=0)
    va, vb = xa.var(axis=0) + 1e-12, xb.var(axis=0) + 1e-12
    d2 = (ma - mb) ** 2
    kl_ab = 0.5 * np.sum(va / vb + d2 / vb - 1.0 + np.log(vb / va))
    kl_ba = 0.5 * np.sum(vb / va + d2 / va - 1.0 + np.log(va / vb))
    return float(kl_ab + kl_ba)


# ---------------------------------------------------------------------------
# manifests and the XDG1 container
# ---------------------------------------------------------------------------


def _floats(values) -> str:
    return ",".join(repr(float(v)) for v in np.asarray(values).reshape(-1))


def _ints(values) -> str:
    return ",".join(str(int(v)) for v in np.asarray(values).reshape(-1))


def array_digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


def spec_manifest(spec: DomainSpec) -> Dict[str, str]:
    out = {
        "domain_id": spec.domain_id,
        "n_samples": str(spec.n_samples),
        "n_tokens": str(spec.n_tokens),
        "latent_dim": str(spec.latent_dim),
        "noise_sigma": repr(float(spec.noise_sigma)),
        "label_flip_rate": repr(float(spec.label_flip_rate)),
        "class_margin": repr(float(spec.class_margin)),
        "latent_sigma": repr(float(spec.latent_sigma)),
        "test_fraction": repr(float(spec.test_fraction)),
        "seed": str(int(spec.seed)),
    }
    for m in MODALITIES:
        out[f"dim.{m}"] = str(spec.mix_matrices[m].shape[0])
        out[f"mix_sha256.{m}"] = array_digest(spec.mix_matrices[m])
        out[f"shift_sha256.{m}"] = array_digest(spec.shift_bias[m])
    return out


def format_kv(pairs: Dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in pairs.items())


def parse_kv(text: str) -> Dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SpecError(f"line {lineno}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        k = k.strip()
        if k in out:
            raise SpecError(f"line {lineno}: duplicate key {k!r}")
        out[k] = v.strip()
    return out


def benchmark_manifest(config: BenchmarkConfig, datasets: Sequence[DomainDataset]) -> str:
    pairs = {
        "benchmark.seed": str(config.seed),
        "benchmark.gap": repr(float(config.gap)),
        "benchmark.domains": ",".join(d.domain_id for d in datasets),
        "benchmark.sizes": ",".join(str(len(d)) for d in datasets),
        "benchmark.n_tokens": str(config.n_tokens),
        "benchmark.latent_dim": str(config.latent_dim),
        "benchmark.dims": ",".join(str(config.dims[m]) for m in MODALITIES),
    }
    for d in datasets:
        for k, v in spec_manifest(d.spec).items():
            pairs[f"domain.{d.domain_id}.{k}"] = v
    return format_kv(pairs)


def manifest_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_dataset(ds: DomainDataset, path) -> Path:
    """Write ``ds`` as an XDG1 container plus a ``.manifest`` sidecar."""
    path = Path(path)
    spec = ds.spec
    dims = [spec.mix_matrices[m].shape[0] for m in MODALITIES]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIQI", VERSION, len(MODALITIES), len(ds), spec.n_tokens))
        fh.write(struct.pack("<" + "I" * len(dims), *dims))
        for m in MODALITIES:
            fh.write(np.ascontiguousarray(ds.features[m], dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype=np.uint8).tobytes())

    pairs = spec_manifest(spec)
    for m in MODALITIES:
        pairs[f"mix.{m}"] = _floats(spec.mix_matrices[m])
        pairs[f"shift.{m}"] = _floats(spec.shift_bias[m])
    pairs["train_idx"] = _ints(ds.train_idx)
    pairs["test_idx"] = _ints(ds.test_idx)
    pairs["flipped"] = _ints(np.flatnonzero(ds.flipped))
    path.with_name(path.name + ".manifest").write_text(format_kv(pairs))
    return path


def _parse_ints(s: str) -> np.ndarray:
    return np.array([int(v) for v in s.split(",") if v], dtype=np.int64)


def read_dataset(path) -> DomainDataset:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise SpecError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, n_mod, n, T = struct.unpack_from("<IIQI", raw, 4)
    if version != VERSION or n_mod != len(MODALITIES):
        raise SpecError(f"{path}: unsupported container version {version} / {n_mod} modalities")
    off = 4 + struct.calcsize("<IIQI")
    dims = struct.unpack_from("<" + "I" * n_mod, raw, off)
    off += 4 * n_mod
    features = {}
    for m, D in zip(MODALITIES, dims):
        count = n * T * D
        features[m] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(n, T, D)
        off += 8 * count
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off).copy()
    if off + n != len(raw):
        raise SpecError(f"{path}: {len(raw) - off - n} trailing bytes")

    kv = parse_kv(path.with_name(path.name + ".manifest").read_text())
    L = int(kv["latent_dim"])
    spec = DomainSpec(
        domain_id=kv["domain_id"],
        n_samples=int(kv["n_samples"]),
        latent_dim=L,
        mix_matrices={m: np.array([float(v) for v in kv[f"mix.{m}"].split(",")]).reshape(D, L)
                      for m, D in zip(MODALITIES, dims)},
        shift_bias={m: np.array([float(v) for v in kv[f"shift.{m}"].split(",")])
                    for m in MODALITIES},
        noise_sigma=float(kv["noise_sigma"]),
        label_flip_rate=float(kv["label_flip_rate"]),
        seed=int(kv["seed"]),
        n_tokens=int(kv["n_tokens"]),
        class_margin=float(kv["class_margin"]),
        latent_sigma=float(kv["latent_sigma"]),
        test_fraction=float(kv["test_fraction"]),
    )
    flipped = np.zeros(n, dtype=bool)
    flipped[_parse_ints(kv["flipped"])] = True
    return DomainDataset(spec, features, labels, flipped,
                         _parse_ints(kv["train_idx"]), _parse_ints(kv["test_idx"]))
