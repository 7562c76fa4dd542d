"""Batch plans for multi-source training.

Three strategies decide which domain(s) feed batch ``k`` (1-based):

* simultaneous -- every batch holds a slice of every domain; per-domain
  quotas differ by at most one, the extra slots rotating with ``k``.
* alternating  -- batch ``k`` comes entirely from domain ``k - floor((k-1)/M)*M``.
* bydomain     -- domains are consumed one after another in a given order.

Indices in a plan are positions ``0..N_j-1`` inside each domain's training
pool. Each domain's samples are drawn from seeded permutations ("cycles");
under simultaneous/alternating a domain that runs out before the epoch ends
starts a new cycle. An epoch ends once every domain has completed its first
cycle.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import rng


class ScheduleError(ValueError):
    """Invalid scheduler configuration."""


class Strategy(str, enum.Enum):
    SIMULTANEOUS = "simultaneous"
    ALTERNATING = "alternating"
    BYDOMAIN = "bydomain"

    @classmethod
    def parse(cls, value) -> "Strategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            valid = ", ".join(s.value for s in cls)
            raise ScheduleError(f"unknown strategy {value!r}; valid: {valid}") from None


@dataclass(frozen=True)
class Part:
    domain_id: str
    indices: Tuple[int, ...]
    cycle: int = 0


@dataclass(frozen=True)
class BatchAssignment:
    k: int
    parts: Tuple[Part, ...]

    @property
    def size(self) -> int:
        return sum(len(p.indices) for p in self.parts)

    def domains(self) -> List[str]:
        seen = []
        for p in self.parts:
            if p.domain_id not in seen:
                seen.append(p.domain_id)
        return seen


@dataclass(frozen=True)
class SchedulePlan:
    strategy: Strategy
    batch_size: int
    domain_sizes: Tuple[Tuple[str, int], ...]  # ordered (domain_id, N_j)
    batches: Tuple[BatchAssignment, ...]
    seed: int = 0

    @property
    def domain_ids(self) -> List[str]:
        return [d for d, _ in self.domain_sizes]

    def __len__(self) -> int:
        return len(self.batches)

    def to_text(self) -> str:
        lines = [f"# strategy={self.strategy.value} batch_size={self.batch_size} seed={self.seed}",
                 "# domains=" + ",".join(f"{d}:{n}" for d, n in self.domain_sizes)]
        for b in self.batches:
            counts = {}
            for p in b.parts:
                counts[p.domain_id] = counts.get(p.domain_id, 0) + len(p.indices)
            lines.append(f"{b.k}, {'+'.join(counts)}, {'+'.join(str(c) for c in counts.values())}")
        return "\n".join(lines) + "\n"


def _ordered_sizes(domain_sizes) -> List[Tuple[str, int]]:
    items = list(domain_sizes.items()) if isinstance(domain_sizes, Mapping) else list(domain_sizes)
    if not items:
        raise ScheduleError("at least one domain is required")
    out = []
    for d, n in items:
        if int(n) < 1:
            raise ScheduleError(f"domain {d!r} has no training samples")
        out.append((str(d), int(n)))
    if len({d for d, _ in out}) != len(out):
        raise ScheduleError("duplicate domain ids")
    return out


def _check_batch_size(batch_size: int) -> int:
    if int(batch_size) < 1:
        raise ScheduleError(f"batch size must be positive, got {batch_size}")
    return int(batch_size)


class _CycleStream:
    """Sequential reader over seeded permutations of one domain's indices."""

    def __init__(self, n: int, seed: int, j: int):
        self.n, self.seed, self.j = n, seed, j
        self.cycle = 0
        self.pos = 0
        self.perm = rng.stream(seed, "schedule", j, 0).permutation(n).tolist()
        self.consumed = 0  # total drawn across cycles

    @property
    def first_done(self) -> bool:
        return self.consumed >= self.n

    def remaining(self) -> int:
        return self.n - self.pos

    def restart(self) -> None:
        self.cycle += 1
        self.pos = 0
        self.perm = rng.stream(self.seed, "schedule", self.j, self.cycle).permutation(self.n).tolist()

    def take(self, count: int, domain_id: str, wrap: bool) -> List[Part]:
        parts = []
        while count > 0:
            if self.pos == self.n:
                if not wrap:
                    break
                self.restart()
            got = min(count, self.n - self.pos)
            chunk = self.perm[self.pos:self.pos + got]
            parts.append(Part(domain_id, tuple(chunk), self.cycle))
            self.pos += got
            self.consumed += got
            count -= got
        return parts


def simultaneous_quotas(M: int, batch_size: int, k: int) -> List[int]:
    base, rem = divmod(batch_size, M)
    quotas = [base] * M
    for r in range(rem):
        quotas[((k - 1) * rem + r) % M] += 1
    return quotas


def simultaneous_schedule(domain_sizes, batch_size: int, seed: int = 0) -> SchedulePlan:
    sizes = _ordered_sizes(domain_sizes)
    N_B = _check_batch_size(batch_size)
    M = len(sizes)
    if N_B < M:
        raise ScheduleError(f"batch size {N_B} is smaller than the number of domains {M}")
    streams = [_CycleStream(n, seed, j) for j, (_, n) in enumerate(sizes)]
    batches = []
    k = 0
    while not all(s.first_done for s in streams):
        k += 1
        quotas = simultaneous_quotas(M, N_B, k)
        final = all(s.consumed + q >= s.n for s, q in zip(streams, quotas))
        parts = []
        for (d, _), s, q in zip(sizes, streams, quotas):
            # in the closing batch only first-cycle domains may come up short
            parts.extend(s.take(q, d, wrap=s.first_done or not final))
        batches.append(BatchAssignment(k, tuple(parts)))
    return SchedulePlan(Strategy.SIMULTANEOUS, N_B, tuple(sizes), tuple(batches), seed)


def alternating_domain(k: int, M: int) -> int:
    """1-based domain index feeding batch ``k`` under alternation."""
    return k - ((k - 1) // M) * M


def alternating_schedule(domain_sizes, batch_size: int, seed: int = 0) -> SchedulePlan:
    sizes = _ordered_sizes(domain_sizes)
    N_B = _check_batch_size(batch_size)
    M = len(sizes)
    streams = [_CycleStream(n, seed, j) for j, (_, n) in enumerate(sizes)]
    batches = []
    k = 0
    while not all(s.first_done for s in streams):
        k += 1
        j = alternating_domain(k, M) - 1
        s = streams[j]
        if s.remaining() == 0:
            # drained domains recycle while others still owe their first cycle
            s.restart()
        parts = s.take(min(N_B, s.remaining()), sizes[j][0], wrap=False)
        batches.append(BatchAssignment(k, tuple(parts)))
    return SchedulePlan(Strategy.ALTERNATING, N_B, tuple(sizes), tuple(batches), seed)


def bydomain_boundaries(sizes: Sequence[int], batch_size: int) -> List[Tuple[int, int]]:
    """Inclusive ``(first_k, last_k)`` owned by each domain under sequential consumption."""
    out, start = [], 0
    for n in sizes:
        count = -(-int(n) // batch_size)
        out.append((start + 1, start + count))
        start += count
    return out


def bydomain_schedule(domain_sizes, batch_size: int, seed: int = 0,
                      order: Optional[Sequence[str]] = None) -> SchedulePlan:
    sizes = _ordered_sizes(domain_sizes)
    N_B = _check_batch_size(batch_size)
    lookup = dict(sizes)
    if order is None:
        order = [d for d, _ in sizes]
    order = [str(d) for d in order]
    unknown = [d for d in order if d not in lookup]
    if unknown:
        raise ScheduleError(f"unknown domain(s) in order: {', '.join(unknown)}")
    if sorted(order) != sorted(lookup):
        raise ScheduleError("order must be a permutation of the domains")
    index = {d: j for j, (d, _) in enumerate(sizes)}
    ordered = [(d, lookup[d]) for d in order]
    batches = []
    k = 0
    for d, n in ordered:
        s = _CycleStream(n, seed, index[d])
        while s.remaining():
            k += 1
            batches.append(BatchAssignment(k, tuple(s.take(min(N_B, s.remaining()), d, wrap=False))))
    return SchedulePlan(Strategy.BYDOMAIN, N_B, tuple(ordered), tuple(batches), seed)


def build_schedule(strategy, domain_sizes, batch_size: int, seed: int = 0) -> SchedulePlan:
    strategy = Strategy.parse(strategy)
    if strategy is Strategy.SIMULTANEOUS:
        return simultaneous_schedule(domain_sizes, batch_size, seed)
    if strategy is Strategy.ALTERNATING:
        return alternating_schedule(domain_sizes, batch_size, seed)
    return bydomain_schedule(domain_sizes, batch_size, seed)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


@dataclass
class ScheduleReport:
    ok: bool
    violation: Optional[str] = None

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        return "OK" if self.ok else self.violation


def verify_schedule(plan: SchedulePlan) -> ScheduleReport:
    """Check every plan invariant; return the first violation found."""
    sizes = dict(plan.domain_sizes)
    order = [d for d, _ in plan.domain_sizes]
    M = len(order)
    N_B = plan.batch_size
    seen: Dict[Tuple[str, int], set] = {}

    for pos, b in enumerate(plan.batches, 1):
        if b.k != pos:
            return ScheduleReport(False, f"batch numbering broken at position {pos} (k={b.k})")
        if not b.parts:
            return ScheduleReport(False, f"empty batch at k={b.k}")
        for p in b.parts:
            if p.domain_id not in sizes:
                return ScheduleReport(False, f"unknown domain {p.domain_id!r} at k={b.k}")
            if any(not 0 <= i < sizes[p.domain_id] for i in p.indices):
                return ScheduleReport(False, f"index out of range for {p.domain_id} at k={b.k}")
            bucket = seen.setdefault((p.domain_id, p.cycle), set())
            if len(set(p.indices)) != len(p.indices) or bucket.intersection(p.indices):
                return ScheduleReport(False, f"sample reuse in domain {p.domain_id} at k={b.k}")
            bucket.update(p.indices)

        last = pos == len(plan.batches)
        if plan.strategy is Strategy.SIMULTANEOUS:
            if set(b.domains()) != set(order):
                return ScheduleReport(False, f"batch k={b.k} lacks a domain")
            if not last and b.size != N_B:
                return ScheduleReport(False, f"batch k={b.k} has {b.size} samples, expected {N_B}")
            quotas = dict(zip(order, simultaneous_quotas(M, N_B, b.k)))
            for d in order:
                got = sum(len(p.indices) for p in b.parts if p.domain_id == d)
                if got > quotas[d] or (not last and got != quotas[d]):
                    return ScheduleReport(False, f"quota mismatch for {d} at k={b.k}")
        else:
            doms = b.domains()
            if len(doms) != 1:
                return ScheduleReport(False, f"batch k={b.k} mixes domains")
            if b.size > N_B:
                return ScheduleReport(False, f"batch k={b.k} exceeds batch size")
            if plan.strategy is Strategy.ALTERNATING:
                expected = order[alternating_domain(b.k, M) - 1]
                if doms[0] != expected:
                    return ScheduleReport(False, f"formula mismatch at k={b.k}")

    if plan.strategy is Strategy.BYDOMAIN:
        bounds = bydomain_boundaries([sizes[d] for d in order], N_B)
        for d, (lo, hi) in zip(order, bounds):
            for b in plan.batches:
                owner = b.domains()[0]
                if (lo <= b.k <= hi) != (owner == d):
                    return ScheduleReport(False, f"formula mismatch at k={b.k}")
        if len(plan.batches) != (bounds[-1][1] if bounds else 0):
            return ScheduleReport(False, "batch count does not match the domain boundaries")

    for d in order:
        first = seen.get((d, 0), set())
        if first != set(range(sizes[d])):
            return ScheduleReport(False, f"coverage: domain {d} first cycle incomplete")
        cycles = sorted(c for (dd, c) in seen if dd == d)
        for c in cycles[:-1]:
            if seen[(d, c)] != set(range(sizes[d])):
                return ScheduleReport(False, f"coverage: domain {d} cycle {c} incomplete")
    return ScheduleReport(True)
