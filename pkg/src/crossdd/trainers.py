"""ERM, IDGM ("Fish") and MM-IDGM training loops.

All three operate on a :class:`~crossdd.models.ModelBundle` in place and
return a :class:`TrainState`. Batches come from :mod:`crossdd.schedulers`
plans built over each domain's training pool.

The Fish-style trainers group a plan into outer steps: a simultaneous batch
is one outer step whose domain parts become the inner batches; for
alternating and by-domain plans every ``M`` consecutive batches form an outer
step. Inner batches are visited in a seeded permutation.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import rng
from .losses import DEFAULT_LAMBDA, LossBreakdown, aggregate, bce, cross_entropy, softmax_bce
from .models import Fusion, ModelBundle
from .schedulers import Part, SchedulePlan, Strategy, build_schedule
from .synthetic import DomainDataset

logger = logging.getLogger(__name__)

_LOSS_KEYS = {"face": "L_f", "behavior": "L_b", "audio": "L_a"}


class TrainingError(RuntimeError):
    pass


class TrainerConfigError(ValueError):
    pass


class Optimizer(str, enum.Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass
class TrainerConfig:
    optimizer: Optimizer = Optimizer.ADAM
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-5
    epochs: int = 30
    batch_size: int = 16
    alpha: float = 1e-3
    epsilon: float = 0.5
    seed: int = 0
    strategy: Strategy = Strategy.SIMULTANEOUS
    mm_idgm_modalities: Tuple[str, str] = ("face", "audio")
    lam: float = DEFAULT_LAMBDA
    split: str = "all"
    generalized_mm_idgm: bool = False
    refresh_running_losses: bool = True
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    domain_loss_weight: float = 1.0

    def __post_init__(self):
        self.optimizer = Optimizer(str(getattr(self.optimizer, "value", self.optimizer)).lower())
        self.strategy = Strategy.parse(self.strategy)
        self.mm_idgm_modalities = tuple(self.mm_idgm_modalities)

    def validate(self) -> None:
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise TrainerConfigError(f"lr must be nonnegative, got {self.lr}")
        if self.weight_decay < 0:
            raise TrainerConfigError("weight_decay must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainerConfigError("epochs and batch_size must be positive")
        if not self.alpha > 0:
            raise TrainerConfigError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise TrainerConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if not 0.0 <= self.lam <= 1.0:
            raise TrainerConfigError(f"lambda must lie in [0, 1], got {self.lam}")


def sgd_defaults(**kw) -> TrainerConfig:
    return TrainerConfig(optimizer=Optimizer.SGD, lr=1e-3, momentum=0.9, weight_decay=5e-5, **kw)


def adam_defaults(**kw) -> TrainerConfig:
    return TrainerConfig(optimizer=Optimizer.ADAM, lr=1e-3, weight_decay=5e-5, **kw)


@dataclass
class TrainState:
    model: ModelBundle
    slots: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    running_losses: Dict[str, float] = field(default_factory=dict)
    step: int = 0
    trace: List[LossBreakdown] = field(default_factory=list)
    coefficients: List[Dict[str, float]] = field(default_factory=list)
    meta_residuals: List[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# batches and loss
# ---------------------------------------------------------------------------


def _pools(datasets: Sequence[DomainDataset], split: str) -> Dict[str, Tuple[DomainDataset, np.ndarray]]:
    pools = {}
    for ds in datasets:
        if ds.domain_id in pools:
            raise TrainerConfigError(f"domain {ds.domain_id!r} given twice")
        pools[ds.domain_id] = (ds, ds.indices(split))
    return pools


def assemble_batch(pools, parts: Sequence[Part]) -> dict:
    """Stack the samples named by ``parts`` into one batch dict."""
    chunks = []
    dom_index = {d: i for i, d in enumerate(pools)}
    for p in parts:
        ds, pool = pools[p.domain_id]
        rows = pool[np.asarray(p.indices, dtype=np.int64)]
        b = ds.batch(rows)
        b["domain"] = np.full(len(rows), dom_index[p.domain_id], dtype=np.int64)
        chunks.append(b)
    if len(chunks) == 1:
        return chunks[0]
    return {k: np.concatenate([c[k] for c in chunks], axis=0) for k in chunks[0]}


def batch_loss(model: ModelBundle, bound, batch, lam: float, domain_weight: float = 1.0):
    """Objective for one batch: ``(total Tensor, LossBreakdown, unimodal means)``."""
    out = model.forward(batch, bound)
    y = batch["y"]
    modality_terms = {m: softmax_bce(out.logits[m], y) for m in model.config.modalities}
    if out.fusion_logits is None:
        g = bce(_class1(out.fusion_scores), y)
    else:
        g = softmax_bce(out.fusion_logits, y)
    total = aggregate(modality_terms, g, lam)
    L_d = 0.0
    if out.domain_logits:
        dom_terms = [cross_entropy(l, batch["domain"], model.config.n_domains)
                     for l in out.domain_logits.values()]
        dom = dom_terms[0]
        for t in dom_terms[1:]:
            dom = ad.add(dom, t)
        dom_mean = ad.scalar_mul(ad.sum_all(dom), 1.0 / dom.shape[0])
        total = ad.add(total, ad.scalar_mul(dom_mean, domain_weight))
        L_d = float(dom_mean.data)
    means = {m: float(t.data.mean()) for m, t in modality_terms.items()}
    kw = {_LOSS_KEYS.get(m, m): v for m, v in means.items() if m in _LOSS_KEYS}
    breakdown = LossBreakdown(
        L_f=kw.get("L_f"), L_b=kw.get("L_b"), L_a=kw.get("L_a"),
        L_g=float(g.data.mean()), total=float(total.data), lam=lam, L_d=L_d,
    )
    return total, breakdown, means


def _class1(scores):
    B = scores.shape[0]
    return ad.reshape(ad.matmul(scores, np.array([[0.0], [1.0]])), (B,))


def gradients(model: ModelBundle, batch, lam: float, domain_weight: float = 1.0,
              params: Optional[Mapping[str, np.ndarray]] = None):
    """Loss breakdown, unimodal means and ``{name: grad}`` at ``params``."""
    tape = ad.Tape()
    source = model.params if params is None else params
    bound = {k: tape.watch(v, k) for k, v in source.items()}
    total, breakdown, means = batch_loss(model, bound, batch, lam, domain_weight)
    g = ad.backward(tape, total)
    return breakdown, means, {k: g[t.node_id] for k, t in bound.items()}


def _check_finite(breakdown: LossBreakdown, where: str) -> None:
    if not math.isfinite(breakdown.total):
        raise TrainingError(f"non-finite loss ({breakdown.total}) at {where}")


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------


def sgd_step(params, grads, slots, lr, momentum, weight_decay) -> None:
    buf = slots.setdefault("momentum", {})
    for k, g in grads.items():
        if weight_decay:
            g = g + weight_decay * params[k]
        if momentum:
            b = buf.get(k)
            b = g.copy() if b is None else momentum * b + g
            buf[k] = b
            g = b
        params[k] = params[k] - lr * g


def adam_step(params, grads, slots, lr, weight_decay, betas, eps, t) -> None:
    m_s = slots.setdefault("m", {})
    v_s = slots.setdefault("v", {})
    b1, b2 = betas
    for k, g in grads.items():
        if weight_decay:
            g = g + weight_decay * params[k]
        m = b1 * m_s.get(k, 0.0) + (1 - b1) * g
        v = b2 * v_s.get(k, 0.0) + (1 - b2) * g * g
        m_s[k], v_s[k] = m, v
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + eps)


def _optimizer_step(state: TrainState, grads, cfg: TrainerConfig) -> None:
    params = state.model.params
    if cfg.optimizer is Optimizer.SGD:
        sgd_step(params, grads, state.slots, cfg.lr, cfg.momentum, cfg.weight_decay)
    else:
        adam_step(params, grads, state.slots, cfg.lr, cfg.weight_decay,
                  cfg.adam_betas, cfg.adam_eps, state.step)


def _epoch_plan(pools, cfg: TrainerConfig, epoch: int) -> SchedulePlan:
    sizes = [(d, len(pool)) for d, (_, pool) in pools.items()]
    return build_schedule(cfg.strategy, sizes, cfg.batch_size, seed=cfg.seed * 1_000_003 + epoch)


# ---------------------------------------------------------------------------
# ERM
# ---------------------------------------------------------------------------


def train_erm(model: ModelBundle, datasets: Sequence[DomainDataset], cfg: TrainerConfig,
              plan: Optional[SchedulePlan] = None,
              log: Optional[Callable[[int, LossBreakdown], None]] = None) -> TrainState:
    """Plain training on scheduled batches.

    With ``plan`` given, every epoch replays it; otherwise a fresh plan of
    ``cfg.strategy`` is drawn per epoch.
    """
    cfg.validate()
    pools = _pools(datasets, cfg.split)
    if plan is not None:
        unknown = set(plan.domain_ids) - set(pools)
        if unknown:
            raise TrainerConfigError(f"plan references unknown domains {sorted(unknown)}")
    state = TrainState(model)
    for epoch in range(cfg.epochs):
        p = plan if plan is not None else _epoch_plan(pools, cfg, epoch)
        for b in p.batches:
            batch = assemble_batch(pools, b.parts)
            breakdown, _, grads = gradients(model, batch, cfg.lam, cfg.domain_loss_weight)
            _check_finite(breakdown, f"epoch {epoch + 1}, batch k={b.k}")
            state.step += 1
            _optimizer_step(state, grads, cfg)
            state.trace.append(breakdown)
            if log is not None:
                log(state.step, breakdown)
    return state


# ---------------------------------------------------------------------------
# Fish-style trainers
# ---------------------------------------------------------------------------


def outer_groups(plan: SchedulePlan) -> List[List[Part]]:
    """Split a plan into outer steps, each a list of inner batches (merged per domain)."""
    M = len(plan.domain_sizes)
    if plan.strategy is Strategy.SIMULTANEOUS:
        raw = [list(b.parts) for b in plan.batches]
    else:
        raw = []
        for start in range(0, len(plan.batches), M):
            raw.append([p for b in plan.batches[start:start + M] for p in b.parts])
    groups = []
    for parts in raw:
        if plan.strategy is Strategy.SIMULTANEOUS:
            # cycle wraps can split a domain's slice; rejoin it into one inner batch
            merged: Dict[str, List[int]] = {}
            for p in parts:
                merged.setdefault(p.domain_id, []).extend(p.indices)
            groups.append([Part(d, tuple(ix)) for d, ix in merged.items()])
        else:
            groups.append(parts)
    return groups


def _scales_for(labels: Mapping[str, str], coef: Mapping[str, float]) -> Dict[str, float]:
    return {name: coef.get(lab, 1.0) for name, lab in labels.items()}


def _fish(model: ModelBundle, datasets: Sequence[DomainDataset], cfg: TrainerConfig,
          coefficient_fn, refresh_fn, allow_single_domain: bool, log) -> TrainState:
    cfg.validate()
    pools = _pools(datasets, cfg.split)
    if len(pools) < 2 and not allow_single_domain:
        raise TrainerConfigError("gradient matching needs at least 2 source domains")
    state = TrainState(model)
    params = model.params
    eps = cfg.epsilon
    for epoch in range(cfg.epochs):
        plan = _epoch_plan(pools, cfg, epoch)
        for group in outer_groups(plan):
            scales = coefficient_fn(state)
            clone = {k: v.copy() for k, v in params.items()}
            order = rng.stream(cfg.seed, "permute", state.step).permutation(len(group))
            inner_means: List[Dict[str, float]] = []
            for gi in order:
                part = group[gi]
                batch = assemble_batch(pools, [part])
                breakdown, means, grads = gradients(model, batch, cfg.lam,
                                                    cfg.domain_loss_weight, params=clone)
                _check_finite(breakdown, f"epoch {epoch + 1}, outer step {state.step + 1}, "
                                         f"domain {part.domain_id}")
                for k, g in grads.items():
                    clone[k] = clone[k] - cfg.alpha * (scales.get(k, 1.0) * g)
                inner_means.append(means)
                state.trace.append(breakdown)
                if log is not None:
                    log(state.step + 1, breakdown)
            worst = 0.0
            for k in params:
                old = params[k]
                new = (1.0 - eps) * old + eps * clone[k]
                worst = max(worst, float(np.max(np.abs((new - old) - eps * (clone[k] - old)),
                                                initial=0.0)))
                params[k] = new
            state.meta_residuals.append(worst)
            state.step += 1
            refresh_fn(state, inner_means)
    return state


def train_idgm(model: ModelBundle, datasets: Sequence[DomainDataset], cfg: TrainerConfig,
               grad_scale: Optional[Mapping[str, float]] = None,
               allow_single_domain: bool = False, log=None) -> TrainState:
    """Fish: sequential inner steps on a clone, then ``theta = (1 - eps) * theta + eps * clone``.

    ``grad_scale`` optionally multiplies individual parameters' inner
    gradients (``{name: factor}``); it exists for cross-checking MM-IDGM.
    """
    fixed = dict(grad_scale or {})
    return _fish(model, datasets, cfg, lambda state: fixed, lambda state, means: None,
                 allow_single_domain, log)


def mm_idgm_coefficients(L1: float, L2: float) -> Tuple[float, float]:
    """Inner-step weights for encoders m1 and m2: each gets the other's loss share."""
    denom = L1 + L2
    return L2 / denom, L1 / denom


def generalized_coefficients(losses: Mapping[str, float]) -> Dict[str, float]:
    """Extension to N_m encoders: ``sum_{j != i} L_j / ((N_m - 1) * sum_j L_j)``."""
    total = sum(losses.values())
    n = len(losses)
    return {m: (total - L) / ((n - 1) * total) for m, L in losses.items()}


def train_mm_idgm(model: ModelBundle, datasets: Sequence[DomainDataset], cfg: TrainerConfig,
                  allow_single_domain: bool = False, log=None) -> TrainState:
    """MM-IDGM: Fish with encoder gradients weighted by the other modality's running loss.

    Running unimodal losses start at 1.0 and are refreshed after every outer
    step with the mean unimodal loss over that step's inner batches. The
    third encoder of a three-modality model belongs to ``rest`` unless
    ``cfg.generalized_mm_idgm`` is set.
    """
    m1, m2 = cfg.mm_idgm_modalities
    labels = model.partition(m1, m2, generalized=cfg.generalized_mm_idgm)
    if set(labels) != set(model.params):
        raise TrainerConfigError("partition labels do not cover every parameter")
    tracked = list(model.config.modalities) if cfg.generalized_mm_idgm else [m1, m2]

    def coefficient_fn(state: TrainState) -> Dict[str, float]:
        running = state.running_losses
        for m in tracked:
            running.setdefault(m, 1.0)
        if cfg.generalized_mm_idgm:
            coef = generalized_coefficients({m: running[m] for m in tracked})
            by_label = {f"enc:{m}": c for m, c in coef.items()}
            record = dict(coef)
        else:
            c1, c2 = mm_idgm_coefficients(running[m1], running[m2])
            by_label = {"m1": c1, "m2": c2}
            record = {m1: c1, m2: c2}
        record["sum"] = sum(record.values())
        state.coefficients.append(record)
        return _scales_for(labels, by_label)

    def refresh_fn(state: TrainState, inner_means: List[Dict[str, float]]) -> None:
        if not cfg.refresh_running_losses or not inner_means:
            return
        for m in tracked:
            state.running_losses[m] = float(np.mean([d[m] for d in inner_means]))

    return _fish(model, datasets, cfg, coefficient_fn, refresh_fn, allow_single_domain, log)

