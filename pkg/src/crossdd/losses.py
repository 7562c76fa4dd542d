"""Per-modality binary cross-entropy and the lambda-weighted objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import autodiff as ad

PROB_EPS = 1e-12
DEFAULT_LAMBDA = 0.5


class LossError(ValueError):
    pass


def _labels(y) -> np.ndarray:
    y = np.asarray(y)
    if y.size and not np.all((y == 0) | (y == 1)):
        bad = sorted(set(np.unique(y).tolist()) - {0, 1})
        raise LossError(f"labels must be 0 or 1, got {bad}")
    return y.astype(np.float64)


def bce(y_hat, y, eps: float = PROB_EPS) -> ad.Tensor:
    """Elementwise ``-(y log p + (1-y) log(1-p))`` with ``p`` clamped to [eps, 1-eps]."""
    yv = _labels(y)
    p = ad.clip(ad.as_tensor(y_hat), eps, 1.0 - eps)
    pos = ad.mul(yv, ad.log(p))
    negv = ad.mul(1.0 - yv, ad.log(ad.sub(1.0, p)))
    return ad.neg(ad.add(pos, negv))


def cross_entropy(logits, labels, n_classes: Optional[int] = None) -> ad.Tensor:
    """Per-sample softmax cross-entropy for integer labels; logits are [N, K]."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    K = logits.shape[-1] if n_classes is None else n_classes
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise LossError(f"labels must lie in [0, {K})")
    onehot = np.zeros((labels.shape[0], K))
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    return ad.neg(ad.sum_axis(ad.mul(onehot, ad.log_softmax_axis(logits, -1)), -1))


def softmax_bce(logits, y) -> ad.Tensor:
    """BCE of the class-1 softmax probability, computed stably from 2 logits."""
    return cross_entropy(logits, _labels(y).astype(np.int64), n_classes=2)


def aggregate(modality_losses: Mapping[str, object], fusion_loss, lam: float = DEFAULT_LAMBDA,
              present: Optional[Mapping[str, np.ndarray]] = None) -> ad.Tensor:
    """``(1/N) sum_i (sum_m L_{m,i} + lam * L_{g,i})``.

    ``present[m]`` masks out samples lacking modality ``m``; absent modalities
    contribute nothing for those samples.
    """
    g = ad.as_tensor(fusion_loss)
    if g.ndim != 1:
        raise LossError(f"fusion loss must be a per-sample vector, got shape {g.shape}")
    N = g.shape[0]
    if N == 0:
        raise LossError("cannot aggregate an empty batch")
    per_sample = ad.scalar_mul(g, lam)
    for m, term in modality_losses.items():
        term = ad.as_tensor(term)
        if term.shape != (N,):
            raise LossError(f"loss for {m} has shape {term.shape}, expected ({N},)")
        if present is not None and m in present:
            term = ad.mul(term, np.asarray(present[m], dtype=np.float64))
        per_sample = ad.add(per_sample, term)
    return ad.scalar_mul(ad.sum_all(per_sample), 1.0 / N)


@dataclass
class LossBreakdown:
    """Batch-mean loss components; missing modalities are ``None``."""

    L_f: Optional[float]
    L_b: Optional[float]
    L_a: Optional[float]
    L_g: float
    total: float
    lam: float = DEFAULT_LAMBDA
    L_d: float = 0.0  # domain-adversarial term, zero unless a GRL head is active

    def as_row(self) -> str:
        cells = [self.L_f, self.L_b, self.L_a, self.L_g, self.total]
        return "\t".join("nan" if c is None else repr(float(c)) for c in cells)
