"""Ranking objectives for predictor training and the exact rank evaluator.

``exact_spearman`` is the evaluation metric: Pearson correlation of
fractional (average-tie) rank vectors.  ``soft_spearman_loss`` is its
differentiable training surrogate built from pairwise-sigmoid soft ranks;
``pairwise_margin_loss`` is an alternate hinge objective over ordered pairs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateTruthError, DimensionError, NumericError, ParameterError


class ObjectiveKind(enum.Enum):
    SOFT_SPEARMAN = "soft_spearman"
    PAIRWISE_MARGIN = "pairwise_margin"


@dataclass(frozen=True)
class RankingObjectiveConfig:
    kind: ObjectiveKind = ObjectiveKind.SOFT_SPEARMAN
    temperature: float = 0.1
    margin: float = 0.1

    def validate(self) -> None:
        if self.kind is ObjectiveKind.SOFT_SPEARMAN and not self.temperature > 0.0:
            raise ParameterError(f"temperature {self.temperature} must be > 0")
        if self.kind is ObjectiveKind.PAIRWISE_MARGIN and self.margin < 0.0:
            raise ParameterError(f"margin {self.margin} must be >= 0")


def fractional_ranks(v: np.ndarray) -> np.ndarray:
    """Average ranks, 1-based; ties share the mean of their positions."""
    v = np.asarray(v, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    sv = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def exact_spearman(a, b) -> float:
    """Spearman correlation; NaN when either rank vector is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or len(a) != len(b):
        raise DimensionError(f"need equal-length vectors, got {a.shape} vs {b.shape}")
    if len(a) < 2:
        raise DimensionError("need at least 2 entries")
    ra, rb = fractional_ranks(a), fractional_ranks(b)
    ca, cb = ra - ra.mean(), rb - rb.mean()
    ssq_a, ssq_b = (ca * ca).sum(), (cb * cb).sum()
    if ssq_a == 0.0 or ssq_b == 0.0:
        return float("nan")
    # Rank vectors are exact multiples of 0.25, so ssq_a * ssq_b is exact and
    # identical/reversed rankings come out as exactly +/-1.
    return float((ca * cb).sum() / np.sqrt(ssq_a * ssq_b))


def _as_tensor(v, dtype=torch.float64) -> torch.Tensor:
    if isinstance(v, torch.Tensor):
        return v
    return torch.as_tensor(np.asarray(v), dtype=dtype)


def _check_pair(pred: torch.Tensor, truth: torch.Tensor) -> None:
    if pred.ndim != 1 or truth.ndim != 1 or pred.shape != truth.shape:
        raise DimensionError(f"need equal-length vectors, got {tuple(pred.shape)} vs {tuple(truth.shape)}")
    if pred.numel() < 2:
        raise DimensionError("need at least 2 entries")
    if torch.isnan(pred).any() or torch.isnan(truth).any():
        raise NumericError("NaN in ranking-loss input")


def soft_ranks(pred: torch.Tensor, temperature: float) -> torch.Tensor:
    """r_i = 1 + sum_{j != i} sigmoid((pred_i - pred_j) / temperature)."""
    diff = (pred.unsqueeze(1) - pred.unsqueeze(0)) / temperature
    s = torch.sigmoid(diff)
    # The diagonal contributes sigmoid(0) = 0.5; subtract it instead of masking.
    return 0.5 + s.sum(dim=1)


def soft_spearman_loss(pred, truth, temperature: float) -> torch.Tensor:
    """1 - Pearson(soft ranks of pred, fractional ranks of truth); in [0, 2].

    Differentiable in ``pred`` everywhere; a degenerate all-equal ``pred``
    yields loss 1 via an epsilon-guarded denominator.
    """
    if not temperature > 0.0:
        raise ParameterError(f"temperature {temperature} must be > 0")
    pred = _as_tensor(pred)
    truth = _as_tensor(truth).detach()
    _check_pair(pred, truth)
    truth_np = truth.cpu().numpy().astype(np.float64)
    if np.all(truth_np == truth_np.flat[0]):
        raise DegenerateTruthError("constant truth vector cannot be ranked")
    r_truth = torch.as_tensor(fractional_ranks(truth_np), dtype=pred.dtype)
    r_pred = soft_ranks(pred, float(temperature))
    cp = r_pred - r_pred.mean()
    ct = r_truth - r_truth.mean()
    denom = torch.sqrt((cp * cp).sum() + 1e-24) * torch.sqrt((ct * ct).sum())
    return 1.0 - (cp * ct).sum() / denom


def pairwise_margin_loss(pred, truth, margin: float) -> torch.Tensor:
    """Mean hinge over ordered pairs (i, j) with truth_i < truth_j.

    Zero iff every such pair satisfies pred_j - pred_i >= margin.  Constant
    truth has no ordered pairs and scores 0.
    """
    if margin < 0.0:
        raise ParameterError(f"margin {margin} must be >= 0")
    pred = _as_tensor(pred)
    truth = _as_tensor(truth).detach()
    _check_pair(pred, truth)
    truth = truth.to(pred.dtype)
    # Element [a, b] of each matrix maps to the ordered pair (i=b, j=a):
    # active when truth_b < truth_a, penalized unless pred_a - pred_b >= margin.
    wants_greater = (truth.unsqueeze(0) < truth.unsqueeze(1)).to(pred.dtype)
    gap = pred.unsqueeze(1) - pred.unsqueeze(0)
    hinge = torch.clamp(margin - gap, min=0.0) * wants_greater
    count = wants_greater.sum()
    if count.item() == 0:
        return pred.sum() * 0.0
    return hinge.sum() / count


def objective_loss(pred: torch.Tensor, truth, cfg: RankingObjectiveConfig) -> torch.Tensor:
    cfg.validate()
    if cfg.kind is ObjectiveKind.SOFT_SPEARMAN:
        return soft_spearman_loss(pred, truth, cfg.temperature)
    return pairwise_margin_loss(pred, truth, cfg.margin)
