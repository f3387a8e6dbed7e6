"""Ulcer weights from tissue-class probabilities."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import mannwhitneyu

from .autodiff import Tensor, scale_rows
from .config import WeightRule
from .errors import ContractError, DataError, StatisticsError
from .graph import WsiGraph

DEFAULT_RULE = WeightRule()


def _check_probs(p: np.ndarray) -> None:
    if not np.all(np.isfinite(p)) or (p < 0).any() or (p > 1).any():
        bad = p[~((p >= 0) & (p <= 1))]
        raise DataError(f"tissue probabilities must lie in [0, 1], got {bad.tolist()[:5]}")


def ulcer_weight(probs, rule: WeightRule = DEFAULT_RULE) -> int:
    """Base weight plus one for each of: scarce epithelium, lymphocytes, debris."""
    p = np.asarray(probs, dtype=np.float64).reshape(3)
    _check_probs(p)
    epi, lym, deb = p
    return rule.base + int(epi < rule.epithelium_max) + int(lym > rule.lymphocyte_min) + int(deb > rule.debris_min)


def ulcer_weights(probs, rule: WeightRule = DEFAULT_RULE) -> np.ndarray:
    """Vectorised :func:`ulcer_weight` over an (N, 3) probability array."""
    p = np.asarray(probs, dtype=np.float64).reshape(-1, 3)
    _check_probs(p)
    w = (
        (p[:, 0] < rule.epithelium_max).astype(np.int64)
        + (p[:, 1] > rule.lymphocyte_min)
        + (p[:, 2] > rule.debris_min)
    )
    return w + rule.base


def apply_weights(node_features: Tensor, weights) -> Tensor:
    """Scale row i by ``weights[i]``; the weights are constants."""
    w = np.asarray(weights).reshape(-1)
    if w.shape[0] != node_features.shape[0]:
        raise ContractError(f"{w.shape[0]} weights for {node_features.shape[0]} nodes")
    if (w < 1).any():
        raise ContractError("node weights must be >= 1")
    return scale_rows(node_features, w)


@dataclass
class WeightFractionStats:
    wsi_ids: list[str]
    labels: list[int]
    fractions: list[float]
    median_ulcer: float
    median_non_ulcer: float
    statistic: float
    p_value: float

    def group(self, label: int) -> list[float]:
        return [f for f, y in zip(self.fractions, self.labels) if y == label]


def high_weight_fraction(graphs: Sequence[WsiGraph], threshold: int = 3) -> WeightFractionStats:
    """Per-slide share of nodes with weight >= ``threshold``, compared by label.

    The two label groups are compared with a two-sided Mann-Whitney U test;
    ``statistic`` is U for the ulcer group.
    """
    if not graphs:
        raise StatisticsError("no graphs given")
    fractions = [float(np.mean(g.node_weights >= threshold)) for g in graphs]
    labels = [int(g.label) for g in graphs]
    pos = [f for f, y in zip(fractions, labels) if y == 1]
    neg = [f for f, y in zip(fractions, labels) if y == 0]
    if not pos or not neg:
        raise StatisticsError(f"both label groups are needed (ulcer: {len(pos)}, non-ulcer: {len(neg)})")
    if len(set(pos + neg)) == 1:
        stat, p = len(pos) * len(neg) / 2.0, 1.0
    else:
        res = mannwhitneyu(pos, neg, alternative="two-sided")
        stat, p = float(res.statistic), float(res.pvalue)
    return WeightFractionStats(
        wsi_ids=[g.wsi_id for g in graphs],
        labels=labels,
        fractions=fractions,
        median_ulcer=float(np.median(pos)),
        median_non_ulcer=float(np.median(neg)),
        statistic=stat,
        p_value=p,
    )
