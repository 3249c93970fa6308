"""Quantization-health and ranking metrics.

Entropy is reported in nats. Utilization and entropy default to per-slot
means; pooled variants exist for shared-codebook configurations where the
union view is the meaningful one. Ranking follows the leave-one-out,
single-relevant-item protocol: each user contributes the 1-based rank of
their held-out item over the full catalog.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import PopularityStrata


@dataclass
class QuantMetrics:
    recon_loss: float
    utilization: float
    entropy: float

    def as_dict(self):
        return {"recon_loss": self.recon_loss, "utilization": self.utilization,
                "entropy": self.entropy}


@dataclass
class RankingMetrics:
    recall_at: dict
    ndcg_at: dict
    auc: float | None = None
    gauc: float | None = None

    def as_dict(self):
        d = {}
        for n in sorted(self.recall_at):
            d[f"recall@{n}"] = self.recall_at[n]
        for n in sorted(self.ndcg_at):
            d[f"ndcg@{n}"] = self.ndcg_at[n]
        if self.auc is not None:
            d["auc"] = self.auc
        if self.gauc is not None:
            d["gauc"] = self.gauc
        return d


@dataclass
class MetricsReport:
    quant: QuantMetrics | None = None
    ranking: RankingMetrics | None = None
    strata: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def as_dict(self):
        d = {}
        if self.quant is not None:
            d.update(self.quant.as_dict())
        if self.ranking is not None:
            d.update(self.ranking.as_dict())
        if self.strata:
            d["strata"] = {k: v.as_dict() for k, v in sorted(self.strata.items())}
        d.update(self.extras)
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# Quantization metrics
# --------------------------------------------------------------------------

def _counts_matrix(counts_per_slot) -> np.ndarray:
    m = np.asarray(counts_per_slot, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    return m


def codebook_utilization(counts_per_slot, pooled=False) -> float:
    """Fraction of codes with nonzero count; mean over slots by default."""
    m = _counts_matrix(counts_per_slot)
    if pooled:
        return float(np.mean(m.sum(axis=0) > 0))
    return float(np.mean(m > 0))


def token_entropy(counts_per_slot, pooled=False) -> float:
    """Shannon entropy (nats) of the empirical code distribution.

    Per-slot entropies averaged by default; pooled merges counts first.
    0 * ln 0 is 0.
    """
    m = _counts_matrix(counts_per_slot)
    if pooled:
        m = m.sum(axis=0, keepdims=True)
    totals = m.sum(axis=1, keepdims=True)
    if np.any(totals == 0):
        raise ValueError("token_entropy needs a positive total count per slot")
    p = m / totals
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return float(np.mean(-terms.sum(axis=1)))


# --------------------------------------------------------------------------
# Ranking metrics (leave-one-out, one relevant item per user)
# --------------------------------------------------------------------------

def rank_of_target(scores: np.ndarray, target_idx: np.ndarray) -> np.ndarray:
    """1-based rank of each row's target under (-score, index) ordering.

    Deterministic tie handling: equal scores rank by ascending item index.
    """
    scores = np.asarray(scores)
    target_idx = np.asarray(target_idx)
    t_scores = scores[np.arange(len(scores)), target_idx]
    higher = (scores > t_scores[:, None]).sum(axis=1)
    tied_before = ((scores == t_scores[:, None])
                   & (np.arange(scores.shape[1])[None, :] < target_idx[:, None])).sum(axis=1)
    return (higher + tied_before + 1).astype(np.int64)


def recall_at_n(ranks, n: int) -> float:
    """Fraction of users whose held-out item ranks in the top n."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ranks = np.asarray(ranks)
    return float(np.mean(ranks <= n))


def ndcg_at_n(ranks, n: int) -> float:
    """Mean of 1/log2(rank+1) for ranks <= n, else 0 (binary gain)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ranks = np.asarray(ranks, dtype=np.float64)
    gain = np.where(ranks <= n, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(np.mean(gain))


def ranking_metrics(ranks, n_list=(5, 10)) -> RankingMetrics:
    return RankingMetrics(
        recall_at={n: recall_at_n(ranks, n) for n in n_list},
        ndcg_at={n: ndcg_at_n(ranks, n) for n in n_list},
    )


def auc(scores, labels) -> float:
    """P(random positive outscores random negative), ties at 0.5; rank-sum."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs at least one positive and one negative")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    r_pos = ranks[pos].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def gauc(per_user, weights=None) -> float:
    """Impression-weighted mean of per-user AUC.

    per_user: iterable of (scores, labels). Users lacking both classes are
    skipped; weights default to each user's impression count.
    """
    num, den = 0.0, 0.0
    per_user = list(per_user)
    if weights is None:
        weights = [len(s) for s, _ in per_user]
    for (scores, labels), w in zip(per_user, weights):
        labels = np.asarray(labels)
        if labels.min() == labels.max():
            continue
        num += w * auc(scores, labels)
        den += w
    if den == 0:
        raise ValueError("gauc: no user has both positive and negative labels")
    return float(num / den)


def stratified_ranking(ranks, truth_items, strata: PopularityStrata,
                       n_list=(5, 10)):
    """Ranking metrics restricted to users whose held-out item sits in each stratum.

    Empty strata are omitted; the report notes them under 'omitted'.
    """
    ranks = np.asarray(ranks)
    truth_items = np.asarray(truth_items)
    known = set(int(t) for t in strata.item_ids)
    labels = np.array([strata.stratum_of(t) if int(t) in known else None
                       for t in truth_items], dtype=object)
    out, omitted = {}, []
    for name in np.unique(strata.strata):
        mask = labels == name
        if not mask.any():
            omitted.append(str(name))
            continue
        out[str(name)] = ranking_metrics(ranks[mask], n_list)
    return out, omitted
