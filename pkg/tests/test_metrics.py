import numpy as np
import pytest
from scipy import stats

from mmq import metrics as M
from mmq.data import InteractionDataset, popularity_strata


# ---------------------------------------------------------------------------
# utilization / entropy
# ---------------------------------------------------------------------------

def test_utilization_all_used():
    assert M.codebook_utilization(np.array([1, 2, 3, 4])) == 1.0


def test_utilization_half_used():
    assert M.codebook_utilization(np.array([5, 0, 0, 1])) == 0.5


def test_utilization_mean_over_slots():
    counts = np.array([[1, 0], [1, 1]])
    assert M.codebook_utilization(counts) == pytest.approx(0.75)
    assert M.codebook_utilization(counts, pooled=True) == 1.0


def test_entropy_uniform():
    assert M.token_entropy(np.array([3, 3, 3, 3])) == pytest.approx(np.log(4))


def test_entropy_single_code():
    assert M.token_entropy(np.array([0, 9, 0])) == 0.0


def test_entropy_matches_scipy():
    rng = np.random.default_rng(0)
    counts = rng.integers(0, 50, size=(4, 16))
    counts[:, 0] += 1
    ours = M.token_entropy(counts)
    ref = np.mean([stats.entropy(c / c.sum()) for c in counts])
    assert ours == pytest.approx(ref, abs=1e-12)


def test_entropy_bounded_by_used_codes():
    rng = np.random.default_rng(1)
    for _ in range(20):
        counts = rng.integers(0, 10, size=12)
        if counts.sum() == 0:
            continue
        used = int((counts > 0).sum())
        assert M.token_entropy(counts) <= np.log(max(used, 1)) + 1e-12


def test_entropy_equality_iff_uniform_over_used():
    counts = np.array([4, 4, 0, 4])
    assert M.token_entropy(counts) == pytest.approx(np.log(3))
    assert M.token_entropy(np.array([4, 5, 0, 4])) < np.log(3)


def test_metrics_invariant_to_code_permutation():
    rng = np.random.default_rng(2)
    counts = rng.integers(0, 20, size=10)
    counts[0] += 1
    perm = rng.permutation(10)
    assert M.token_entropy(counts) == pytest.approx(M.token_entropy(counts[perm]))
    assert M.codebook_utilization(counts) == M.codebook_utilization(counts[perm])


# ---------------------------------------------------------------------------
# recall / ndcg
# ---------------------------------------------------------------------------

def test_recall_examples():
    assert M.recall_at_n([3], 5) == 1.0
    assert M.recall_at_n([11], 10) == 0.0
    with pytest.raises(ValueError):
        M.recall_at_n([1], 0)


def test_recall_random_scores_monte_carlo():
    rng = np.random.default_rng(0)
    trials = 10_000
    scores = rng.normal(size=(trials, 100))
    targets = rng.integers(0, 100, size=trials)
    ranks = M.rank_of_target(scores, targets)
    assert M.recall_at_n(ranks, 10) == pytest.approx(0.10, abs=0.01)


def test_ndcg_examples():
    assert M.ndcg_at_n([1], 5) == 1.0
    assert M.ndcg_at_n([2], 5) == pytest.approx(0.6309, abs=1e-4)
    assert M.ndcg_at_n([6], 5) == 0.0


def test_recall_ndcg_monotone_in_n():
    rng = np.random.default_rng(3)
    ranks = rng.integers(1, 40, size=200)
    for metric in (M.recall_at_n, M.ndcg_at_n):
        values = [metric(ranks, n) for n in range(1, 40)]
        assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))
    assert M.recall_at_n(ranks, 5) <= M.recall_at_n(ranks, 10)


def test_rank_of_target_tie_break_by_index():
    scores = np.array([[1.0, 1.0, 1.0]])
    assert M.rank_of_target(scores, np.array([0]))[0] == 1
    assert M.rank_of_target(scores, np.array([2]))[0] == 3


# ---------------------------------------------------------------------------
# auc / gauc
# ---------------------------------------------------------------------------

def test_auc_perfect_and_inverted():
    assert M.auc([0.9, 0.2, 0.5], [1, 0, 1]) == 1.0
    assert M.auc([0.2, 0.9, 0.5], [1, 0, 1]) == 0.0


def test_auc_matches_pairwise_bruteforce():
    rng = np.random.default_rng(7)
    scores = np.round(rng.normal(size=200), 1)  # rounding forces ties
    labels = rng.integers(0, 2, size=200)
    labels[:2] = [0, 1]
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    brute = wins / (len(pos) * len(neg))
    assert abs(M.auc(scores, labels) - brute) <= 1e-12


def test_auc_single_class_error():
    with pytest.raises(ValueError):
        M.auc([0.1, 0.2], [1, 1])


def test_auc_invariant_to_monotone_transform():
    rng = np.random.default_rng(8)
    scores = rng.normal(size=100)
    labels = rng.integers(0, 2, size=100)
    labels[:2] = [0, 1]
    a = M.auc(scores, labels)
    b = M.auc(np.exp(scores) * 3 + 1, labels)
    assert a == pytest.approx(b, abs=1e-12)


def test_gauc_single_user():
    scores, labels = [0.9, 0.1, 0.5], [1, 0, 0]
    assert M.gauc([(scores, labels)]) == M.auc(scores, labels)


def test_gauc_weighted_example():
    per_user = [(np.array([1.0, 0.0]), np.array([1, 0])),
                (np.array([0.0, 1.0]), np.array([1, 0]))]
    assert M.gauc(per_user, weights=[3, 1]) == pytest.approx(0.75)


def test_gauc_skips_single_class_users():
    per_user = [(np.array([1.0, 0.0]), np.array([1, 0])),
                (np.array([0.5, 0.2]), np.array([1, 1]))]
    assert M.gauc(per_user) == 1.0


def test_gauc_all_ineligible_error():
    with pytest.raises(ValueError):
        M.gauc([(np.array([0.5]), np.array([1]))])


# ---------------------------------------------------------------------------
# stratified reports
# ---------------------------------------------------------------------------

def _uniform_log(n_items, count=4):
    users = np.repeat(0, n_items * count)
    item_ids = np.tile(np.arange(n_items), count)
    ts = np.arange(n_items * count)
    return InteractionDataset(users, np.sort(item_ids), ts, np.ones(n_items * count, dtype=np.int8))


def test_stratified_single_stratum_matches_unstratified():
    ranks = np.array([1, 3, 12, 7])
    truth = np.array([0, 1, 2, 3])
    strata = popularity_strata(_uniform_log(4))
    reports, omitted = M.stratified_ranking(ranks, truth, strata)
    merged_recall = sum(r.recall_at[10] * len(strata.items_in(s)) / 4
                        for s, r in [(k, v) for k, v in reports.items()])
    assert merged_recall == pytest.approx(M.recall_at_n(ranks, 10))


def test_stratified_empty_stratum_omitted():
    ranks = np.array([1, 2])
    truth = np.array([0, 1])  # both popular under tie-break
    strata = popularity_strata(_uniform_log(8))
    reports, omitted = M.stratified_ranking(ranks, truth, strata)
    assert "popular" in reports
    assert "long_tail" in omitted


def test_report_json_is_deterministic():
    r = M.MetricsReport(
        quant=M.QuantMetrics(0.5, 1.0, 2.0),
        ranking=M.RankingMetrics({5: 0.1, 10: 0.2}, {5: 0.05, 10: 0.06}))
    assert r.to_json() == r.to_json()
    assert "recall@5" in r.as_dict()
