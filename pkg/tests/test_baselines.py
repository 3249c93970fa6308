from itertools import combinations

import numpy as np
import pytest

from mmq import baselines as B
from mmq import tensor as T
from mmq.data import EmbeddingDataset


def _ds(rng, n, d_t, d_v):
    return EmbeddingDataset(np.arange(n, dtype=np.uint64),
                            rng.normal(size=(n, d_t)).astype(np.float32),
                            rng.normal(size=(n, d_v)).astype(np.float32))


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def _best_two_partition_centroids(points):
    """Exhaustive oracle: best SSE over all 2-partitions of the points."""
    n = len(points)
    best, best_c = np.inf, None
    for r in range(1, n // 2 + 1):
        for left in combinations(range(n), r):
            mask = np.zeros(n, dtype=bool)
            mask[list(left)] = True
            c1, c2 = points[mask].mean(axis=0), points[~mask].mean(axis=0)
            sse = np.sum((points[mask] - c1) ** 2) + np.sum((points[~mask] - c2) ** 2)
            if sse < best:
                best, best_c = sse, sorted([c1.tolist(), c2.tolist()])
    return best_c


def test_kmeans_matches_exhaustive_two_partition_oracle():
    points = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]])
    oracle = _best_two_partition_centroids(points)
    res = B.kmeans(points, 2, iters=10, seed=0)
    got = sorted(res.codebook.codewords.tolist())
    assert np.allclose(got, oracle)
    assert np.allclose(got, [[0.05, 0.0], [5.05, 5.0]])


def test_kmeans_k_equals_n_zero_distortion():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(6, 3))
    res = B.kmeans(pts, 6, iters=8, seed=2)
    assert res.distortion_history[-1] <= 1e-12


def test_kmeans_duplicates_single_cluster():
    pts = np.tile([[2.0, 3.0]], (5, 1))
    res = B.kmeans(pts, 1, iters=3, seed=0)
    assert np.allclose(res.codebook.codewords, [[2.0, 3.0]])
    assert res.distortion_history[-1] == 0.0


def test_kmeans_rejects_too_few_points():
    with pytest.raises(T.ShapeError):
        B.kmeans(np.zeros((3, 2)), 4)


def test_kmeans_distortion_monotone_every_run():
    rng = np.random.default_rng(0)
    for seed in range(5):
        pts = rng.normal(size=(80, 5))
        res = B.kmeans(pts, 7, iters=15, seed=seed)
        h = res.distortion_history
        assert all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(h, h[1:]))


def test_kmeans_deterministic_per_seed():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(50, 4))
    a = B.kmeans(pts, 5, iters=10, seed=9)
    b = B.kmeans(pts, 5, iters=10, seed=9)
    assert np.array_equal(a.codebook.codewords, b.codebook.codewords)


def test_kmeans_empty_cluster_repair():
    # two far points and a tight cluster; forcing K=3 with an adversarial
    # warm start leaves a centroid empty, which must be re-seeded
    pts = np.array([[0.0], [0.01], [0.02], [10.0], [20.0]])
    init = np.array([[0.0], [0.011], [100.0]])
    res = B.kmeans(pts, 3, iters=10, seed=0, init_centroids=init)
    counts = np.bincount(res.assignments, minlength=3)
    assert (counts > 0).all()


# ---------------------------------------------------------------------------
# residual quantization
# ---------------------------------------------------------------------------

def test_rq_exact_decomposition_1d():
    pts = np.array([[0.0], [1.0], [10.0], [11.0]])
    model = B.rq_fit(pts, levels=2, k=2, mode="kmeans", seed=0)
    assert sorted(model.codebooks[0].codewords.ravel().tolist()) == [0.5, 10.5]
    assert sorted(model.codebooks[1].codewords.ravel().tolist()) == [-0.5, 0.5]
    assert model.distortion(pts) <= 1e-18


def test_rq_single_level_equals_kmeans():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(60, 4))
    model = B.rq_fit(pts, levels=1, k=6, mode="kmeans", seed=7, iters=12)
    km = B.kmeans(pts, 6, iters=12, seed=7)
    assert np.array_equal(model.codebooks[0].codewords, km.codebook.codewords)


def test_rq_distortion_monotone_in_levels():
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(300, 8))
    d1 = B.rq_fit(pts, 1, 8, seed=0).distortion(pts)
    d2 = B.rq_fit(pts, 2, 8, seed=0).distortion(pts)
    d3 = B.rq_fit(pts, 3, 8, seed=0).distortion(pts)
    assert d3 <= d2 <= d1


def test_rq_requantizing_reconstruction_is_idempotent():
    pts = np.array([[0.0], [1.0], [10.0], [11.0]])
    model = B.rq_fit(pts, levels=2, k=2, mode="kmeans", seed=0)
    codes, recon = model.codes_and_recon(pts)
    codes2, _ = model.codes_and_recon(recon)
    assert np.array_equal(codes, codes2)


def test_rq_rejects_non_finite():
    with pytest.raises(T.NumericError):
        B.rq_fit(np.array([[np.nan]]), 1, 1)


def test_rq_vae_trains_and_reconstructs():
    rng = np.random.default_rng(0)
    centers = rng.normal(size=(4, 6)) * 3
    pts = (centers[rng.integers(0, 4, 400)]
           + 0.1 * rng.normal(size=(400, 6))).astype(np.float32)
    opts = B.RqVaeOptions(latent_dim=4, hidden=(16,), epochs=15, batch_size=100, lr=3e-3)
    model = B.rq_fit(pts, levels=2, k=4, mode="vae", seed=0, vae_options=opts)
    baseline_var = float(np.mean((pts - pts.mean(axis=0)) ** 2))
    assert model.distortion(pts) < 0.5 * baseline_var
    codes, recon = model.codes_and_recon(pts)
    assert codes.shape == (400, 2)


def test_rq_vae_loss_grad_check():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(6, 5))
    enc = T.Mlp("enc", T.MlpSpec((5, 7, 3)), rng, dtype=np.float64)
    dec = T.Mlp("dec", T.MlpSpec((3, 7, 5)), rng, dtype=np.float64)
    cbs = [T.Parameter(rng.normal(size=(4, 3)), f"cb{t}") for t in range(2)]
    params = enc.params + dec.params + cbs
    err = T.grad_check(lambda: B.rq_vae_loss(enc, dec, cbs, pts), params,
                       eps=1e-5, max_coords_per_param=8)
    assert err <= 1e-3


# ---------------------------------------------------------------------------
# product quantization
# ---------------------------------------------------------------------------

def test_opq_m1_reduces_to_kmeans():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(100, 4))
    model = B.opq_fit(pts, 1, 8, rotate=False, seed=3, kmeans_iters=20)
    km = B.kmeans(pts, 8, iters=20, seed=3)
    assert np.allclose(model.codebooks[0].codewords, km.codebook.codewords)


def test_opq_axis_aligned_rotation_matches_plain_pq():
    rng = np.random.default_rng(4)
    pts = np.concatenate([rng.normal(size=(400, 2)) @ np.diag([3.0, 1.0]),
                          rng.normal(size=(400, 2)) @ np.diag([1.0, 2.0])], axis=1)
    plain = B.opq_fit(pts, 2, 8, rotate=False, seed=0)
    rotated = B.opq_fit(pts, 2, 8, rotate=True, iters=6, seed=0)
    assert rotated.distortion(pts) <= plain.distortion(pts) * 1.05


def test_opq_rotation_helps_on_correlated_data():
    rng = np.random.default_rng(5)
    mix = rng.normal(size=(8, 8)) * 0.6 + np.eye(8)
    pts = rng.normal(size=(500, 8)) @ mix
    plain = B.opq_fit(pts, 4, 8, rotate=False, seed=1)
    rotated = B.opq_fit(pts, 4, 8, rotate=True, iters=8, seed=1)
    assert rotated.distortion(pts) <= plain.distortion(pts)


def test_opq_rotation_stays_orthogonal():
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(300, 6))
    model = B.opq_fit(pts, 3, 4, rotate=True, iters=6, seed=0)
    gap = np.linalg.norm(model.rotation.T @ model.rotation - np.eye(6))
    assert gap <= 1e-4


def test_opq_indivisible_dim_rejected():
    with pytest.raises(T.ShapeError):
        B.opq_fit(np.zeros((10, 5)), 2, 2)


def test_opq_distortion_monotone_across_alternations():
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(400, 8)) @ (rng.normal(size=(8, 8)) * 0.4 + np.eye(8))
    model = B.opq_fit(pts, 4, 6, rotate=True, iters=10, seed=2)
    h = model.distortion_history
    assert all(b <= a * (1 + 1e-9) + 1e-12 for a, b in zip(h, h[1:]))


# ---------------------------------------------------------------------------
# paradigm wrapper
# ---------------------------------------------------------------------------

def test_ms_rq_id_length_six():
    rng = np.random.default_rng(8)
    ds = _ds(rng, 120, 6, 6)
    model = B.fit_baseline("rq_kmeans", "MS", ds, k=4, levels_ms=(3, 3), seed=0)
    assert model.id_length == 6
    sid = model.tokenize(ds.text[0], ds.vision[0])
    assert len(sid) == 6


def test_ma_opq_id_length_six():
    rng = np.random.default_rng(9)
    ds = _ds(rng, 150, 6, 6)
    model = B.fit_baseline("opq", "MA", ds, k=4, levels_ma=6, seed=0)
    assert model.id_length == 6
    assert len(model.tokenize(ds.text[0], ds.vision[0])) == 6


def test_item_at_centroid_gets_that_code():
    rng = np.random.default_rng(10)
    pts = rng.normal(size=(50, 4))
    km = B.kmeans(pts, 5, iters=10, seed=0)
    for j in range(5):
        idx = B.nearest_l2(km.codebook.codewords[j][None, :], km.codebook.codewords)
        assert idx[0] == j


def test_ms_tokens_invariant_to_other_modality():
    rng = np.random.default_rng(11)
    ds = _ds(rng, 100, 5, 5)
    model = B.fit_baseline("rq_kmeans", "MS", ds, k=4, levels_ms=(2, 2), seed=0)
    e_t = ds.text[3]
    codes_a = model.tokenize(e_t, ds.vision[3])
    codes_b = model.tokenize(e_t, rng.normal(size=5).astype(np.float32))
    assert codes_a[:2] == codes_b[:2]  # text half unchanged


def test_tokenize_dim_mismatch_rejected():
    rng = np.random.default_rng(12)
    ds = _ds(rng, 60, 4, 4)
    model = B.fit_baseline("rq_kmeans", "MA", ds, k=4, levels_ma=2, seed=0)
    with pytest.raises(T.ShapeError):
        model.models["joint"].codes_and_recon(np.zeros((1, 5)))


def test_baseline_usage_counts_increment():
    rng = np.random.default_rng(13)
    ds = _ds(rng, 80, 4, 4)
    model = B.fit_baseline("rq_kmeans", "MA", ds, k=4, levels_ma=2, seed=0)
    model.reset_usage()
    model.tokenize_batch(ds, record_usage=True)
    counts = model.counts_per_slot()
    assert counts.shape == (2, 4)
    assert counts.sum() == 160  # 80 items x 2 slots


def test_baseline_save_load_reproduces_codes(tmp_path):
    rng = np.random.default_rng(14)
    ds = _ds(rng, 90, 6, 6)
    for method in ("rq_kmeans", "rq_vae", "opq"):
        model = B.fit_baseline(
            method, "MS", ds, k=4, levels_ms=(2, 2), seed=0,
            vae_options=B.RqVaeOptions(latent_dim=4, hidden=(8,), epochs=2, batch_size=32))
        codes = model.tokenize_batch(ds)
        path = tmp_path / f"{method}.mmqc"
        B.save_baseline(model, path)
        back = B.load_baseline(path)
        assert np.array_equal(back.tokenize_batch(ds), codes)
