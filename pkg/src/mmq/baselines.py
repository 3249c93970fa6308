"""Baseline tokenizers: residual quantization (k-means or VAE codebooks)
and optimized product quantization, each runnable under the
Modality-Aligned (quantize the concatenated embedding) or
Modality-Separated (quantize each modality independently) paradigm.

All distortions are per-dimension mean squared error, matching the
reconstruction-loss convention used across the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import EmbeddingDataset
from .tensor import (Adam, Mlp, MlpSpec, NumericError, ShapeError, Tensor,
                     frozen_indices, gather_rows, mse, stop_gradient)

MA, MS = "MA", "MS"


@dataclass
class Codebook:
    """K codewords of a fixed dimension, with lookup usage counters."""

    codewords: np.ndarray
    usage_counts: np.ndarray = None

    def __post_init__(self):
        self.codewords = np.asarray(self.codewords)
        if self.codewords.ndim != 2:
            raise ShapeError("codewords must be K x dim")
        if self.K < 1:
            raise ShapeError("codebook needs at least one codeword")
        if not np.all(np.isfinite(self.codewords)):
            raise NumericError("non-finite codewords")
        if self.usage_counts is None:
            self.usage_counts = np.zeros(self.K, dtype=np.int64)

    @property
    def K(self):
        return self.codewords.shape[0]

    @property
    def dim(self):
        return self.codewords.shape[1]

    def record_usage(self, indices):
        self.usage_counts += np.bincount(np.asarray(indices).ravel(), minlength=self.K)

    def reset_usage(self):
        self.usage_counts = np.zeros(self.K, dtype=np.int64)


def nearest_l2(points: np.ndarray, codewords: np.ndarray) -> np.ndarray:
    """Row-wise argmin squared L2 distance; ties resolve to the lowest index."""
    d2 = (np.sum(points * points, axis=1, keepdims=True)
          - 2.0 * points @ codewords.T
          + np.sum(codewords * codewords, axis=1)[None, :])
    return np.argmin(d2, axis=1)


def _sq_distortion(points, codewords, assign):
    diff = points - codewords[assign]
    return float(np.mean(diff * diff))


# --------------------------------------------------------------------------
# Lloyd k-means with k-means++ init and farthest-point empty-cluster repair
# --------------------------------------------------------------------------

@dataclass
class KmeansResult:
    codebook: Codebook
    assignments: np.ndarray
    distortion_history: list


def _kmeanspp_init(points, k, rng):
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=points.dtype)
    first = rng.integers(0, n)
    centroids[0] = points[first]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(0, n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centroids[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1))
    return centroids


def kmeans(points, k, iters=25, seed=0, init_centroids=None) -> KmeansResult:
    """Seeded k-means++ then Lloyd; per-iteration distortion never increases.

    Empty clusters are re-seeded to the point currently farthest from its
    assigned centroid. init_centroids warm-starts Lloyd (used by the
    rotation-alternating product quantizer).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeError("kmeans expects an N x d matrix")
    n = points.shape[0]
    if n < k:
        raise ShapeError(f"kmeans needs at least K={k} points, got {n}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    if init_centroids is None:
        centroids = _kmeanspp_init(points, k, rng)
    else:
        centroids = np.array(init_centroids, dtype=np.float64, copy=True)
        if centroids.shape != (k, points.shape[1]):
            raise ShapeError("init_centroids shape mismatch")

    history = []
    assign = None
    for _ in range(iters):
        assign = nearest_l2(points, centroids)
        dist = _sq_distortion(points, centroids, assign)
        if history:
            assert dist <= history[-1] * (1 + 1e-12) + 1e-12, \
                "k-means distortion increased"
        history.append(dist)

        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]

        empty = np.flatnonzero(~nonempty)
        if len(empty):
            errs = np.sum((points - centroids[assign]) ** 2, axis=1)
            far_order = np.argsort(-errs)
            for slot, pt in zip(empty, far_order):
                centroids[slot] = points[pt]

    assign = nearest_l2(points, centroids)
    final = _sq_distortion(points, centroids, assign)
    if history:
        assert final <= history[-1] * (1 + 1e-12) + 1e-12
    history.append(final)
    return KmeansResult(Codebook(centroids), assign, history)


# --------------------------------------------------------------------------
# Residual quantization
# --------------------------------------------------------------------------

@dataclass
class RqVaeOptions:
    latent_dim: int = 32
    hidden: tuple = (128,)
    epochs: int = 12
    batch_size: int = 256
    lr: float = 2e-3
    commitment: float = 0.25


@dataclass
class RqModel:
    levels: int
    mode: str                    # "kmeans" | "vae"
    codebooks: list
    encoder: Mlp | None = None
    decoder: Mlp | None = None
    commitment: float = 0.25
    input_dim: int = 0

    def __post_init__(self):
        dims = {cb.dim for cb in self.codebooks}
        if len(dims) > 1:
            raise ShapeError("all level codebooks must share a dimension")

    def encode(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.input_dim:
            raise ShapeError(f"expected dim {self.input_dim}, got {x.shape[1]}")
        if self.mode == "vae":
            return self.encoder(x).data
        return np.asarray(x, dtype=np.float64)

    def codes_and_recon(self, x: np.ndarray, record_usage=False):
        """(N x levels codes, reconstruction of x)."""
        z = self.encode(x)
        residual = z.astype(np.float64)
        zq = np.zeros_like(residual)
        codes = np.empty((x.shape[0], self.levels), dtype=np.int64)
        for t, cb in enumerate(self.codebooks):
            idx = nearest_l2(residual, cb.codewords.astype(np.float64))
            codes[:, t] = idx
            if record_usage:
                cb.record_usage(idx)
            sel = cb.codewords[idx].astype(np.float64)
            residual = residual - sel
            zq = zq + sel
        if self.mode == "vae":
            recon = self.decoder(zq.astype(np.float32)).data
        else:
            recon = zq
        return codes, recon

    def distortion(self, x: np.ndarray) -> float:
        _, recon = self.codes_and_recon(x)
        diff = np.asarray(x, dtype=np.float64) - recon
        return float(np.mean(diff * diff))


def _fit_rq_kmeans(points, levels, k, seed, iters):
    residual = np.asarray(points, dtype=np.float64)
    codebooks = []
    prev = None
    for t in range(levels):
        res = kmeans(residual, k, iters=iters, seed=seed + t)
        codebooks.append(res.codebook)
        dist = _sq_distortion(residual, res.codebook.codewords, res.assignments)
        if prev is not None:
            assert dist <= prev * (1 + 1e-9) + 1e-12, "residual distortion increased with depth"
        prev = dist
        residual = residual - res.codebook.codewords[res.assignments]
    return codebooks


def _fit_rq_vae(points, levels, k, seed, iters, opts: RqVaeOptions):
    points = np.asarray(points, dtype=np.float32)
    n, d = points.shape
    rng = np.random.default_rng(seed)
    enc = Mlp("rqvae.enc", MlpSpec((d, *opts.hidden, opts.latent_dim)), rng)
    dec = Mlp("rqvae.dec", MlpSpec((opts.latent_dim, *opts.hidden[::-1], d)), rng)

    first = points[:min(n, max(opts.batch_size, k))]
    z0 = enc(first).data.astype(np.float64)
    residual = z0
    cb_params = []
    for t in range(levels):
        res = kmeans(residual, k, iters=iters, seed=seed + t)
        cb_params.append(T.Parameter(res.codebook.codewords.astype(np.float32),
                                     f"rqvae.cb{t}"))
        residual = residual - res.codebook.codewords[res.assignments]

    params = enc.params + dec.params + cb_params
    opt = Adam(params, lr=opts.lr)
    order = np.arange(n)
    for _ in range(opts.epochs):
        rng.shuffle(order)
        for lo in range(0, n, opts.batch_size):
            batch = points[order[lo:lo + opts.batch_size]]
            loss = rq_vae_loss(enc, dec, cb_params, batch, opts.commitment)
            if not np.isfinite(loss.data):
                raise NumericError("non-finite loss while fitting the residual VAE")
            T.zero_grads(params)
            loss.backward()
            opt.step()

    codebooks = [Codebook(p.data.copy()) for p in cb_params]
    return enc, dec, codebooks


def rq_vae_loss(enc: Mlp, dec: Mlp, cb_params, batch: np.ndarray,
                commitment=0.25) -> Tensor:
    """Reconstruction + codebook + commitment terms over all residual levels."""
    x = T.as_tensor(batch)
    z = enc(x)
    residual = z
    zq_sum = None
    loss = None
    for p in cb_params:
        idx = frozen_indices(nearest_l2(residual.data, p.data))
        sel = gather_rows(p, idx)
        cb_term = T.tmean(T.square(T.sub(stop_gradient(residual), sel)))
        commit_term = T.tmean(T.square(T.sub(residual, stop_gradient(sel))))
        term = T.add(cb_term, T.mul(commit_term, commitment))
        loss = term if loss is None else T.add(loss, term)
        zq_sum = sel if zq_sum is None else T.add(zq_sum, sel)
        residual = T.sub(residual, stop_gradient(sel))
    dec_in = T.add(z, stop_gradient(T.sub(zq_sum, z)))
    recon = mse(dec(dec_in), x)
    return T.add(recon, loss)


def rq_fit(points, levels, k, mode="kmeans", seed=0, iters=25,
           vae_options: RqVaeOptions | None = None) -> RqModel:
    """Fit residual quantization; level t quantizes the residual after t-1."""
    points = np.asarray(points)
    if not np.all(np.isfinite(points)):
        raise NumericError("non-finite training points")
    if mode == "kmeans":
        cbs = _fit_rq_kmeans(points, levels, k, seed, iters)
        return RqModel(levels, mode, cbs, input_dim=points.shape[1])
    if mode == "vae":
        opts = vae_options or RqVaeOptions()
        enc, dec, cbs = _fit_rq_vae(points, levels, k, seed, iters, opts)
        return RqModel(levels, mode, cbs, encoder=enc, decoder=dec,
                       commitment=opts.commitment, input_dim=points.shape[1])
    raise ValueError(f"unknown rq mode {mode!r}")


# --------------------------------------------------------------------------
# (Optimized) product quantization
# --------------------------------------------------------------------------

@dataclass
class OpqModel:
    M: int
    codebooks: list
    rotation: np.ndarray
    input_dim: int = 0
    distortion_history: list = field(default_factory=list)

    @property
    def sub_dim(self):
        return self.input_dim // self.M

    def _blocks(self, y):
        return [y[:, m * self.sub_dim:(m + 1) * self.sub_dim] for m in range(self.M)]

    def codes_and_recon(self, x: np.ndarray, record_usage=False):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1] != self.input_dim:
            raise ShapeError(f"expected dim {self.input_dim}, got {x.shape[1]}")
        y = x @ self.rotation
        codes = np.empty((x.shape[0], self.M), dtype=np.int64)
        recon_rot = np.empty_like(y)
        for m, (block, cb) in enumerate(zip(self._blocks(y), self.codebooks)):
            idx = nearest_l2(block, cb.codewords)
            codes[:, m] = idx
            if record_usage:
                cb.record_usage(idx)
            recon_rot[:, m * self.sub_dim:(m + 1) * self.sub_dim] = cb.codewords[idx]
        return codes, recon_rot @ self.rotation.T

    def distortion(self, x) -> float:
        _, recon = self.codes_and_recon(x)
        diff = np.asarray(x, dtype=np.float64) - recon
        return float(np.mean(diff * diff))


def _check_rotation(r):
    gap = np.linalg.norm(r.T @ r - np.eye(r.shape[0]), ord="fro")
    assert gap <= 1e-4, f"rotation drifted from orthogonality ({gap:.2e})"


def opq_fit(points, m, k, rotate=False, iters=8, seed=0, kmeans_iters=15) -> OpqModel:
    """Product quantization; with rotate=True alternates per-block k-means on
    rotated data with an orthogonal Procrustes rotation update (SVD of the
    data/reconstruction cross-covariance). Distortion never increases across
    alternations (later k-means passes warm-start from the previous codebooks).
    """
    points = np.asarray(points, dtype=np.float64)
    n, d = points.shape
    if d % m != 0:
        raise ShapeError(f"dim {d} not divisible by {m} sub-vectors")
    sub = d // m
    rotation = np.eye(d)
    codebooks = [None] * m
    history = []

    n_rounds = iters if rotate else 1
    for it in range(n_rounds):
        y = points @ rotation
        recon_rot = np.empty_like(y)
        for b in range(m):
            block = y[:, b * sub:(b + 1) * sub]
            init = codebooks[b].codewords if codebooks[b] is not None else None
            res = kmeans(block, k, iters=kmeans_iters, seed=seed + b, init_centroids=init)
            codebooks[b] = res.codebook
            recon_rot[:, b * sub:(b + 1) * sub] = res.codebook.codewords[res.assignments]
        dist = float(np.mean((y - recon_rot) ** 2))
        if history:
            assert dist <= history[-1] * (1 + 1e-9) + 1e-12, \
                "product-quantization distortion increased"
        history.append(dist)
        if rotate:
            u, _, vt = np.linalg.svd(points.T @ recon_rot)
            rotation = u @ vt
            _check_rotation(rotation)

    return OpqModel(m, codebooks, rotation, input_dim=d, distortion_history=history)


# --------------------------------------------------------------------------
# Paradigm wrapper
# --------------------------------------------------------------------------

@dataclass
class BaselineTokenizer:
    """A fitted quantizer plus the fusion paradigm it was fitted under."""

    method: str                  # "rq_kmeans" | "rq_vae" | "opq"
    paradigm: str                # MA | MS
    models: dict                 # {"joint": m} or {"text": m, "vision": m}

    @property
    def id_length(self):
        if self.paradigm == MA:
            m = self.models["joint"]
            return m.levels if isinstance(m, RqModel) else m.M
        total = 0
        for m in (self.models["text"], self.models["vision"]):
            total += m.levels if isinstance(m, RqModel) else m.M
        return total

    def _parts(self):
        if self.paradigm == MA:
            return [("joint", self.models["joint"])]
        return [("text", self.models["text"]), ("vision", self.models["vision"])]

    def tokenize_batch(self, ds: EmbeddingDataset, record_usage=False) -> np.ndarray:
        cols = []
        for part, model in self._parts():
            if part == "joint":
                x = ds.concat_embeddings()
            elif part == "text":
                x = ds.text
            else:
                x = ds.vision
            codes, _ = model.codes_and_recon(np.asarray(x, dtype=np.float64),
                                             record_usage=record_usage)
            cols.append(codes)
        return np.concatenate(cols, axis=1)

    def tokenize(self, e_t, e_v) -> tuple:
        ds = EmbeddingDataset(np.array([0], dtype=np.uint64),
                              np.asarray(e_t, dtype=np.float32)[None, :],
                              np.asarray(e_v, dtype=np.float32)[None, :])
        return tuple(int(c) for c in self.tokenize_batch(ds)[0])

    def recon_loss(self, ds: EmbeddingDataset) -> float:
        """Per-dimension MSE over the paradigm's reconstruction targets."""
        total, dims = 0.0, 0
        for part, model in self._parts():
            if part == "joint":
                x = ds.concat_embeddings()
            elif part == "text":
                x = ds.text
            else:
                x = ds.vision
            x = np.asarray(x, dtype=np.float64)
            _, recon = model.codes_and_recon(x)
            total += float(np.sum((x - recon) ** 2))
            dims += x.size
        return total / dims

    def counts_per_slot(self) -> np.ndarray:
        rows = []
        for _, model in self._parts():
            for cb in model.codebooks:
                rows.append(cb.usage_counts.copy())
        return np.stack(rows)

    def reset_usage(self):
        for _, model in self._parts():
            for cb in model.codebooks:
                cb.reset_usage()


def fit_baseline(method: str, paradigm: str, ds: EmbeddingDataset, k: int,
                 levels_ma=6, levels_ms=(3, 3), seed=0,
                 vae_options: RqVaeOptions | None = None,
                 opq_rotate=None, kmeans_iters=20) -> BaselineTokenizer:
    """Fit one of the three baseline quantizers under MA or MS.

    MA quantizes the concatenated embedding with levels_ma levels (or M
    sub-vectors); MS fits one model per modality with levels_ms.
    """
    if paradigm not in (MA, MS):
        raise ValueError(f"unknown paradigm {paradigm!r}")

    def fit_one(x, depth, seed_off):
        if method == "rq_kmeans":
            return rq_fit(x, depth, k, mode="kmeans", seed=seed + seed_off,
                          iters=kmeans_iters)
        if method == "rq_vae":
            return rq_fit(x, depth, k, mode="vae", seed=seed + seed_off,
                          iters=kmeans_iters, vae_options=vae_options)
        if method == "opq":
            rotate = True if opq_rotate is None else opq_rotate
            return opq_fit(x, depth, k, rotate=rotate, seed=seed + seed_off,
                           kmeans_iters=kmeans_iters)
        raise ValueError(f"unknown baseline method {method!r}")

    if paradigm == MA:
        joint = fit_one(ds.concat_embeddings().astype(np.float64), levels_ma, 0)
        return BaselineTokenizer(method, MA, {"joint": joint})
    text = fit_one(ds.text.astype(np.float64), levels_ms[0], 0)
    vision = fit_one(ds.vision.astype(np.float64), levels_ms[1], 1000)
    return BaselineTokenizer(method, MS, {"text": text, "vision": vision})


# --------------------------------------------------------------------------
# Serialization (checkpoint container with a type tag)
# --------------------------------------------------------------------------

def _model_arrays(part: str, model):
    arrays = []
    if isinstance(model, RqModel):
        for t, cb in enumerate(model.codebooks):
            arrays.append((f"{part}.cb{t}", cb.codewords))
        if model.mode == "vae":
            for p in model.encoder.params + model.decoder.params:
                arrays.append((f"{part}.{p.name}", p.data))
    else:
        for t, cb in enumerate(model.codebooks):
            arrays.append((f"{part}.cb{t}", cb.codewords))
        arrays.append((f"{part}.rotation", model.rotation))
    return arrays


def _model_meta(model):
    if isinstance(model, RqModel):
        meta = {"type": "rq", "mode": model.mode, "levels": model.levels,
                "input_dim": model.input_dim, "commitment": model.commitment}
        if model.mode == "vae":
            meta["enc_dims"] = list(model.encoder.spec.layer_dims)
            meta["dec_dims"] = list(model.decoder.spec.layer_dims)
            meta["activation"] = model.encoder.spec.activation
        return meta
    return {"type": "opq", "M": model.M, "input_dim": model.input_dim}


def save_baseline(tokenizer: BaselineTokenizer, path) -> None:
    header = {"kind": "baseline", "method": tokenizer.method,
              "paradigm": tokenizer.paradigm,
              "parts": {part: _model_meta(m) for part, m in tokenizer._parts()}}
    arrays = []
    for part, m in tokenizer._parts():
        arrays.extend(_model_arrays(part, m))
    T.write_model_container(path, header, arrays)


def load_baseline(path) -> BaselineTokenizer:
    header, arrays = T.read_model_container(path)
    if header.get("kind") != "baseline":
        raise T.FormatError(f"not a baseline checkpoint: kind={header.get('kind')!r}")
    table = dict(arrays)
    models = {}
    for part, meta in header["parts"].items():
        if meta["type"] == "rq":
            cbs = []
            t = 0
            while f"{part}.cb{t}" in table:
                cbs.append(Codebook(table[f"{part}.cb{t}"]))
                t += 1
            enc = dec = None
            if meta["mode"] == "vae":
                rng = np.random.default_rng(0)
                enc = Mlp(f"{part}.rqvae.enc",
                          MlpSpec(tuple(meta["enc_dims"]), meta["activation"]), rng)
                dec = Mlp(f"{part}.rqvae.dec",
                          MlpSpec(tuple(meta["dec_dims"]), meta["activation"]), rng)
                for p in enc.params + dec.params:
                    p.data = table[p.name]
            models[part] = RqModel(meta["levels"], meta["mode"], cbs, encoder=enc,
                                   decoder=dec, commitment=meta.get("commitment", 0.25),
                                   input_dim=meta["input_dim"])
        else:
            cbs = []
            t = 0
            while f"{part}.cb{t}" in table:
                cbs.append(Codebook(table[f"{part}.cb{t}"]))
                t += 1
            models[part] = OpqModel(meta["M"], cbs, table[f"{part}.rotation"].astype(np.float64),
                                    input_dim=meta["input_dim"])
    return BaselineTokenizer(header["method"], header["paradigm"], models)
