"""Stage 1: the multimodal shared-specific tokenizer.

Shared experts consume the concatenated text+vision embedding; per-modality
specific experts are mixed by softmax gates. Each slot quantizes its latent
against a codebook by cosine similarity (argmax over angles), codebooks are
maintained by EMA over normalized assigned latents with dead-code restarts,
and the training objective combines straight-through reconstruction, an
auxiliary per-modality reconstruction, and a Gram-matrix orthogonality
penalty on flattened expert parameters.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .baselines import Codebook, kmeans, nearest_l2
from .data import EmbeddingDataset, MultimodalEmbedding
from .metrics import QuantMetrics, codebook_utilization, token_entropy
from .tensor import (Adam, Mlp, MlpSpec, NumericError, ShapeError, Tensor,
                     frozen_indices)


@dataclass
class TokenizerConfig:
    n_shared: int = 2
    n_text: int = 2
    n_vision: int = 2
    d_text: int = 256
    d_vision: int = 256
    latent_dim: int = 128
    codebook_size: int = 100
    expert_hidden: tuple = (512,)
    gate_hidden: tuple = (64,)
    decoder_hidden: tuple = (512,)
    activation: str = "relu"
    alpha: float = 12.0
    beta: float = 10.0
    gamma: float = 0.005
    ema_decay: float = 0.99
    dead_code_steps: int = 40
    shared_codebook: bool = False
    use_cosine: bool = True
    normalize_inputs: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.id_length < 1:
            raise ValueError("need at least one expert slot")
        if min(self.n_shared, self.n_text, self.n_vision) < 0:
            raise ValueError("expert counts must be >= 0")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")

    @property
    def id_length(self):
        return self.n_shared + self.n_text + self.n_vision

    def as_dict(self):
        d = asdict(self)
        for key in ("expert_hidden", "gate_hidden", "decoder_hidden"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("expert_hidden", "gate_hidden", "decoder_hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class TokenizerModel:
    """Stage-1 parameters: experts, gates, decoders, per-slot codebooks."""

    def __init__(self, cfg: TokenizerConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed)
        d_in = cfg.d_text + cfg.d_vision
        act = cfg.activation

        def mk(name, dims):
            return Mlp(name, MlpSpec(tuple(dims), act), rng, dtype)

        self.shared_experts = [mk(f"shared{i}", (d_in, *cfg.expert_hidden, cfg.latent_dim))
                               for i in range(cfg.n_shared)]
        self.text_experts = [mk(f"text{i}", (cfg.d_text, *cfg.expert_hidden, cfg.latent_dim))
                             for i in range(cfg.n_text)]
        self.vision_experts = [mk(f"vision{i}", (cfg.d_vision, *cfg.expert_hidden, cfg.latent_dim))
                               for i in range(cfg.n_vision)]

        self.gate_t = mk("gate_t", (cfg.d_text, *cfg.gate_hidden, cfg.n_text)) if cfg.n_text else None
        self.gate_v = mk("gate_v", (cfg.d_vision, *cfg.gate_hidden, cfg.n_vision)) if cfg.n_vision else None
        self.gate_bias_t = (T.Parameter(np.zeros((1, cfg.n_text), dtype=dtype), "gate_t.bias")
                            if cfg.n_text else None)
        self.gate_bias_v = (T.Parameter(np.zeros((1, cfg.n_vision), dtype=dtype), "gate_v.bias")
                            if cfg.n_vision else None)

        self.decoder = mk("decoder", (cfg.latent_dim, *cfg.decoder_hidden, d_in))
        self.decoder_t = mk("decoder_t", (cfg.latent_dim, *cfg.decoder_hidden, cfg.d_text))
        self.decoder_v = mk("decoder_v", (cfg.latent_dim, *cfg.decoder_hidden, cfg.d_vision))

        n_books = 1 if cfg.shared_codebook else cfg.id_length
        init = rng.normal(size=(cfg.codebook_size, cfg.latent_dim)).astype(dtype)
        if cfg.use_cosine:
            init = init / np.linalg.norm(init, axis=1, keepdims=True)
        self.codebooks = [Codebook(init.copy()) for _ in range(n_books)]
        self.ema_counts = [np.zeros(cfg.codebook_size, dtype=np.float64) for _ in range(n_books)]
        self.ema_sums = [np.zeros((cfg.codebook_size, cfg.latent_dim), dtype=np.float64)
                         for _ in range(n_books)]
        self.unused_steps = [np.zeros(cfg.codebook_size, dtype=np.int64) for _ in range(n_books)]
        self.codebooks_initialized = False

        self.slot_usage = np.zeros((cfg.id_length, cfg.codebook_size), dtype=np.int64)
        self.zero_latent_lookups = 0

    # ---- structure helpers ----

    def codebook_for_slot(self, slot) -> Codebook:
        return self.codebooks[0 if self.cfg.shared_codebook else slot]

    def expert_groups(self):
        return {"shared": self.shared_experts, "text": self.text_experts,
                "vision": self.vision_experts}

    def mlp_parameters(self):
        """All gradient-trained stage-1 parameters (codebooks excluded)."""
        params = []
        for mlp in (*self.shared_experts, *self.text_experts, *self.vision_experts,
                    *(m for m in (self.gate_t, self.gate_v) if m is not None),
                    self.decoder, self.decoder_t, self.decoder_v):
            params.extend(mlp.params)
        for b in (self.gate_bias_t, self.gate_bias_v):
            if b is not None:
                params.append(b)
        return params

    def encoder_parameters(self):
        params = []
        for mlp in (*self.shared_experts, *self.text_experts, *self.vision_experts,
                    *(m for m in (self.gate_t, self.gate_v) if m is not None)):
            params.extend(mlp.params)
        for b in (self.gate_bias_t, self.gate_bias_v):
            if b is not None:
                params.append(b)
        return params

    def n_expert_parameters(self):
        return sum(m.n_params() for g in self.expert_groups().values() for m in g)

    def reset_usage(self):
        self.slot_usage[:] = 0
        for cb in self.codebooks:
            cb.reset_usage()

    def prepare_inputs(self, e_t, e_v):
        e_t = np.asarray(e_t, dtype=self.dtype)
        e_v = np.asarray(e_v, dtype=self.dtype)
        if e_t.ndim == 1:
            e_t = e_t[None, :]
        if e_v.ndim == 1:
            e_v = e_v[None, :]
        if e_t.shape[1] != self.cfg.d_text or e_v.shape[1] != self.cfg.d_vision:
            raise ShapeError(
                f"modality dims ({e_t.shape[1]}, {e_v.shape[1]}) do not match model "
                f"({self.cfg.d_text}, {self.cfg.d_vision})")
        if self.cfg.normalize_inputs:
            for m in (e_t, e_v):
                n = np.linalg.norm(m, axis=1, keepdims=True)
                n[n == 0] = 1.0
                m /= n
        return e_t, e_v


@dataclass
class LatentBundle:
    """Per-batch latents, gates, fused and quantized representations."""

    e_t: np.ndarray
    e_v: np.ndarray
    z_shared: list
    z_text: list
    z_vision: list
    g_t: Tensor | None = None
    g_v: Tensor | None = None
    z: Tensor | None = None
    codes: np.ndarray | None = None          # B x l slot-ordered indices
    slot_codewords: list = field(default_factory=list)
    z_q: np.ndarray | None = None

    @property
    def latents(self):
        return [*self.z_shared, *self.z_text, *self.z_vision]


# --------------------------------------------------------------------------
# Forward operations
# --------------------------------------------------------------------------

def encode_experts(model: TokenizerModel, e_t, e_v) -> LatentBundle:
    """Run all experts; shared experts see the concatenated embedding."""
    e_t, e_v = model.prepare_inputs(e_t, e_v)
    et = T.as_tensor(e_t)
    ev = T.as_tensor(e_v)
    e = T.concat([et, ev], axis=1)
    return LatentBundle(
        e_t=e_t, e_v=e_v,
        z_shared=[m(e) for m in model.shared_experts],
        z_text=[m(et) for m in model.text_experts],
        z_vision=[m(ev) for m in model.vision_experts],
    )


def gate_weights(model: TokenizerModel, e_t, e_v):
    """Softmax gates over the specific experts of each modality."""
    e_t, e_v = model.prepare_inputs(e_t, e_v)
    g_t = g_v = None
    if model.gate_t is not None:
        g_t = T.softmax(T.add(model.gate_t(e_t), model.gate_bias_t))
    if model.gate_v is not None:
        g_v = T.softmax(T.add(model.gate_v(e_v), model.gate_bias_v))
    return g_t, g_v


def _gated_sum(latents, gates):
    out = None
    for i, z in enumerate(latents):
        zi = T.mul(z, T.slice_cols(gates, i, i + 1)) if gates is not None else z
        out = zi if out is None else T.add(out, zi)
    return out


def fuse(bundle: LatentBundle) -> Tensor:
    """z = sum(shared) + gated sum(text) + gated sum(vision)."""
    parts = []
    if bundle.z_shared:
        s = bundle.z_shared[0]
        for z in bundle.z_shared[1:]:
            s = T.add(s, z)
        parts.append(s)
    if bundle.z_text:
        parts.append(_gated_sum(bundle.z_text, bundle.g_t))
    if bundle.z_vision:
        parts.append(_gated_sum(bundle.z_vision, bundle.g_v))
    z = parts[0]
    for p in parts[1:]:
        z = T.add(z, p)
    bundle.z = z
    return z


def lookup_batch(z: np.ndarray, codebook: Codebook, use_cosine=True):
    """Code indices for each latent row; ties and zero rows go to index 0."""
    z = np.atleast_2d(np.asarray(z))
    if use_cosine:
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        zero = norms[:, 0] == 0
        n_zero = int(zero.sum())
        safe = np.where(norms == 0, 1.0, norms)
        cw = codebook.codewords
        cw_n = cw / np.linalg.norm(cw, axis=1, keepdims=True)
        sims = (z / safe) @ cw_n.T
        if n_zero:
            sims[zero] = 0.0
            sims[zero, 0] = 1.0
        idx = np.argmax(sims, axis=1)
        return idx, n_zero
    return nearest_l2(z.astype(np.float64), codebook.codewords.astype(np.float64)), 0


def cosine_lookup(z, codebook: Codebook, use_cosine=True):
    """(index, codeword) of the best-aligned codeword for a single latent.

    A zero latent maps to index 0 and emits a warning rather than failing.
    """
    idx, n_zero = lookup_batch(np.asarray(z), codebook, use_cosine)
    if n_zero:
        warnings.warn("zero-norm latent mapped to code 0", RuntimeWarning, stacklevel=2)
    i = int(idx[0])
    codebook.record_usage([i])
    return i, codebook.codewords[i].copy()


def quantize_bundle(model: TokenizerModel, bundle: LatentBundle):
    """Per-slot lookup plus the gate-weighted quantized fusion z_q."""
    if bundle.z is None:
        fuse(bundle)
    cfg = model.cfg
    codes = np.empty((bundle.e_t.shape[0], cfg.id_length), dtype=np.int64)
    bundle.slot_codewords = []
    gt = bundle.g_t.data if bundle.g_t is not None else None
    gv = bundle.g_v.data if bundle.g_v is not None else None
    z_q = np.zeros((bundle.e_t.shape[0], cfg.latent_dim), dtype=np.float64)
    for slot, z in enumerate(bundle.latents):
        cb = model.codebook_for_slot(slot)
        idx, n_zero = lookup_batch(z.data, cb, cfg.use_cosine)
        idx = frozen_indices(idx)
        model.zero_latent_lookups += n_zero
        cb.record_usage(idx)
        model.slot_usage[slot] += np.bincount(idx, minlength=cfg.codebook_size)
        codes[:, slot] = idx
        cw = cb.codewords[idx]
        bundle.slot_codewords.append(cw)
        if slot < cfg.n_shared:
            w = 1.0
        elif slot < cfg.n_shared + cfg.n_text:
            w = gt[:, slot - cfg.n_shared:slot - cfg.n_shared + 1]
        else:
            j = slot - cfg.n_shared - cfg.n_text
            w = gv[:, j:j + 1]
        z_q = z_q + w * cw
    bundle.codes = codes
    bundle.z_q = z_q.astype(z.data.dtype)
    return bundle.z_q, codes


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------

def _straight_through(z: Tensor, z_q_values) -> Tensor:
    return T.ste_compose(z, np.asarray(z_q_values, dtype=z.data.dtype))


def recon_loss(model: TokenizerModel, bundle: LatentBundle) -> Tensor:
    """Per-dimension MSE between [e_t, e_v] and the decoded straight-through
    fusion; no gradient reaches the codebooks."""
    target = np.concatenate([bundle.e_t, bundle.e_v], axis=1)
    dec_in = _straight_through(bundle.z, bundle.z_q)
    return T.mse(model.decoder(dec_in), target)


def aux_loss(model: TokenizerModel, bundle: LatentBundle) -> Tensor:
    """Modality-specific reconstruction from the unweighted sums of each
    modality's straight-through latents."""
    cfg = model.cfg
    total = None
    groups = (
        (bundle.z_text, bundle.slot_codewords[cfg.n_shared:cfg.n_shared + cfg.n_text],
         model.decoder_t, bundle.e_t),
        (bundle.z_vision, bundle.slot_codewords[cfg.n_shared + cfg.n_text:],
         model.decoder_v, bundle.e_v),
    )
    for latents, codewords, dec, target in groups:
        if not latents:
            continue
        s = None
        for z, cw in zip(latents, codewords):
            zi = _straight_through(z, cw)
            s = zi if s is None else T.add(s, zi)
        term = T.mse(dec(s), target)
        total = term if total is None else T.add(total, term)
    if total is None:
        total = T.as_tensor(np.zeros((), dtype=model.dtype))
    return total


def ortho_loss(model: TokenizerModel) -> Tensor:
    """Sum over expert groups of ||Vn Vn^T - I||_F^2 with Vn the row-normalized
    flattened expert parameter vectors; singleton groups contribute zero."""
    total = None
    for name, group in model.expert_groups().items():
        if len(group) < 2:
            continue
        rows = []
        for m in group:
            v = m.param_vector()
            nrm = float(np.linalg.norm(v.data))
            if nrm == 0.0:
                raise NumericError(f"zero-norm parameter vector in {name} experts")
            rows.append(v)
        v_mat = T.concat(rows, axis=0)
        vn = T.l2_normalize_rows(v_mat)
        gram = T.matmul(vn, T.transpose(vn))
        eye = np.eye(len(group), dtype=gram.data.dtype)
        term = T.tsum(T.square(T.sub(gram, eye)))
        total = term if total is None else T.add(total, term)
    if total is None:
        total = T.as_tensor(np.zeros((), dtype=model.dtype))
    return total


def forward_batch(model: TokenizerModel, e_t, e_v) -> LatentBundle:
    """encode -> gates -> fuse -> quantize, ready for the losses."""
    bundle = encode_experts(model, e_t, e_v)
    bundle.g_t, bundle.g_v = gate_weights(model, e_t, e_v)
    fuse(bundle)
    quantize_bundle(model, bundle)
    return bundle


def total_loss(model: TokenizerModel, e_t, e_v):
    """alpha * recon + beta * aux + gamma * ortho; returns (loss, parts, bundle)."""
    cfg = model.cfg
    bundle = forward_batch(model, e_t, e_v)
    r = recon_loss(model, bundle)
    a = aux_loss(model, bundle)
    o = ortho_loss(model)
    loss = T.add(T.add(T.mul(r, cfg.alpha), T.mul(a, cfg.beta)), T.mul(o, cfg.gamma))
    parts = {"recon": float(r.data), "aux": float(a.data), "ortho": float(o.data)}
    return loss, parts, bundle


# --------------------------------------------------------------------------
# EMA codebook maintenance
# --------------------------------------------------------------------------

def _normalize_rows(x):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    n[n == 0] = 1.0
    return x / n


def ema_codebook_update(model: TokenizerModel, bundle: LatentBundle,
                        rng: np.random.Generator | None = None):
    """Cluster-size/sum EMAs over (normalized) assigned latents; codewords
    unused for dead_code_steps consecutive updates are re-seeded to a random
    latent from the current batch."""
    cfg = model.cfg
    rng = rng or np.random.default_rng(0)
    decay = cfg.ema_decay
    n_books = len(model.codebooks)

    batch_counts = [np.zeros(cfg.codebook_size) for _ in range(n_books)]
    batch_sums = [np.zeros((cfg.codebook_size, cfg.latent_dim)) for _ in range(n_books)]
    batch_latents = [[] for _ in range(n_books)]
    for slot, z in enumerate(bundle.latents):
        b = 0 if cfg.shared_codebook else slot
        lat = z.data.astype(np.float64)
        if cfg.use_cosine:
            lat = _normalize_rows(lat)
        idx = bundle.codes[:, slot]
        batch_counts[b] += np.bincount(idx, minlength=cfg.codebook_size)
        batch_sums[b] += T._scatter_rows_sum(cfg.codebook_size, idx, lat)
        batch_latents[b].append(lat)

    for b in range(n_books):
        cb = model.codebooks[b]
        model.ema_counts[b] = decay * model.ema_counts[b] + (1 - decay) * batch_counts[b]
        model.ema_sums[b] = decay * model.ema_sums[b] + (1 - decay) * batch_sums[b]
        active = model.ema_counts[b] > 1e-8
        means = model.ema_sums[b][active] / model.ema_counts[b][active, None]
        if cfg.use_cosine:
            means = _normalize_rows(means)
        cb.codewords[active] = means.astype(cb.codewords.dtype)

        used_now = batch_counts[b] > 0
        model.unused_steps[b] = np.where(used_now, 0, model.unused_steps[b] + 1)
        dead = np.flatnonzero(model.unused_steps[b] >= cfg.dead_code_steps)
        if len(dead):
            pool = np.concatenate(batch_latents[b], axis=0)
            picks = rng.integers(0, pool.shape[0], size=len(dead))
            fresh = pool[picks]
            cb.codewords[dead] = fresh.astype(cb.codewords.dtype)
            model.ema_counts[b][dead] = 1.0 - decay if decay < 1 else 1.0
            model.ema_sums[b][dead] = fresh * model.ema_counts[b][dead, None]
            model.unused_steps[b][dead] = 0


def init_codebooks_from_batch(model: TokenizerModel, bundle: LatentBundle, seed=0):
    """Seed codewords with k-means centroids of the first batch's latents."""
    cfg = model.cfg
    per_book = [[] for _ in model.codebooks]
    for slot, z in enumerate(bundle.latents):
        b = 0 if cfg.shared_codebook else slot
        lat = z.data.astype(np.float64)
        if cfg.use_cosine:
            lat = _normalize_rows(lat)
        per_book[b].append(lat)
    for b, chunks in enumerate(per_book):
        pts = np.concatenate(chunks, axis=0)
        if pts.shape[0] < cfg.codebook_size:
            raise ShapeError(
                f"first batch too small to seed {cfg.codebook_size} codes "
                f"({pts.shape[0]} latents); raise batch_size")
        res = kmeans(pts, cfg.codebook_size, iters=10, seed=seed + b)
        cw = res.codebook.codewords
        if cfg.use_cosine:
            cw = _normalize_rows(cw)
        model.codebooks[b].codewords = cw.astype(model.dtype)
        model.ema_counts[b][:] = 0.0
        model.ema_sums[b][:] = 0.0
    model.codebooks_initialized = True


# --------------------------------------------------------------------------
# Training and tokenization
# --------------------------------------------------------------------------

def train_stage1(model: TokenizerModel, dataset: EmbeddingDataset, epochs=8,
                 batch_size=256, lr=2e-3, log_fn=None):
    """Adam on the MLP parameters, EMA on the codebooks; codebooks seeded by
    k-means on the first batch's latents. Returns per-epoch QuantMetrics."""
    cfg = model.cfg
    params = model.mlp_parameters()
    opt = Adam(params, lr=lr)
    rng = np.random.default_rng((cfg.seed, 11))
    n = dataset.n_items
    order = np.arange(n)
    reports = []
    for epoch in range(epochs):
        rng.shuffle(order)
        model.reset_usage()
        recon_sum, seen = 0.0, 0
        for lo in range(0, n, batch_size):
            rows = order[lo:lo + batch_size]
            e_t, e_v = dataset.text[rows], dataset.vision[rows]
            if not model.codebooks_initialized:
                probe = encode_experts(model, e_t, e_v)
                init_codebooks_from_batch(model, probe, seed=cfg.seed)
            loss, parts, bundle = total_loss(model, e_t, e_v)
            if not np.isfinite(loss.data):
                raise NumericError(
                    f"non-finite stage-1 loss at epoch {epoch} batch {lo // batch_size}: {parts}")
            T.zero_grads(params)
            loss.backward()
            opt.step()
            ema_codebook_update(model, bundle, rng)
            recon_sum += parts["recon"] * len(rows)
            seen += len(rows)
        report = QuantMetrics(
            recon_loss=recon_sum / max(seen, 1),
            utilization=codebook_utilization(model.slot_usage),
            entropy=token_entropy(model.slot_usage),
        )
        reports.append(report)
        if log_fn:
            log_fn(epoch, report)
    return reports


def tokenize(model: TokenizerModel, item) -> tuple:
    """Deterministic semantic ID for one item (or an (e_t, e_v) pair)."""
    if isinstance(item, MultimodalEmbedding):
        e_t, e_v = item.e_t, item.e_v
    else:
        e_t, e_v = item
    codes = tokenize_batch(model, np.asarray(e_t)[None, :], np.asarray(e_v)[None, :])
    return tuple(int(c) for c in codes[0])


def tokenize_batch(model: TokenizerModel, e_t, e_v) -> np.ndarray:
    """Semantic IDs for a batch; records slot usage counters."""
    bundle = encode_experts(model, e_t, e_v)
    bundle.g_t, bundle.g_v = gate_weights(model, e_t, e_v)
    fuse(bundle)
    quantize_bundle(model, bundle)
    return bundle.codes


def tokenize_dataset(model: TokenizerModel, ds: EmbeddingDataset,
                     batch_size=512) -> np.ndarray:
    out = np.empty((ds.n_items, model.cfg.id_length), dtype=np.int64)
    for lo in range(0, ds.n_items, batch_size):
        hi = min(lo + batch_size, ds.n_items)
        out[lo:hi] = tokenize_batch(model, ds.text[lo:hi], ds.vision[lo:hi])
    return out


def eval_quant_metrics(model: TokenizerModel, ds: EmbeddingDataset,
                       batch_size=512) -> QuantMetrics:
    """Reconstruction loss, utilization, and entropy over a dataset using the
    frozen model; usage counters are reset first."""
    model.reset_usage()
    recon_sum, seen = 0.0, 0
    for lo in range(0, ds.n_items, batch_size):
        hi = min(lo + batch_size, ds.n_items)
        bundle = forward_batch(model, ds.text[lo:hi], ds.vision[lo:hi])
        r = recon_loss(model, bundle)
        recon_sum += float(r.data) * (hi - lo)
        seen += hi - lo
    return QuantMetrics(recon_loss=recon_sum / max(seen, 1),
                        utilization=codebook_utilization(model.slot_usage),
                        entropy=token_entropy(model.slot_usage))


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

def _named_arrays(model: TokenizerModel):
    arrays = [(p.name, p.data) for p in model.mlp_parameters()]
    for b, cb in enumerate(model.codebooks):
        arrays.append((f"codebook{b}", cb.codewords))
        arrays.append((f"codebook{b}.ema_counts", model.ema_counts[b].reshape(1, -1)))
        arrays.append((f"codebook{b}.ema_sums", model.ema_sums[b]))
        arrays.append((f"codebook{b}.unused", model.unused_steps[b].reshape(1, -1).astype(np.float64)))
    return arrays


def save_tokenizer(model: TokenizerModel, path, stage=1, extra_header=None):
    header = {"kind": "tokenizer", "stage": stage, "config": model.cfg.as_dict()}
    if extra_header:
        header.update(extra_header)
    T.write_model_container(path, header, _named_arrays(model))


def load_tokenizer(path):
    header, arrays = T.read_model_container(path)
    if header.get("kind") != "tokenizer":
        raise T.FormatError(f"not a tokenizer checkpoint: kind={header.get('kind')!r}")
    cfg = TokenizerConfig.from_dict(header["config"])
    model = TokenizerModel(cfg)
    table = dict(arrays)
    for p in model.mlp_parameters():
        if p.name not in table:
            raise T.FormatError(f"checkpoint missing parameter {p.name!r}")
        arr = table[p.name]
        if arr.shape != p.data.shape:
            raise ShapeError(f"{p.name}: checkpoint shape {arr.shape} != model {p.data.shape}")
        p.data = arr.astype(model.dtype)
    for b in range(len(model.codebooks)):
        model.codebooks[b].codewords = table[f"codebook{b}"].astype(model.dtype)
        model.ema_counts[b] = table[f"codebook{b}.ema_counts"].ravel().astype(np.float64)
        model.ema_sums[b] = table[f"codebook{b}.ema_sums"].astype(np.float64)
        model.unused_steps[b] = table[f"codebook{b}.unused"].ravel().astype(np.int64)
    model.codebooks_initialized = True
    return model, header
