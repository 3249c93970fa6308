"""Stage 2: behavior-aware fine-tuning through differentiable soft indices.

The hard code lookup is replaced by a straight-through composition of the
softmax over similarity logits (cosine by default, negative squared L2 for
residual-VAE levels) with the one-hot argmax: the forward pass is the exact
hard lookup, while gradients flow through the soft weights into encoders,
gates, and codebooks. A minimal retrieval head (per-slot embedding tables,
mean-pooled user history, dot-product scoring, in-batch softmax) supplies
the downstream objective; the joint loss adds the stage-1 reconstruction
terms scaled by alpha'/beta' to preserve content information.

Candidate items run the full soft path every batch. User histories are, by
default, looked up through per-epoch code snapshots (their head-table rows
still train); soft_history=True routes them through the soft path too, at
the cost of tokenizing every history item per batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import tokenizer as tok
from .baselines import BaselineTokenizer, RqModel, nearest_l2
from .data import EmbeddingDataset, InteractionDataset
from .metrics import RankingMetrics, ranking_metrics, rank_of_target
from .tensor import (Adam, NumericError, ShapeError, Tensor, frozen_indices,
                     ste_compose)


@dataclass
class FinetuneConfig:
    alpha_prime: float = 0.5
    beta_prime: float = 0.5
    tau: float = 1.0
    lr: float = 3e-3
    epochs: int = 5
    batch_size: int = 256
    pairs_per_user: int = 2
    history_len: int = 10
    d_repr: int = 64
    train_encoders: bool = True
    train_decoders: bool = True
    train_codebooks: bool = True
    soft_history: bool = False
    eval_n: tuple = (5, 10)
    recon_holdout_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.alpha_prime, self.beta_prime) < 0:
            raise ValueError("alpha'/beta' must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")


@dataclass
class SoftIndexResult:
    """Similarity logits, their softmax, the one-hot argmax, and the
    straight-through composition whose forward equals the one-hot exactly."""

    p: Tensor
    soft: Tensor
    hard: np.ndarray
    ind: Tensor
    tau: float

    @property
    def hard_index(self):
        return np.argmax(self.hard, axis=1)


def soft_indices(z, codewords, tau=1.0, metric="cosine") -> SoftIndexResult:
    """Differentiable indices of z against a codebook.

    z: (B, d) latents (Tensor or array); codewords: (K, d) Tensor (pass the
    Parameter to train the codebook) or array. Gradients flow through the
    softmax only; the argmax is tau-invariant.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    z = T.as_tensor(z)
    cw = T.as_tensor(codewords)
    if z.data.ndim == 1:
        z = T.reshape(z, (1, z.data.size))
    if z.data.shape[1] != cw.data.shape[1]:
        raise ShapeError(f"latent dim {z.data.shape[1]} != codeword dim {cw.data.shape[1]}")
    if metric == "cosine":
        if np.any(np.linalg.norm(z.data, axis=1) == 0):
            raise NumericError("zero-norm latent in soft_indices")
        if np.any(np.linalg.norm(cw.data, axis=1) == 0):
            raise NumericError("zero-norm codeword in soft_indices")
        p = T.cosine_logits_t(z, cw)
    elif metric == "l2":
        zz = T.tsum(T.mul(z, z), axis=1, keepdims=True)
        cc = T.reshape(T.tsum(T.mul(cw, cw), axis=1, keepdims=True), (1, cw.data.shape[0]))
        cross = T.matmul(z, T.transpose(cw))
        p = T.sub(T.mul(cross, 2.0), T.add(zz, cc))  # -(||z-c||^2)
    else:
        raise ValueError(f"unknown metric {metric!r}")

    soft = T.softmax(T.mul(p, 1.0 / tau))
    idx = frozen_indices(np.argmax(p.data, axis=1))
    hard = np.zeros_like(p.data)
    hard[np.arange(hard.shape[0]), idx] = 1.0
    ind = ste_compose(soft, hard)
    return SoftIndexResult(p=p, soft=soft, hard=hard, ind=ind, tau=tau)


# --------------------------------------------------------------------------
# Retrieval head
# --------------------------------------------------------------------------

class RetrievalHead:
    """Per-slot embedding tables over code indices; items are represented by
    the sum of their slots' rows, users by the mean of their history items."""

    def __init__(self, n_slots, codebook_size, d_repr=64, history_len=10, seed=0):
        rng = np.random.default_rng(seed)
        self.d_repr = d_repr
        self.history_len = history_len
        self.tables = [
            T.Parameter(rng.normal(scale=0.1, size=(codebook_size, d_repr)).astype(np.float32),
                        f"head.table{i}")
            for i in range(n_slots)
        ]

    @property
    def n_slots(self):
        return len(self.tables)

    def item_reprs_hard(self, codes: np.ndarray) -> np.ndarray:
        """Exact table-lookup representations for (N, n_slots) codes."""
        if codes.shape[1] != self.n_slots:
            raise ShapeError(f"expected {self.n_slots} code slots, got {codes.shape[1]}")
        out = np.zeros((codes.shape[0], self.d_repr), dtype=np.float64)
        for i, table in enumerate(self.tables):
            out += table.data[codes[:, i]]
        return out

    def history_reprs(self, hist_codes: np.ndarray) -> Tensor:
        """Mean over the history axis of summed table rows; (B, H, n_slots)
        codes -> (B, d_repr). Differentiable in the tables."""
        total = None
        for i, table in enumerate(self.tables):
            term = T.gather_rows(table, hist_codes[:, :, i])
            total = term if total is None else T.add(total, term)
        return T.tmean(total, axis=1)


def item_repr(head: RetrievalHead, slot_results) -> Tensor:
    """Sum over slots of ind_i @ E_i; forward equals hard lookup exactly."""
    if len(slot_results) != head.n_slots:
        raise ShapeError(f"expected {head.n_slots} slot results, got {len(slot_results)}")
    out = None
    for res, table in zip(slot_results, head.tables):
        term = T.matmul(res.ind, table)
        out = term if out is None else T.add(out, term)
    return out


def inbatch_softmax_loss(scores: Tensor) -> Tensor:
    """Cross-entropy where row i's positive is column i."""
    b = scores.data.shape[0]
    if b < 2:
        raise ValueError("in-batch softmax needs a batch of at least 2")
    lse = T.logsumexp(scores, axis=-1)
    pos = T.take_per_row(scores, np.arange(b))
    return T.tmean(T.sub(lse, pos))


def retrieval_loss(user_reprs: Tensor, pos_reprs: Tensor) -> Tensor:
    """In-batch softmax cross-entropy over dot-product scores."""
    scores = T.matmul(user_reprs, T.transpose(pos_reprs))
    return inbatch_softmax_loss(scores)


# --------------------------------------------------------------------------
# Interaction plumbing
# --------------------------------------------------------------------------

@dataclass
class RetrievalTask:
    """Per-user positive item rows, split leave-one-out."""

    train_seqs: list            # np arrays of catalog row indices
    test_targets: np.ndarray    # catalog row per user (last positive)
    user_ids: np.ndarray

    @property
    def n_users(self):
        return len(self.test_targets)


def build_retrieval_task(interactions: InteractionDataset,
                         embeddings: EmbeddingDataset,
                         min_len=3) -> RetrievalTask:
    """Time-ordered positive sequences mapped to catalog rows; the final item
    of each qualifying user is held out for evaluation."""
    row_of = embeddings.index_of()
    missing = set(int(t) for t in np.unique(interactions.item_ids)) - set(row_of)
    if missing:
        raise ValueError(f"{len(missing)} interaction item_ids missing from embeddings "
                         f"(e.g. {sorted(missing)[:3]})")
    train_seqs, targets, users = [], [], []
    for uid, (items, _, labels) in interactions.by_user().items():
        pos = items[labels == 1]
        if len(pos) < min_len:
            continue
        rows = np.array([row_of[int(t)] for t in pos], dtype=np.int64)
        train_seqs.append(rows[:-1])
        targets.append(rows[-1])
        users.append(uid)
    if not targets:
        raise ValueError("no user has enough positive events")
    return RetrievalTask(train_seqs, np.array(targets, dtype=np.int64),
                         np.array(users, dtype=np.uint64))


def _sample_pairs(task: RetrievalTask, history_len, pairs_per_user, rng):
    """(history rows padded to H, target row) training samples, shuffled."""
    hists, targets = [], []
    for seq in task.train_seqs:
        if len(seq) < 2:
            continue
        k = min(pairs_per_user, len(seq) - 1)
        positions = rng.integers(1, len(seq), size=k)
        for t in positions:
            lo = max(0, t - history_len)
            window = seq[lo:t]
            pad = np.full(history_len - len(window), window[0], dtype=np.int64)
            hists.append(np.concatenate([pad, window]))
            targets.append(seq[t])
    order = rng.permutation(len(targets))
    return np.array(hists, dtype=np.int64)[order], np.array(targets, dtype=np.int64)[order]


def user_history_rows(task: RetrievalTask, history_len) -> np.ndarray:
    """Evaluation histories: the last H training items per user, padded."""
    out = np.empty((task.n_users, history_len), dtype=np.int64)
    for i, seq in enumerate(task.train_seqs):
        window = seq[-history_len:]
        pad = np.full(history_len - len(window), window[0], dtype=np.int64)
        out[i] = np.concatenate([pad, window])
    return out


def evaluate_retrieval(item_reprs: np.ndarray, task: RetrievalTask,
                       history_len, n_list=(5, 10)):
    """Leave-one-out full-catalog ranking. Returns (RankingMetrics, ranks)."""
    hists = user_history_rows(task, history_len)
    user_vecs = item_reprs[hists].mean(axis=1)
    scores = user_vecs @ item_reprs.T
    ranks = rank_of_target(scores, task.test_targets)
    return ranking_metrics(ranks, n_list), ranks


# --------------------------------------------------------------------------
# Joint fine-tuning: MMQ tokenizer
# --------------------------------------------------------------------------

def _soft_slot_results(model: tok.TokenizerModel, bundle, cb_params, tau):
    metric = "cosine" if model.cfg.use_cosine else "l2"
    results = []
    for slot, z in enumerate(bundle.latents):
        cw = cb_params[0 if model.cfg.shared_codebook else slot]
        results.append(soft_indices(z, cw, tau=tau, metric=metric))
    return results


def mmq_joint_loss(model: tok.TokenizerModel, head: RetrievalHead, cb_params,
                   ds: EmbeddingDataset, hist_rows, target_rows,
                   cfg: FinetuneConfig, hist_codes=None):
    """CE + alpha' * recon + beta' * aux on one batch; returns (loss, parts).

    With soft_history (hist_codes None) every involved item runs the soft
    path; otherwise histories use the supplied code snapshot and only the
    targets are tokenized differentiably.
    """
    if cfg.soft_history or hist_codes is None:
        rows = np.unique(np.concatenate([hist_rows.ravel(), target_rows]))
    else:
        rows = np.unique(target_rows)
    bundle = tok.forward_batch(model, ds.text[rows], ds.vision[rows])
    results = _soft_slot_results(model, bundle, cb_params, cfg.tau)
    reprs = item_repr(head, results)

    tgt_local = np.searchsorted(rows, target_rows)
    if cfg.soft_history or hist_codes is None:
        hist_local = np.searchsorted(rows, hist_rows)
        user_vecs = T.tmean(T.gather_rows(reprs, hist_local), axis=1)
    else:
        user_vecs = head.history_reprs(hist_codes)
    pos_reprs = T.gather_rows(reprs, tgt_local)
    ce = retrieval_loss(user_vecs, pos_reprs)

    loss = ce
    parts = {"ce": float(ce.data)}
    if cfg.alpha_prime > 0:
        r = tok.recon_loss(model, bundle)
        loss = T.add(loss, T.mul(r, cfg.alpha_prime))
        parts["recon"] = float(r.data)
    if cfg.beta_prime > 0:
        a = tok.aux_loss(model, bundle)
        loss = T.add(loss, T.mul(a, cfg.beta_prime))
        parts["aux"] = float(a.data)
    return loss, parts


def mmq_item_reprs(model: tok.TokenizerModel, head: RetrievalHead,
                   ds: EmbeddingDataset) -> np.ndarray:
    codes = tok.tokenize_dataset(model, ds)
    return head.item_reprs_hard(codes)


@dataclass
class FinetuneReport:
    pre: RankingMetrics
    post: RankingMetrics
    pre_recon: float
    post_recon: float
    loss_curve: list = field(default_factory=list)

    def as_dict(self):
        return {
            "pre": self.pre.as_dict(), "post": self.post.as_dict(),
            "pre_recon": self.pre_recon, "post_recon": self.post_recon,
        }


def _recon_holdout(ds: EmbeddingDataset, frac, seed):
    rng = np.random.default_rng((seed, 23))
    n = max(1, int(round(frac * ds.n_items)))
    rows = rng.choice(ds.n_items, size=n, replace=False)
    return EmbeddingDataset(ds.item_ids[rows], ds.text[rows], ds.vision[rows])


def finetune(model: tok.TokenizerModel, head: RetrievalHead,
             interactions: InteractionDataset, embeddings: EmbeddingDataset,
             cfg: FinetuneConfig, log_fn=None) -> FinetuneReport:
    """Jointly train the head and (per the freeze flags) the tokenizer's
    encoders, decoders, and codebooks against the retrieval objective."""
    task = build_retrieval_task(interactions, embeddings)
    holdout = _recon_holdout(embeddings, cfg.recon_holdout_frac, cfg.seed)

    cb_params = [T.Parameter(cb.codewords, f"codebook{b}")
                 for b, cb in enumerate(model.codebooks)]
    params = list(head.tables)
    if cfg.train_encoders:
        params.extend(model.encoder_parameters())
    if cfg.train_decoders:
        for dec in (model.decoder, model.decoder_t, model.decoder_v):
            params.extend(dec.params)
    if cfg.train_codebooks:
        params.extend(cb_params)
    zero_list = list(head.tables) + model.mlp_parameters() + cb_params

    pre_metrics, _ = evaluate_retrieval(mmq_item_reprs(model, head, embeddings),
                                        task, cfg.history_len, cfg.eval_n)
    pre_recon = tok.eval_quant_metrics(model, holdout).recon_loss

    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng((cfg.seed, 31))
    curve = []
    for epoch in range(cfg.epochs):
        catalog_codes = None
        if not cfg.soft_history:
            catalog_codes = tok.tokenize_dataset(model, embeddings)
        hists, targets = _sample_pairs(task, cfg.history_len, cfg.pairs_per_user, rng)
        epoch_loss, batches = 0.0, 0
        for lo in range(0, len(targets) - 1, cfg.batch_size):
            hb = hists[lo:lo + cfg.batch_size]
            tb = targets[lo:lo + cfg.batch_size]
            if len(tb) < 2:
                continue
            hist_codes = catalog_codes[hb] if catalog_codes is not None else None
            loss, parts = mmq_joint_loss(model, head, cb_params, embeddings,
                                         hb, tb, cfg, hist_codes)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite fine-tune loss at epoch {epoch}: {parts}")
            T.zero_grads(zero_list)
            loss.backward()
            opt.step()
            if cfg.train_codebooks:
                for b, cb in enumerate(model.codebooks):
                    cb.codewords = cb_params[b].data
            epoch_loss += float(loss.data)
            batches += 1
        curve.append(epoch_loss / max(batches, 1))
        if log_fn:
            log_fn(epoch, curve[-1])

    post_metrics, _ = evaluate_retrieval(mmq_item_reprs(model, head, embeddings),
                                         task, cfg.history_len, cfg.eval_n)
    post_recon = tok.eval_quant_metrics(model, holdout).recon_loss
    return FinetuneReport(pre_metrics, post_metrics, pre_recon, post_recon, curve)


# --------------------------------------------------------------------------
# Joint fine-tuning: RQ-VAE baseline (compatibility experiment)
# --------------------------------------------------------------------------

def _rqvae_soft_results(model: RqModel, cb_params, x: np.ndarray, tau):
    """Soft indices per residual level; neg-L2 logits keep the forward path
    identical to the baseline's own L2 assignments."""
    z = model.encoder(x)
    residual = z
    results = []
    for p in cb_params:
        res = soft_indices(residual, p, tau=tau, metric="l2")
        results.append(res)
        sel = ste_compose(T.matmul(res.soft, p), p.data[res.hard_index])
        residual = T.sub(residual, sel)
    return z, results


def rqvae_recon_loss(model: RqModel, cb_params, x: np.ndarray) -> Tensor:
    z = model.encoder(x)
    residual = z.data.astype(np.float64)
    zq = np.zeros_like(residual)
    for p in cb_params:
        idx = frozen_indices(nearest_l2(residual, p.data.astype(np.float64)))
        sel = p.data[idx].astype(np.float64)
        residual -= sel
        zq += sel
    dec_in = ste_compose(z, zq.astype(z.data.dtype))
    return T.mse(model.decoder(dec_in), x)


def _baseline_parts(tokenizer: BaselineTokenizer):
    if tokenizer.paradigm == "MA":
        parts = [("joint", tokenizer.models["joint"])]
    else:
        parts = [("text", tokenizer.models["text"]), ("vision", tokenizer.models["vision"])]
    for _, m in parts:
        if not isinstance(m, RqModel) or m.mode != "vae":
            raise ValueError("behavior-aware fine-tuning of baselines supports vae-mode "
                             "residual quantizers only")
    return parts


def _baseline_inputs(ds: EmbeddingDataset, part: str, rows=None):
    if part == "joint":
        x = ds.concat_embeddings()
    elif part == "text":
        x = ds.text
    else:
        x = ds.vision
    return x if rows is None else x[rows]


def finetune_baseline_rqvae(tokenizer: BaselineTokenizer, head: RetrievalHead,
                            interactions: InteractionDataset,
                            embeddings: EmbeddingDataset,
                            cfg: FinetuneConfig, log_fn=None) -> FinetuneReport:
    """The soft-index mechanism applied per residual level of a fitted
    vae-mode residual quantizer, under either fusion paradigm."""
    parts = _baseline_parts(tokenizer)
    task = build_retrieval_task(interactions, embeddings)
    holdout = _recon_holdout(embeddings, cfg.recon_holdout_frac, cfg.seed)

    cb_params = {}
    params = list(head.tables)
    zero_list = list(head.tables)
    for part, model in parts:
        cb_params[part] = [T.Parameter(cb.codewords.astype(np.float32), f"{part}.cb{t}")
                           for t, cb in enumerate(model.codebooks)]
        zero_list.extend(cb_params[part])
        zero_list.extend(model.encoder.params + model.decoder.params)
        if cfg.train_codebooks:
            params.extend(cb_params[part])
        if cfg.train_encoders:
            params.extend(model.encoder.params)
        if cfg.train_decoders:
            params.extend(model.decoder.params)

    def hard_reprs():
        codes = tokenizer.tokenize_batch(embeddings)
        return head.item_reprs_hard(codes)

    pre_metrics, _ = evaluate_retrieval(hard_reprs(), task, cfg.history_len, cfg.eval_n)
    pre_recon = tokenizer.recon_loss(holdout)

    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng((cfg.seed, 37))
    curve = []
    for epoch in range(cfg.epochs):
        catalog_codes = tokenizer.tokenize_batch(embeddings)
        hists, targets = _sample_pairs(task, cfg.history_len, cfg.pairs_per_user, rng)
        epoch_loss, batches = 0.0, 0
        for lo in range(0, len(targets) - 1, cfg.batch_size):
            hb = hists[lo:lo + cfg.batch_size]
            tb = targets[lo:lo + cfg.batch_size]
            if len(tb) < 2:
                continue
            rows = np.unique(tb)
            slot_results = []
            recon_terms = []
            for part, model in parts:
                x = _baseline_inputs(embeddings, part, rows).astype(np.float32)
                _, results = _rqvae_soft_results(model, cb_params[part], x, cfg.tau)
                slot_results.extend(results)
                if cfg.alpha_prime > 0:
                    recon_terms.append(rqvae_recon_loss(model, cb_params[part], x))
            reprs = item_repr(head, slot_results)
            user_vecs = head.history_reprs(catalog_codes[hb])
            pos_reprs = T.gather_rows(reprs, np.searchsorted(rows, tb))
            loss = retrieval_loss(user_vecs, pos_reprs)
            for r in recon_terms:
                loss = T.add(loss, T.mul(r, cfg.alpha_prime))
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite baseline fine-tune loss at epoch {epoch}")
            T.zero_grads(zero_list)
            loss.backward()
            opt.step()
            for part, model in parts:
                for t, cb in enumerate(model.codebooks):
                    cb.codewords = cb_params[part][t].data
            epoch_loss += float(loss.data)
            batches += 1
        curve.append(epoch_loss / max(batches, 1))
        if log_fn:
            log_fn(epoch, curve[-1])

    post_metrics, _ = evaluate_retrieval(hard_reprs(), task, cfg.history_len, cfg.eval_n)
    post_recon = tokenizer.recon_loss(holdout)
    return FinetuneReport(pre_metrics, post_metrics, pre_recon, post_recon, curve)


# --------------------------------------------------------------------------
# Discriminative scoring (AUC/GAUC over label-bearing logs)
# --------------------------------------------------------------------------

def score_labeled_log(item_reprs: np.ndarray, task: RetrievalTask,
                      interactions: InteractionDataset,
                      embeddings: EmbeddingDataset, history_len) -> list:
    """Per-user (scores, labels) for every logged event, scored against the
    user's history vector; users absent from the task are skipped."""
    row_of = embeddings.index_of()
    hists = user_history_rows(task, history_len)
    user_vecs = item_reprs[hists].mean(axis=1)
    vec_of = {int(u): user_vecs[i] for i, u in enumerate(task.user_ids)}
    out = []
    for uid, (items, _, labels) in interactions.by_user().items():
        if uid not in vec_of:
            continue
        rows = np.array([row_of[int(t)] for t in items], dtype=np.int64)
        scores = item_reprs[rows] @ vec_of[uid]
        out.append((scores, labels.astype(np.int64)))
    return out
