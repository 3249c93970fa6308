"""Experiment pipelines: stage-1 training, behavior-aware fine-tuning,
baseline fits, ablation grids, and scaling sweeps over seeded synthetic
benchmarks. The CLI is a thin wrapper over these functions; tests call them
directly.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import finetune as ft
from . import tensor as T
from . import tokenizer as tok
from .baselines import BaselineTokenizer, RqVaeOptions, fit_baseline
from .data import (EmbeddingDataset, InteractionDataset, SyntheticConfig,
                   gen_synthetic_interactions, gen_synthetic_items,
                   popularity_strata, write_embeddings, write_interactions)
from .metrics import (MetricsReport, QuantMetrics, auc, gauc, ranking_metrics,
                      stratified_ranking, token_entropy, codebook_utilization)


# --------------------------------------------------------------------------
# Desk-scale benchmark presets
# --------------------------------------------------------------------------

def desk_synthetic_config(seed, n_items=5000, n_users=2000, n_clusters=100,
                          d_text=256, d_vision=256, content_noise=0.25,
                          modality_unique_frac=0.5, p_gap=0.0, seq_len=30,
                          negatives_ratio=0, pref_alpha=0.3) -> SyntheticConfig:
    return SyntheticConfig(
        n_items=n_items, n_users=n_users, n_clusters=n_clusters,
        d_text=d_text, d_vision=d_vision, content_noise=content_noise,
        modality_unique_frac=modality_unique_frac, p_gap=p_gap,
        seq_len=seq_len, seed=seed, negatives_ratio=negatives_ratio,
        pref_alpha=pref_alpha)


def desk_benchmark(cfg: SyntheticConfig):
    items, labels = gen_synthetic_items(cfg)
    interactions = gen_synthetic_interactions(items, labels, cfg)
    return items, labels, interactions


def desk_tokenizer_config(seed, **overrides) -> tok.TokenizerConfig:
    """Fast desk-scale tokenizer: small hidden widths, K=100, l=6."""
    base = dict(n_shared=2, n_text=2, n_vision=2, d_text=256, d_vision=256,
                latent_dim=32, codebook_size=100, expert_hidden=(96,),
                gate_hidden=(32,), decoder_hidden=(96,), ema_decay=0.95,
                dead_code_steps=15, seed=seed)
    base.update(overrides)
    return tok.TokenizerConfig(**base)


@dataclass
class TrainParams:
    epochs: int = 6
    batch_size: int = 256
    lr: float = 3e-3


# --------------------------------------------------------------------------
# Head training on frozen codes (plain downstream training)
# --------------------------------------------------------------------------

def train_head_on_codes(head: ft.RetrievalHead, codes: np.ndarray,
                        task: ft.RetrievalTask, cfg: ft.FinetuneConfig,
                        log_fn=None):
    """Train only the per-slot embedding tables against in-batch softmax over
    a frozen code assignment (the no-fine-tuning arm)."""
    opt = T.Adam(head.tables, lr=cfg.lr)
    rng = np.random.default_rng((cfg.seed, 31))
    curve = []
    for epoch in range(cfg.epochs):
        hists, targets = ft._sample_pairs(task, cfg.history_len, cfg.pairs_per_user, rng)
        epoch_loss, batches = 0.0, 0
        for lo in range(0, len(targets) - 1, cfg.batch_size):
            hb, tb = hists[lo:lo + cfg.batch_size], targets[lo:lo + cfg.batch_size]
            if len(tb) < 2:
                continue
            user_vecs = head.history_reprs(codes[hb])
            pos = None
            for i, table in enumerate(head.tables):
                term = T.gather_rows(table, codes[tb, i])
                pos = term if pos is None else T.add(pos, term)
            loss = ft.retrieval_loss(user_vecs, pos)
            T.zero_grads(head.tables)
            loss.backward()
            opt.step()
            epoch_loss += float(loss.data)
            batches += 1
        curve.append(epoch_loss / max(batches, 1))
        if log_fn:
            log_fn(epoch, curve[-1])
    return curve


# --------------------------------------------------------------------------
# End-to-end runs
# --------------------------------------------------------------------------

@dataclass
class RunResult:
    label: str
    report: MetricsReport
    tokenizer: tok.TokenizerModel | None = None
    baseline: BaselineTokenizer | None = None
    head: ft.RetrievalHead | None = None
    extras: dict = field(default_factory=dict)


def _ranking_extras(item_reprs, task, interactions, embeddings, fcfg,
                    with_strata=False, with_auc=False, n_list=(5, 10)):
    metrics_, ranks = ft.evaluate_retrieval(item_reprs, task, fcfg.history_len, n_list)
    strata_reports = {}
    if with_strata:
        strata = popularity_strata(interactions)
        truth_items = embeddings.item_ids[task.test_targets]
        strata_reports, _ = stratified_ranking(ranks, truth_items, strata, n_list)
    auc_v = gauc_v = None
    if with_auc and np.any(interactions.labels == 0):
        per_user = ft.score_labeled_log(item_reprs, task, interactions,
                                        embeddings, fcfg.history_len)
        eligible = [(s, l) for s, l in per_user if 0 < l.sum() < len(l)]
        if eligible:
            flat_s = np.concatenate([s for s, _ in eligible])
            flat_l = np.concatenate([l for _, l in eligible])
            auc_v = auc(flat_s, flat_l)
            gauc_v = gauc(eligible)
    m = ranking_metrics(ranks, n_list)
    if auc_v is not None:
        m.auc, m.gauc = auc_v, gauc_v
    return m, strata_reports, ranks


def run_mmq(items: EmbeddingDataset, interactions: InteractionDataset,
            tok_cfg: tok.TokenizerConfig, train: TrainParams,
            fcfg: ft.FinetuneConfig, baf=True, eval_strata=False,
            eval_auc=False, n_list=(5, 10), label="mmq", log_fn=None) -> RunResult:
    """Stage 1, then either behavior-aware fine-tuning or frozen head
    training, then quantization + ranking evaluation."""
    model = tok.TokenizerModel(tok_cfg)
    tok.train_stage1(model, items, epochs=train.epochs, batch_size=train.batch_size,
                     lr=train.lr, log_fn=log_fn)
    task = ft.build_retrieval_task(interactions, items)
    head = ft.RetrievalHead(tok_cfg.id_length, tok_cfg.codebook_size,
                            d_repr=fcfg.d_repr, history_len=fcfg.history_len,
                            seed=fcfg.seed)
    ft_report = None
    if baf:
        ft_report = ft.finetune(model, head, interactions, items, fcfg, log_fn=log_fn)
    else:
        codes = tok.tokenize_dataset(model, items)
        train_head_on_codes(head, codes, task, fcfg, log_fn=log_fn)

    quant = tok.eval_quant_metrics(model, items)
    reprs = ft.mmq_item_reprs(model, head, items)
    ranking, strata_reports, _ = _ranking_extras(
        reprs, task, interactions, items, fcfg, eval_strata, eval_auc, n_list)
    report = MetricsReport(quant=quant, ranking=ranking, strata=strata_reports)
    if ft_report is not None:
        report.extras["finetune"] = ft_report.as_dict()
    return RunResult(label, report, tokenizer=model, head=head,
                     extras={"finetune_report": ft_report})


def run_baseline(items: EmbeddingDataset, interactions: InteractionDataset,
                 method: str, paradigm: str, k: int, fcfg: ft.FinetuneConfig,
                 levels_ma=6, levels_ms=(3, 3), seed=0, baf=False,
                 vae_options: RqVaeOptions | None = None, eval_strata=False,
                 eval_auc=False, n_list=(5, 10), label=None, log_fn=None) -> RunResult:
    """Fit a baseline quantizer, train the retrieval head (optionally with
    behavior-aware fine-tuning, vae mode only), and evaluate."""
    norm = items.normalized()
    model = fit_baseline(method, paradigm, norm, k, levels_ma=levels_ma,
                         levels_ms=levels_ms, seed=seed, vae_options=vae_options)
    task = ft.build_retrieval_task(interactions, items)
    head = ft.RetrievalHead(model.id_length, k, d_repr=fcfg.d_repr,
                            history_len=fcfg.history_len, seed=fcfg.seed)
    ft_report = None
    if baf:
        ft_report = ft.finetune_baseline_rqvae(model, head, interactions, norm,
                                               fcfg, log_fn=log_fn)
    else:
        codes = model.tokenize_batch(norm)
        train_head_on_codes(head, codes, task, fcfg, log_fn=log_fn)

    model.reset_usage()
    codes = model.tokenize_batch(norm, record_usage=True)
    quant = QuantMetrics(recon_loss=model.recon_loss(norm),
                         utilization=codebook_utilization(model.counts_per_slot()),
                         entropy=token_entropy(model.counts_per_slot()))
    reprs = head.item_reprs_hard(codes)
    ranking, strata_reports, _ = _ranking_extras(
        reprs, task, interactions, items, fcfg, eval_strata, eval_auc, n_list)
    report = MetricsReport(quant=quant, ranking=ranking, strata=strata_reports)
    if ft_report is not None:
        report.extras["finetune"] = ft_report.as_dict()
    return RunResult(label or f"{paradigm}-{method}", report, baseline=model,
                     head=head, extras={"finetune_report": ft_report})


ABLATION_ROWS = ("full", "no_cosine", "no_aux", "no_ortho", "no_baf")


def ablation_config(base: tok.TokenizerConfig, row: str) -> tok.TokenizerConfig:
    d = base.as_dict()
    if row == "no_cosine":
        d["use_cosine"] = False
    elif row == "no_aux":
        d["beta"] = 0.0
    elif row == "no_ortho":
        d["gamma"] = 0.0
    elif row not in ("full", "no_baf"):
        raise ValueError(f"unknown ablation row {row!r}")
    return tok.TokenizerConfig.from_dict(d)


def run_ablation_grid(items, interactions, base_cfg: tok.TokenizerConfig,
                      train: TrainParams, fcfg: ft.FinetuneConfig,
                      rows=ABLATION_ROWS, n_list=(5, 10), log_fn=None):
    """One run per ablation row; identical seeds everywhere else."""
    results = {}
    for row in rows:
        cfg_row = ablation_config(base_cfg, row)
        results[row] = run_mmq(items, interactions, cfg_row, train, fcfg,
                               baf=(row != "no_baf"), n_list=n_list,
                               label=row, log_fn=log_fn)
    return results


def run_length_sweep(items, interactions, base_cfg: tok.TokenizerConfig,
                     train: TrainParams, fcfg: ft.FinetuneConfig,
                     lengths=(6, 9, 12), n_list=(5, 10), log_fn=None):
    """Semantic-ID length scaling: l split evenly across the three expert groups."""
    results = {}
    for length in lengths:
        if length % 3:
            raise ValueError("sweep lengths must be divisible by 3")
        per = length // 3
        d = base_cfg.as_dict()
        d.update(n_shared=per, n_text=per, n_vision=per)
        cfg_l = tok.TokenizerConfig.from_dict(d)
        results[length] = run_mmq(items, interactions, cfg_l, train, fcfg,
                                  n_list=n_list, label=f"l{length}", log_fn=log_fn)
    return results


def run_expert_sweep(items, interactions, base_cfg: tok.TokenizerConfig,
                     train: TrainParams, fcfg: ft.FinetuneConfig,
                     variants, n_list=(5, 10), log_fn=None):
    """Shared-vs-specific expert configurations; each variant overrides
    (n_shared, n_text, n_vision) and optionally expert_hidden."""
    results = {}
    for name, overrides in variants.items():
        d = base_cfg.as_dict()
        d.update(overrides)
        cfg_v = tok.TokenizerConfig.from_dict(d)
        res = run_mmq(items, interactions, cfg_v, train, fcfg,
                      n_list=n_list, label=name, log_fn=log_fn)
        res.report.extras["expert_parameters"] = res.tokenizer.n_expert_parameters()
        results[name] = res
    return results


# --------------------------------------------------------------------------
# Artifact writing
# --------------------------------------------------------------------------

def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def write_semantic_ids(path, item_ids, codes) -> None:
    l = codes.shape[1]
    with open(path, "w", encoding="utf-8") as f:
        f.write("item_id\t" + "\t".join(f"c_{i + 1}" for i in range(l)) + "\n")
        for tid, row in zip(item_ids, codes):
            f.write(str(int(tid)) + "\t" + "\t".join(str(int(c)) for c in row) + "\n")


def read_semantic_ids(path):
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        if header[0] != "item_id" or len(header) < 2:
            raise T.FormatError(f"bad semantic-id header: {header!r}")
        ids, codes = [], []
        for line in f:
            parts = line.rstrip("\n").split("\t")
            ids.append(int(parts[0]))
            codes.append([int(c) for c in parts[1:]])
    return np.array(ids, dtype=np.uint64), np.array(codes, dtype=np.int64)


def write_metrics_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def load_data_section(data_cfg: dict, out_dir=None):
    """Either synthetic generation or file paths; returns (items, interactions)."""
    if "synthetic" in data_cfg:
        scfg = SyntheticConfig(**data_cfg["synthetic"])
        items, labels, interactions = desk_benchmark(scfg)
        if out_dir is not None:
            write_embeddings(items, os.path.join(out_dir, "items.mmqe"))
            write_interactions(interactions, os.path.join(out_dir, "interactions.tsv"))
        return items, interactions
    from .data import read_embeddings, read_interactions
    items = read_embeddings(data_cfg["embeddings"])
    interactions = read_interactions(data_cfg["interactions"]) if "interactions" in data_cfg else None
    return items, interactions
