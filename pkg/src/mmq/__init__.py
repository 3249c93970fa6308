"""Multimodal semantic-ID tokenization: a shared/specific multi-expert
tokenizer with cosine vector quantization (stage 1), behavior-aware
fine-tuning through differentiable soft codebook indices (stage 2), the
RQ-VAE / RQ-Kmeans / OPQ baselines, quantization and ranking metrics, and
synthetic benchmark generators.
"""

from .baselines import (BaselineTokenizer, Codebook, KmeansResult, OpqModel,
                        RqModel, RqVaeOptions, fit_baseline, kmeans, opq_fit,
                        rq_fit)
from .data import (EmbeddingDataset, InteractionDataset, MultimodalEmbedding,
                   PopularityStrata, SyntheticConfig, gen_synthetic_interactions,
                   gen_synthetic_items, popularity_strata, read_embeddings,
                   read_interactions, write_embeddings, write_interactions)
from .finetune import (FinetuneConfig, FinetuneReport, RetrievalHead,
                       SoftIndexResult, build_retrieval_task, evaluate_retrieval,
                       finetune_baseline_rqvae, item_repr, retrieval_loss,
                       soft_indices)
from .metrics import (MetricsReport, QuantMetrics, RankingMetrics, auc,
                      codebook_utilization, gauc, ndcg_at_n, rank_of_target,
                      ranking_metrics, recall_at_n, stratified_ranking,
                      token_entropy)
from .tensor import (Adam, FormatError, Mlp, MlpSpec, MmqError, NumericError,
                     Parameter, ShapeError, Tensor, backward, grad_check,
                     mlp_apply, read_checkpoint, read_model_container,
                     stop_gradient, ste_compose, write_checkpoint,
                     write_model_container)
from .tokenizer import (LatentBundle, TokenizerConfig, TokenizerModel,
                        aux_loss, cosine_lookup, ema_codebook_update,
                        encode_experts, eval_quant_metrics, fuse, gate_weights,
                        load_tokenizer, ortho_loss, quantize_bundle, recon_loss,
                        save_tokenizer, tokenize, tokenize_batch,
                        tokenize_dataset, total_loss, train_stage1)

# keep submodule attributes stable (the stage-2 entry point lives at
# mmq.finetune.finetune to avoid shadowing the submodule)
from . import baselines, data, experiments, finetune, metrics, tensor, tokenizer  # noqa: E402,F401

__version__ = "0.1.0"
