"""camret: context-adapted embedding retrieval.

Adapts a primary embedding (title or video) with a variable set of auxiliary
embeddings (comments, audio) through a residual transformer over embedding
tokens, trains it with a symmetric contrastive objective, and evaluates with
exact Recall@N retrieval harnesses.
"""

__version__ = "0.1.0"

from .adapter import AdapterConfig, AdapterParams, adapt, adapt_batch, init_adapter
from .datamodel import (
    Batch,
    DatasetStore,
    Sample,
    SynthConfig,
    batch_sample,
    deduplicate,
    export_store,
    ingest,
    synth_generate,
)
from .objective import AffinityMatrix, LossValue, affinity, contrastive_loss, loss_and_grads
from .retrieval import (
    EvalReport,
    RetrievalIndex,
    build_index,
    comment_saliency,
    distractor_eval,
    eval_bidirectional,
    recall_at_n,
    topk,
    vary_comments_eval,
)
from .trainer import OptimizerState, TrainConfig, adam_step, load_checkpoint, save_checkpoint, train

__all__ = [
    "AdapterConfig",
    "AdapterParams",
    "AffinityMatrix",
    "Batch",
    "DatasetStore",
    "EvalReport",
    "LossValue",
    "OptimizerState",
    "RetrievalIndex",
    "Sample",
    "SynthConfig",
    "TrainConfig",
    "adapt",
    "adapt_batch",
    "adam_step",
    "affinity",
    "batch_sample",
    "build_index",
    "comment_saliency",
    "contrastive_loss",
    "deduplicate",
    "distractor_eval",
    "eval_bidirectional",
    "export_store",
    "ingest",
    "init_adapter",
    "load_checkpoint",
    "loss_and_grads",
    "recall_at_n",
    "save_checkpoint",
    "synth_generate",
    "topk",
    "train",
    "vary_comments_eval",
]
