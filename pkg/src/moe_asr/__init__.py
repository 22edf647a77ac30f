"""Desk-scale sparse mixture-of-experts acoustic model: top-1 routed MoE
layers conditioned on grapheme/accent/domain embeddings from a multi-task
embedding network, trained with CTC plus router auxiliary losses, with a
deterministic simulation of multi-worker expert parallelism."""

from .config import ModelConfig
from .data import SynthConfig, Utterance, generate, load_corpus, save_corpus
from .embedding import EmbeddingNetwork, EmbeddingOutputs
from .flops import FlopCounter, FlopsReport, count_flops
from .layers import (AttentionLayer, Expert, MemoryLayer, MoELayer, Router,
                     RouterDecision)
from .losses import (LossBreakdown, LossWeights, RouterBatch, combine,
                     cross_entropy, ctc_loss, mean_importance_loss,
                     sparsity_loss)
from .model import Model, build_model
from .checkpoint import load_checkpoint, save_checkpoint
from .parallel import (WorkerShard, gather_probabilities, make_shards,
                       partition_experts, step_parallel)
from .train import evaluate, train, train_step

__version__ = "0.1.0"

__all__ = [
    "AttentionLayer", "EmbeddingNetwork", "EmbeddingOutputs", "Expert",
    "FlopCounter", "FlopsReport", "LossBreakdown", "LossWeights",
    "MemoryLayer", "Model", "ModelConfig", "MoELayer", "Router",
    "RouterBatch", "RouterDecision", "SynthConfig", "Utterance",
    "WorkerShard", "build_model", "combine", "count_flops",
    "cross_entropy", "ctc_loss", "evaluate", "gather_probabilities",
    "generate", "load_checkpoint", "load_corpus", "make_shards",
    "mean_importance_loss", "partition_experts", "save_checkpoint",
    "save_corpus", "sparsity_loss", "step_parallel", "train", "train_step",
]
