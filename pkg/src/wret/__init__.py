"""Unsupervised writer retrieval: descriptor preprocessing, trained
patch encoders, page-level aggregation, leave-one-out evaluation, and
graph reranking, glued together by a file-artifact pipeline."""

from .aggregation import PageEmbedding, aggregate_pages, pool_page, power_normalize, whiten_pages
from .encoder import (
    Backbone,
    Codebook,
    Layer,
    backbone_forward,
    encode_flat,
    encode_patch,
    encode_patches,
    encode_vlad_hard,
    flatten_encoding,
    init_backbone,
    init_codebook,
)
from .errors import ArtifactIOError, TrainingError, ValidationError
from .features import (
    ClusterModel,
    PcaModel,
    PseudoLabeledSet,
    assign_and_filter,
    fit_kmeans,
    fit_pca,
    hellinger_normalize,
    pca_transform,
)
from .rerank import RerankConfig, build_similarity_graph, hard_graph_rerank, krnn_qe, rerank, sgr
from .retrieval import RankedList, RetrievalReport, average_precision, evaluate, rank_all
from .seeds import derive_seed
from .stages import (
    ClusterConfig,
    EncodeConfig,
    run_cluster,
    run_encode,
    run_evaluate,
    run_report,
    run_rerank,
    run_sweep,
    run_synth,
    run_train,
)
from .synth import SynthSpec, nearest_centroid_accuracy, synth_generate
from .trainer import TrainConfig, TrainReport, mine_hard_triplets, train, triplet_loss

__all__ = [
    "ArtifactIOError",
    "Backbone",
    "ClusterConfig",
    "ClusterModel",
    "Codebook",
    "EncodeConfig",
    "Layer",
    "PageEmbedding",
    "PcaModel",
    "PseudoLabeledSet",
    "RankedList",
    "RerankConfig",
    "RetrievalReport",
    "SynthSpec",
    "TrainConfig",
    "TrainReport",
    "TrainingError",
    "ValidationError",
    "aggregate_pages",
    "assign_and_filter",
    "average_precision",
    "backbone_forward",
    "build_similarity_graph",
    "derive_seed",
    "encode_flat",
    "encode_patch",
    "encode_patches",
    "encode_vlad_hard",
    "evaluate",
    "fit_kmeans",
    "fit_pca",
    "flatten_encoding",
    "hard_graph_rerank",
    "hellinger_normalize",
    "init_backbone",
    "init_codebook",
    "krnn_qe",
    "mine_hard_triplets",
    "nearest_centroid_accuracy",
    "pca_transform",
    "pool_page",
    "power_normalize",
    "rank_all",
    "rerank",
    "run_cluster",
    "run_encode",
    "run_evaluate",
    "run_report",
    "run_rerank",
    "run_sweep",
    "run_synth",
    "run_train",
    "sgr",
    "synth_generate",
    "train",
    "triplet_loss",
    "whiten_pages",
]
