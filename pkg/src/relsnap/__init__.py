"""Relational prediction with snapshot graphs and distilled tabular embeddings."""
from .distill import DistillConfig, DistillMlp, embed, soften, train_distill_mlp
from .features import FeatureConfig, build_dataset, engineer_features
from .gbdt import GbdtConfig, GbdtModel, gbdt_predict, train_gbdt
from .graph import HeteroGraph, build_cumulative_graph, build_snapshot_graph, graph_stats
from .metrics import MetricReport, agreement_rocauc, mae, rocauc
from .pipeline import PipelineConfig, run_bench, run_eval, run_synth, run_train
from .rgnn import GnnConfig, HeteroSageModel, init_node_features, train_gnn
from .store import RelationalDatabase, TaskSpec, load_database, load_task, validate
from .synth import SynthConfig, generate

__version__ = "0.1.0"

__all__ = [
    "DistillConfig", "DistillMlp", "FeatureConfig", "GbdtConfig", "GbdtModel", "GnnConfig",
    "HeteroGraph", "HeteroSageModel", "MetricReport", "PipelineConfig", "RelationalDatabase",
    "SynthConfig", "TaskSpec", "agreement_rocauc", "build_cumulative_graph", "build_dataset",
    "build_snapshot_graph", "embed", "engineer_features", "gbdt_predict", "generate", "graph_stats",
    "init_node_features", "load_database", "load_task", "mae", "rocauc", "run_bench", "run_eval",
    "run_synth", "run_train", "soften", "train_distill_mlp", "train_gbdt", "train_gnn", "validate",
]
