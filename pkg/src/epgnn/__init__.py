"""Edge-prompted heterogeneous graph embeddings and clustered audience expansion."""

from __future__ import annotations

__version__ = "0.1.0"

from .graph import EdgeKind, Graph, GraphConfig, NodeKind, RawInteraction, build_graph, load_graph, save_graph
from .model import LossConfig, ModelDims, ModelParams, TrainConfig, embed_nodes, init_params, train
from .sampler import NeighborCache, SampleConfig, build_neighbor_cache
from .walker import MetaPath, WalkConfig, generate_pairs, generate_walks

__all__ = [
    "EdgeKind", "Graph", "GraphConfig", "LossConfig", "MetaPath", "ModelDims", "ModelParams", "NeighborCache",
    "NodeKind", "RawInteraction", "SampleConfig", "TrainConfig", "WalkConfig", "build_graph",
    "build_neighbor_cache", "embed_nodes", "generate_pairs", "generate_walks", "init_params", "load_graph",
    "save_graph", "train",
]
