"""Event knowledge graph engine for retrieval-augmented navigation.

Mines room-transition events from per-frame label streams, stores them as
a graph of disjoint causal chains, serves exact coarse-to-fine retrieval,
and fuses retrieved knowledge into observation features.
"""

from .core import EventGraph, EventKind, EventRecord, FeatureStore, check_graph
from .errors import EKGError
from .fusion import AstffParams, astff_backward, astff_forward, astff_param_count, augment_instruction, init_params
from .graph_store import build_graph, compute_stats, load_graph, save_graph
from .retrieval import (
    ScoredHit,
    SubGraph,
    VectorIndex,
    build_index,
    coarse_retrieve,
    exhaustive_oracle,
    expand_causal,
    fine_retrieve,
    select_tail,
)
from .segmenter import extract_event_clips, label_frames, select_representatives

__version__ = "0.1.0"

__all__ = [
    "AstffParams",
    "EKGError",
    "EventGraph",
    "EventKind",
    "EventRecord",
    "FeatureStore",
    "ScoredHit",
    "SubGraph",
    "VectorIndex",
    "astff_backward",
    "astff_forward",
    "astff_param_count",
    "augment_instruction",
    "build_graph",
    "build_index",
    "check_graph",
    "coarse_retrieve",
    "compute_stats",
    "exhaustive_oracle",
    "expand_causal",
    "extract_event_clips",
    "fine_retrieve",
    "init_params",
    "label_frames",
    "load_graph",
    "save_graph",
    "select_representatives",
    "select_tail",
]
