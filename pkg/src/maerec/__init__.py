"""Sequential recommender trained jointly with a graph masked autoencoder.

The pipeline: build a global item-item transition graph over user
sequences, adaptively mask transition paths seeded at high-relatedness
anchor items, reconstruct the masked edges with a lightweight graph
autoencoder, and feed the graph-refined item embeddings into a causal
Transformer for next-item prediction.
"""

__version__ = "0.1.0"

from maerec.corpus import (
    InteractionRecord,
    SplitCorpus,
    UserSequence,
    leave_one_out_split,
    load_corpus,
)
from maerec.transition_graph import TransitionGraph, build_graph
from maerec.trainer import TrainConfig, train

__all__ = [
    "InteractionRecord",
    "SplitCorpus",
    "TrainConfig",
    "TransitionGraph",
    "UserSequence",
    "build_graph",
    "leave_one_out_split",
    "load_corpus",
    "train",
]
