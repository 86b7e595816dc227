"""Node representation learning on heterogeneous text-rich networks.

A transformer text encoder with per-layer neighbor aggregation nested into
it, trained with in-batch contrastive link prediction, plus evaluation,
synthetic data generation, and a command-line pipeline.
"""

from .graph import (EdgeType, GraphFormatError, HeteroGraph, NeighborSample,
                    NodeTypeSchema, load_graph, load_schema, sample_neighbors,
                    split_edges, write_graph, write_schema)
from .model import Heterformer, HeterformerConfig, ModelParams
from .synth import SynthConfig, generate
from .tensor import (ContractError, GradCheckError, ShapeError, Tape, Tensor,
                     backward, grad_check)
from .text import Vocabulary, build_vocab, encode_text, tokenize
from .train import (CheckpointError, FitResult, OptimizerState, TrainConfig,
                    adam_step, fit, link_loss, load_checkpoint, run_warmup,
                    save_checkpoint)

__version__ = "0.1.0"

__all__ = [
    "EdgeType", "GraphFormatError", "HeteroGraph", "NeighborSample",
    "NodeTypeSchema", "load_graph", "load_schema", "sample_neighbors",
    "split_edges", "write_graph", "write_schema",
    "Heterformer", "HeterformerConfig", "ModelParams",
    "SynthConfig", "generate",
    "ContractError", "GradCheckError", "ShapeError", "Tape", "Tensor",
    "backward", "grad_check",
    "Vocabulary", "build_vocab", "encode_text", "tokenize",
    "CheckpointError", "FitResult", "OptimizerState", "TrainConfig",
    "adam_step", "fit", "link_loss", "load_checkpoint", "run_warmup",
    "save_checkpoint",
]
