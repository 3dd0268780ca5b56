"""Chunked feed-forward reconstruction with a synchronized fast-weight memory."""
from .backbone import Backbone, BackboneConfig, ChunkPrediction
from .errors import (
    AlignmentError,
    ConfigError,
    GeometryError,
    GraphError,
    InputError,
    ParseError,
    ProtocolError,
    ScalrError,
    ShapeError,
)
from .gcm import FastWeights, GcmConfig, GcmState, init_gcm, state_size
from .gcs import Partition, WorkerGroup, partition, run_pipeline
from .geometry import Sim3

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "Backbone",
    "BackboneConfig",
    "ChunkPrediction",
    "ConfigError",
    "FastWeights",
    "GcmConfig",
    "GcmState",
    "GeometryError",
    "GraphError",
    "InputError",
    "ParseError",
    "Partition",
    "ProtocolError",
    "ScalrError",
    "ShapeError",
    "Sim3",
    "WorkerGroup",
    "init_gcm",
    "partition",
    "run_pipeline",
    "state_size",
]
