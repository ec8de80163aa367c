"""Spatial-temporal prediction of per-host security events.

A graph-convolutional LSTM forecasts the next event id on every host of a
network from the recent event history, using the host interaction graph as
prior knowledge. Plain LSTM and ConvLSTM baselines, a preprocessing
pipeline for event logs, a synthetic benchmark generator and a CLI round
out the package.
"""

from .cells import (
    CellState,
    ModelParams,
    convlstm_step,
    forward_sequence,
    init_params,
    load_checkpoint,
    lstm_step,
    readout,
    save_checkpoint,
    step_cell_step,
)
from .graph import HostGraph, build_host_graph, graph_conv, lambda_max
from .numerics import Matrix, Tape, backward
from .pipeline import (
    EventDataset,
    RawEventLog,
    WindowBatch,
    build_dataset,
    filter_hosts,
    ingest,
    integrate_k_steps,
    sliding_windows,
    split,
)
from .synth import SynthConfig, bayes_rate, generate
from .training import EpochMetrics, TrainConfig, accuracy, cross_entropy, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Matrix",
    "Tape",
    "backward",
    "HostGraph",
    "build_host_graph",
    "graph_conv",
    "lambda_max",
    "ModelParams",
    "CellState",
    "init_params",
    "lstm_step",
    "step_cell_step",
    "convlstm_step",
    "readout",
    "forward_sequence",
    "save_checkpoint",
    "load_checkpoint",
    "RawEventLog",
    "EventDataset",
    "WindowBatch",
    "ingest",
    "filter_hosts",
    "integrate_k_steps",
    "build_dataset",
    "sliding_windows",
    "split",
    "TrainConfig",
    "EpochMetrics",
    "cross_entropy",
    "accuracy",
    "train",
    "evaluate",
    "SynthConfig",
    "generate",
    "bayes_rate",
    "__version__",
]
