from .model import (
    FULL,
    AggregatorState,
    ExitDecision,
    ExitNetConfig,
    ExitNetModel,
    accumulate,
    aggregate_window,
    attention_scores,
    classify,
    decide_batch,
    earliest_exit,
    first_firing,
    gate_forward,
    loss_and_grad,
    loss_total,
)
from .features import synth_features, trace_features
from .training import TrainingError, evaluate, grad_check, train

__all__ = [
    "FULL", "AggregatorState", "ExitDecision", "ExitNetConfig", "ExitNetModel", "accumulate",
    "aggregate_window", "attention_scores", "classify", "decide_batch", "earliest_exit", "first_firing",
    "gate_forward", "loss_and_grad", "loss_total", "synth_features", "trace_features", "TrainingError",
    "evaluate", "grad_check", "train",
]
