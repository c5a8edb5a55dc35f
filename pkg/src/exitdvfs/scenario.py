"""The synthetic scenario shared by the CLI defaults, tests and benchmarks."""
from __future__ import annotations

from .exitnet import ExitNetConfig, ExitNetModel, train
from .tracegen import FrameTrace, TraceGenConfig, generate_trace

# With calibrated exit-safe gates a 0.5 threshold fires as soon as the exit
# head is more likely right than wrong, which caps accuracy on noisy windows
# near single-frame accuracy.  0.9 trades a few layers for accuracy.
TOY_GATE_THRESHOLD = 0.9
TOY_LEARNING_RATE = 3e-3
TOY_EPOCHS = 12
TRAIN_SEED = 1


def synthetic_trace(num_windows: int, window_length: int = 20, seed: int = 0, num_classes: int = 4) -> FrameTrace:
    return generate_trace(TraceGenConfig(num_windows, K=num_classes, T=window_length, seed=seed))


def toy_config(window_length: int = 20, **overrides) -> ExitNetConfig:
    base = ExitNetConfig(
        window_length=window_length,
        learning_rate=TOY_LEARNING_RATE,
        epochs=TOY_EPOCHS,
        gate_threshold=TOY_GATE_THRESHOLD,
    )
    return base.with_(**overrides) if overrides else base


def toy_model(window_length: int = 20, num_windows: int = 2000, **overrides) -> tuple[ExitNetModel, FrameTrace]:
    """Train the toy network on a fresh synthetic trace; returns the model and its training trace."""
    cfg = toy_config(window_length, **overrides)
    trace = synthetic_trace(num_windows, window_length, seed=TRAIN_SEED, num_classes=cfg.num_classes)
    return train(trace, cfg), trace
