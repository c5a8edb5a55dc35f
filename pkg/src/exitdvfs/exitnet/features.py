"""Stand-in frame features.

The first half of a feature vector is the class prototype plus Gaussian
noise whose scale grows with frame complexity; the second half carries the
complexity itself.  Prototypes depend only on ``config.feature_seed``; the
per-frame noise on ``(seed, frame_id)``.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..tracegen import Frame, FrameTrace
from .model import ExitNetConfig


@lru_cache(maxsize=32)
def class_prototypes(num_classes: int, half_dim: int, feature_seed: int) -> np.ndarray:
    rng = np.random.default_rng([feature_seed, 0x70726F74])
    protos = rng.standard_normal((num_classes, half_dim))
    protos.setflags(write=False)
    return protos


def synth_features(frame: Frame, config: ExitNetConfig, seed: int) -> np.ndarray:
    d = config.feature_dim
    if d % 2:
        raise ValueError("feature_dim must be even")
    half = d // 2
    protos = class_prototypes(config.num_classes, half, config.feature_seed)
    noise = np.random.default_rng([seed, frame.frame_id]).standard_normal(half)
    out = np.empty(d)
    out[:half] = protos[frame.label] + (config.feature_noise * frame.complexity) * noise
    out[half:] = frame.complexity
    return out


def trace_features(trace: FrameTrace, config: ExitNetConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Feature tensor ``(windows, T, d)`` and window labels for a whole trace."""
    T, d = trace.window_length, config.feature_dim
    n = trace.num_windows
    X = np.empty((n, T, d))
    for w, window in enumerate(trace.windows()):
        for t, frame in enumerate(window):
            X[w, t] = synth_features(frame, config, seed)
    return X, trace.window_labels()
