"""Synthetic labeled frame-complexity traces and their text file format.

File layout::

    K=4,T=20
    0,0.123456,2
    1,0.130001,2
    ...

one row per frame (``frame_id,complexity,label``), complexities rendered with
six fractional digits.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Literal

import numpy as np

COMPLEXITY_DECIMALS = 6


class TraceParseError(ValueError):
    def __init__(self, lineno: int, message: str) -> None:
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class Frame:
    frame_id: int
    complexity: float
    label: int


@dataclass
class FrameTrace:
    frames: list[Frame]
    num_classes: int
    window_length: int

    def __post_init__(self) -> None:
        if self.window_length < 1:
            raise ValueError("window_length must be >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def num_windows(self) -> int:
        return len(self.frames) // self.window_length

    def windows(self) -> Iterator[list[Frame]]:
        """Consecutive windows of ``window_length`` frames; a trailing partial window is dropped."""
        T = self.window_length
        for w in range(self.num_windows):
            yield self.frames[w * T:(w + 1) * T]

    def window_labels(self) -> np.ndarray:
        return np.array([w[0].label for w in self.windows()], dtype=np.int64)

    def window_complexity(self) -> np.ndarray:
        return np.array([np.mean([f.complexity for f in w]) for w in self.windows()])


@dataclass(frozen=True)
class TraceGenConfig:
    num_windows: int
    K: int = 4
    T: int = 20
    distribution: Literal["uniform", "bimodal"] = "bimodal"
    p_low: float = 0.5
    lo_mean: float = 0.15
    hi_mean: float = 0.85
    mode_std: float = 0.08
    frame_jitter: float = 0.03
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_windows < 0 or self.K < 1 or self.T < 1:
            raise ValueError("num_windows >= 0, K >= 1 and T >= 1 required")
        if self.distribution not in ("uniform", "bimodal"):
            raise ValueError(f"unknown complexity distribution {self.distribution!r}")
        if not 0.0 <= self.p_low <= 1.0:
            raise ValueError("p_low must lie in [0, 1]")
        if not (0.0 <= self.lo_mean <= 1.0 and 0.0 <= self.hi_mean <= 1.0):
            raise ValueError("mode means must lie in [0, 1]")
        if self.mode_std < 0 or self.frame_jitter < 0:
            raise ValueError("standard deviations must be >= 0")


def generate_trace(config: TraceGenConfig) -> FrameTrace:
    rng = np.random.default_rng(config.seed)
    n, T = config.num_windows, config.T
    labels = rng.integers(0, config.K, size=n)
    if config.distribution == "uniform":
        base = rng.uniform(0.0, 1.0, size=n)
    else:
        low = rng.random(n) < config.p_low
        means = np.where(low, config.lo_mean, config.hi_mean)
        base = means + config.mode_std * rng.standard_normal(n)
    base = np.clip(base, 0.0, 1.0)
    per_frame = np.clip(base[:, None] + config.frame_jitter * rng.standard_normal((n, T)), 0.0, 1.0)
    per_frame = np.round(per_frame, COMPLEXITY_DECIMALS)

    frames = []
    for w in range(n):
        lab = int(labels[w])
        for t in range(T):
            frames.append(Frame(w * T + t, float(per_frame[w, t]), lab))
    return FrameTrace(frames, config.K, T)


def format_trace(trace: FrameTrace) -> str:
    lines = [f"K={trace.num_classes},T={trace.window_length}"]
    lines += [f"{f.frame_id},{f.complexity:.{COMPLEXITY_DECIMALS}f},{f.label}" for f in trace.frames]
    return "\n".join(lines) + "\n"


def parse_trace(text: str) -> FrameTrace:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise TraceParseError(1, "missing 'K=<classes>,T=<window>' header")
    try:
        header = dict(item.split("=", 1) for item in lines[0].strip().split(","))
        K, T = int(header["K"]), int(header["T"])
    except (ValueError, KeyError) as exc:
        raise TraceParseError(1, f"malformed header {lines[0]!r}") from exc
    if K < 1 or T < 1:
        raise TraceParseError(1, "K and T must be >= 1")

    frames = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.split(",")
        if len(parts) != 3:
            raise TraceParseError(lineno, f"expected 3 fields, got {len(parts)}")
        try:
            fid, c, lab = int(parts[0]), float(parts[1]), int(parts[2])
        except ValueError as exc:
            raise TraceParseError(lineno, f"cannot parse {raw!r}") from exc
        if not 0.0 <= c <= 1.0:
            raise TraceParseError(lineno, f"complexity {c} outside [0, 1]")
        if not 0 <= lab < K:
            raise TraceParseError(lineno, f"label {lab} outside [0, {K})")
        frames.append(Frame(fid, c, lab))
    return FrameTrace(frames, K, T)


def save_trace(trace: FrameTrace, path: str | Path) -> None:
    Path(path).write_text(format_trace(trace))


def load_trace(path: str | Path) -> FrameTrace:
    return parse_trace(Path(path).read_text())
