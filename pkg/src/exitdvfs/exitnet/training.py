"""Adam training of the early-exit network and finite-difference gradient checks."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..tracegen import FrameTrace
from .features import trace_features
from .model import FULL, ExitNetConfig, ExitNetModel, decide_batch, loss_and_grad, param_shapes

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def epoch_feature_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train(dataset: FrameTrace, config: ExitNetConfig, X: np.ndarray | None = None) -> ExitNetModel:
    """Minimise ``L_cls + L_gate + L_att`` with Adam.

    Frame noise is redrawn every epoch (seed derived from ``config.seed`` and
    the epoch) so the heads cannot memorise it and the exit-safe gate targets
    track held-out correctness.  A fixed tensor ``X`` disables the redraw.
    ``model.loss_history`` holds the mean total loss of every epoch.
    """
    if dataset.num_windows == 0:
        raise ValueError("training needs at least one full window")
    if dataset.window_length != config.window_length or dataset.num_classes != config.num_classes:
        raise ValueError(
            f"dataset (K={dataset.num_classes}, T={dataset.window_length}) does not match config "
            f"(K={config.num_classes}, T={config.window_length})"
        )
    fixed = X is not None
    y = dataset.window_labels()
    model = ExitNetModel.initialize(config)
    opt = Adam(model.params, config.learning_rate)
    rng = np.random.default_rng([config.seed, 1])
    n = dataset.num_windows
    for epoch in range(config.epochs):
        if not fixed:
            X, _ = trace_features(dataset, config, epoch_feature_seed(config.seed, epoch))
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            terms, grads, _ = loss_and_grad(model.params, config, X[batch], y[batch])
            if not math.isfinite(terms.total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}: "
                    f"cls={terms.cls} gate={terms.gate} att={terms.att}"
                )
            opt.step(model.params, grads)
            total += terms.total * len(batch)
            seen += len(batch)
        model.loss_history.append(total / seen)
        log.debug("epoch %d loss %.5f", epoch, model.loss_history[-1])
    return model


@dataclass
class EvalSummary:
    accuracy: float
    exit_histogram: dict[str, int]
    mean_layers: float
    exits: list
    correct: np.ndarray


def evaluate(model: ExitNetModel, X: np.ndarray, y: np.ndarray, exit_layers: tuple[int, ...],
             threshold: float | None = None) -> EvalSummary:
    """Early-exit accuracy, exit usage and mean executed layer count on window features."""
    decisions = decide_batch(X, model, threshold)
    E = model.config.num_exits
    hist = {str(k): 0 for k in range(1, E + 1)} | {FULL: 0}
    layers = []
    for dec in decisions:
        hist[str(dec.exit_index)] += 1
        layers.append(exit_layers[-1] if dec.exit_index == FULL else exit_layers[dec.exit_index - 1])
    pred = np.array([d.predicted_label for d in decisions])
    correct = pred == np.asarray(y)
    return EvalSummary(float(correct.mean()) if len(y) else float("nan"), hist, float(np.mean(layers)),
                       [d.exit_index for d in decisions], correct)


def _flat_coords(params: dict[str, np.ndarray], names, n: int, rng) -> list[tuple[str, tuple]]:
    sizes = np.array([params[k].size for k in names])
    picks = rng.choice(sizes.sum(), size=min(n, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for flat in np.sort(picks):
        j = int(np.searchsorted(offsets, flat, side="right")) - 1
        out.append((names[j], np.unravel_index(int(flat - offsets[j]), params[names[j]].shape)))
    return out


def grad_check(
    model: ExitNetModel,
    sample: tuple[np.ndarray, np.ndarray],
    epsilon: float = 1e-5,
    n_coords: int = 200,
    params: tuple[str, ...] | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and two-sided finite-difference gradients.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    round-off on near-zero components from dominating.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not model.is_finite():
        raise ValueError("model parameters must be finite")
    X, y = sample
    y = np.asarray(y, dtype=np.int64)
    cfg = model.config
    p = {k: v.copy() for k, v in model.params.items()}
    _, grads, targets = loss_and_grad(p, cfg, X, y)
    names = list(params) if params is not None else list(param_shapes(cfg))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, ix in _flat_coords(p, names, n_coords, rng):
        orig = p[name][ix]
        p[name][ix] = orig + epsilon
        lp = loss_and_grad(p, cfg, X, y, targets)[0].total
        p[name][ix] = orig - epsilon
        lm = loss_and_grad(p, cfg, X, y, targets)[0].total
        p[name][ix] = orig
        num = (lp - lm) / (2.0 * epsilon)
        ana = grads[name][ix]
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst
