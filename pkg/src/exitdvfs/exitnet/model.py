"""Attention-gated early-exit network over frame windows.

Per window of ``T`` frame features ``phi_1..phi_T``:

* a two-layer LSTM accumulates ``z_t = Psi(z_{t-1}, phi_t)``;
* attention logits ``tau_t = <W1 z_{t-1}, tanh(W2 z_t)>`` with ``z_0 = 0`` are
  softmax-normalised over the window into ``beta``;
* frame ``t`` belongs to exit ``k(t) = ceil(E t / T)``; its gate MLP sees
  ``[z_{t-1}, z_t, beta_t]`` and its linear classifier sees ``z_t``;
* an auxiliary head classifies the pooled feature ``sum_t beta_t z_t``.

The forward pass keeps everything the hand-written backward pass needs.
"""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Final, Literal

import numpy as np
from scipy.special import expit, log_softmax, softmax

FULL: Final = "FULL"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ExitNetConfig:
    feature_dim: int = 64
    num_exits: int = 5
    window_length: int = 20
    num_classes: int = 4
    gate_hidden: tuple[int, int] = (64, 32)
    # recorded for completeness; the tau form above fixes W1, W2 at d x d
    attention_hidden: tuple[int, int] = (64, 32)
    gate_threshold: float = 0.5
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    feature_seed: int = 0
    feature_noise: float = 6.0
    gate_target: Literal["exit_safe", "raw_label"] = "exit_safe"

    def __post_init__(self) -> None:
        object.__setattr__(self, "gate_hidden", tuple(self.gate_hidden))
        object.__setattr__(self, "attention_hidden", tuple(self.attention_hidden))
        counts = (self.feature_dim, self.num_exits, self.window_length, self.num_classes, self.batch_size)
        if min(counts) < 1 or min(self.gate_hidden) < 1 or self.epochs < 0:
            raise ValueError("all counts must be >= 1")
        if not 0.0 < self.gate_threshold <= 1.0:
            raise ValueError("gate_threshold must lie in (0, 1]")
        if self.gate_target not in ("exit_safe", "raw_label"):
            raise ValueError(f"unknown gate_target {self.gate_target!r}")

    def exit_of_frame(self, t: int) -> int:
        """1-based exit served by 1-based frame ``t``."""
        k = math.ceil(self.num_exits * t / self.window_length)
        return min(self.num_exits, max(1, k))

    def exit_map(self, T: int | None = None) -> np.ndarray:
        """0-based exit index for each 0-based frame of a window of length ``T``."""
        T = self.window_length if T is None else T
        E = self.num_exits
        return np.array([min(E, max(1, math.ceil(E * t / T))) - 1 for t in range(1, T + 1)])

    def with_(self, **changes) -> "ExitNetConfig":
        d = asdict(self)
        d.update(changes)
        return ExitNetConfig(**d)


def param_shapes(config: ExitNetConfig) -> dict[str, tuple[int, ...]]:
    d, E, K = config.feature_dim, config.num_exits, config.num_classes
    h1, h2 = config.gate_hidden
    return {
        "lstm_W0": (4 * d, 2 * d),
        "lstm_b0": (4 * d,),
        "lstm_W1": (4 * d, 2 * d),
        "lstm_b1": (4 * d,),
        "att_W1": (d, d),
        "att_W2": (d, d),
        "gate_W1": (E, h1, 2 * d + 1),
        "gate_b1": (E, h1),
        "gate_W2": (E, h2, h1),
        "gate_b2": (E, h2),
        "gate_W3": (E, h2),
        "gate_b3": (E,),
        "cls_W": (E, K, d),
        "cls_b": (E, K),
        "aux_W": (K, d),
        "aux_b": (K,),
    }


def _fan_in(name: str, config: ExitNetConfig) -> int:
    d = config.feature_dim
    h1, h2 = config.gate_hidden
    if name.startswith("lstm"):
        return 2 * d
    return {"gate_W1": 2 * d + 1, "gate_b1": 2 * d + 1, "gate_W2": h1, "gate_b2": h1,
            "gate_W3": h2, "gate_b3": h2}.get(name, d)


@dataclass
class ExitNetModel:
    config: ExitNetConfig
    params: dict[str, np.ndarray]
    loss_history: list[float] = field(default_factory=list)

    @classmethod
    def initialize(cls, config: ExitNetConfig, seed: int | None = None) -> "ExitNetModel":
        """Uniform init in +-1/sqrt(fan_in), seeded."""
        rng = np.random.default_rng(config.seed if seed is None else seed)
        params = {}
        for name, shape in param_shapes(config).items():
            bound = 1.0 / math.sqrt(_fan_in(name, config))
            params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(config, params)

    @classmethod
    def zeros(cls, config: ExitNetConfig) -> "ExitNetModel":
        return cls(config, {n: np.zeros(s) for n, s in param_shapes(config).items()})

    def copy(self) -> "ExitNetModel":
        return ExitNetModel(self.config, {k: v.copy() for k, v in self.params.items()}, list(self.loss_history))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())

    # -- checkpoint -----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Zip of ``.npy`` arrays plus a JSON header; byte-stable for identical models."""
        header = {
            "format": "exitdvfs-exitnet",
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "loss_history": self.loss_history,
        }
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
            info = zipfile.ZipInfo("header.json", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, json.dumps(header, sort_keys=True))
            for name in sorted(self.params):
                arr = io.BytesIO()
                np.lib.format.write_array(arr, np.ascontiguousarray(self.params[name]), allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), arr.getvalue())
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "ExitNetModel":
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("format") != "exitdvfs-exitnet" or header.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint header {header.get('format')!r} v{header.get('version')}")
            config = ExitNetConfig(**header["config"])
            params = {}
            for name in param_shapes(config):
                params[name] = np.lib.format.read_array(io.BytesIO(zf.read(f"{name}.npy")), allow_pickle=False)
        for name, shape in param_shapes(config).items():
            if params[name].shape != shape:
                raise ValueError(f"{path}: {name} has shape {params[name].shape}, expected {shape}")
        return cls(config, params, list(header.get("loss_history", [])))


# -- single-step primitives ------------------------------------------------------


@dataclass
class AggregatorState:
    """Hidden and cell state of both LSTM layers; ``z`` is the top hidden state."""

    h0: np.ndarray
    c0: np.ndarray
    h1: np.ndarray
    c1: np.ndarray

    @classmethod
    def zeros(cls, d: int, batch: tuple[int, ...] = ()) -> "AggregatorState":
        z = np.zeros(batch + (d,))
        return cls(z, z.copy(), z.copy(), z.copy())

    @property
    def z(self) -> np.ndarray:
        return self.h1


def _lstm_step(W, b, x, h, c):
    d = h.shape[-1]
    xh = np.concatenate([x, h], axis=-1)
    a = xh @ W.T + b
    i = expit(a[..., :d])
    f = expit(a[..., d:2 * d])
    g = np.tanh(a[..., 2 * d:3 * d])
    o = expit(a[..., 3 * d:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return o * tc, c_new, (xh, i, f, g, o, tc, c)


def accumulate(state: AggregatorState, phi: np.ndarray, model: ExitNetModel) -> AggregatorState:
    """One aggregation step; ``state.z`` plays the role of ``z_{t-1}``."""
    d = model.config.feature_dim
    if phi.shape[-1] != d or state.z.shape[-1] != d:
        raise ValueError(f"expected feature dim {d}, got {phi.shape[-1]} and {state.z.shape[-1]}")
    p = model.params
    h0, c0, _ = _lstm_step(p["lstm_W0"], p["lstm_b0"], phi, state.h0, state.c0)
    h1, c1, _ = _lstm_step(p["lstm_W1"], p["lstm_b1"], h0, state.h1, state.c1)
    return AggregatorState(h0, c0, h1, c1)


def aggregate_window(features: np.ndarray, model: ExitNetModel) -> np.ndarray:
    """``z_1..z_T`` for one window ``(T, d)`` or a batch ``(B, T, d)``."""
    state = AggregatorState.zeros(model.config.feature_dim, features.shape[:-2])
    zs = []
    for t in range(features.shape[-2]):
        state = accumulate(state, features[..., t, :], model)
        zs.append(state.z)
    return np.stack(zs, axis=-2)


def attention_logits(z_window: np.ndarray, model: ExitNetModel) -> np.ndarray:
    if z_window.shape[-2] == 0:
        raise ValueError("attention over an empty window")
    z_prev = np.concatenate([np.zeros_like(z_window[..., :1, :]), z_window[..., :-1, :]], axis=-2)
    u = z_prev @ model.params["att_W1"].T
    v = np.tanh(z_window @ model.params["att_W2"].T)
    return np.sum(u * v, axis=-1)


def attention_scores(z_window, model: ExitNetModel) -> tuple[np.ndarray, np.ndarray]:
    """``(tau, beta)`` over a window of accumulated features; ``sum(beta) == 1``."""
    z = np.asarray(z_window, dtype=float)
    tau = attention_logits(z, model)
    return tau, softmax(tau, axis=-1)


def _check_exit(exit_index: int, config: ExitNetConfig) -> int:
    if not 1 <= exit_index <= config.num_exits:
        raise IndexError(f"exit_index {exit_index} outside 1..{config.num_exits}")
    return exit_index - 1


def gate_logit(z_prev, z_t, beta_t, model: ExitNetModel, exit_index: int) -> np.ndarray:
    k = _check_exit(exit_index, model.config)
    p = model.params
    beta_t = np.asarray(beta_t, dtype=float)
    x = np.concatenate([z_prev, z_t, beta_t[..., None]], axis=-1)
    h1 = np.tanh(x @ p["gate_W1"][k].T + p["gate_b1"][k])
    h2 = np.tanh(h1 @ p["gate_W2"][k].T + p["gate_b2"][k])
    return h2 @ p["gate_W3"][k] + p["gate_b3"][k]


def gate_forward(z_prev, z_t, beta_t, model: ExitNetModel, exit_index: int):
    """Exit probability of gate ``exit_index`` (1-based)."""
    return expit(gate_logit(z_prev, z_t, beta_t, model, exit_index))


def classify(z_t, model: ExitNetModel, exit_index: int) -> np.ndarray:
    k = _check_exit(exit_index, model.config)
    return np.asarray(z_t) @ model.params["cls_W"][k].T + model.params["cls_b"][k]


@dataclass(frozen=True)
class ExitDecision:
    exit_index: int | str
    fired_at_frame: int | None
    gate_probability: float
    predicted_label: int | None = None

    def __post_init__(self) -> None:
        if (self.exit_index == FULL) != (self.fired_at_frame is None):
            raise ValueError("exit_index is FULL exactly when no frame fired")


def first_firing(probabilities, threshold: float) -> int | None:
    """1-based index of the first probability >= threshold, or None."""
    for t, p in enumerate(probabilities, start=1):
        if p >= threshold:
            return t
    return None


def window_gate_probabilities(z: np.ndarray, beta: np.ndarray, model: ExitNetModel) -> np.ndarray:
    """Gate probability of every frame, each from the gate of its own exit. Shapes ``(..., T)``."""
    config = model.config
    T = z.shape[-2]
    z_prev = np.concatenate([np.zeros_like(z[..., :1, :]), z[..., :-1, :]], axis=-2)
    emap = config.exit_map(T)
    probs = np.empty(z.shape[:-1])
    for k in np.unique(emap):
        ts = np.flatnonzero(emap == k)
        probs[..., ts] = gate_forward(z_prev[..., ts, :], z[..., ts, :], beta[..., ts], model, int(k) + 1)
    return probs


def earliest_exit(window_features: np.ndarray, model: ExitNetModel, threshold: float | None = None) -> ExitDecision:
    """Scan frames in order and stop at the first gate probability >= threshold."""
    return decide_batch(window_features[None], model, threshold)[0]


def decide_batch(features: np.ndarray, model: ExitNetModel, threshold: float | None = None) -> list[ExitDecision]:
    config = model.config
    thr = config.gate_threshold if threshold is None else threshold
    z = aggregate_window(features, model)
    _, beta = attention_scores(z, model)
    probs = window_gate_probabilities(z, beta, model)
    T = features.shape[-2]
    emap = config.exit_map(T)
    out = []
    for b in range(features.shape[0]):
        t_star = first_firing(probs[b], thr)
        if t_star is None:
            logits = classify(z[b, -1], model, config.num_exits)
            out.append(ExitDecision(FULL, None, float(probs[b, -1]), int(np.argmax(logits))))
        else:
            k = int(emap[t_star - 1]) + 1
            logits = classify(z[b, t_star - 1], model, k)
            out.append(ExitDecision(k, t_star, float(probs[b, t_star - 1]), int(np.argmax(logits))))
    return out


# -- batched forward / loss / backward ----------------------------------------------


@dataclass
class Forward:
    Z: np.ndarray
    Zp: np.ndarray
    lstm_cache: list
    U: np.ndarray
    V: np.ndarray
    beta: np.ndarray
    S: np.ndarray
    aux_logits: np.ndarray
    logits: np.ndarray
    gate_in: np.ndarray
    gate_h1: np.ndarray
    gate_h2: np.ndarray
    gate_q: np.ndarray


def forward(params: dict[str, np.ndarray], config: ExitNetConfig, X: np.ndarray) -> Forward:
    B, T, d = X.shape
    lstm_cache = [[], []]
    states = [(np.zeros((B, d)), np.zeros((B, d))), (np.zeros((B, d)), np.zeros((B, d)))]
    Z = np.empty((B, T, d))
    for t in range(T):
        x = X[:, t]
        for layer in range(2):
            h, c = states[layer]
            h, c, cache = _lstm_step(params[f"lstm_W{layer}"], params[f"lstm_b{layer}"], x, h, c)
            states[layer] = (h, c)
            lstm_cache[layer].append(cache)
            x = h
        Z[:, t] = x
    Zp = np.concatenate([np.zeros((B, 1, d)), Z[:, :-1]], axis=1)

    U = Zp @ params["att_W1"].T
    V = np.tanh(Z @ params["att_W2"].T)
    beta = softmax(np.sum(U * V, axis=-1), axis=-1)
    S = np.einsum("bt,btd->bd", beta, Z)
    aux_logits = S @ params["aux_W"].T + params["aux_b"]

    emap = config.exit_map(T)
    K = config.num_classes
    h1n, h2n = config.gate_hidden
    logits = np.empty((B, T, K))
    gate_in = np.concatenate([Zp, Z, beta[..., None]], axis=-1)
    gate_h1 = np.empty((B, T, h1n))
    gate_h2 = np.empty((B, T, h2n))
    gate_q = np.empty((B, T))
    for k in np.unique(emap):
        ts = np.flatnonzero(emap == k)
        logits[:, ts] = Z[:, ts] @ params["cls_W"][k].T + params["cls_b"][k]
        a1 = np.tanh(gate_in[:, ts] @ params["gate_W1"][k].T + params["gate_b1"][k])
        a2 = np.tanh(a1 @ params["gate_W2"][k].T + params["gate_b2"][k])
        gate_h1[:, ts], gate_h2[:, ts] = a1, a2
        gate_q[:, ts] = a2 @ params["gate_W3"][k] + params["gate_b3"][k]
    return Forward(Z, Zp, lstm_cache, U, V, beta, S, aux_logits, logits, gate_in, gate_h1, gate_h2, gate_q)


def gate_targets(fw: Forward, y: np.ndarray, config: ExitNetConfig) -> np.ndarray:
    """Binary gate labels: exit-safe (the frame's exit classifier is right) or the raw label clipped to {0, 1}."""
    if config.gate_target == "raw_label":
        return np.broadcast_to(np.minimum(y, 1)[:, None], fw.gate_q.shape).astype(float)
    return (np.argmax(fw.logits, axis=-1) == y[:, None]).astype(float)


@dataclass(frozen=True)
class LossTerms:
    cls: float
    gate: float
    att: float

    @property
    def total(self) -> float:
        return self.cls + self.gate + self.att


def _losses(fw: Forward, y: np.ndarray, targets: np.ndarray) -> LossTerms:
    B, T = fw.gate_q.shape
    lp = log_softmax(fw.logits, axis=-1)
    l_cls = -float(np.mean(np.take_along_axis(lp, np.broadcast_to(y[:, None, None], (B, T, 1)), -1)))
    q = fw.gate_q
    l_gate = float(np.mean(np.logaddexp(0.0, q) - targets * q))
    la = log_softmax(fw.aux_logits, axis=-1)
    l_att = -float(np.mean(la[np.arange(B), y]))
    return LossTerms(l_cls, l_gate, l_att)


def loss_total(X: np.ndarray, y: np.ndarray, model: ExitNetModel) -> tuple[float, float, float, float]:
    """``(L_cls, L_gate, L_att, L)`` on a batch of window features ``(B, T, d)``."""
    if len(X) == 0:
        raise ValueError("empty batch")
    y = np.asarray(y, dtype=np.int64)
    fw = forward(model.params, model.config, X)
    terms = _losses(fw, y, gate_targets(fw, y, model.config))
    return terms.cls, terms.gate, terms.att, terms.total


def _lstm_backward(W, cache, dh_ext):
    B, T, d = dh_ext.shape
    din = cache[0][0].shape[1] - d
    dW = np.zeros_like(W)
    db = np.zeros(W.shape[0])
    dx = np.empty((B, T, din))
    dh_next = np.zeros((B, d))
    dc_next = np.zeros((B, d))
    for t in range(T - 1, -1, -1):
        xh, i, f, g, o, tc, c_prev = cache[t]
        dh = dh_ext[:, t] + dh_next
        do = dh * tc
        dc = dh * o * (1.0 - tc * tc) + dc_next
        da = np.concatenate(
            [dc * g * i * (1.0 - i), dc * c_prev * f * (1.0 - f), dc * i * (1.0 - g * g), do * o * (1.0 - o)],
            axis=-1,
        )
        dc_next = dc * f
        dW += da.T @ xh
        db += da.sum(axis=0)
        dxh = da @ W
        dx[:, t] = dxh[:, :din]
        dh_next = dxh[:, din:]
    return dW, db, dx


def loss_and_grad(
    params: dict[str, np.ndarray],
    config: ExitNetConfig,
    X: np.ndarray,
    y: np.ndarray,
    targets: np.ndarray | None = None,
) -> tuple[LossTerms, dict[str, np.ndarray], np.ndarray]:
    """Loss terms, gradient of the total loss, and the gate targets used.

    Gate targets are treated as constants; pass them in to hold them fixed
    (finite-difference checks do this).
    """
    B, T, d = X.shape
    K = config.num_classes
    fw = forward(params, config, X)
    if targets is None:
        targets = gate_targets(fw, y, config)
    terms = _losses(fw, y, targets)
    grads = {n: np.zeros_like(v) for n, v in params.items()}
    onehot = np.eye(K)[y]

    dlogits = (softmax(fw.logits, axis=-1) - onehot[:, None, :]) / (B * T)
    dq = (expit(fw.gate_q) - targets) / (B * T)
    daux = (softmax(fw.aux_logits, axis=-1) - onehot) / B

    dZ = np.zeros_like(fw.Z)
    dZp = np.zeros_like(fw.Zp)
    dbeta = np.zeros_like(fw.beta)

    emap = config.exit_map(T)
    for k in np.unique(emap):
        ts = np.flatnonzero(emap == k)
        dl = dlogits[:, ts]
        grads["cls_W"][k] = np.einsum("btk,btd->kd", dl, fw.Z[:, ts])
        grads["cls_b"][k] = dl.sum(axis=(0, 1))
        dZ[:, ts] += dl @ params["cls_W"][k]

        h1, h2, gin, dqk = fw.gate_h1[:, ts], fw.gate_h2[:, ts], fw.gate_in[:, ts], dq[:, ts]
        grads["gate_W3"][k] = np.einsum("bt,bth->h", dqk, h2)
        grads["gate_b3"][k] = dqk.sum()
        da2 = dqk[..., None] * params["gate_W3"][k] * (1.0 - h2 * h2)
        grads["gate_W2"][k] = np.einsum("bti,btj->ij", da2, h1)
        grads["gate_b2"][k] = da2.sum(axis=(0, 1))
        da1 = (da2 @ params["gate_W2"][k]) * (1.0 - h1 * h1)
        grads["gate_W1"][k] = np.einsum("bti,btj->ij", da1, gin)
        grads["gate_b1"][k] = da1.sum(axis=(0, 1))
        dgin = da1 @ params["gate_W1"][k]
        dZp[:, ts] += dgin[..., :d]
        dZ[:, ts] += dgin[..., d:2 * d]
        dbeta[:, ts] += dgin[..., 2 * d]

    grads["aux_W"] = daux.T @ fw.S
    grads["aux_b"] = daux.sum(axis=0)
    dS = daux @ params["aux_W"]
    dZ += fw.beta[..., None] * dS[:, None, :]
    dbeta += np.einsum("btd,bd->bt", fw.Z, dS)

    dtau = fw.beta * (dbeta - np.sum(fw.beta * dbeta, axis=-1, keepdims=True))
    dU = dtau[..., None] * fw.V
    dV = dtau[..., None] * fw.U
    grads["att_W1"] = np.einsum("bti,btj->ij", dU, fw.Zp)
    dZp += dU @ params["att_W1"]
    dpre = dV * (1.0 - fw.V * fw.V)
    grads["att_W2"] = np.einsum("bti,btj->ij", dpre, fw.Z)
    dZ += dpre @ params["att_W2"]
    dZ[:, :-1] += dZp[:, 1:]

    dW, db, dx = _lstm_backward(params["lstm_W1"], fw.lstm_cache[1], dZ)
    grads["lstm_W1"], grads["lstm_b1"] = dW, db
    dW, db, _ = _lstm_backward(params["lstm_W0"], fw.lstm_cache[0], dx)
    grads["lstm_W0"], grads["lstm_b0"] = dW, db
    return terms, grads, targets
