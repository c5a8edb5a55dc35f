"""Trace-driven simulation of exit decisions plus clock schedules.

Each window of the trace is classified once: the policy decides the exit
(early exit or the full network), the governor looks up the clock schedule
for that many layers, and the window is charged the schedule's energy and
latency.  Schedules are searched once per layer count and reused.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .devmodel import CostTable, DeviceProfile
from .exitnet import FULL, ExitNetModel, aggregate_window, classify, decide_batch, trace_features
from .profiler import (
    InfeasibleError,
    ProfileCache,
    Schedule,
    SearchConfig,
    cds_search,
    evaluate_schedule,
    random_search,
    resolve_budget,
)
from .tracegen import FrameTrace


class ConfigurationError(ValueError):
    pass


class Variant(str, Enum):
    E4 = "E4"
    DVFS_ONLY = "DVFS_ONLY"
    EARLYEXIT_ONLY = "EARLYEXIT_ONLY"
    BASELINE_MAX = "BASELINE_MAX"
    BASELINE_MIN = "BASELINE_MIN"
    E4_R = "E4_R"


_EARLY_EXIT = {Variant.E4, Variant.EARLYEXIT_ONLY, Variant.E4_R}
_SEARCHED = {Variant.E4, Variant.DVFS_ONLY, Variant.E4_R}


@dataclass(frozen=True)
class GovernorPolicy:
    variant: Variant
    search: SearchConfig = SearchConfig()
    gate_threshold: float | None = None  # None: the model's own threshold

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "variant", Variant(self.variant))
        except ValueError:
            names = ", ".join(v.value for v in Variant)
            raise ConfigurationError(f"unknown policy {self.variant!r}; valid policies: {names}") from None
        if self.gate_threshold is not None and not 0.0 < self.gate_threshold <= 1.0:
            raise ConfigurationError("gate_threshold must lie in (0, 1]")

    @property
    def uses_early_exit(self) -> bool:
        return self.variant in _EARLY_EXIT

    @property
    def uses_search(self) -> bool:
        return self.variant in _SEARCHED


@dataclass(frozen=True)
class WindowRecord:
    window: int
    label: int
    exit: str
    layers: int
    energy_j: float
    latency_ms: float
    correct: bool | None
    schedule: str
    fallback: bool = False


RECORD_FIELDS = [f.name for f in dataclasses.fields(WindowRecord)]


@dataclass
class SimReport:
    policy: str
    seed: int
    device: str
    cost_table: str
    windows: int
    total_energy: float
    busy_time_s: float
    mean_power: float
    mean_latency: float
    exit_histogram: dict[str, int]
    accuracy: float | None
    evaluation_count: int
    records: list[WindowRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self, with_records: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not with_records:
            d.pop("records")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimReport":
        d = dict(d)
        d["records"] = [WindowRecord(**r) for r in d.get("records", [])]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SimReport":
        return cls.from_dict(json.loads(text))

    def records_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in self.records:
            w.writerow([_cell(getattr(r, k)) for k in RECORD_FIELDS])
        return buf.getvalue()


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _search_seed(seed: int, layers: int) -> int:
    return int(np.random.SeedSequence([seed, layers]).generate_state(1)[0])


def _plan(policy: GovernorPolicy, layers: int, profile: DeviceProfile, cost_table: CostTable,
          cache: ProfileCache, seed: int) -> tuple[Schedule, bool]:
    """Clock schedule for running ``layers`` layers; the flag marks a fallback to max clocks."""
    v = policy.variant
    if v in (Variant.BASELINE_MAX, Variant.EARLYEXIT_ONLY):
        return Schedule.uniform(profile.max_pair, layers), False
    if v is Variant.BASELINE_MIN:
        return Schedule.uniform(profile.min_pair, layers), False
    cfg = dataclasses.replace(policy.search, seed=_search_seed(seed, layers))
    if v is Variant.E4_R:
        budget = resolve_budget(cfg, profile, cost_table, layers)
        try:
            res = random_search(layers, cost_table, profile, cfg.eval_budget(layers), cfg.seed, budget, cache)
        except InfeasibleError:
            return Schedule.uniform(profile.max_pair, layers), True
        return res.schedule, False
    return cds_search(layers, cost_table, profile, cfg, cache).schedule, False


def _check_model(model: ExitNetModel, trace: FrameTrace, cost_table: CostTable) -> None:
    cfg = model.config
    if cfg.num_exits != len(cost_table.exit_points):
        raise ConfigurationError(
            f"model has {cfg.num_exits} exits but {cost_table.name} defines {len(cost_table.exit_points)}"
        )
    if trace.num_classes != cfg.num_classes or trace.window_length != cfg.window_length:
        raise ConfigurationError(
            f"trace (K={trace.num_classes}, T={trace.window_length}) does not match model "
            f"(K={cfg.num_classes}, T={cfg.window_length})"
        )


def simulate(
    trace: FrameTrace,
    profile: DeviceProfile,
    cost_table: CostTable,
    model: ExitNetModel | None,
    policy: GovernorPolicy,
    seed: int = 0,
) -> SimReport:
    """Run every full window of ``trace`` under ``policy``.

    Features are drawn with ``seed``; schedule searches derive their seeds
    from it and the layer count, so a run is reproducible bit for bit.
    Accuracy is None when no model is supplied.
    """
    if policy.uses_early_exit and model is None:
        raise ConfigurationError(f"policy {policy.variant.value} needs an early-exit model")
    exit_points = cost_table.exit_points
    if not exit_points:
        raise ConfigurationError(f"cost table {cost_table.name} defines no exit points")
    if model is not None:
        _check_model(model, trace, cost_table)

    n = trace.num_windows
    labels = trace.window_labels()
    exits: list = [FULL] * n
    preds = None
    if n and model is not None:
        X, _ = trace_features(trace, model.config, seed)
        if policy.uses_early_exit:
            decisions = decide_batch(X, model, policy.gate_threshold)
            exits = [d.exit_index for d in decisions]
            preds = [d.predicted_label for d in decisions]
        else:
            z = aggregate_window(X, model)
            preds = [int(p) for p in np.argmax(classify(z[:, -1], model, model.config.num_exits), axis=-1)]

    cache = ProfileCache()
    plans: dict[int, tuple[Schedule, bool, float, float]] = {}
    hist = {str(k): 0 for k in range(1, len(exit_points) + 1)} | {FULL: 0}
    records = []
    for w in range(n):
        k = exits[w]
        layers = cost_table.depth if k == FULL else exit_points[k - 1]
        if layers not in plans:
            sched, fallback = _plan(policy, layers, profile, cost_table, cache, seed)
            e, lat = evaluate_schedule(sched, cost_table, profile)
            plans[layers] = (sched, fallback, e, lat)
        sched, fallback, e, lat = plans[layers]
        hist[str(k)] += 1
        correct = None if preds is None else bool(preds[w] == labels[w])
        records.append(WindowRecord(w, int(labels[w]), str(k), layers, e, lat, correct, sched.digest(), fallback))

    total_e = sum(r.energy_j for r in records)
    total_lat = sum(r.latency_ms for r in records)
    busy = total_lat / 1000.0
    return SimReport(
        policy=policy.variant.value,
        seed=seed,
        device=profile.name,
        cost_table=cost_table.name,
        windows=n,
        total_energy=total_e,
        busy_time_s=busy,
        mean_power=total_e / busy if busy > 0 else 0.0,
        mean_latency=total_lat / n if n else 0.0,
        exit_histogram=hist,
        accuracy=float(np.mean([r.correct for r in records])) if n and preds is not None else None,
        evaluation_count=cache.evaluations,
        records=records,
    )


# -- comparison tables ---------------------------------------------------------------

COMPARISON_FIELDS = ["label", "policy", "latency_ms", "power_w", "energy_j", "accuracy", "speedup", "energy_saving"]


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    policy: str
    latency_ms: float
    power_w: float
    energy_j: float
    accuracy: float | None
    speedup: float
    energy_saving: float


@dataclass
class ComparisonTable:
    rows: list[ComparisonRow]

    def __len__(self) -> int:
        return len(self.rows)

    def row(self, label: str) -> ComparisonRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COMPARISON_FIELDS)
        for r in self.rows:
            w.writerow([_cell(getattr(r, k)) for k in COMPARISON_FIELDS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ComparisonTable":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            nums = {k: float(rec[k]) for k in ("latency_ms", "power_w", "energy_j", "speedup", "energy_saving")}
            acc = float(rec["accuracy"]) if rec["accuracy"] else None
            rows.append(ComparisonRow(rec["label"], rec["policy"], accuracy=acc, **nums))
        return cls(rows)


def _ratio(num: float, den: float) -> float:
    return num / den if den != 0 else math.nan


def compare(reports: Sequence[SimReport], labels: Sequence[str] | None = None,
            baseline: str = Variant.BASELINE_MAX.value) -> ComparisonTable:
    """Tabulate reports; speedup and energy saving are relative to the ``baseline`` policy row."""
    if not reports:
        raise ValueError("compare needs at least one report")
    labels = list(labels) if labels is not None else [r.policy for r in reports]
    if len(labels) != len(reports):
        raise ValueError("one label per report required")
    base = next((r for r in reports if r.policy == baseline), None)
    if base is None:
        raise ConfigurationError(f"no {baseline} report to compare against")
    rows = [
        ComparisonRow(
            label=lab,
            policy=r.policy,
            latency_ms=r.mean_latency,
            power_w=r.mean_power,
            energy_j=r.total_energy,
            accuracy=r.accuracy,
            speedup=_ratio(base.mean_latency, r.mean_latency),
            energy_saving=1.0 - _ratio(r.total_energy, base.total_energy),
        )
        for lab, r in zip(labels, reports)
    ]
    return ComparisonTable(rows)


ABLATION_ROWS: tuple[tuple[str, Variant], ...] = (
    ("neither", Variant.BASELINE_MAX),
    ("DVFS-only", Variant.DVFS_ONLY),
    ("EE-only", Variant.EARLYEXIT_ONLY),
    ("both", Variant.E4),
)


def ablation_reports(trace: FrameTrace, profile: DeviceProfile, cost_table: CostTable,
                     model: ExitNetModel | None, seed: int = 0, search: SearchConfig = SearchConfig(),
                     gate_threshold: float | None = None) -> list[SimReport]:
    return [
        simulate(trace, profile, cost_table, model, GovernorPolicy(v, search, gate_threshold), seed)
        for _, v in ABLATION_ROWS
    ]


def ablation(trace: FrameTrace, profile: DeviceProfile, cost_table: CostTable, model: ExitNetModel | None,
             seed: int = 0, search: SearchConfig = SearchConfig(),
             gate_threshold: float | None = None) -> ComparisonTable:
    """Four-row DVFS by early-exit ablation on one trace and seed."""
    reports = ablation_reports(trace, profile, cost_table, model, seed, search, gate_threshold)
    return compare(reports, [lab for lab, _ in ABLATION_ROWS])

