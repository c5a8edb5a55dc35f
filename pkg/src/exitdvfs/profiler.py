"""Per-layer CPU/GPU clock schedule search.

``cds_search`` is coordinate descent over layers: every sweep fixes all
layers but one, profiles ``N`` grid candidates for that layer and commits the
cheapest.  ``random_search`` samples whole schedules and ``brute_force``
enumerates them; both serve as comparators.  All profiling goes through a
``ProfileCache`` so evaluation counts are exact.
"""
from __future__ import annotations

import hashlib
import io
import math
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from . import kernels
from .devmodel import CostTable, DeviceProfile, DomainError, FrequencyPair, layer_energy, layer_latency

BRUTE_FORCE_LIMIT = 10**6
DEFAULT_BUDGET_FACTOR = 1.15


class InfeasibleError(RuntimeError):
    pass


class SearchGuardError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    pairs: tuple[FrequencyPair, ...]

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def switches(self) -> int:
        return sum(1 for a, b in zip(self.pairs, self.pairs[1:]) if a != b)

    def digest(self) -> str:
        text = ";".join(f"{p.cpu_freq:.6f}:{p.gpu_freq:.6f}" for p in self.pairs)
        return hashlib.sha1(text.encode()).hexdigest()[:16]

    @classmethod
    def uniform(cls, fp: FrequencyPair, n_layers: int) -> "Schedule":
        return cls((fp,) * n_layers)


@dataclass(frozen=True)
class SearchConfig:
    rounds: int = 3
    candidates: int = 8
    latency_budget: float | None = None
    seed: int = 0
    objective: Literal["energy", "energy_with_budget"] = "energy_with_budget"
    budget_factor: float = DEFAULT_BUDGET_FACTOR

    def __post_init__(self) -> None:
        if self.rounds < 1 or self.candidates < 1:
            raise ValueError("rounds and candidates must be >= 1")
        if self.latency_budget is not None and self.latency_budget <= 0:
            raise ValueError("latency_budget must be positive")
        if self.objective not in ("energy", "energy_with_budget"):
            raise ValueError(f"unknown objective {self.objective!r}")

    def eval_budget(self, n_layers: int) -> int:
        """Profiling budget granted to a comparator for a fair match-up."""
        return self.rounds * n_layers * self.candidates


@dataclass
class SearchResult:
    schedule: Schedule
    energy: float
    latency: float
    evaluations: int
    latency_budget: float | None = None
    history: list[float] = field(default_factory=list)


class ProfileCache:
    """(exit_point, schedule) -> (energy J, latency ms); entries are write-once."""

    def __init__(self) -> None:
        self._data: dict[tuple[int, tuple[int, ...]], tuple[float, float]] = {}
        self._lock = threading.Lock()
        self.evaluations = 0
        self.hits = 0

    def __len__(self) -> int:
        return len(self._data)

    def __contains__(self, key) -> bool:
        return key in self._data

    def get(self, key):
        return self._data.get(key)

    def insert(self, key, value: tuple[float, float]) -> tuple[float, float]:
        with self._lock:
            if key in self._data:
                return self._data[key]
            self._data[key] = value
            self.evaluations += 1
            return value

    def items(self):
        return self._data.items()


# -- lookup tables -------------------------------------------------------------


@dataclass(frozen=True)
class _Tables:
    pairs: tuple[FrequencyPair, ...]
    lat: np.ndarray            # (layers, pairs) ms
    en: np.ndarray             # (layers, pairs) J
    rank: np.ndarray           # grid-index sum per pair; orders pairs by total frequency
    overhead: float

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    @property
    def n_layers(self) -> int:
        return self.lat.shape[0]

    def index(self, fp: FrequencyPair) -> int:
        return self._index[fp]

    @property
    def max_index(self) -> int:
        return len(self.pairs) - 1

    def cost(self, idx: Sequence[int]) -> tuple[float, float]:
        return kernels.schedule_cost(np.asarray(idx, dtype=np.int_), self.lat, self.en, self.overhead)

    def schedule(self, idx: Sequence[int]) -> Schedule:
        return Schedule(tuple(self.pairs[int(p)] for p in idx))

    def rank_sum(self, idx: Sequence[int]) -> int:
        return int(sum(int(self.rank[p]) for p in idx))


@lru_cache(maxsize=64)
def _tables(profile: DeviceProfile, cost_table: CostTable, n_layers: int) -> _Tables:
    layers = cost_table.prefix(n_layers)
    pairs = tuple(profile.pairs)
    lat = np.array([[layer_latency(profile, c, fp) for fp in pairs] for c in layers], dtype=np.float64)
    en = np.array([[layer_energy(profile, c, fp) for fp in pairs] for c in layers], dtype=np.float64)
    lat = lat.reshape(len(layers), len(pairs))
    en = en.reshape(len(layers), len(pairs))
    rank = np.array([sum(profile.pair_index(fp)) for fp in pairs], dtype=np.int_)
    t = _Tables(pairs, lat, en, rank, float(profile.switch_overhead))
    object.__setattr__(t, "_index", {fp: k for k, fp in enumerate(pairs)})
    return t


def _schedule_key(tabs: _Tables, schedule: Schedule, profile: DeviceProfile) -> tuple[int, ...]:
    idx = []
    for fp in schedule.pairs:
        try:
            idx.append(tabs.index(profile.validate(fp)))
        except KeyError as exc:  # pragma: no cover - validate() already rejects these
            raise DomainError(f"{fp} is not a grid pair of {profile.name}") from exc
    return tuple(idx)


def _profile(cache: ProfileCache, tabs: _Tables, exit_point: int, idx: tuple[int, ...]) -> tuple[float, float]:
    key = (exit_point, idx)
    hit = cache.get(key)
    if hit is not None:
        cache.hits += 1
        return hit
    return cache.insert(key, tabs.cost(idx))


def max_frequency_latency(profile: DeviceProfile, cost_table: CostTable, exit_point: int) -> float:
    tabs = _tables(profile, cost_table, exit_point)
    return tabs.cost((tabs.max_index,) * exit_point)[1]


def resolve_budget(config: SearchConfig, profile: DeviceProfile, cost_table: CostTable, exit_point: int) -> float | None:
    """Latency budget in ms, or None when the objective is unconstrained energy."""
    if config.objective == "energy":
        return None
    if config.latency_budget is not None:
        return float(config.latency_budget)
    return config.budget_factor * max_frequency_latency(profile, cost_table, exit_point)


def _check_reachable(tabs: _Tables, budget: float | None, exit_point: int) -> None:
    if budget is None or exit_point == 0:
        return
    fastest = tabs.cost((tabs.max_index,) * exit_point)[1]
    if fastest > budget:
        tightest = int(np.argmax(tabs.lat[:, tabs.max_index])) + 1
        raise InfeasibleError(
            f"no schedule for {exit_point} layers meets {budget:.4f} ms (all-max latency "
            f"{fastest:.4f} ms); tightest layer is {tightest}"
        )


def _best_in_cache(cache: ProfileCache, tabs: _Tables, exit_point: int, budget: float | None):
    best_key, best = None, None
    for (ep, idx), (e, lat) in cache.items():
        if ep != exit_point or (budget is not None and lat > budget):
            continue
        key = (e, tabs.rank_sum(idx), idx)
        if best_key is None or key < best_key:
            best_key, best = key, (idx, e, lat)
    return best


# -- public operations -----------------------------------------------------------


def evaluate_schedule(
    schedule: Schedule,
    cost_table: CostTable,
    profile: DeviceProfile,
    cache: ProfileCache | None = None,
) -> tuple[float, float]:
    """Energy (J) and latency (ms) of running the first ``len(schedule)`` layers.

    Latency includes ``profile.switch_overhead`` for every change of clock
    pair between consecutive layers.
    """
    n = len(schedule)
    if n > cost_table.depth:
        raise DomainError(f"schedule has {n} layers but {cost_table.name} has {cost_table.depth}")
    if n == 0:
        return 0.0, 0.0
    tabs = _tables(profile, cost_table, n)
    idx = _schedule_key(tabs, schedule, profile)
    if cache is None:
        return tabs.cost(idx)
    return _profile(cache, tabs, n, idx)


def _sample_candidates(rng: np.random.Generator, n_pairs: int, n: int, current: int) -> list[int]:
    if n >= n_pairs:
        return list(range(n_pairs))
    forced = [current]
    if n >= 3:
        for extreme in (0, n_pairs - 1):
            if extreme not in forced:
                forced.append(extreme)
    forced = forced[:n]
    pool = np.array([p for p in range(n_pairs) if p not in forced], dtype=np.int_)
    extra = rng.choice(pool, size=n - len(forced), replace=False) if n > len(forced) else []
    return forced + [int(p) for p in extra]


def cds_search(
    exit_point: int,
    cost_table: CostTable,
    profile: DeviceProfile,
    config: SearchConfig = SearchConfig(),
    cache: ProfileCache | None = None,
) -> SearchResult:
    if exit_point < 1:
        raise DomainError("exit_point must be >= 1")
    cache = cache if cache is not None else ProfileCache()
    start_evals = cache.evaluations
    tabs = _tables(profile, cost_table, exit_point)
    budget = resolve_budget(config, profile, cost_table, exit_point)
    _check_reachable(tabs, budget, exit_point)
    rng = np.random.default_rng(config.seed)

    mid = tabs.index(profile.mid_pair)
    current = [mid] * exit_point
    e, lat = _profile(cache, tabs, exit_point, tuple(current))
    if budget is not None and lat > budget:
        # a budget-infeasible midpoint traps single-coordinate moves behind the
        # switch overhead; restart from the all-max schedule, feasible by construction
        current = [tabs.max_index] * exit_point
        e, lat = _profile(cache, tabs, exit_point, tuple(current))

    def score(idx: tuple[int, ...], e: float, lat: float):
        feasible = budget is None or lat <= budget
        return (0, e, tabs.rank_sum(idx), idx) if feasible else (1, lat, e, idx)

    history = []
    cur_score = score(tuple(current), e, lat)
    best_energy = e if cur_score[0] == 0 else math.inf
    for _ in range(config.rounds):
        for i in range(exit_point):
            for p in _sample_candidates(rng, tabs.n_pairs, config.candidates, current[i]):
                trial = list(current)
                trial[i] = p
                t = tuple(trial)
                te, tl = _profile(cache, tabs, exit_point, t)
                s = score(t, te, tl)
                if s < cur_score:
                    cur_score, current = s, trial
            if cur_score[0] == 0:
                best_energy = min(best_energy, cur_score[1])
            history.append(best_energy)

    found = _best_in_cache(cache, tabs, exit_point, budget)
    if found is None:
        raise InfeasibleError(f"CDS found no schedule within {budget} ms for {exit_point} layers")
    idx, e, lat = found
    return SearchResult(tabs.schedule(idx), e, lat, cache.evaluations - start_evals, budget, history)


def random_search(
    exit_point: int,
    cost_table: CostTable,
    profile: DeviceProfile,
    budget: int,
    seed: int = 0,
    latency_budget: float | None = None,
    cache: ProfileCache | None = None,
) -> SearchResult:
    """Best of ``budget`` uniformly sampled whole schedules."""
    if budget < 1:
        raise DomainError("random search budget must be >= 1")
    if exit_point < 1:
        raise DomainError("exit_point must be >= 1")
    cache = cache if cache is not None else ProfileCache()
    start_evals = cache.evaluations
    tabs = _tables(profile, cost_table, exit_point)
    _check_reachable(tabs, latency_budget, exit_point)
    rng = np.random.default_rng(seed)
    samples = rng.integers(0, tabs.n_pairs, size=(budget, exit_point))
    energies, latencies = kernels.batch_cost(samples, tabs.lat, tabs.en, tabs.overhead)

    best_key, best = None, None
    for row, e, lat in zip(samples, energies, latencies):
        idx = tuple(int(p) for p in row)
        e, lat = cache.insert((exit_point, idx), (float(e), float(lat)))
        if latency_budget is not None and lat > latency_budget:
            continue
        key = (e, tabs.rank_sum(idx), idx)
        if best_key is None or key < best_key:
            best_key, best = key, (idx, e, lat)
    if best is None:
        raise InfeasibleError(f"random search drew no schedule within {latency_budget} ms ({budget} samples)")
    idx, e, lat = best
    return SearchResult(tabs.schedule(idx), e, lat, cache.evaluations - start_evals, latency_budget)


def brute_force(
    exit_point: int,
    cost_table: CostTable,
    profile: DeviceProfile,
    latency_budget: float | None = None,
) -> SearchResult:
    """Exact minimum-energy schedule; ties go to lower total frequency, then lexicographic order."""
    tabs = _tables(profile, cost_table, exit_point)
    if tabs.n_pairs**exit_point > BRUTE_FORCE_LIMIT:
        raise SearchGuardError(
            f"{tabs.n_pairs}^{exit_point} schedules exceed the brute-force limit of {BRUTE_FORCE_LIMIT}"
        )
    limit = math.inf if latency_budget is None else float(latency_budget)
    idx, e, lat, n = kernels.brute_force(tabs.lat, tabs.en, tabs.rank, tabs.overhead, limit)
    if idx is None:
        raise InfeasibleError(f"no schedule for {exit_point} layers meets {latency_budget} ms")
    return SearchResult(tabs.schedule(idx), e, lat, tabs.n_pairs**exit_point, latency_budget)


# -- files -----------------------------------------------------------------------------


def format_schedule(schedule: Schedule) -> str:
    lines = ["layer_index,cpu_freq,gpu_freq"]
    lines += [f"{i},{p.cpu_freq:.6f},{p.gpu_freq:.6f}" for i, p in enumerate(schedule.pairs, start=1)]
    return "\n".join(lines) + "\n"


def parse_schedule(text: str) -> Schedule:
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("layer_index"):
            continue
        try:
            i, c, g = line.split(",")
            rows.append((int(i), FrequencyPair(round(float(c), 6), round(float(g), 6))))
        except ValueError as exc:
            raise DomainError(f"schedule line {lineno}: cannot parse {raw!r}") from exc
    rows.sort()
    if [i for i, _ in rows] != list(range(1, len(rows) + 1)):
        raise DomainError("schedule layer indices must be 1..n without gaps")
    return Schedule(tuple(fp for _, fp in rows))


def save_schedule(schedule: Schedule, path: str | Path) -> None:
    Path(path).write_text(format_schedule(schedule))


def load_schedule(path: str | Path) -> Schedule:
    return parse_schedule(Path(path).read_text())


def format_cache(cache: ProfileCache, profile: DeviceProfile) -> str:
    """Audit dump: one row per profiled schedule."""
    pairs = profile.pairs
    buf = io.StringIO()
    buf.write("exit_point,schedule_hash,energy_j,latency_ms\n")
    for (ep, idx), (e, lat) in sorted(cache.items()):
        digest = Schedule(tuple(pairs[p] for p in idx)).digest()
        buf.write(f"{ep},{digest},{e!r},{lat!r}\n")
    return buf.getvalue()
