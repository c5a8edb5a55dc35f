"""Per-layer latency, power and energy model for a CPU+GPU edge device.

Latency of one layer at clocks ``(C, G)`` in GHz::

    t = w_c / C + w_g / G                     (ms)

Whole-device power::

    P = min(P0 + a_c * C**3 + a_g * G**3, power_cap)   (W)

and the energy of a layer is ``P * t / 1000`` joules.  ``calibrate`` fits
``P0, a_c, a_g`` and a global work scale on the cost table against measured
(latency, power) anchors.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import nnls

MIN_FREQ_GHZ = 0.1
GRID_DECIMALS = 6
_GRID_TOL = 1e-6


class DomainError(ValueError):
    """Input outside the domain of a model operation."""


class CalibrationError(ValueError):
    """Anchors cannot be fitted by the power/latency model."""


@dataclass(frozen=True, order=True)
class FrequencyPair:
    cpu_freq: float
    gpu_freq: float

    @property
    def total(self) -> float:
        return self.cpu_freq + self.gpu_freq


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    cpu_range: tuple[float, float]
    gpu_range: tuple[float, float]
    grid_step: float = 0.1
    static_power: float = 0.0
    cpu_power_coeff: float = 0.0
    gpu_power_coeff: float = 0.0
    switch_overhead: float = 0.5
    power_cap: float = math.inf

    def __post_init__(self) -> None:
        object.__setattr__(self, "cpu_range", tuple(float(x) for x in self.cpu_range))
        object.__setattr__(self, "gpu_range", tuple(float(x) for x in self.gpu_range))
        for label, (lo, hi) in (("cpu", self.cpu_range), ("gpu", self.gpu_range)):
            if lo < MIN_FREQ_GHZ - _GRID_TOL:
                raise DomainError(f"{self.name}: {label} minimum {lo} GHz below {MIN_FREQ_GHZ} GHz")
            if hi < lo:
                raise DomainError(f"{self.name}: {label} range [{lo}, {hi}] is inverted")
        if self.grid_step <= 0:
            raise DomainError(f"{self.name}: grid_step must be positive")
        coeffs = (self.static_power, self.cpu_power_coeff, self.gpu_power_coeff, self.switch_overhead)
        if min(coeffs) < 0:
            raise DomainError(f"{self.name}: power coefficients and switch overhead must be >= 0")
        if self.raw_power(self.max_pair) > self.power_cap * (1 + 1e-9):
            raise DomainError(
                f"{self.name}: modeled power at max clocks {self.raw_power(self.max_pair):.3f} W "
                f"exceeds power cap {self.power_cap} W"
            )

    # -- frequency grid -------------------------------------------------

    def _axis(self, rng: tuple[float, float]) -> tuple[float, ...]:
        lo, hi = rng
        n = int(math.floor((hi - lo) / self.grid_step + _GRID_TOL)) + 1
        return tuple(round(lo + k * self.grid_step, GRID_DECIMALS) for k in range(n))

    @property
    def cpu_grid(self) -> tuple[float, ...]:
        return self._axis(self.cpu_range)

    @property
    def gpu_grid(self) -> tuple[float, ...]:
        return self._axis(self.gpu_range)

    @property
    def pairs(self) -> list[FrequencyPair]:
        """All grid pairs, ordered lexicographically by (cpu, gpu)."""
        return [FrequencyPair(c, g) for c in self.cpu_grid for g in self.gpu_grid]

    @property
    def max_pair(self) -> FrequencyPair:
        return FrequencyPair(self.cpu_grid[-1], self.gpu_grid[-1])

    @property
    def min_pair(self) -> FrequencyPair:
        return FrequencyPair(self.cpu_grid[0], self.gpu_grid[0])

    @property
    def mid_pair(self) -> FrequencyPair:
        cg, gg = self.cpu_grid, self.gpu_grid
        return FrequencyPair(cg[(len(cg) - 1) // 2], gg[(len(gg) - 1) // 2])

    def _axis_index(self, freq: float, rng: tuple[float, float], label: str) -> int:
        lo, hi = rng
        if not (lo - _GRID_TOL <= freq <= hi + _GRID_TOL):
            raise DomainError(f"{self.name}: {label} frequency {freq} GHz outside [{lo}, {hi}]")
        k = (freq - lo) / self.grid_step
        if abs(k - round(k)) > _GRID_TOL:
            raise DomainError(f"{self.name}: {label} frequency {freq} GHz is off the {self.grid_step} GHz grid")
        return int(round(k))

    def pair_index(self, fp: FrequencyPair) -> tuple[int, int]:
        """Grid coordinates of ``fp``; raises DomainError when off-grid or out of range."""
        return (
            self._axis_index(fp.cpu_freq, self.cpu_range, "cpu"),
            self._axis_index(fp.gpu_freq, self.gpu_range, "gpu"),
        )

    def validate(self, fp: FrequencyPair) -> FrequencyPair:
        ci, gi = self.pair_index(fp)
        return FrequencyPair(self.cpu_grid[ci], self.gpu_grid[gi])

    def snap(self, cpu_freq: float, gpu_freq: float) -> FrequencyPair:
        """Nearest grid pair to arbitrary in-range clocks."""
        def nearest(f: float, axis: tuple[float, ...]) -> float:
            if not (axis[0] - _GRID_TOL <= f <= axis[-1] + _GRID_TOL):
                raise DomainError(f"{self.name}: frequency {f} GHz outside [{axis[0]}, {axis[-1]}]")
            k = min(len(axis) - 1, max(0, int(round((f - axis[0]) / self.grid_step))))
            return axis[k]

        return FrequencyPair(nearest(cpu_freq, self.cpu_grid), nearest(gpu_freq, self.gpu_grid))

    def raw_power(self, fp: FrequencyPair) -> float:
        c, g = fp.cpu_freq, fp.gpu_freq
        return self.static_power + self.cpu_power_coeff * (c * c * c) + self.gpu_power_coeff * (g * g * g)

    # -- (de)serialization ------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cpu_range"] = list(self.cpu_range)
        d["gpu_range"] = list(self.gpu_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceProfile":
        return cls(**d)


@dataclass(frozen=True)
class LayerCost:
    layer_index: int
    cpu_work: float
    gpu_work: float

    def __post_init__(self) -> None:
        if self.cpu_work < 0 or self.gpu_work < 0:
            raise DomainError(f"layer {self.layer_index}: work must be >= 0")


@dataclass(frozen=True)
class CostTable:
    """Per-layer work of one backbone plus the layer counts at its exit points."""

    name: str
    layers: tuple[LayerCost, ...]
    exit_points: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "exit_points", tuple(int(e) for e in self.exit_points))
        idx = [c.layer_index for c in self.layers]
        if len(set(idx)) != len(idx):
            raise DomainError(f"{self.name}: duplicate layer_index")
        for e in self.exit_points:
            if not 1 <= e <= len(self.layers):
                raise DomainError(f"{self.name}: exit point {e} outside 1..{len(self.layers)}")

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    def prefix(self, n_layers: int) -> tuple[LayerCost, ...]:
        if not 0 <= n_layers <= len(self.layers):
            raise DomainError(f"{self.name}: cannot take {n_layers} of {len(self.layers)} layers")
        return self.layers[:n_layers]

    def scaled(self, factor: float) -> "CostTable":
        layers = tuple(LayerCost(c.layer_index, c.cpu_work * factor, c.gpu_work * factor) for c in self.layers)
        return replace(self, layers=layers)


@dataclass(frozen=True)
class CalibrationAnchor:
    freq: FrequencyPair
    observed_latency: float
    observed_power: float

    def __post_init__(self) -> None:
        if self.observed_latency <= 0 or self.observed_power <= 0:
            raise DomainError("anchor latency and power must be positive")


@dataclass
class CalibrationResult:
    profile: DeviceProfile
    cost_table: CostTable
    work_scale: float
    latency_residuals: list[float] = field(default_factory=list)
    power_residuals: list[float] = field(default_factory=list)

    @property
    def max_residual(self) -> float:
        """Largest relative residual over all anchors and both observables."""
        return max((abs(r) for r in self.latency_residuals + self.power_residuals), default=0.0)

    def to_dict(self) -> dict:
        return {
            "profile": self.profile.to_dict(),
            "work_scale": self.work_scale,
            "latency_residuals": self.latency_residuals,
            "power_residuals": self.power_residuals,
            "max_residual": self.max_residual,
        }


# -- model equations ---------------------------------------------------------


def layer_latency(profile: DeviceProfile, cost: LayerCost, fp: FrequencyPair) -> float:
    profile.pair_index(fp)
    return cost.cpu_work / fp.cpu_freq + cost.gpu_work / fp.gpu_freq


def device_power(profile: DeviceProfile, fp: FrequencyPair) -> float:
    profile.pair_index(fp)
    return min(profile.raw_power(fp), profile.power_cap)


def layer_energy(profile: DeviceProfile, cost: LayerCost, fp: FrequencyPair) -> float:
    return device_power(profile, fp) * layer_latency(profile, cost, fp) / 1000.0


def table_latency(profile: DeviceProfile, layers: Iterable[LayerCost], fp: FrequencyPair) -> float:
    """Latency of running ``layers`` back to back at a single clock pair."""
    total = 0.0
    for cost in layers:
        total += layer_latency(profile, cost, fp)
    return total


# -- calibration ---------------------------------------------------------------


def calibrate(
    template: DeviceProfile,
    anchors: Sequence[CalibrationAnchor],
    cost_table: CostTable,
) -> CalibrationResult:
    """Fit static power, cubic coefficients and the work scale to ``anchors``.

    Residuals are relative and every anchor row is weighted by ``1/observed``.
    When the three power coefficients are not identified by the anchors,
    ``P0`` is pinned to the template value (or a quarter of the power cap if
    the template has none); with a single remaining degree of freedom the
    template's CPU:GPU coefficient ratio is kept and only its scale is fitted.
    """
    if not anchors:
        raise CalibrationError("at least one anchor is required")
    for a in anchors:
        template.pair_index(a.freq)
        if a.observed_power > template.power_cap:
            raise CalibrationError(
                f"anchor power {a.observed_power} W exceeds {template.name} cap {template.power_cap} W"
            )

    # latency: single multiplicative scale, closed form
    model_lat = np.array([table_latency(template, cost_table.layers, a.freq) for a in anchors])
    obs_lat = np.array([a.observed_latency for a in anchors])
    if np.any(model_lat <= 0):
        raise CalibrationError("cost table has zero work; latency cannot be scaled")
    r = model_lat / obs_lat
    scale = float(np.sum(r) / np.sum(r * r))

    # power: linear in (P0, a_c, a_g)
    obs_pow = np.array([a.observed_power for a in anchors])
    cubes = np.array([[a.freq.cpu_freq**3, a.freq.gpu_freq**3] for a in anchors])
    design = np.column_stack([np.ones(len(anchors)), cubes])
    w = 1.0 / obs_pow
    if np.linalg.matrix_rank(design) == 3:
        coef, _ = nnls(design * w[:, None], obs_pow * w)
        p0, ac, ag = (float(x) for x in coef)
    else:
        p0 = template.static_power if template.static_power > 0 else 0.25 * template.power_cap
        if p0 >= 0.9 * float(obs_pow.min()):
            p0 = 0.5 * float(obs_pow.min())
        rhs = (obs_pow - p0) * w
        if np.linalg.matrix_rank(cubes) == 2:
            coef, _ = nnls(cubes * w[:, None], rhs)
            ac, ag = (float(x) for x in coef)
        else:
            direction = np.array([template.cpu_power_coeff, template.gpu_power_coeff])
            if not direction.any():
                direction = np.ones(2)
            col = (cubes @ direction) * w
            k = max(0.0, float(col @ rhs / (col @ col)))
            ac, ag = (float(x) for x in k * direction)

    try:
        profile = replace(template, static_power=p0, cpu_power_coeff=ac, gpu_power_coeff=ag)
    except DomainError as exc:
        raise CalibrationError(f"fitted profile is infeasible: {exc}") from exc
    table = cost_table.scaled(scale)

    lat_res, pow_res = [], []
    for a in anchors:
        lat = table_latency(profile, table.layers, a.freq)
        lat_res.append((lat - a.observed_latency) / a.observed_latency)
        pow_res.append((device_power(profile, a.freq) - a.observed_power) / a.observed_power)
    return CalibrationResult(profile, table, scale, lat_res, pow_res)


# -- files -------------------------------------------------------------------------


def _data_dir():
    return resources.files("exitdvfs") / "data"


def available_devices() -> list[str]:
    return sorted(p.name[:-5] for p in (_data_dir() / "devices").iterdir() if p.name.endswith(".json"))


def available_cost_tables() -> list[str]:
    return sorted(p.name[:-4] for p in (_data_dir() / "costs").iterdir() if p.name.endswith(".csv"))


def load_profile(path_or_name: str | Path) -> DeviceProfile:
    """Load a profile from a JSON file, or one of the shipped defaults by name."""
    p = Path(path_or_name)
    if p.suffix == ".json" and p.exists():
        return DeviceProfile.from_dict(json.loads(p.read_text()))
    name = str(path_or_name)
    if name not in available_devices():
        raise KeyError(f"unknown device {name!r}; valid devices: {', '.join(available_devices())}")
    text = (_data_dir() / "devices" / f"{name}.json").read_text()
    return DeviceProfile.from_dict(json.loads(text))


def save_profile(profile: DeviceProfile, path: str | Path) -> None:
    Path(path).write_text(json.dumps(profile.to_dict(), indent=2) + "\n")


def parse_cost_table(text: str, name: str = "custom") -> CostTable:
    exits: tuple[int, ...] = ()
    layers = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, val = line[1:].partition(":")
            if key.strip() == "exits" and val.strip():
                exits = tuple(int(x) for x in val.split(","))
            continue
        if line.startswith("layer_index"):
            continue
        parts = line.split(",")
        try:
            idx, wc, wg = int(parts[0]), float(parts[1]), float(parts[2])
        except (IndexError, ValueError) as exc:
            raise DomainError(f"cost table line {lineno}: cannot parse {raw!r}") from exc
        layers.append(LayerCost(idx, wc, wg))
    layers.sort(key=lambda c: c.layer_index)
    return CostTable(name, tuple(layers), exits)


def load_cost_table(path_or_name: str | Path) -> CostTable:
    p = Path(path_or_name)
    if p.suffix == ".csv" and p.exists():
        return parse_cost_table(p.read_text(), p.stem)
    name = str(path_or_name)
    if name not in available_cost_tables():
        raise KeyError(f"unknown cost table {name!r}; valid tables: {', '.join(available_cost_tables())}")
    return parse_cost_table((_data_dir() / "costs" / f"{name}.csv").read_text(), name)


def format_cost_table(table: CostTable) -> str:
    lines = []
    if table.exit_points:
        lines.append("# exits: " + ",".join(str(e) for e in table.exit_points))
    lines.append("layer_index,cpu_work,gpu_work")
    lines += [f"{c.layer_index},{c.cpu_work!r},{c.gpu_work!r}" for c in table.layers]
    return "\n".join(lines) + "\n"


def save_cost_table(table: CostTable, path: str | Path) -> None:
    Path(path).write_text(format_cost_table(table))


def shipped_anchors(device: str, cost_table: str) -> list[CalibrationAnchor]:
    """Measured anchors bundled for a (device, backbone) pair; empty when none exist."""
    data = json.loads((_data_dir() / "anchors.json").read_text())
    return [
        CalibrationAnchor(FrequencyPair(a["cpu_freq"], a["gpu_freq"]), a["latency_ms"], a["power_w"])
        for a in data.get(f"{device}/{cost_table}", [])
    ]


def calibrated_scenario(device: str, cost_table: str = "effnet-b0") -> tuple[DeviceProfile, CostTable]:
    """Shipped profile and cost table, calibrated when bundled anchors exist."""
    profile = load_profile(device)
    table = load_cost_table(cost_table)
    anchors = shipped_anchors(profile.name, table.name)
    if not anchors:
        return profile, table
    result = calibrate(profile, anchors, table)
    return result.profile, result.cost_table
