"""``exitdvfs`` command line.

Every subcommand writes into ``--out`` (default ``$EXITDVFS_OUT`` or
``./exitdvfs-out``) and finishes by writing ``manifest.json`` that records the
resolved arguments, their hash, the seed and a digest of every output file.
Files are written to a temporary name and renamed into place.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import devmodel
from .devmodel import CalibrationAnchor, FrequencyPair
from .exitnet import ExitNetConfig, ExitNetModel, grad_check, trace_features, train
from .profiler import (
    ProfileCache,
    SearchConfig,
    brute_force,
    cds_search,
    format_cache,
    format_schedule,
    random_search,
    resolve_budget,
)
from .scenario import TOY_EPOCHS, TOY_GATE_THRESHOLD, TOY_LEARNING_RATE
from .simengine import ABLATION_ROWS, GovernorPolicy, SimReport, Variant, ablation_reports, compare
from .tracegen import TraceGenConfig, format_trace, generate_trace, load_trace

OUT_ENV = "EXITDVFS_OUT"
DEFAULT_OUT = "exitdvfs-out"
MANIFEST = "manifest.json"

log = logging.getLogger("exitdvfs")


class UsageError(Exception):
    """Bad user input discovered after argument parsing; exit code 2."""


# -- output helpers --------------------------------------------------------------------


def atomic_write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Collects outputs of one dispatch and writes the manifest last."""

    def __init__(self, args: argparse.Namespace, inputs: dict[str, Path | None]):
        self.out = Path(args.out)
        self.command = args.command
        self.seed = getattr(args, "seed", None)
        settings = {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "func", "verbose", "workers")}
        self.config = {
            "command": self.command,
            "settings": json.loads(json.dumps(settings, default=str)),
            "inputs": {k: _sha256(p) for k, p in sorted(inputs.items()) if p is not None and p.is_file()},
        }
        blob = json.dumps(self.config, sort_keys=True, separators=(",", ":"))
        self.config_hash = hashlib.sha256(blob.encode()).hexdigest()[:16]
        self.outputs: list[str] = []

    def write(self, name: str, data: str | bytes) -> Path:
        path = self.out / name
        atomic_write(path, data)
        self.outputs.append(name)
        return path

    def write_model(self, name: str, model: ExitNetModel) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.out)
        os.close(fd)
        try:
            model.save(tmp)
            os.replace(tmp, self.out / name)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        self.outputs.append(name)
        return self.out / name

    def stamp(self, d: dict) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed, **d}

    def finish(self) -> None:
        manifest = {
            "config_hash": self.config_hash,
            "seed": self.seed,
            **self.config,
            "outputs": {n: _sha256(self.out / n) for n in sorted(self.outputs)},
        }
        atomic_write(self.out / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- input resolution ---------------------------------------------------------------------


def _is_file(s: str | None) -> Path | None:
    if s is None:
        return None
    p = Path(s)
    return p if p.is_file() else None


def _device(args) -> devmodel.DeviceProfile:
    try:
        return devmodel.load_profile(args.device)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None


def _table(args) -> devmodel.CostTable:
    try:
        return devmodel.load_cost_table(args.table)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None


def _scenario(args) -> tuple[devmodel.DeviceProfile, devmodel.CostTable]:
    """Named shipped devices are calibrated against bundled anchors; profile files are used as given."""
    profile, table = _device(args), _table(args)
    if _is_file(args.device) is None and _is_file(args.table) is None:
        return devmodel.calibrated_scenario(args.device, args.table)
    return profile, table


def _search_config(args) -> SearchConfig:
    objective = "energy" if getattr(args, "no_budget", False) else "energy_with_budget"
    return SearchConfig(rounds=args.rounds, candidates=args.candidates, latency_budget=args.latency_budget,
                        seed=args.seed, objective=objective)


def _load_model(args) -> ExitNetModel | None:
    if args.model is None:
        return None
    if not Path(args.model).is_file():
        raise UsageError(f"model checkpoint {args.model} does not exist")
    return ExitNetModel.load(args.model)


def _load_trace(args):
    if args.trace is None:
        raise UsageError("--trace is required")
    if not Path(args.trace).is_file():
        raise UsageError(f"trace {args.trace} does not exist")
    return load_trace(args.trace)


def _parse_seeds(text: str) -> list[int]:
    lo, sep, hi = text.partition("..")
    try:
        if not sep:
            return [int(lo)]
        a, b = int(lo), int(hi)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed range must look like 'a..b', got {text!r}") from None
    if b < a:
        raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
    return list(range(a, b + 1))


# -- subcommands ----------------------------------------------------------------------------


def cmd_gen_trace(args) -> int:
    cfg = TraceGenConfig(args.windows, K=args.classes, T=args.window_length, distribution=args.distribution,
                         p_low=args.p_low, seed=args.seed)
    run = Run(args, {})
    run.write("trace.csv", format_trace(generate_trace(cfg)))
    run.finish()
    return 0


def cmd_calibrate(args) -> int:
    template, table = _device(args), _table(args)
    if args.anchors:
        rows = json.loads(Path(args.anchors).read_text())
        anchors = [CalibrationAnchor(FrequencyPair(r["cpu"], r["gpu"]), r["latency_ms"], r["power_w"]) for r in rows]
    else:
        anchors = devmodel.shipped_anchors(template.name, table.name)
        if not anchors:
            raise UsageError(f"no bundled anchors for {template.name}/{table.name}; pass --anchors")
    result = devmodel.calibrate(template, anchors, table)
    run = Run(args, {"device": _is_file(args.device), "table": _is_file(args.table), "anchors": _is_file(args.anchors)})
    run.write("profile.json", json.dumps(result.profile.to_dict(), indent=2) + "\n")
    run.write("cost_table.csv", devmodel.format_cost_table(result.cost_table))
    run.write("calibration.json", json.dumps(run.stamp(result.to_dict()), indent=2, sort_keys=True) + "\n")
    run.finish()
    print(f"max residual {result.max_residual:.3e}")
    return 0


def cmd_train(args) -> int:
    trace = _load_trace(args)
    cfg = ExitNetConfig(
        feature_dim=args.feature_dim, num_exits=args.exits, window_length=trace.window_length,
        num_classes=trace.num_classes, gate_threshold=args.threshold, learning_rate=args.lr,
        batch_size=args.batch_size, epochs=args.epochs, seed=args.seed, feature_noise=args.noise,
    )
    model = train(trace, cfg)
    run = Run(args, {"trace": Path(args.trace)})
    run.write_model("model.ckpt", model)
    run.write("training.json", json.dumps(run.stamp({"loss_history": model.loss_history}), indent=2) + "\n")
    run.finish()
    return 0


def cmd_grad_check(args) -> int:
    if args.model:
        model = _load_model(args)
    else:
        cfg = ExitNetConfig(feature_dim=8, num_exits=2, window_length=4, num_classes=4, gate_hidden=(8, 4),
                            seed=args.seed)
        model = ExitNetModel.initialize(cfg)
    cfg = model.config
    if args.trace:
        trace = _load_trace(args)
        X, y = trace_features(trace, cfg, args.seed)
        X, y = X[: args.windows], y[: args.windows]
    else:
        rng = np.random.default_rng(args.seed)
        X = rng.standard_normal((args.windows, cfg.window_length, cfg.feature_dim))
        y = rng.integers(0, cfg.num_classes, size=args.windows)
    err = grad_check(model, (X, y), epsilon=args.epsilon, n_coords=args.coords, seed=args.seed)
    err = float(err)
    ok = bool(err <= args.tol)
    run = Run(args, {"model": _is_file(args.model), "trace": _is_file(args.trace)})
    run.write("grad_check.json", json.dumps(run.stamp({"max_relative_error": err, "tolerance": args.tol,
                                                      "passed": ok}), indent=2) + "\n")
    run.finish()
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAILED'})")
    return 0 if ok else 1


def cmd_profile(args) -> int:
    profile, table = _scenario(args)
    exits = args.exit or list(table.exit_points)
    cfg = _search_config(args)
    cache = ProfileCache()
    run = Run(args, {"device": _is_file(args.device), "table": _is_file(args.table)})
    summary = []
    for ep in exits:
        if not 1 <= ep <= table.depth:
            raise UsageError(f"exit point {ep} outside 1..{table.depth}")
        if args.method == "cds":
            res = cds_search(ep, table, profile, cfg, cache)
        elif args.method == "random":
            res = random_search(ep, table, profile, cfg.eval_budget(ep), cfg.seed,
                                resolve_budget(cfg, profile, table, ep), cache)
        else:
            res = brute_force(ep, table, profile, resolve_budget(cfg, profile, table, ep))
        run.write(f"schedule_{ep}.csv", format_schedule(res.schedule))
        summary.append({"exit_point": ep, "energy_j": res.energy, "latency_ms": res.latency,
                        "latency_budget": res.latency_budget, "evaluations": res.evaluations,
                        "schedule_hash": res.schedule.digest()})
    run.write("profile_cache.csv", format_cache(cache, profile))
    run.write("profile.json", json.dumps(run.stamp({"method": args.method, "device": profile.name,
                                                   "exits": summary}), indent=2, sort_keys=True) + "\n")
    run.finish()
    return 0


def _simulate_one(payload: tuple) -> tuple[int, str, str]:
    trace, profile, table, model, policy, seed = payload
    from .simengine import simulate
    rep = simulate(trace, profile, table, model, policy, seed)
    return seed, rep.to_json(), rep.records_csv()


def cmd_simulate(args) -> int:
    profile, table = _scenario(args)
    trace, model = _load_trace(args), _load_model(args)
    policy = GovernorPolicy(Variant(args.policy), _search_config(args), args.threshold)
    seeds = args.seeds or [args.seed]
    run = Run(args, {"trace": Path(args.trace), "model": _is_file(args.model), "device": _is_file(args.device),
                     "table": _is_file(args.table)})
    jobs = [(trace, profile, table, model, policy, s) for s in seeds]
    if len(jobs) > 1 and args.workers != 1:
        with ProcessPoolExecutor(max_workers=args.workers or None) as pool:
            results = list(pool.map(_simulate_one, jobs))
    else:
        results = [_simulate_one(j) for j in jobs]
    single = len(seeds) == 1 and args.seeds is None
    for seed, rep_json, records in results:
        suffix = "" if single else f"_seed{seed}"
        rep = json.loads(rep_json)
        rep["meta"] = {"config_hash": run.config_hash, "seed": seed}
        run.write(f"report{suffix}.json", json.dumps(rep, indent=2, sort_keys=True) + "\n")
        run.write(f"records{suffix}.csv", records)
    run.finish()
    return 0


def cmd_ablation(args) -> int:
    profile, table = _scenario(args)
    trace, model = _load_trace(args), _load_model(args)
    run = Run(args, {"trace": Path(args.trace), "model": _is_file(args.model), "device": _is_file(args.device),
                     "table": _is_file(args.table)})
    reports = ablation_reports(trace, profile, table, model, args.seed, _search_config(args), args.threshold)
    for (label, _), rep in zip(ABLATION_ROWS, reports):
        rep.meta = {"config_hash": run.config_hash, "seed": args.seed, "label": label}
        run.write(f"report_{label}.json", rep.to_json())
    run.write("ablation.csv", compare(reports, [lab for lab, _ in ABLATION_ROWS]).to_csv())
    run.finish()
    return 0


def cmd_compare(args) -> int:
    paths = [Path(p) for p in args.reports]
    for p in paths:
        if not p.is_file():
            raise UsageError(f"report {p} does not exist")
    reports = [SimReport.from_json(p.read_text()) for p in paths]
    labels = [r.meta.get("label", r.policy) for r in reports]
    table = compare(reports, labels, args.baseline)
    run = Run(args, {f"report{i}": p for i, p in enumerate(paths)})
    run.write("comparison.csv", table.to_csv())
    run.finish()
    print(table.to_csv(), end="")
    return 0


# -- parser -------------------------------------------------------------------------------------


def _positive(kind):
    def conv(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return conv


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exitdvfs", description="Early-exit plus DVFS trace simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out", default=os.environ.get(OUT_ENV, DEFAULT_OUT),
                       help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)
        return p

    def scenario_flags(p):
        p.add_argument("--device", default="agx-orin", help="shipped device name or profile JSON")
        p.add_argument("--table", default="effnet-b0", help="shipped cost table name or CSV")

    def search_flags(p):
        p.add_argument("--rounds", type=_positive(int), default=3)
        p.add_argument("--candidates", type=_positive(int), default=8)
        p.add_argument("--latency-budget", type=_positive(float), default=None, help="ms; default 1.15 x all-max")
        p.add_argument("--no-budget", action="store_true", help="minimise energy without a latency budget")

    p = command("gen-trace", cmd_gen_trace, "generate a synthetic frame trace")
    p.add_argument("--windows", type=int, default=200)
    p.add_argument("--classes", type=_positive(int), default=4)
    p.add_argument("--window-length", type=_positive(int), default=20)
    p.add_argument("--distribution", choices=("bimodal", "uniform"), default="bimodal")
    p.add_argument("--p-low", type=float, default=0.5)

    p = command("calibrate", cmd_calibrate, "fit a device profile to measured anchors")
    scenario_flags(p)
    p.add_argument("--anchors", default=None, help="JSON list of {cpu, gpu, latency_ms, power_w}")

    p = command("train", cmd_train, "train the early-exit network on a trace")
    p.add_argument("--trace", default=None)
    p.add_argument("--epochs", type=int, default=TOY_EPOCHS)
    p.add_argument("--lr", type=_positive(float), default=TOY_LEARNING_RATE)
    p.add_argument("--noise", type=float, default=ExitNetConfig.feature_noise)
    p.add_argument("--threshold", type=float, default=TOY_GATE_THRESHOLD)
    p.add_argument("--batch-size", type=_positive(int), default=64)
    p.add_argument("--feature-dim", type=_positive(int), default=64)
    p.add_argument("--exits", type=_positive(int), default=5)

    p = command("grad-check", cmd_grad_check, "compare analytic and numeric gradients")
    p.add_argument("--model", default=None, help="checkpoint (default: small random model)")
    p.add_argument("--trace", default=None)
    p.add_argument("--windows", type=_positive(int), default=3)
    p.add_argument("--coords", type=_positive(int), default=200)
    p.add_argument("--epsilon", type=_positive(float), default=1e-5)
    p.add_argument("--tol", type=_positive(float), default=1e-4)

    p = command("profile", cmd_profile, "search per-layer clock schedules")
    scenario_flags(p)
    search_flags(p)
    p.add_argument("--exit", type=int, action="append", help="layer count to profile (repeatable; default all exits)")
    p.add_argument("--method", choices=("cds", "random", "brute"), default="cds")

    policies = [v.value for v in Variant]
    p = command("simulate", cmd_simulate, "run a policy over a trace")
    scenario_flags(p)
    search_flags(p)
    p.add_argument("--trace", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--policy", choices=policies, default=Variant.E4.value)
    p.add_argument("--threshold", type=float, default=None, help="gate threshold (default: the model's)")
    p.add_argument("--seeds", type=_parse_seeds, default=None, help="seed range a..b, one report per seed")
    p.add_argument("--workers", type=int, default=0, help="processes for --seeds (0: one per CPU)")

    p = command("ablation", cmd_ablation, "neither / DVFS-only / EE-only / both on one trace")
    scenario_flags(p)
    search_flags(p)
    p.add_argument("--trace", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--threshold", type=float, default=None)

    p = command("compare", cmd_compare, "tabulate report files against a baseline")
    p.add_argument("reports", nargs="+")
    p.add_argument("--baseline", choices=policies, default=Variant.BASELINE_MAX.value)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"exitdvfs {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: diagnostic, not a traceback
        log.debug("failure", exc_info=True)
        print(f"exitdvfs {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
