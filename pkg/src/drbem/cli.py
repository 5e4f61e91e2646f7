"""Command-line entry point tying the pipeline together for batch runs.

Subcommands:
  fit         read forecast/realization history CSVs and write the fitted
              hour-of-day error models, confidence bounds, and noise box
  simulate    run closed-loop experiments over methods x seeds and write
              traces, a report, and a Pareto table
  export-lp   compile one horizon problem and write its LP text file,
              cross-checking the export through an import-and-resolve
  report      re-summarize traces already on disk

Configuration comes from a JSON file (--config); --seed and --method
override the corresponding config fields for one invocation. All outputs
are deterministic: rerunning a command overwrites files byte-identically,
and nothing written contains timestamps. Exit codes: 0 success, 1 runtime
failure, 2 usage or parse error. The DRBEM_THREADS environment variable
caps worker parallelism for `simulate` (default 1, serial).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, fields
from multiprocessing import get_context

import numpy as np

from .compile import PolicySpec, compile_problem
from .dist_model import (
    CsvFormatError,
    ambiguity_bounds,
    ar_model_to_dict,
    bounds_to_dict,
    box_to_dict,
    build_box,
    fit_ar,
    load_history_csv,
    stack_disturbance,
)
from .lp import STATUS_OPTIMAL, export_lp, import_lp, solve
from .plant import district_from_json, district_to_json, make_building, make_district
from .sim import (
    HOURS_PER_WEEK,
    fit_models,
    pareto_csv,
    report,
    run_synthetic,
    synth_scenario,
    trace_to_csv,
    tune_cep,
)

METHODS = ("adr", "olp", "cep", "tuned-cep")


class UsageError(ValueError):
    """Bad invocation or unparseable input; maps to exit code 2."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Experiment settings; JSON fields mirror the attribute names."""

    history_dir: str | None = None
    district: str | None = None
    out_dir: str = "out"
    epsilon: float = 0.01
    delta_chi: float = 0.01
    delta_st: float = 0.01
    gamma: float = 1e3
    horizon: int = 8
    weeks: int = 1
    seeds: tuple = (0,)
    methods: tuple = ("cep",)
    beta_allocation: str = "uniform"
    noise_scale: float = 1.0
    train_days: int = 120
    c_b: float = 0.0
    tuned_target: float | None = None
    restart_weekly: bool = True

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise UsageError(f"epsilon must be in (0, 1), got {self.epsilon}")
        for name in ("delta_chi", "delta_st"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise UsageError(f"{name} must be in (0, 1), got {v}")
        if self.gamma <= 0.0:
            raise UsageError("gamma must be positive")
        if self.horizon < 1:
            raise UsageError("horizon must be at least 1")
        if self.weeks < 1:
            raise UsageError("weeks must be at least 1")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise UsageError("seeds must be nonempty")
        self.methods = tuple(str(m).lower() for m in self.methods)
        if not self.methods:
            raise UsageError("methods must be nonempty")
        for m in self.methods:
            if m not in METHODS:
                raise UsageError(
                    f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if self.beta_allocation != "uniform":
            raise UsageError(
                f"unsupported beta allocation {self.beta_allocation!r}")
        if self.c_b < 0.0:
            raise UsageError("c_b must be nonnegative")
        if self.train_days < 4:
            raise UsageError("train_days must be at least 4")


def load_config(path: str) -> RunConfig:
    """Parse a JSON config file, rejecting unknown keys."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise UsageError(f"{path}: unknown config keys: {', '.join(unknown)}")
    try:
        return RunConfig(**raw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, UsageError):
            raise
        raise UsageError(f"{path}: {exc}") from None


def _default_district():
    b = make_building("b0", n_rooms=1, mass="heavy",
                      actuators=("radiator", "ahu"), schedule="winter",
                      disturbances=("AT", "SRS", "IG"), x0_temp=22.0)
    return make_district([b], ("AT", "SRS", "IG"))


def _district_json(cfg: RunConfig) -> str:
    if cfg.district is None:
        return district_to_json(_default_district())
    try:
        with open(cfg.district) as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read district {cfg.district}: {exc}") from None
    district_from_json(text)  # validate early so workers cannot fail on it
    return text


# ---------------------------------------------------------------------------
# fit


def cmd_fit(cfg: RunConfig) -> int:
    """Fit per-disturbance error models from history CSVs and write JSON."""
    if cfg.history_dir is None:
        raise UsageError("fit requires history_dir in the config")
    try:
        names = sorted(n for n in os.listdir(cfg.history_dir)
                       if n.lower().endswith(".csv"))
    except OSError as exc:
        raise UsageError(f"cannot list {cfg.history_dir}: {exc}") from None
    if not names:
        raise UsageError(f"no history CSVs in {cfg.history_dir}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    T = cfg.horizon
    for name in names:
        path = os.path.join(cfg.history_dir, name)
        try:
            history = load_history_csv(path)
        except CsvFormatError as exc:
            raise UsageError(str(exc)) from None
        model = fit_ar(history)
        grid = [[ambiguity_bounds(model, t % 24, cfg.delta_chi, cfg.delta_st)
                 for t in range(T)]]
        box = build_box([model.disturbance_id], grid, epsilon=cfg.epsilon)
        payload = {
            "model": ar_model_to_dict(model),
            "bounds": [bounds_to_dict(
                ambiguity_bounds(model, h, cfg.delta_chi, cfg.delta_st))
                for h in range(24)],
            "box": box_to_dict(box),
            "noiseless": bool(model.zero_energy.all()),
            "n_days": history.n_days,
        }
        out_path = os.path.join(cfg.out_dir,
                                f"ambiguity_{model.disturbance_id}.json")
        with open(out_path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")
        print(f"fit {model.disturbance_id}: days={history.n_days} "
              f"noiseless={payload['noiseless']} -> {out_path}")
    return 0


# ---------------------------------------------------------------------------
# simulate


def _simulate_task(args: dict):
    """Run one (method, seed) experiment; top level so workers can pickle it."""
    method = args["method"]
    kw = dict(T=args["T"], weeks=args["weeks"], gamma=args["gamma"],
              epsilon=args["epsilon"], delta_chi=args["delta_chi"],
              delta_st=args["delta_st"], noise_scale=args["noise_scale"],
              train_days=args["train_days"],
              restart_weekly=args["restart_weekly"])
    if method in ("adr", "olp"):
        return run_synthetic(args["district_json"], method, args["seed"], **kw)
    if method == "cep":
        return run_synthetic(args["district_json"], method, args["seed"],
                             c_b=args["c_b"], **kw)
    if method == "tuned-cep":
        district = district_from_json(args["district_json"])
        scenario = synth_scenario(district.disturbances, seed=args["seed"],
                                  weeks=args["weeks"],
                                  train_days=args["train_days"],
                                  noise_scale=args["noise_scale"],
                                  pad_hours=max(args["T"], 48))
        target = args["tuned_target"]
        if target is None:
            adr = run_synthetic(args["district_json"], "adr", args["seed"], **kw)
            target = adr.total_kh
        c_b = tune_cep(district, scenario, target, T=args["T"],
                       weeks=args["weeks"],
                       restart_weekly=args["restart_weekly"],
                       gamma=args["gamma"], epsilon=args["epsilon"],
                       delta_chi=args["delta_chi"], delta_st=args["delta_st"])
        trace = run_synthetic(args["district_json"], "cep", args["seed"],
                              c_b=c_b, **kw)
        trace.method = "TUNED-CEP"
        trace.meta = dict(trace.meta, c_b=c_b, tuned_target=target)
        return trace
    raise UsageError(f"unknown method {method!r}")


def _worker_count(n_tasks: int) -> int:
    raw = os.environ.get("DRBEM_THREADS", "1").strip() or "1"
    try:
        cap = int(raw)
    except ValueError:
        raise UsageError(f"DRBEM_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, n_tasks))


def cmd_simulate(cfg: RunConfig) -> int:
    """Run methods x seeds, then write traces, report, and Pareto table."""
    district_json = _district_json(cfg)
    tasks = [
        {
            "method": method, "seed": seed, "district_json": district_json,
            "T": cfg.horizon, "weeks": cfg.weeks, "gamma": cfg.gamma,
            "epsilon": cfg.epsilon, "delta_chi": cfg.delta_chi,
            "delta_st": cfg.delta_st, "noise_scale": cfg.noise_scale,
            "train_days": cfg.train_days, "restart_weekly": cfg.restart_weekly,
            "c_b": cfg.c_b, "tuned_target": cfg.tuned_target,
        }
        for method in cfg.methods
        for seed in cfg.seeds
    ]
    workers = _worker_count(len(tasks))
    if workers > 1:
        with get_context("spawn").Pool(workers) as pool:
            traces = pool.map(_simulate_task, tasks)
    else:
        traces = [_simulate_task(t) for t in tasks]

    os.makedirs(cfg.out_dir, exist_ok=True)
    by_method: dict = {}
    for task, trace in zip(tasks, traces):
        label = task["method"].upper()
        by_method.setdefault(label, []).append(trace)
        trace_to_csv(os.path.join(
            cfg.out_dir, f"trace_{task['method']}_{task['seed']}.csv"), trace)
    rep = report(by_method)
    with open(os.path.join(cfg.out_dir, "report.json"), "w") as fh:
        fh.write(rep.to_json() + "\n")
    with open(os.path.join(cfg.out_dir, "report.txt"), "w") as fh:
        fh.write(rep.to_text() + "\n")
    pareto_csv(os.path.join(cfg.out_dir, "pareto.csv"), by_method)
    print(rep.to_text())
    n_fail = sum(len(t.failures) for t in traces)
    if n_fail:
        print(f"note: {n_fail} solver fallback hour(s) across all runs")
    return 0


# ---------------------------------------------------------------------------
# export-lp


def cmd_export_lp(cfg: RunConfig, hour: int, method: str | None,
                  seed: int | None) -> int:
    """Compile the horizon problem at wall-clock `hour` and export LP text.

    The instance uses the scenario's forecasts and realized errors at that
    hour with the plant at its configured initial state. The export is
    cross-checked by importing it back and re-solving: the round trip must
    reproduce the objective to 1e-5 relative.
    """
    method = (method or cfg.methods[0]).lower()
    if method == "tuned-cep":
        method = "cep"
    if method not in ("adr", "olp", "cep"):
        raise UsageError(f"cannot export method {method!r}")
    horizon_hours = cfg.weeks * HOURS_PER_WEEK
    if not 0 <= hour < horizon_hours:
        raise UsageError(
            f"hour {hour} outside the simulated span [0, {horizon_hours})")
    seed = cfg.seeds[0] if seed is None else seed
    district_json = _district_json(cfg)
    district = district_from_json(district_json)
    scenario = synth_scenario(district.disturbances, seed=seed,
                              weeks=cfg.weeks, train_days=cfg.train_days,
                              noise_scale=cfg.noise_scale,
                              pad_hours=max(cfg.horizon, 48))
    models = fit_models(scenario)
    T = cfg.horizon
    hod = (scenario.start_hour + hour) % 24
    map_start = (hod - 1) % 24
    if hour == 0:
        e_hat = np.array([h.errors[-1, -1] for h in scenario.histories])
    else:
        e_hat = (scenario.realizations[:, hour - 1]
                 - scenario.forecasts[:, hour - 1])
    smap = stack_disturbance(models, scenario.forecasts[:, hour:hour + T],
                             e_hat, T, start_hour=map_start)
    grid = [[ambiguity_bounds(m, (map_start + k) % 24, cfg.delta_chi,
                              cfg.delta_st) for k in range(T)]
            for m in models]
    box = build_box(district.disturbances, grid, epsilon=cfg.epsilon)
    x_hat = {b.building_id: b.x0.copy() for b in district.buildings}
    x_hat.update({d.device_id: d.x0.copy()
                  for d in district.devices if d.n_states})
    spec = PolicySpec(mode=method.upper(), horizon=T,
                      n_dist=len(district.disturbances),
                      c_b=cfg.c_b if method == "cep" else 0.0,
                      gamma=cfg.gamma, epsilon=cfg.epsilon)
    compiled = compile_problem(district, spec, box, smap, x_hat,
                               start_hour=hod)
    text = export_lp(compiled.lp)
    os.makedirs(cfg.out_dir, exist_ok=True)
    out_path = os.path.join(cfg.out_dir, f"problem_{method}_h{hour}.lp")
    with open(out_path, "w") as fh:
        fh.write(text)

    back = import_lp(text)
    sol = solve(compiled.lp)
    sol_back = solve(back)
    if sol.status != STATUS_OPTIMAL or sol_back.status != STATUS_OPTIMAL:
        raise RuntimeError(
            f"export cross-check failed: {sol.status} vs {sol_back.status}")
    scale = max(1.0, abs(sol.objective))
    gap = abs(sol.objective - sol_back.objective) / scale
    if gap > 1e-5:
        raise RuntimeError(
            f"round-trip objective differs by {gap:.2e} relative")
    print(f"exported {out_path}: {compiled.lp.n_rows} rows "
          f"{compiled.lp.n_cols} cols, objective {sol.objective!r} "
          f"(round-trip gap {gap:.2e})")
    return 0


# ---------------------------------------------------------------------------
# report


@dataclass
class _StoredTrace:
    """Weekly aggregates recovered from a trace CSV on disk."""

    weekly_cost: np.ndarray
    weekly_kh: np.ndarray
    failures: tuple


def _read_trace_csv(path: str) -> _StoredTrace:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "hour":
            raise RuntimeError(f"{path}: not a trace CSV")
        idx = {name: k for k, name in enumerate(header)}
        viol_cols = [k for name, k in idx.items() if name.endswith("_kh")]
        rows = list(reader)
    hours = len(rows)
    if hours == 0 or hours % HOURS_PER_WEEK:
        raise RuntimeError(f"{path}: expected whole weeks, got {hours} rows")
    cost = np.array([float(r[idx["cost_chf"]]) for r in rows])
    kh = np.array([sum(float(r[k]) for k in viol_cols) for r in rows])
    failures = tuple(h for h, r in enumerate(rows) if r[idx["failed"]] == "1")
    weeks = hours // HOURS_PER_WEEK
    return _StoredTrace(
        weekly_cost=cost.reshape(weeks, HOURS_PER_WEEK).sum(axis=1),
        weekly_kh=kh.reshape(weeks, HOURS_PER_WEEK).sum(axis=1),
        failures=failures,
    )


def cmd_report(cfg: RunConfig) -> int:
    """Re-summarize trace CSVs already in the output directory."""
    try:
        names = sorted(n for n in os.listdir(cfg.out_dir)
                       if n.startswith("trace_") and n.endswith(".csv"))
    except OSError as exc:
        raise RuntimeError(f"cannot list {cfg.out_dir}: {exc}") from None
    if not names:
        raise RuntimeError(f"no trace CSVs in {cfg.out_dir}")
    by_method: dict = {}
    for name in names:
        method = name[len("trace_"):].rsplit("_", 1)[0].upper()
        by_method.setdefault(method, []).append(
            _read_trace_csv(os.path.join(cfg.out_dir, name)))
    rep = report(by_method)
    with open(os.path.join(cfg.out_dir, "report.json"), "w") as fh:
        fh.write(rep.to_json() + "\n")
    with open(os.path.join(cfg.out_dir, "report.txt"), "w") as fh:
        fh.write(rep.to_text() + "\n")
    print(rep.to_text())
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drbem",
        description="distributionally robust building energy management")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("fit", "fit error models and ambiguity bounds from history CSVs"),
        ("simulate", "run closed-loop experiments and write traces"),
        ("export-lp", "export one compiled horizon problem as LP text"),
        ("report", "re-summarize traces already on disk"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="path to JSON config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's seed list with one seed")
        p.add_argument("--method", choices=METHODS, default=None,
                       help="override the config's method list")
        if name == "export-lp":
            p.add_argument("--hour", type=int, default=0,
                           help="wall-clock hour of the compiled instance")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seeds = (int(args.seed),)
        if args.method is not None:
            cfg.methods = (args.method,)
        if args.command == "fit":
            return cmd_fit(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "export-lp":
            return cmd_export_lp(cfg, args.hour, args.method, args.seed)
        if args.command == "report":
            return cmd_report(cfg)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure, not a usage problem
        print(f"failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
