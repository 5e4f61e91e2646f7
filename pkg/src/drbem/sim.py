"""Receding-horizon closed-loop evaluation of robust dispatch policies.

Each hour the controller measures the plant state and the last realized
forecast error, rebuilds the stacked disturbance map and the noise box
from AR(1) error models fitted once on training history, compiles and
solves the configured policy's LP, and applies the first-step inputs to
the true bilinear dynamics. Traces collect purchased power, energy cost,
comfort violations in Kelvin-hours, and solver diagnostics. Helpers tune
the certainty-equivalent policy's comfort tightening, summarize batches
of traces, and export plot-ready CSV files.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .compile import (
    FirstStep,
    InfeasibleInstanceError,
    PolicySpec,
    compile_problem,
)
from .dist_model import (
    ARModel,
    DisturbanceHistory,
    ambiguity_bounds,
    build_box,
    fit_ar,
    stack_disturbance,
)
from .lp import STATUS_OPTIMAL, solve as lp_solve
from .plant import DistrictModel, district_from_json, simulate_true_step

HOURS_PER_DAY = 24
HOURS_PER_WEEK = 168

_METHOD_MODES = {"cep": "CEP", "olp": "OLP", "adr": "ADR"}


class NotAttainable(RuntimeError):
    """No comfort tightening within range reaches the target violation level."""


# ---------------------------------------------------------------------------
# scenario synthesis


@dataclass(frozen=True)
class DisturbanceParams:
    """Diurnal profile and AR(1) forecast-error generator for one disturbance.

    The forecast repeats the daily profile; the realization adds an AR(1)
    error with hourly innovation scale `sigma`. With `noise_follows_profile`
    the whole error state is rescaled by the normalized profile each hour,
    so the error vanishes exactly where the profile does (solar channels
    carry no forecast error at night). `clip_zero` floors realizations at
    zero for physically nonnegative quantities.
    """

    profile: str = "sine"  # "sine" | "bell" | "const"
    base: float = 0.0
    amplitude: float = 0.0
    peak_hour: float = 14.0
    rise: float = 8.0
    sett: float = 17.0
    alpha: float = 0.6
    sigma: float = 0.2
    noise_follows_profile: bool = False
    clip_zero: bool = False

    def __post_init__(self):
        if self.profile not in ("sine", "bell", "const"):
            raise ValueError(f"unknown profile {self.profile!r}")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if self.sigma < 0.0:
            raise ValueError("sigma must be nonnegative")
        if self.profile == "bell" and not self.rise < self.sett:
            raise ValueError("bell profile needs rise < sett")

    def profile_values(self, hod: np.ndarray) -> np.ndarray:
        hod = np.asarray(hod, dtype=float)
        if self.profile == "sine":
            return self.base + self.amplitude * np.cos(
                2.0 * math.pi * (hod - self.peak_hour) / 24.0)
        if self.profile == "bell":
            phase = (hod - self.rise) / (self.sett - self.rise)
            vals = np.sin(math.pi * np.clip(phase, 0.0, 1.0))
            return self.base + self.amplitude * np.where(
                (hod > self.rise) & (hod < self.sett), vals, 0.0)
        return np.full(hod.shape, self.base)

    def noise_scale_values(self, hod: np.ndarray) -> np.ndarray:
        if self.noise_follows_profile and self.amplitude > 0.0:
            rel = (self.profile_values(hod) - self.base) / self.amplitude
            return np.clip(rel, 0.0, 1.0)
        return np.ones(np.asarray(hod).shape)


_DEFAULT_PARAMS = {
    "AT": DisturbanceParams(profile="sine", base=2.0, amplitude=4.0,
                            peak_hour=14.0, alpha=0.8, sigma=0.8),
    "GT": DisturbanceParams(profile="const", base=10.0, alpha=0.5, sigma=0.05),
    "SRS": DisturbanceParams(profile="bell", amplitude=0.35, rise=8.0,
                             sett=17.0, alpha=0.4, sigma=0.025,
                             noise_follows_profile=True, clip_zero=True),
    "SRE": DisturbanceParams(profile="bell", amplitude=0.22, rise=7.0,
                             sett=13.0, alpha=0.4, sigma=0.018,
                             noise_follows_profile=True, clip_zero=True),
    "SRW": DisturbanceParams(profile="bell", amplitude=0.22, rise=12.0,
                             sett=18.0, alpha=0.4, sigma=0.018,
                             noise_follows_profile=True, clip_zero=True),
    "SRN": DisturbanceParams(profile="bell", amplitude=0.08, rise=8.0,
                             sett=17.0, alpha=0.4, sigma=0.008,
                             noise_follows_profile=True, clip_zero=True),
    "IG": DisturbanceParams(profile="sine", base=0.12, amplitude=0.06,
                            peak_hour=15.0, alpha=0.5, sigma=0.03),
}


def default_disturbance_params(disturbance_ids) -> dict:
    """Generator parameters for the built-in disturbance channels."""
    out = {}
    for did in disturbance_ids:
        if did not in _DEFAULT_PARAMS:
            raise ValueError(
                f"no default generator for disturbance {did!r}; pass params")
        out[did] = _DEFAULT_PARAMS[did]
    return out


@dataclass(frozen=True)
class Scenario:
    """Hourly forecasts/realizations for the run plus matched training data."""

    disturbance_ids: tuple
    forecasts: np.ndarray  # (D, H)
    realizations: np.ndarray  # (D, H)
    histories: tuple  # DisturbanceHistory per disturbance, same order
    start_hour: int = 0
    seed: int | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = tuple(self.disturbance_ids)
        f = np.asarray(self.forecasts, dtype=float)
        r = np.asarray(self.realizations, dtype=float)
        if f.ndim != 2 or f.shape[0] != len(ids):
            raise ValueError(f"forecasts must be ({len(ids)}, H), got {f.shape}")
        if f.shape != r.shape:
            raise ValueError(
                f"forecasts {f.shape} and realizations {r.shape} must align")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(r))):
            raise ValueError("scenario series must be finite")
        hist = tuple(self.histories)
        if len(hist) != len(ids):
            raise ValueError("need one training history per disturbance")
        for did, h in zip(ids, hist):
            if h.disturbance_id != did:
                raise ValueError(
                    f"history order mismatch: {h.disturbance_id!r} vs {did!r}")
        if not 0 <= int(self.start_hour) < HOURS_PER_DAY:
            raise ValueError("start_hour must lie in 0..23")
        object.__setattr__(self, "disturbance_ids", ids)
        object.__setattr__(self, "forecasts", f)
        object.__setattr__(self, "realizations", r)
        object.__setattr__(self, "histories", hist)
        object.__setattr__(self, "start_hour", int(self.start_hour))

    @property
    def hours(self) -> int:
        return self.forecasts.shape[1]


def synth_scenario(disturbance_ids, seed: int, weeks: int, train_days: int = 365,
                   params: dict | None = None, noise_scale: float = 1.0,
                   pad_hours: int = 48) -> Scenario:
    """Generate a seeded scenario plus its matched training year.

    Forecasts repeat smooth diurnal profiles; realizations add per-channel
    AR(1) errors. The training span is drawn from the same process, so the
    learned noise models are exactly in-model.
    """
    ids = tuple(disturbance_ids)
    if weeks < 1:
        raise ValueError("need at least one simulation week")
    if train_days < 4:
        raise ValueError("need at least 4 training days")
    merged = default_disturbance_params(
        [d for d in ids if params is None or d not in params])
    if params:
        for did, p in params.items():
            if did not in ids:
                raise ValueError(f"params given for unknown disturbance {did!r}")
            if not isinstance(p, DisturbanceParams):
                raise TypeError("params values must be DisturbanceParams")
            merged[did] = p
    rng = np.random.default_rng(seed)
    n_train = train_days * HOURS_PER_DAY
    n_sim = weeks * HOURS_PER_WEEK + pad_hours
    n_total = n_train + n_sim
    hod = np.arange(n_total) % HOURS_PER_DAY
    forecasts = np.empty((len(ids), n_total))
    realizations = np.empty((len(ids), n_total))
    for i, did in enumerate(ids):
        p = merged[did]
        prof = p.profile_values(hod)
        scale = p.noise_scale_values(hod)
        innov = rng.standard_normal(n_total) * (p.sigma * noise_scale)
        err = np.empty(n_total)
        prev = 0.0
        for t in range(n_total):
            prev = scale[t] * (p.alpha * prev + innov[t])
            err[t] = prev
        forecasts[i] = prof
        real = prof + err
        if p.clip_zero:
            real = np.maximum(real, 0.0)
        realizations[i] = real
    histories = tuple(
        DisturbanceHistory(
            disturbance_id=did,
            forecasts=forecasts[i, :n_train].reshape(train_days, HOURS_PER_DAY),
            realizations=realizations[i, :n_train].reshape(train_days,
                                                           HOURS_PER_DAY),
        )
        for i, did in enumerate(ids)
    )
    return Scenario(
        disturbance_ids=ids,
        forecasts=forecasts[:, n_train:],
        realizations=realizations[:, n_train:],
        histories=histories,
        start_hour=0,
        seed=seed,
        params={did: merged[did] for did in ids},
    )


def fit_models(scenario: Scenario) -> list:
    """Fit one AR(1) forecast-error model per disturbance from training data."""
    return [fit_ar(h) for h in scenario.histories]


# ---------------------------------------------------------------------------
# closed-loop run


@dataclass
class SimulationTrace:
    """Hourly closed-loop records plus weekly aggregates for one run."""

    method: str
    seed: int | None
    start_hour: int
    weeks: int
    hours: int
    p: np.ndarray
    cost: np.ndarray
    tau: np.ndarray
    solve_seconds: np.ndarray
    balance_residual: np.ndarray
    pv_curtailed: np.ndarray
    failed: np.ndarray
    states: dict
    device_states: dict
    building_inputs: dict
    blinds: dict
    device_inputs: dict
    violations: dict
    weekly_cost: np.ndarray
    weekly_kh: np.ndarray
    failures: list
    meta: dict

    @property
    def total_cost(self) -> float:
        return float(self.weekly_cost.sum())

    @property
    def total_kh(self) -> float:
        return float(self.weekly_kh.sum())


def _zero_first_step(district: DistrictModel) -> FirstStep:
    dev = {}
    for d in district.devices:
        for stream in d.inputs:
            dev[(d.device_id, stream)] = 0.0
    bld = {b.building_id: np.zeros(len(b.inputs)) for b in district.buildings}
    v = {b.building_id: np.zeros(b.n_blinds) for b in district.buildings}
    p_name = next(iter(district.nodes[0].p_coef)) if district.nodes else "p"
    return FirstStep(p={p_name: 0.0}, device_inputs=dev, building_inputs=bld,
                     slack={}, v=v, tau=float("nan"))


def run_receding_horizon(district: DistrictModel, spec: PolicySpec,
                         scenario: Scenario, T: int = 8, weeks: int = 1,
                         restart_weekly: bool = True, *,
                         delta_chi: float = 0.01, delta_st: float = 0.01,
                         models: list | None = None) -> SimulationTrace:
    """Simulate one policy in closed loop against the true bilinear plant.

    Hourly: the last realized forecast error seeds the stacked disturbance
    map, per-hour ambiguity bounds give the noise box, the policy is
    compiled and solved, and its first step drives the plant. A solver
    failure is logged and the previous hour's inputs are held. With
    `restart_weekly` the plant state resets to its configured initial value
    at the start of every week.
    """
    ids = tuple(scenario.disturbance_ids)
    if spec.horizon != T:
        raise ValueError(f"policy horizon {spec.horizon} must equal T={T}")
    if ids != tuple(district.disturbances):
        raise ValueError("scenario and district disagree on disturbances")
    if weeks < 1:
        raise ValueError("need at least one week")
    H = weeks * HOURS_PER_WEEK
    if scenario.hours < H + T:
        raise ValueError(
            f"scenario covers {scenario.hours} hours, need {H + T}")
    if models is None:
        models = fit_models(scenario)
    if len(models) != len(ids) or any(
            m.disturbance_id != d for m, d in zip(models, ids)):
        raise ValueError("models must match scenario disturbances in order")
    D = len(ids)
    bounds = [[ambiguity_bounds(m, h, delta_chi, delta_st)
               for h in range(HOURS_PER_DAY)] for m in models]

    elec_node = next(n for n in district.nodes if n.p_coef)
    p_name, p_coef = next(iter(elec_node.p_coef.items()))
    coupling = dict(district.coupling)
    input_index = {
        b.building_id: {name: k for k, name in enumerate(b.inputs)}
        for b in district.buildings
    }
    pv_cap = None
    for d in district.devices:
        for k, label in enumerate(d.rows.labels):
            if label == f"{d.device_id}:cap:out" and d.rows.F_xi[k].any():
                pv_cap = (d.device_id, d.rows.F_xi[k].copy(),
                          float(d.rows.h[k]))

    x_bld = {b.building_id: b.x0.copy() for b in district.buildings}
    x_dev = {d.device_id: d.x0.copy() for d in district.devices if d.n_states}
    e_prev = np.array([h.errors[-1, -1] for h in scenario.histories])

    p_arr = np.zeros(H)
    cost = np.zeros(H)
    tau = np.full(H, np.nan)
    solve_s = np.zeros(H)
    resid = np.zeros(H)
    curtailed = np.zeros(H)
    failed = np.zeros(H, dtype=bool)
    states = {b.building_id: np.zeros((H + 1, b.n_states))
              for b in district.buildings}
    dev_states = {d: np.zeros((H + 1, len(x))) for d, x in x_dev.items()}
    bld_inputs = {b.building_id: np.zeros((H, len(b.inputs)))
                  for b in district.buildings}
    blinds = {b.building_id: np.zeros((H, b.n_blinds))
              for b in district.buildings}
    dev_inputs = {(d.device_id, s): np.zeros(H)
                  for d in district.devices for s in d.inputs}
    viols = {b.building_id: np.zeros((H, len(b.comfort_states)))
             for b in district.buildings}
    failures: list = []
    last_first: FirstStep | None = None

    for h in range(H):
        wall_hod = (scenario.start_hour + h) % HOURS_PER_DAY
        if restart_weekly and h % HOURS_PER_WEEK == 0:
            x_bld = {b.building_id: b.x0.copy() for b in district.buildings}
            x_dev = {d.device_id: d.x0.copy()
                     for d in district.devices if d.n_states}
        for bid, x in x_bld.items():
            states[bid][h] = x
        for did, x in x_dev.items():
            dev_states[did][h] = x

        map_start = (wall_hod - 1) % HOURS_PER_DAY
        smap = stack_disturbance(models, scenario.forecasts[:, h:h + T],
                                 e_prev, T, start_hour=map_start)
        grid = [[bounds[i][(map_start + s) % HOURS_PER_DAY] for s in range(T)]
                for i in range(D)]
        box = build_box(ids, grid, epsilon=spec.epsilon)
        x_hat = dict(x_bld)
        x_hat.update(x_dev)
        first = None
        try:
            compiled = compile_problem(district, spec, box, smap, x_hat,
                                       start_hour=wall_hod)
        except InfeasibleInstanceError:
            compiled = None  # fallback inputs drove a state out of range
        if compiled is not None:
            t0 = time.perf_counter()
            sol = lp_solve(compiled.lp)
            solve_s[h] = time.perf_counter() - t0
            if sol.status == STATUS_OPTIMAL:
                first = compiled.extract_first_step(sol.x)
                tau[h] = first.tau
                last_first = first
        if first is None:
            failures.append(h)
            failed[h] = True
            first = last_first if last_first is not None else \
                _zero_first_step(district)

        xi = scenario.realizations[:, h]
        applied_dev = {k: max(0.0, float(val))
                       for k, val in first.device_inputs.items()}
        if pv_cap is not None:
            dev_id, f_xi, h_row = pv_cap
            planned = applied_dev.get((dev_id, "out"), 0.0)
            cap = h_row - float(f_xi @ xi)
            applied = min(planned, max(cap, 0.0))
            curtailed[h] = planned - applied
            applied_dev[(dev_id, "out")] = applied
        applied_bld = {bid: np.maximum(first.building_inputs[bid], 0.0)
                       for bid in x_bld}
        applied_v = {bid: np.clip(first.v[bid], 0.0, 1.0) for bid in x_bld}

        acc = 0.0
        for key, c in elec_node.u_coef.items():
            acc += c * applied_dev[key]
        for demand, c in elec_node.d_coef.items():
            val = sum(applied_bld[bid][input_index[bid][name]]
                      for bid, name in coupling.get(demand, ()))
            acc += c * val
        p_val = max(-acc / p_coef, 0.0)
        resid[h] = abs(p_coef * p_val + acc)

        for d in district.devices:
            if d.n_states:
                u_vec = np.array([applied_dev[(d.device_id, s)]
                                  for s in d.inputs])
                x_dev[d.device_id] = d.A @ x_dev[d.device_id] + d.B @ u_vec
        hod_next = (wall_hod + 1) % HOURS_PER_DAY
        for b in district.buildings:
            bid = b.building_id
            x_new = simulate_true_step(b, x_bld[bid], applied_bld[bid],
                                       applied_v[bid], xi)
            x_bld[bid] = x_new
            temps = x_new[list(b.comfort_states)]
            viols[bid][h] = np.maximum(
                np.maximum(b.lb[hod_next] - temps, temps - b.ub[hod_next]), 0.0)
            bld_inputs[bid][h] = applied_bld[bid]
            blinds[bid][h] = applied_v[bid]
            states[bid][h + 1] = x_new
        for did in x_dev:
            dev_states[did][h + 1] = x_dev[did]
        for key, val in applied_dev.items():
            dev_inputs[key][h] = val
        p_arr[h] = p_val
        cost[h] = district.tariff[wall_hod] * p_val
        e_prev = xi - scenario.forecasts[:, h]

    kh_hour = np.zeros(H)
    for v in viols.values():
        kh_hour += v.sum(axis=1)
    return SimulationTrace(
        method=spec.mode, seed=scenario.seed, start_hour=scenario.start_hour,
        weeks=weeks, hours=H, p=p_arr, cost=cost, tau=tau,
        solve_seconds=solve_s, balance_residual=resid, pv_curtailed=curtailed,
        failed=failed, states=states, device_states=dev_states,
        building_inputs=bld_inputs, blinds=blinds, device_inputs=dev_inputs,
        violations=viols,
        weekly_cost=cost.reshape(weeks, HOURS_PER_WEEK).sum(axis=1),
        weekly_kh=kh_hour.reshape(weeks, HOURS_PER_WEEK).sum(axis=1),
        failures=failures,
        meta={"mode": spec.mode, "c_b": spec.c_b, "gamma": spec.gamma,
              "epsilon": spec.epsilon, "T": T, "delta_chi": delta_chi,
              "delta_st": delta_st, "n_failures": len(failures)},
    )


def run_synthetic(district_json: str, method: str, seed: int, *, T: int = 8,
                  weeks: int = 1, c_b: float = 0.0, gamma: float = 1e3,
                  epsilon: float = 0.01, delta_chi: float = 0.01,
                  delta_st: float = 0.01, noise_scale: float = 1.0,
                  train_days: int = 120, params: dict | None = None,
                  restart_weekly: bool = True) -> SimulationTrace:
    """Self-contained (method, seed) run for parallel workers.

    Rebuilds the district from JSON and synthesizes the seeded scenario
    inside the worker, so only plain picklable arguments cross process
    boundaries.
    """
    district = district_from_json(district_json)
    mode = _METHOD_MODES.get(method.lower(), method.upper())
    scenario = synth_scenario(district.disturbances, seed=seed, weeks=weeks,
                              train_days=train_days, params=params,
                              noise_scale=noise_scale, pad_hours=max(T, 48))
    spec = PolicySpec(mode=mode, horizon=T,
                      n_dist=len(district.disturbances), c_b=c_b,
                      gamma=gamma, epsilon=epsilon)
    return run_receding_horizon(district, spec, scenario, T=T, weeks=weeks,
                                restart_weekly=restart_weekly,
                                delta_chi=delta_chi, delta_st=delta_st)


# ---------------------------------------------------------------------------
# comfort-tightening tuner


def tune_cep(district: DistrictModel, scenario: Scenario,
             target_violations: float, *, T: int = 8, weeks: int = 1,
             restart_weekly: bool = True, gamma: float = 1e3,
             epsilon: float = 0.01, delta_chi: float = 0.01,
             delta_st: float = 0.01, resolution: float = 0.01,
             c_max: float = 3.0) -> float:
    """Smallest comfort tightening at which CEP meets the violation target.

    Bisects the tightening over [0, c_max] degrees at the given resolution,
    assuming closed-loop Kelvin-hours decrease as the bounds tighten.
    Raises NotAttainable when even c_max leaves more violations than the
    target.
    """
    models = fit_models(scenario)
    cache: dict = {}

    def kh(c_b: float) -> float:
        if c_b not in cache:
            spec = PolicySpec(mode="CEP", horizon=T,
                              n_dist=len(district.disturbances), c_b=c_b,
                              gamma=gamma, epsilon=epsilon)
            tr = run_receding_horizon(district, spec, scenario, T=T,
                                      weeks=weeks,
                                      restart_weekly=restart_weekly,
                                      delta_chi=delta_chi, delta_st=delta_st,
                                      models=models)
            cache[c_b] = tr.total_kh
        return cache[c_b]

    if kh(0.0) <= target_violations:
        return 0.0
    if kh(c_max) > target_violations:
        raise NotAttainable(
            f"{kh(c_max):.3f} Kh at tightening {c_max} exceeds the "
            f"target {target_violations:.3f} Kh")
    lo, hi = 0.0, c_max
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if kh(mid) <= target_violations:
            hi = mid
        else:
            lo = mid
    return float(hi)


# ---------------------------------------------------------------------------
# reporting


@dataclass(frozen=True)
class MethodSummary:
    method: str
    n_weeks: int
    mean_cost: float
    std_cost: float
    mean_kh: float
    std_kh: float
    cost_per_unit: float
    failures: int


@dataclass(frozen=True)
class Report:
    """Per-method weekly cost/violation statistics, cost normalized to a basis."""

    basis_method: str
    basis_cost: float
    summaries: tuple

    def to_text(self) -> str:
        lines = [
            f"basis: mean weekly cost of {self.basis_method} "
            f"= {self.basis_cost:.4f} CHF/week",
            f"{'method':<12}{'weeks':>6}{'cost CHF/wk':>14}{'std':>10}"
            f"{'cost p.u.':>11}{'Kh/wk':>10}{'std':>10}{'failures':>10}",
        ]
        for s in self.summaries:
            lines.append(
                f"{s.method:<12}{s.n_weeks:>6}{s.mean_cost:>14.4f}"
                f"{s.std_cost:>10.4f}{s.cost_per_unit:>11.3f}"
                f"{s.mean_kh:>10.3f}{s.std_kh:>10.3f}{s.failures:>10}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(
            {
                "basis_method": self.basis_method,
                "basis_cost": self.basis_cost,
                "methods": [
                    {
                        "method": s.method,
                        "n_weeks": s.n_weeks,
                        "mean_cost": s.mean_cost,
                        "std_cost": s.std_cost,
                        "mean_kh": s.mean_kh,
                        "std_kh": s.std_kh,
                        "cost_per_unit": s.cost_per_unit,
                        "failures": s.failures,
                    }
                    for s in self.summaries
                ],
            },
            indent=2, sort_keys=True)


def report(traces_by_method: dict, basis_method: str | None = None) -> Report:
    """Pool weekly aggregates across traces and normalize costs to a basis."""
    if not traces_by_method:
        raise ValueError("need at least one trace")
    if basis_method is None:
        basis_method = "CEP" if "CEP" in traces_by_method else \
            next(iter(traces_by_method))
    if basis_method not in traces_by_method:
        raise ValueError(f"no traces for basis method {basis_method!r}")
    pooled = {}
    for method, traces in traces_by_method.items():
        if not traces:
            raise ValueError(f"method {method!r} has no traces")
        costs = np.concatenate([t.weekly_cost for t in traces])
        khs = np.concatenate([t.weekly_kh for t in traces])
        fails = sum(len(t.failures) for t in traces)
        pooled[method] = (costs, khs, fails)
    basis = float(pooled[basis_method][0].mean())
    summaries = []
    for method, (costs, khs, fails) in pooled.items():
        mean_cost = float(costs.mean())
        summaries.append(MethodSummary(
            method=method, n_weeks=len(costs), mean_cost=mean_cost,
            std_cost=float(costs.std()), mean_kh=float(khs.mean()),
            std_kh=float(khs.std()),
            cost_per_unit=mean_cost / basis if basis > 0 else float("nan"),
            failures=fails))
    return Report(basis_method=basis_method, basis_cost=basis,
                  summaries=tuple(summaries))


def district_summary(single_costs: dict, combined: tuple) -> dict:
    """Aggregation-benefit table: each hub alone versus the combined hub."""
    label, combined_cost = combined
    total = float(sum(single_costs.values()))
    return {
        "singles": {k: float(v) for k, v in single_costs.items()},
        "sum_of_singles": total,
        "combined_label": label,
        "combined_cost": float(combined_cost),
        "gain": total - float(combined_cost),
    }


# ---------------------------------------------------------------------------
# exports


def _fmt(x) -> str:
    return repr(float(x))


def trace_to_csv(path: str, trace: SimulationTrace) -> None:
    """One row per simulated hour; column set fixed by the trace's district."""
    dev_keys = sorted(trace.device_inputs)
    bids = sorted(trace.states)
    header = ["hour", "hod", "week", "p_kw", "cost_chf", "tau",
              "solve_seconds", "balance_residual", "pv_curtailed_kw", "failed"]
    for dev, stream in dev_keys:
        header.append(f"{dev}.{stream}_kw")
    for bid in bids:
        n_states = trace.states[bid].shape[1]
        header += [f"{bid}.x{i}" for i in range(n_states)]
        header += [f"{bid}.u{i}_kw"
                   for i in range(trace.building_inputs[bid].shape[1])]
        header += [f"{bid}.v{i}" for i in range(trace.blinds[bid].shape[1])]
        header += [f"{bid}.viol{i}_kh"
                   for i in range(trace.violations[bid].shape[1])]
    lines = [",".join(header)]
    for h in range(trace.hours):
        row = [str(h), str((trace.start_hour + h) % HOURS_PER_DAY),
               str(h // HOURS_PER_WEEK), _fmt(trace.p[h]), _fmt(trace.cost[h]),
               _fmt(trace.tau[h]), _fmt(trace.solve_seconds[h]),
               _fmt(trace.balance_residual[h]), _fmt(trace.pv_curtailed[h]),
               str(int(trace.failed[h]))]
        for key in dev_keys:
            row.append(_fmt(trace.device_inputs[key][h]))
        for bid in bids:
            row += [_fmt(v) for v in trace.states[bid][h + 1]]
            row += [_fmt(v) for v in trace.building_inputs[bid][h]]
            row += [_fmt(v) for v in trace.blinds[bid][h]]
            row += [_fmt(v) for v in trace.violations[bid][h]]
        lines.append(",".join(row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def pareto_csv(path: str, traces_by_method: dict) -> None:
    """Long-format weekly cost/violation records for Pareto-style plots."""
    lines = ["method,trace,week,cost_chf,kh,mean_solve_seconds"]
    for method, traces in traces_by_method.items():
        for k, tr in enumerate(traces):
            for w in range(tr.weeks):
                lines.append(",".join([
                    method, str(k), str(w), _fmt(tr.weekly_cost[w]),
                    _fmt(tr.weekly_kh[w]),
                    _fmt(tr.solve_seconds.mean()),
                ]))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def horizon_sweep(district: DistrictModel, scenario: Scenario, horizons,
                  mode: str = "ADR", hour: int = 0, *, gamma: float = 1e3,
                  epsilon: float = 0.01, delta_chi: float = 0.01,
                  delta_st: float = 0.01, repeats: int = 3) -> list:
    """Compile-and-solve timings of one instance per horizon length."""
    models = fit_models(scenario)
    ids = tuple(scenario.disturbance_ids)
    D = len(ids)
    bounds = [[ambiguity_bounds(m, h, delta_chi, delta_st)
               for h in range(HOURS_PER_DAY)] for m in models]
    if hour == 0:
        e_hat = np.array([h.errors[-1, -1] for h in scenario.histories])
    else:
        e_hat = (scenario.realizations[:, hour - 1]
                 - scenario.forecasts[:, hour - 1])
    x_hat = {b.building_id: b.x0.copy() for b in district.buildings}
    x_hat.update({d.device_id: d.x0.copy()
                  for d in district.devices if d.n_states})
    wall_hod = (scenario.start_hour + hour) % HOURS_PER_DAY
    map_start = (wall_hod - 1) % HOURS_PER_DAY
    rows = []
    for T in sorted(int(t) for t in horizons):
        if scenario.hours < hour + T:
            raise ValueError(f"scenario too short for horizon {T}")
        smap = stack_disturbance(models, scenario.forecasts[:, hour:hour + T],
                                 e_hat, T, start_hour=map_start)
        grid = [[bounds[i][(map_start + s) % HOURS_PER_DAY] for s in range(T)]
                for i in range(D)]
        box = build_box(ids, grid, epsilon=epsilon)
        spec = PolicySpec(mode=mode, horizon=T, n_dist=D, c_b=0.0,
                          gamma=gamma, epsilon=epsilon)
        t_compile = math.inf
        compiled = None
        for _ in range(max(1, repeats)):
            t0 = time.perf_counter()
            compiled = compile_problem(district, spec, box, smap, x_hat,
                                       start_hour=wall_hod)
            t_compile = min(t_compile, time.perf_counter() - t0)
        t_solve = math.inf
        status = None
        for _ in range(max(1, repeats)):
            t0 = time.perf_counter()
            sol = lp_solve(compiled.lp)
            t_solve = min(t_solve, time.perf_counter() - t0)
            status = sol.status
        if status != STATUS_OPTIMAL:
            raise RuntimeError(f"sweep instance T={T} ended {status}")
        rows.append({
            "horizon": T,
            "n_rows": compiled.lp.n_rows,
            "n_cols": compiled.lp.n_cols,
            "compile_seconds": t_compile,
            "solve_seconds": t_solve,
            "total_seconds": t_compile + t_solve,
        })
    return rows


def horizon_sweep_csv(path: str, rows) -> None:
    lines = ["horizon,n_rows,n_cols,compile_seconds,solve_seconds,total_seconds"]
    for r in rows:
        lines.append(",".join([
            str(r["horizon"]), str(r["n_rows"]), str(r["n_cols"]),
            _fmt(r["compile_seconds"]), _fmt(r["solve_seconds"]),
            _fmt(r["total_seconds"]),
        ]))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
