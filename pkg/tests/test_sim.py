"""Closed-loop simulation: scenario synthesis, receding horizon, tuning, reports."""

import json
import os

import numpy as np
import pytest

from drbem.dist_model import fit_ar
from drbem.plant import make_building, make_district
from drbem.compile import PolicySpec
from drbem.sim import (
    DisturbanceParams,
    NotAttainable,
    Scenario,
    SimulationTrace,
    default_disturbance_params,
    district_summary,
    fit_models,
    horizon_sweep,
    horizon_sweep_csv,
    pareto_csv,
    report,
    run_receding_horizon,
    synth_scenario,
    trace_to_csv,
    tune_cep,
)

IDS = ("AT", "SRS", "IG")


def small_district(rooms=1, acts=("radiator", "ahu"), schedule="winter", n_bld=1):
    blds = [
        make_building(f"b{i}", n_rooms=rooms, mass="heavy", actuators=acts,
                      schedule=schedule, disturbances=IDS, x0_temp=22.0)
        for i in range(n_bld)
    ]
    return make_district(blds, IDS)


def scen(seed=0, weeks=1, noise=1.0, train_days=40, params=None):
    return synth_scenario(IDS, seed=seed, weeks=weeks, train_days=train_days,
                          noise_scale=noise, params=params)


def cep_spec(T, c_b=0.0, gamma=1e3):
    return PolicySpec(mode="CEP", horizon=T, n_dist=len(IDS), c_b=c_b,
                      gamma=gamma, epsilon=0.01)


def spec_of(mode, T, gamma=1e3):
    return PolicySpec(mode=mode, horizon=T, n_dist=len(IDS), c_b=0.0,
                      gamma=gamma, epsilon=0.01)


# ---------------------------------------------------------------------------
# scenario synthesis


def test_synth_scenario_deterministic():
    a = scen(seed=7)
    b = scen(seed=7)
    assert np.array_equal(a.forecasts, b.forecasts)
    assert np.array_equal(a.realizations, b.realizations)
    for ha, hb in zip(a.histories, b.histories):
        assert np.array_equal(ha.realizations, hb.realizations)
    c = scen(seed=8)
    assert not np.array_equal(a.realizations, c.realizations)


def test_synth_scenario_forecasts_are_daily_profiles():
    s = scen(seed=1)
    assert np.allclose(s.forecasts[:, :24], s.forecasts[:, 24:48])
    # solar forecast vanishes at night and is nonnegative
    i = IDS.index("SRS")
    assert s.forecasts[i, 0] == 0.0
    assert np.all(s.forecasts[i] >= 0.0)
    assert s.forecasts[i].max() > 0.1


def test_synth_scenario_noiseless():
    s = scen(seed=3, noise=0.0)
    assert np.array_equal(s.realizations, s.forecasts)
    for h in s.histories:
        assert np.all(h.errors == 0.0)


def test_synth_scenario_solar_noise_follows_sun():
    s = scen(seed=4)
    i = IDS.index("SRS")
    err = (s.realizations[i] - s.forecasts[i]).reshape(-1, 24)
    # night hours carry no solar forecast error
    assert np.all(err[:, :6] == 0.0)
    assert np.abs(err[:, 10:15]).max() > 0.0
    # realized solar never goes negative
    assert np.all(s.realizations[i] >= 0.0)


def test_synth_scenario_recovers_generator_alpha():
    params = default_disturbance_params(IDS)
    gen_alpha = params["AT"].alpha
    s = synth_scenario(IDS, seed=11, weeks=1, train_days=365)
    model = fit_ar(s.histories[IDS.index("AT")])
    assert abs(float(model.alpha.mean()) - gen_alpha) <= 0.05


def test_synth_scenario_rejects_unknown_id():
    with pytest.raises(ValueError):
        synth_scenario(("AT", "XX"), seed=0, weeks=1, train_days=10)


def test_scenario_validation():
    s = scen(seed=0)
    with pytest.raises(ValueError):
        Scenario(disturbance_ids=IDS, forecasts=s.forecasts,
                 realizations=s.realizations[:, :-1], histories=s.histories)
    bad = s.realizations.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        Scenario(disturbance_ids=IDS, forecasts=s.forecasts,
                 realizations=bad, histories=s.histories)


# ---------------------------------------------------------------------------
# receding horizon


def test_run_validations():
    district = small_district()
    s = scen(seed=0)
    with pytest.raises(ValueError):
        run_receding_horizon(district, cep_spec(6), s, T=4, weeks=1)
    short = Scenario(disturbance_ids=IDS, forecasts=s.forecasts[:, :100],
                     realizations=s.realizations[:, :100], histories=s.histories)
    with pytest.raises(ValueError):
        run_receding_horizon(district, cep_spec(4), short, T=4, weeks=1)


def test_noiseless_cep_equals_adr():
    district = small_district()
    s = scen(seed=2, noise=0.0)
    tr_cep = run_receding_horizon(district, cep_spec(4), s, T=4, weeks=1)
    tr_adr = run_receding_horizon(district, spec_of("ADR", 4), s, T=4, weeks=1)
    assert not tr_cep.failures and not tr_adr.failures
    assert np.allclose(tr_cep.p, tr_adr.p, atol=1e-6)
    for bid in tr_cep.states:
        assert np.allclose(tr_cep.states[bid], tr_adr.states[bid], atol=1e-6)
        assert np.allclose(tr_cep.building_inputs[bid],
                           tr_adr.building_inputs[bid], atol=1e-6)
    assert abs(tr_cep.weekly_cost[0] - tr_adr.weekly_cost[0]) < 1e-6


def test_balance_and_aggregate_invariants():
    district = small_district()
    s = scen(seed=5)
    for mode in ("CEP", "OLP"):
        tr = run_receding_horizon(district, spec_of(mode, 4), s, T=4, weeks=1)
        assert not tr.failures
        assert tr.balance_residual.max() <= 1e-6
        # weekly cost literally sums tariff-priced purchases
        hod = (tr.start_hour + np.arange(tr.hours)) % 24
        cost = district.tariff[hod] * tr.p
        assert np.allclose(tr.weekly_cost,
                           cost.reshape(tr.weeks, 168).sum(axis=1), atol=1e-9)
        kh = sum(v.sum() for v in tr.violations.values())
        assert abs(tr.weekly_kh.sum() - kh) < 1e-9
        assert np.all(tr.p >= 0.0)
        assert np.all(tr.pv_curtailed >= -1e-9)


def test_adr_balance_and_violation_frequency():
    district = small_district()
    s = scen(seed=6)
    tr = run_receding_horizon(district, spec_of("ADR", 6), s, T=6, weeks=1)
    assert not tr.failures
    assert tr.balance_residual.max() <= 1e-6
    viol_hours = np.zeros(tr.hours, dtype=bool)
    for v in tr.violations.values():
        viol_hours |= (v > 1e-6).any(axis=1)
    assert viol_hours.mean() <= 0.05


def test_weekly_restart():
    district = small_district()
    s = scen(seed=9, weeks=2)
    tr = run_receding_horizon(district, cep_spec(4), s, T=4, weeks=2)
    b = district.buildings[0]
    assert np.allclose(tr.states[b.building_id][168], b.x0, atol=0)
    batt = next(d for d in district.devices if d.n_states)
    assert np.allclose(tr.device_states[batt.device_id][168], batt.x0, atol=0)
    tr2 = run_receding_horizon(district, cep_spec(4), s, T=4, weeks=2,
                               restart_weekly=False)
    assert np.abs(tr2.states[b.building_id][168] - b.x0).max() > 1e-6


def test_solver_failure_fallback():
    district = small_district()
    params = default_disturbance_params(IDS)
    params["SRS"] = DisturbanceParams(
        profile="bell", amplitude=0.35, rise=8.0, sett=17.0,
        alpha=0.7, sigma=0.9, noise_follows_profile=True, clip_zero=True)
    s = scen(seed=13, params=params)
    tr = run_receding_horizon(district, spec_of("OLP", 4), s, T=4, weeks=1)
    assert tr.failures, "expected robustly infeasible midday instances"
    assert len(tr.failures) < tr.hours
    h = next(h for h in tr.failures if h > 0)
    bid = district.buildings[0].building_id
    assert np.allclose(tr.building_inputs[bid][h],
                       tr.building_inputs[bid][h - 1], atol=0)
    assert bool(tr.failed[h])
    assert np.isfinite(tr.p).all()
    assert tr.balance_residual.max() <= 1e-6


def test_battery_shifts_purchases_into_cheap_window():
    district = small_district()
    s = scen(seed=0, noise=0.0)
    tr = run_receding_horizon(district, cep_spec(8), s, T=8, weeks=1)
    assert not tr.failures
    hod = (tr.start_hour + np.arange(tr.hours)) % 24
    cheap = (hod < 5) | (hod >= 23)
    charge = tr.device_inputs[("battery", "in")]
    discharge = tr.device_inputs[("battery", "out")]
    assert charge[cheap].sum() > 0.1
    assert discharge[(hod >= 5) & (hod < 13)].sum() > 0.1


# ---------------------------------------------------------------------------
# tuning


def test_tune_cep_trivial_and_not_attainable():
    district = small_district()
    s = scen(seed=1, noise=0.0)
    tr = run_receding_horizon(district, cep_spec(4), s, T=4, weeks=1)
    target = float(tr.weekly_kh.sum())
    assert tune_cep(district, s, target, T=4, weeks=1) == 0.0
    with pytest.raises(NotAttainable):
        tune_cep(district, s, -1.0, T=4, weeks=1)


def test_tune_cep_positive_on_noisy_scenario():
    district = small_district()
    s = scen(seed=21)
    base = run_receding_horizon(district, cep_spec(4), s, T=4, weeks=1)
    base_kh = float(base.weekly_kh.sum())
    assert base_kh > 0.0, "plain CEP should violate on a noisy scenario"
    target = base_kh / 4.0
    c_b = tune_cep(district, s, target, T=4, weeks=1)
    assert 0.0 < c_b <= 3.0
    tuned = run_receding_horizon(district, cep_spec(4, c_b=c_b), s, T=4, weeks=1)
    assert float(tuned.weekly_kh.sum()) <= target + 1e-9


# ---------------------------------------------------------------------------
# reporting and exports


def _fake_trace(method, weekly_cost, weekly_kh, seed=0):
    weeks = len(weekly_cost)
    hours = weeks * 168
    return SimulationTrace(
        method=method, seed=seed, start_hour=0, weeks=weeks, hours=hours,
        p=np.zeros(hours), cost=np.zeros(hours), tau=np.zeros(hours),
        solve_seconds=np.zeros(hours), balance_residual=np.zeros(hours),
        pv_curtailed=np.zeros(hours), failed=np.zeros(hours, dtype=bool),
        states={}, device_states={}, building_inputs={}, blinds={},
        device_inputs={}, violations={},
        weekly_cost=np.asarray(weekly_cost, dtype=float),
        weekly_kh=np.asarray(weekly_kh, dtype=float),
        failures=[], meta={},
    )


def test_report_single_week_and_basis():
    traces = {
        "CEP": [_fake_trace("CEP", [2.0], [4.0])],
        "ADR": [_fake_trace("ADR", [3.0], [0.5])],
    }
    rep = report(traces)
    by = {s.method: s for s in rep.summaries}
    assert rep.basis_method == "CEP" and rep.basis_cost == 2.0
    assert by["CEP"].std_cost == 0.0 and by["CEP"].cost_per_unit == 1.0
    assert by["ADR"].cost_per_unit == pytest.approx(1.5)
    assert by["ADR"].mean_kh == pytest.approx(0.5)
    text = rep.to_text()
    assert "CEP" in text and "ADR" in text
    parsed = json.loads(rep.to_json())
    assert parsed["basis_method"] == "CEP"
    assert len(parsed["methods"]) == 2


def test_report_pools_seeds_and_weeks():
    traces = {"CEP": [_fake_trace("CEP", [1.0, 3.0], [0.0, 2.0]),
                      _fake_trace("CEP", [2.0], [1.0], seed=1)]}
    rep = report(traces)
    s = rep.summaries[0]
    assert s.mean_cost == pytest.approx(2.0)
    assert s.std_cost == pytest.approx(np.std([1.0, 3.0, 2.0]))
    assert s.n_weeks == 3


def test_district_summary_shape():
    d = district_summary({"COM": 1.13, "RES": 1.28}, ("COM+RES", 1.51))
    assert d["sum_of_singles"] == pytest.approx(2.41)
    assert d["combined_cost"] == pytest.approx(1.51)
    assert d["gain"] == pytest.approx(0.90)
    assert d["singles"]["COM"] == pytest.approx(1.13)


def test_trace_csv_and_pareto_csv(tmp_path):
    district = small_district()
    s = scen(seed=3, noise=0.0)
    tr = run_receding_horizon(district, cep_spec(4), s, T=4, weeks=1)
    path = tmp_path / "trace.csv"
    trace_to_csv(str(path), tr)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == tr.hours + 1
    header = lines[0].split(",")
    assert header[0] == "hour" and "p_kw" in header and "cost_chf" in header
    first = dict(zip(header, lines[1].split(",")))
    assert float(first["p_kw"]) == pytest.approx(tr.p[0])
    # deterministic bytes on rewrite
    before = path.read_bytes()
    trace_to_csv(str(path), tr)
    assert path.read_bytes() == before

    ppath = tmp_path / "pareto.csv"
    pareto_csv(str(ppath), {"CEP": [tr]})
    rows = ppath.read_text().strip().split("\n")
    assert rows[0].split(",")[0] == "method"
    assert len(rows) == 1 + tr.weeks


def test_horizon_sweep_csv(tmp_path):
    district = small_district()
    s = scen(seed=2)
    rows = horizon_sweep(district, s, horizons=(2, 3), mode="ADR", repeats=1)
    assert [r["horizon"] for r in rows] == [2, 3]
    assert all(r["total_seconds"] > 0 for r in rows)
    assert rows[1]["n_cols"] > rows[0]["n_cols"]
    path = tmp_path / "sweep.csv"
    horizon_sweep_csv(str(path), rows)
    lines = path.read_text().strip().split("\n")
    assert lines[0].startswith("horizon,")
    assert len(lines) == 3
