"""Horizon stacking, policy parametrization, box robust counterpart, epigraph.

Oracles: explicit two-step matrix unrolling for storage dynamics, brute-force
vertex enumeration for the robust counterpart (worst case of an affine row
over a box sits at a vertex), and post-solve sampling of the pre-counterpart
rows. Property checks cover policy-class nesting, box monotonicity, the
zero-width collapse of all three policies, and slack activation.
"""

import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from drbem import lp as lpmod
from drbem.compile import (
    AffineInW,
    CausalityError,
    DimensionError,
    PolicySpec,
    compile_problem,
    epigraph_objective,
    evaluate_rows,
    parametrize,
    robustify,
    stack_system,
)
from drbem.dist_model import ARModel, UncertaintyBox, stack_disturbance
from drbem.plant import make_building, make_district

IDS = ("AT", "SRS", "IG")
SEED = 5151


def toy_district(n_bld=1, rooms=1, acts=("radiator", "ahu"), schedule="winter"):
    blds = [
        make_building(f"b{i}", n_rooms=rooms, mass="heavy", actuators=acts,
                      disturbances=IDS, schedule=schedule, x0_temp=22.0)
        for i in range(n_bld)
    ]
    return make_district(blds, IDS)


def toy_map(T, alphas=(0.5, 0.5, 0.5), forecasts=None, e_hat=None, start_hour=0):
    models = [
        ARModel(disturbance_id=IDS[i], alpha=np.full(24, alphas[i]),
                residuals=[np.zeros(4)] * 24, mu_hat=np.zeros(24),
                var_hat=np.ones(24), zero_energy=np.zeros(24, dtype=bool))
        for i in range(len(IDS))
    ]
    if forecasts is None:
        forecasts = np.vstack([
            np.full(T, 5.0),   # ambient temperature
            np.full(T, 0.2),   # solar
            np.full(T, 0.3),   # internal gains
        ])
    if e_hat is None:
        e_hat = np.zeros(len(IDS))
    return stack_disturbance(models, forecasts, e_hat, T, start_hour=start_hour)


def toy_box(T, half=0.1, mu_half=0.02, eps=0.01, center=0.0):
    # `half` may be a scalar or one value per disturbance; solar noise must
    # stay small relative to its forecast or the PV output bound can turn
    # robustly negative (exactly as with real data, where solar error
    # variance collapses to zero at night).
    D = len(IDS)
    b = eps / (2.0 * D * T)
    half = np.broadcast_to(np.asarray(half, dtype=float)[..., None], (D, T))
    mu_half = np.broadcast_to(np.asarray(mu_half, dtype=float)[..., None], (D, T))
    return UncertaintyBox(
        disturbance_ids=IDS,
        lower=center - half, upper=center + half,
        beta_lo=np.full((D, T), b), beta_hi=np.full((D, T), b),
        mu_lo=center - mu_half, mu_hi=center + mu_half,
        sigma_hi=np.ones((D, T)), epsilon=eps,
    )


def x_hat_for(district):
    xh = {b.building_id: b.x0.copy() for b in district.buildings}
    for dev in district.devices:
        if dev.n_states:
            xh[dev.device_id] = dev.x0.copy()
    return xh


def spec_for(mode, T, c_b=0.0, gamma=1e3):
    return PolicySpec(mode=mode, horizon=T, n_dist=len(IDS), c_b=c_b,
                      gamma=gamma, epsilon=0.01)


def dense_rows(c0, Z, W0, WZ, rhs, senses, tags=None):
    W0 = np.asarray(W0, dtype=float)
    m, nw = W0.shape
    if tags is None:
        tags = tuple(f"row{i}" for i in range(m))
    return AffineInW(
        c0=np.asarray(c0, dtype=float),
        Z=sp.csr_matrix(np.asarray(Z, dtype=float)),
        W0=sp.csr_matrix(np.asarray(W0, dtype=float)),
        WZ=sp.csr_matrix(np.asarray(WZ, dtype=float).reshape(m * nw, -1)),
        rhs=np.asarray(rhs, dtype=float),
        senses=tuple(senses),
        tags=tuple(tags),
        layout=None,
    )


# ---------------------------------------------------------------------------
# stacking


def _row_by_tag(rows, tag):
    return rows.tags.index(tag)


def test_stack_battery_two_step_unrolling():
    T = 2
    district = toy_district()
    smap = toy_map(T)
    rows = stack_system(district, smap, x_hat_for(district), T)
    batt = [d for d in district.devices if d.device_id == "battery"][0]
    rng = np.random.default_rng(SEED)
    nq = rows.Z.shape[1]
    nw = rows.W0.shape[1]
    layout = rows.layout
    cols = {}
    for t in range(T):
        for name in ("in", "out"):
            cols[(t, name)] = layout.qcol(t, layout.keys.index(("dev", ("battery", name))))
    for _ in range(5):
        q = rng.normal(size=nq)
        w = rng.normal(size=nw)
        u = {k: q[c] for k, c in cols.items()}
        x1 = batt.A @ batt.x0 + batt.B @ np.array([u[(0, "in")], u[(0, "out")]])
        x2 = batt.A @ x1 + batt.B @ np.array([u[(1, "in")], u[(1, "out")]])
        vals = evaluate_rows(rows, q, w)
        i = _row_by_tag(rows, "t1.battery.soc.hi")
        assert abs(vals[i] - (x1[0] + x1[1])) < 1e-9
        i = _row_by_tag(rows, "terminal.battery.soc.hi")
        assert abs(vals[i] - (x2[0] + x2[1])) < 1e-9
        i = _row_by_tag(rows, "t1.battery.charge1")
        assert abs(vals[i] - (0.84 * x1[0] + 0.37 * x1[1] + u[(1, "in")])) < 1e-9


def test_stack_comfort_row_matches_manual_recursion():
    T = 3
    district = toy_district(acts=("radiator", "ahu", "blinds"))
    b = district.buildings[0]
    smap = toy_map(T, alphas=(0.7, 0.4, 0.2))
    rows = stack_system(district, smap, x_hat_for(district), T, start_hour=6)
    layout = rows.layout
    rng = np.random.default_rng(SEED + 1)
    from drbem.plant import linearize_building

    lin = linearize_building(b, b.x0)
    ucols = [layout.qcol(t, layout.keys.index(("bld", (b.building_id, n))))
             for t in range(T) for n in b.inputs]
    vcol = layout.vcol(0)
    for _ in range(5):
        q = rng.normal(size=rows.Z.shape[1]) * 0.5
        w = rng.normal(size=rows.W0.shape[1]) * 0.5
        xi_flat = smap.offset + smap.gain @ w
        xi = xi_flat.reshape(len(IDS), T)
        x = b.x0.copy()
        v = np.array([q[vcol]])
        for t in range(T):
            u = np.array([q[ucols[t * len(b.inputs) + k]] for k in range(len(b.inputs))])
            d_eff = lin.D + np.einsum("mil,m->il", lin.Cv, v)
            x = lin.A @ x + lin.B @ u + d_eff @ xi[:, t]
        # comfort of the last stacked state, upper side, room 0
        i = _row_by_tag(rows, f"t{T-1}.comfort.{b.building_id}.r0.up")
        scol = layout.qcol(T - 1, layout.keys.index(("slack", (b.building_id, 0))))
        vals = evaluate_rows(rows, q, w)
        assert abs(vals[i] - (x[0] - q[scol])) < 1e-8
        # its bound is the schedule at hour-of-day 6 + (T-1) + 1
        assert abs(rows.rhs[i] - b.ub[(6 + T) % 24]) < 1e-12


def test_stack_deterministic_collapse():
    T = 3
    district = toy_district(acts=("radiator", "ahu", "blinds"))
    smap = toy_map(T)
    smap_zero = type(smap)(
        disturbance_ids=smap.disturbance_ids, offset=smap.offset,
        gain=np.zeros_like(smap.gain), e_hat=smap.e_hat, horizon=T)
    rows = stack_system(district, smap_zero, x_hat_for(district), T)
    assert rows.W0.nnz == 0
    assert rows.WZ.nnz == 0


def test_comfort_tightening_shift():
    T = 2
    district = toy_district()
    smap = toy_map(T)
    plain = stack_system(district, smap, x_hat_for(district), T)
    tight = stack_system(district, smap, x_hat_for(district), T, c_b=0.5)
    assert plain.tags == tight.tags
    for i, tag in enumerate(plain.tags):
        if ".comfort." in tag:
            assert abs(plain.rhs[i] - tight.rhs[i] - 0.5) < 1e-12
        else:
            assert plain.rhs[i] == tight.rhs[i]


def test_balance_row_is_equality_over_all_streams():
    T = 2
    district = toy_district()
    smap = toy_map(T)
    rows = stack_system(district, smap, x_hat_for(district), T)
    layout = rows.layout
    i = _row_by_tag(rows, "t0.balance.elec")
    assert rows.senses[i] == "="
    rng = np.random.default_rng(SEED + 2)
    q = rng.normal(size=rows.Z.shape[1])
    w = rng.normal(size=rows.W0.shape[1])
    b = district.buildings[0]
    get = lambda t, key: q[layout.qcol(t, layout.keys.index(key))]
    expect = (
        get(0, ("p", "p_elec"))
        + get(0, ("dev", ("pv", "out"))) + get(0, ("dev", ("battery", "out")))
        - get(0, ("dev", ("heat_pump", "in"))) - get(0, ("dev", ("chiller", "in")))
        - get(0, ("dev", ("boiler", "in"))) - get(0, ("dev", ("battery", "in")))
        - get(0, ("bld", (b.building_id, "ahu_r0")))
    )
    assert abs(evaluate_rows(rows, q, w)[i] - expect) < 1e-9


# ---------------------------------------------------------------------------
# parametrization


def test_parametrize_olp_keeps_gradients_constant():
    T = 3
    district = toy_district()
    smap = toy_map(T)
    rows = stack_system(district, smap, x_hat_for(district), T)
    olp = parametrize(spec_for("OLP", T), rows)
    assert olp.layout.nz == rows.Z.shape[1]
    assert (olp.W0 - rows.W0).nnz == 0
    assert olp.WZ.nnz == rows.WZ.nnz  # only pre-existing blind couplings


def test_parametrize_adr_structure_and_reduction():
    T = 3
    district = toy_district()
    smap = toy_map(T)
    rows = stack_system(district, smap, x_hat_for(district), T)
    adr = parametrize(spec_for("ADR", T), rows)
    layout = adr.layout
    D = len(IDS)
    assert layout.n_gains == layout.nsd * D * T * (T - 1) // 2
    i = _row_by_tag(adr, "t2.balance.elec")
    nw = D * T
    wz = adr.WZ.tocsr()
    touched = sorted({r % nw for r in range(i * nw, (i + 1) * nw)
                      if wz.indptr[r] < wz.indptr[r + 1]})
    causal = sorted(d * T + s for d in range(D) for s in range(2))
    assert touched == causal  # step-2 decisions see noise steps 0 and 1 only
    # with every gain forced to zero, rows evaluate exactly like open loop
    olp = parametrize(spec_for("OLP", T), rows)
    rng = np.random.default_rng(SEED + 3)
    for _ in range(5):
        z_olp = rng.normal(size=olp.layout.nz)
        z_adr = np.zeros(layout.nz)
        z_adr[:layout.gain_base] = z_olp[:layout.gain_base]
        z_adr[layout.v_base:layout.nz] = z_olp[olp.layout.v_base:olp.layout.nz]
        w = rng.normal(size=nw)
        assert np.allclose(evaluate_rows(adr, z_adr, w),
                           evaluate_rows(olp, z_olp, w), atol=1e-10)


def test_parametrize_strict_causality_mask():
    T = 4
    district = toy_district()
    smap = toy_map(T)
    rows = stack_system(district, smap, x_hat_for(district), T)
    adr = parametrize(spec_for("ADR", T), rows)
    layout = adr.layout
    D = len(IDS)
    # no gain column may exist for noise at steps >= its decision step
    for t in range(T):
        for jw in range(D * T):
            if jw % T < t:
                continue
            with pytest.raises(CausalityError):
                layout.gain_col(t, 0, jw)


# ---------------------------------------------------------------------------
# robust counterpart


def test_robustify_constant_gradient_folds():
    rows = dense_rows(
        c0=[1.0], Z=[[1.0]], W0=[[2.0, -3.0]], WZ=np.zeros((1, 2, 1)),
        rhs=[10.0], senses=["<"])
    block = robustify(rows, np.array([-1.0, -1.0]), np.array([1.0, 1.0]),
                      aux_col_base=1)
    assert block.n_aux == 0
    assert len(block.rhs) == 1
    # worst case of 1 + z + 2w1 - 3w2 over the unit box is 1 + z + 5
    assert abs(block.rhs[0] - (10.0 - 1.0 - 5.0)) < 1e-12
    assert list(block.col_idx) == [0] and list(block.values) == [1.0]


def test_robustify_point_box_no_auxiliaries():
    rng = np.random.default_rng(SEED + 4)
    wz = rng.normal(size=(2, 3, 4)) * (rng.random(size=(2, 3, 4)) < 0.5)
    rows = dense_rows(
        c0=rng.normal(size=2), Z=rng.normal(size=(2, 4)),
        W0=rng.normal(size=(2, 3)), WZ=wz,
        rhs=[1.0, 2.0], senses=["<", "<"])
    center = np.array([0.3, -0.2, 0.5])
    block = robustify(rows, center, center, aux_col_base=4)
    assert block.n_aux == 0
    z = rng.normal(size=4)
    want = evaluate_rows(rows, z, center)
    a = sp.coo_matrix((block.values, (block.row_idx, block.col_idx)),
                      shape=(len(block.rhs), 4)).toarray()
    got = a @ z
    assert np.allclose(got - block.rhs, want - rows.rhs, atol=1e-12)


def _vertex_max(rows, z, lo, hi, i):
    nw = rows.W0.shape[1]
    best = -np.inf
    for corner in itertools.product(*[(lo[j], hi[j]) for j in range(nw)]):
        best = max(best, float(evaluate_rows(rows, z, np.array(corner))[i]))
    return best


def test_robustify_vertex_oracle_random():
    rng = np.random.default_rng(SEED + 5)
    for trial in range(60):
        m = int(rng.integers(1, 4))
        nw = int(rng.integers(1, 5))
        nz = int(rng.integers(1, 4))
        Z = rng.normal(size=(m, nz)) * (rng.random(size=(m, nz)) < 0.7)
        W0 = rng.normal(size=(m, nw)) * (rng.random(size=(m, nw)) < 0.7)
        WZ = rng.normal(size=(m, nw, nz)) * (rng.random(size=(m, nw, nz)) < 0.4)
        c0 = rng.normal(size=m)
        rhs = rng.normal(size=m)
        rows = dense_rows(c0, Z, W0, WZ, rhs, ["<"] * m)
        lo = rng.normal(size=nw) - rng.random(size=nw)
        hi = lo + rng.random(size=nw) * (rng.random(size=nw) < 0.8)  # some zero-width
        block = robustify(rows, lo, hi, aux_col_base=nz)
        z = rng.normal(size=nz)
        # minimal feasible auxiliaries are the absolute gradients
        y = np.zeros(block.n_aux)
        for k, (i, j) in enumerate(block.aux_pairs):
            g = rows.W0[i, j] + rows.WZ.getrow(i * nw + j).dot(z)[0]
            y[k] = abs(g)
        x_ext = np.concatenate([z, y])
        ncols = nz + block.n_aux
        a = sp.coo_matrix((block.values, (block.row_idx, block.col_idx)),
                          shape=(len(block.rhs), ncols)).tocsr()
        vals = a @ x_ext
        for bi in range(len(block.rhs)):
            if block.tags[bi].endswith((".abs.up", ".abs.dn")):
                assert vals[bi] <= block.rhs[bi] + 1e-9
        for i in range(m):
            want = _vertex_max(rows, z, lo, hi, i) - rows.rhs[i]
            got = vals[i] - block.rhs[i]
            assert abs(got - want) < 1e-9, f"trial {trial} row {i}"


def test_robustify_equality_rows_decompose():
    # z0 + (1 + z1) w0 + 2 w1 = 3 over w0 in [-1,1], w1 = 0.5 fixed
    rows = dense_rows(
        c0=[0.0], Z=[[1.0, 0.0]], W0=[[1.0, 2.0]],
        WZ=np.array([[[0.0, 1.0], [0.0, 0.0]]]),
        rhs=[3.0], senses=["="])
    block = robustify(rows, np.array([-1.0, 0.5]), np.array([1.0, 0.5]),
                      aux_col_base=2)
    assert block.n_aux == 0
    eq_rows = [i for i, s in enumerate(block.senses) if s == "="]
    assert len(eq_rows) == 2
    a = sp.coo_matrix((block.values, (block.row_idx, block.col_idx)),
                      shape=(len(block.rhs), 2)).toarray()
    # gradient row: z1 = -1 (forces 1 + z1 = 0); main row: z0 = 3 - 2*0.5
    by_rhs = {}
    for i in eq_rows:
        by_rhs[tuple(a[i])] = block.rhs[i]
    assert by_rhs[(0.0, 1.0)] == -1.0
    assert by_rhs[(1.0, 0.0)] == 2.0


# ---------------------------------------------------------------------------
# compiled problems


def _solve(compiled):
    sol = lpmod.solve(compiled.lp)
    assert sol.status == "OPTIMAL", sol.message
    return sol


def test_compile_cep_point_collapse_all_policies_agree():
    T = 4
    district = toy_district()
    smap = toy_map(T)
    box = toy_box(T, half=0.0, mu_half=0.0)
    xh = x_hat_for(district)
    objs = {}
    for mode in ("CEP", "OLP", "ADR"):
        compiled = compile_problem(district, spec_for(mode, T), box, smap, xh)
        objs[mode] = _solve(compiled).objective
    ref = objs["CEP"]
    scale = max(1.0, abs(ref))
    assert abs(objs["OLP"] - ref) / scale < 1e-6
    assert abs(objs["ADR"] - ref) / scale < 1e-6


def test_compile_cep_has_no_auxiliaries():
    T = 4
    district = toy_district()
    smap = toy_map(T)
    box = toy_box(T, half=0.3, mu_half=0.05)
    compiled = compile_problem(district, spec_for("CEP", T), box, smap,
                               x_hat_for(district))
    assert compiled.n_aux == 0
    assert all(not n.startswith("y") for n in compiled.lp.col_names)


def test_compile_policy_nesting():
    rng = np.random.default_rng(SEED + 6)
    T = 4
    for trial in range(6):
        district = toy_district()
        fc = np.vstack([
            rng.uniform(0.0, 10.0, size=T),
            rng.uniform(0.2, 0.5, size=T),
            rng.uniform(0.0, 0.6, size=T),
        ])
        smap = toy_map(T, alphas=tuple(rng.uniform(0.0, 0.7, size=3)), forecasts=fc)
        box = toy_box(
            T,
            half=(rng.uniform(0.05, 0.4), rng.uniform(0.005, 0.04), rng.uniform(0.02, 0.2)),
            mu_half=(rng.uniform(0.0, 0.1), rng.uniform(0.0, 0.01), rng.uniform(0.0, 0.05)),
        )
        xh = x_hat_for(district)
        tau = {}
        for mode in ("OLP", "ADR", "CEP"):
            compiled = compile_problem(district, spec_for(mode, T), box, smap, xh)
            tau[mode] = _solve(compiled).objective
        tol = 1e-6 * max(1.0, abs(tau["OLP"]))
        assert tau["ADR"] <= tau["OLP"] + tol, f"trial {trial}"
        assert tau["CEP"] <= tau["ADR"] + tol, f"trial {trial}"


def test_compile_box_monotonicity():
    T = 4
    district = toy_district()
    smap = toy_map(T)
    xh = x_hat_for(district)
    taus = []
    for scale in (1.0, 3.0, 7.0):
        box = toy_box(T, half=(0.05 * scale, 0.005 * scale, 0.05 * scale),
                      mu_half=0.02)
        compiled = compile_problem(district, spec_for("ADR", T), box, smap, xh)
        taus.append(_solve(compiled).objective)
    assert taus[0] <= taus[1] + 1e-9 and taus[1] <= taus[2] + 1e-9


def test_compile_exactness_of_counterpart():
    T = 4
    district = toy_district(acts=("radiator", "ahu", "blinds"))
    smap = toy_map(T)
    box = toy_box(T, half=(0.25, 0.02, 0.1), mu_half=0.03)
    compiled = compile_problem(district, spec_for("ADR", T), box, smap,
                               x_hat_for(district))
    sol = _solve(compiled)
    z = sol.x[: compiled.layout.nz]
    rows = compiled.policy_rows
    rng = np.random.default_rng(SEED + 7)
    lo, hi = box.flat(box.lower), box.flat(box.upper)
    for _ in range(1000):
        w = rng.uniform(lo, hi)
        vals = evaluate_rows(rows, z, w)
        for i, s in enumerate(rows.senses):
            if s == "<":
                assert vals[i] <= rows.rhs[i] + 1e-6
            else:
                assert abs(vals[i] - rows.rhs[i]) <= 1e-6


def test_compile_objective_touches_only_tau():
    T = 3
    district = toy_district()
    box = toy_box(T, half=0.2, mu_half=0.02)
    compiled = compile_problem(district, spec_for("ADR", T), box, toy_map(T),
                               x_hat_for(district))
    obj = compiled.lp.objective
    nz_cols = np.flatnonzero(obj)
    assert list(nz_cols) == [compiled.tau_col]
    assert obj[compiled.tau_col] == 1.0


def test_compile_epigraph_point_mu_box_no_mu_aux():
    T = 3
    district = toy_district()
    box = toy_box(T, half=0.2, mu_half=0.0)
    compiled = compile_problem(district, spec_for("ADR", T), box, toy_map(T),
                               x_hat_for(district))
    assert all(not n.startswith("ymu") for n in compiled.lp.col_names)
    # OLP never needs mu auxiliaries: the plan does not react to noise
    box2 = toy_box(T, half=0.2, mu_half=0.4)
    compiled = compile_problem(district, spec_for("OLP", T), box2, toy_map(T),
                               x_hat_for(district))
    assert all(not n.startswith("ymu") for n in compiled.lp.col_names)


def test_compile_slack_activation():
    T = 3
    schedule = {h: [29.0, 30.0] for h in range(24)}  # unreachably hot band
    district = toy_district(acts=("radiator",), schedule=schedule)
    box = toy_box(T, half=0.05, mu_half=0.01)
    spec = spec_for("ADR", T)
    compiled = compile_problem(district, spec, box, toy_map(T),
                               x_hat_for(district))
    sol = _solve(compiled)
    first = compiled.extract_first_step(sol.x)
    assert sol.objective > 100.0  # dominated by gamma-weighted slack
    assert sum(first.slack.values()) > 1e-3


def test_compile_first_step_extraction():
    T = 4
    district = toy_district(acts=("radiator", "ahu", "blinds"))
    box = toy_box(T, half=(0.2, 0.02, 0.1), mu_half=0.02)
    compiled = compile_problem(district, spec_for("ADR", T), box, toy_map(T),
                               x_hat_for(district))
    sol = _solve(compiled)
    first = compiled.extract_first_step(sol.x)
    b = district.buildings[0]
    assert set(first.building_inputs) == {b.building_id}
    assert first.building_inputs[b.building_id].shape == (len(b.inputs),)
    assert np.all(first.building_inputs[b.building_id] >= -1e-7)
    assert set(first.v) == {b.building_id}
    assert np.all(first.v[b.building_id] >= -1e-9)
    assert np.all(first.v[b.building_id] <= 1.0 + 1e-9)
    assert first.p["p_elec"] >= -1e-7
    assert abs(first.tau - sol.objective) < 1e-7
    # electricity balance holds exactly at the applied first step
    resid = (first.p["p_elec"]
             + first.device_inputs[("pv", "out")]
             + first.device_inputs[("battery", "out")]
             - first.device_inputs[("heat_pump", "in")]
             - first.device_inputs[("chiller", "in")]
             - first.device_inputs[("boiler", "in")]
             - first.device_inputs[("battery", "in")]
             - first.building_inputs[b.building_id][b.inputs.index("ahu_r0")])
    assert abs(resid) < 1e-6


def test_compile_lp_export_round_trip():
    T = 2
    district = toy_district()
    box = toy_box(T, half=0.1, mu_half=0.01)
    compiled = compile_problem(district, spec_for("ADR", T), box, toy_map(T),
                               x_hat_for(district))
    text = lpmod.export_lp(compiled.lp)
    back = lpmod.import_lp(text)
    # the text format orders variables by first appearance; align by name
    assert sorted(back.col_names) == sorted(compiled.lp.col_names)
    perm = [back.col_names.index(n) for n in compiled.lp.col_names]
    assert back.senses == compiled.lp.senses
    assert np.allclose(back.dense_matrix()[:, perm],
                       compiled.lp.dense_matrix(), atol=1e-12)
    assert np.allclose(back.rhs, compiled.lp.rhs, atol=1e-12)
    assert np.allclose(back.objective[perm], compiled.lp.objective, atol=1e-12)
    assert np.allclose(back.lower[perm], compiled.lp.lower, atol=1e-12)
    assert np.allclose(back.upper[perm], compiled.lp.upper, atol=1e-12)


def test_compile_dimension_errors():
    T = 3
    district = toy_district()
    box = toy_box(T, half=0.1)
    smap = toy_map(T)
    xh = x_hat_for(district)
    with pytest.raises(DimensionError):
        compile_problem(district, spec_for("ADR", T + 1), box, smap, xh)
    with pytest.raises(DimensionError):
        compile_problem(district, spec_for("ADR", T), toy_box(T + 1, half=0.1),
                        smap, xh)
    bad = dict(xh)
    del bad[district.buildings[0].building_id]
    with pytest.raises(DimensionError):
        compile_problem(district, spec_for("ADR", T), box, smap, bad)
    bad = dict(xh)
    bad["battery"] = np.zeros(3)
    with pytest.raises(DimensionError):
        compile_problem(district, spec_for("ADR", T), box, smap, bad)


def test_policy_spec_validation():
    with pytest.raises(ValueError):
        spec_for("MPC", 4)
    with pytest.raises(ValueError):
        PolicySpec(mode="ADR", horizon=4, n_dist=3, c_b=0.5, gamma=1e3,
                   epsilon=0.01)  # tightening is reserved for CEP
    s = PolicySpec(mode="CEP", horizon=4, n_dist=3, c_b=0.5, gamma=1e3,
                   epsilon=0.01)
    assert s.c_b == 0.5


def test_epigraph_tariff_weighting():
    # the cost row prices each step's grid purchase at that hour's tariff
    T = 3
    district = toy_district()
    box = toy_box(T, half=0.1, mu_half=0.01)
    xh = x_hat_for(district)
    for start in (0, 4, 21):
        compiled = compile_problem(district, spec_for("ADR", T), box,
                                   toy_map(T, start_hour=start), xh,
                                   start_hour=start)
        lp = compiled.lp
        i = lp.row_names.index("epigraph.cost")
        a = lp.matrix()
        lay = compiled.layout
        p_idx = lay.keys.index(("p", "p_elec"))
        s_idx = lay.keys.index(("slack", ("b0", 0)))
        for t in range(T):
            assert abs(a[i, lay.qcol(t, p_idx)]
                       - district.tariff[(start + t) % 24]) < 1e-12
            assert abs(a[i, lay.qcol(t, s_idx)] - 1e3) < 1e-9
        assert a[i, compiled.tau_col] == -1.0
