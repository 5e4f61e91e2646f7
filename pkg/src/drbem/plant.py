"""District plant models: energy-hub devices, RC buildings, balance nodes.

A district couples a shared energy hub (chiller, boiler, heat pump, PV,
battery) to a set of multi-room buildings through three balance nodes
(electricity, heat, cooling). Hub conversion ratios, capacities, the PV
output bound, and the battery dynamics/operating polytope are fixed
published constants; per-building quantities scale with the number of
buildings sharing the hub.

Buildings follow a two-state-per-room resistor-capacitor thermal model,
discretized exactly under zero-order hold. Air handling units inject heat
bilinearly (mass flow times supply/room temperature difference) and blinds
scale the solar gain, so the true plant is bilinear in (state, input) and
(blind position, disturbance); `linearize_building` freezes those couplings
at an expansion point for controller synthesis and `simulate_true_step`
evaluates the full bilinear recursion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm


class SpecError(ValueError):
    """A model request is outside the supported configuration space."""


class ShapeError(ValueError):
    """An array argument has the wrong dimensions."""


# ---------------------------------------------------------------------------
# constraint container


@dataclass(frozen=True)
class StageRows:
    """Per-stage linear constraint rows F_x x + F_u u + F_xi xi (<=|=) h."""

    F_x: np.ndarray
    F_u: np.ndarray
    F_xi: np.ndarray
    h: np.ndarray
    senses: tuple
    labels: tuple

    def __post_init__(self):
        m = self.h.shape[0]
        if not (self.F_x.shape[0] == self.F_u.shape[0] == self.F_xi.shape[0] == m):
            raise ShapeError("row blocks disagree on row count")
        if len(self.senses) != m or len(self.labels) != m:
            raise ShapeError("senses/labels length mismatch")
        for s in self.senses:
            if s not in ("<", "="):
                raise SpecError(f"bad row sense {s!r}")


# ---------------------------------------------------------------------------
# hub devices


@dataclass(frozen=True)
class Device:
    """A hub device: optional linear storage dynamics plus operating rows.

    `inputs` names the device's decision streams in the order used by the
    F_u columns of `rows` ("in" draws from a node, "out" supplies one).
    Stateless devices have empty A/B/x0.
    """

    device_id: str
    inputs: tuple
    A: np.ndarray
    B: np.ndarray
    x0: np.ndarray
    rows: StageRows

    @property
    def n_states(self) -> int:
        return self.x0.shape[0]


@dataclass(frozen=True)
class BalanceNode:
    """One supply/demand equality: sum of coefficient-weighted streams = 0."""

    name: str
    p_coef: dict
    u_coef: dict
    d_coef: dict


_CONVERSION = {"chiller": 0.7, "boiler": 0.9, "heat_pump": 3.0}
_OUTPUT_CAP = {"chiller": 20.0, "boiler": 25.0, "heat_pump": 5.0}

_PV_CONST = 0.1280
_PV_AT_COEF = -0.0019
_PV_SRS_COEF = 3.7

_BATT_A = np.array([[0.51, 0.22], [0.47, 0.78]])
_BATT_B = np.array([[0.61, -0.83], [0.25, -0.39]])
_BATT_FLOW_CAP = 8.0


def _converter(device_id: str, n: float, n_dist: int) -> Device:
    cop = _CONVERSION[device_id]
    cap = _OUTPUT_CAP[device_id] * n
    F_u = np.array([
        [-cop, 1.0],   # out = cop * in
        [-1.0, 0.0],
        [0.0, -1.0],
        [0.0, 1.0],
    ])
    h = np.array([0.0, 0.0, 0.0, cap])
    rows = StageRows(
        F_x=np.zeros((4, 0)),
        F_u=F_u,
        F_xi=np.zeros((4, n_dist)),
        h=h,
        senses=("=", "<", "<", "<"),
        labels=(
            f"{device_id}:conv",
            f"{device_id}:nonneg:in",
            f"{device_id}:nonneg:out",
            f"{device_id}:cap:out",
        ),
    )
    return Device(device_id, ("in", "out"), np.zeros((0, 0)), np.zeros((0, 2)),
                  np.zeros(0), rows)


def _pv(n: float, disturbances: tuple) -> Device:
    n_dist = len(disturbances)
    F_xi = np.zeros((2, n_dist))
    if "AT" in disturbances:
        F_xi[1, disturbances.index("AT")] = -_PV_AT_COEF * n
    if "SRS" in disturbances:
        F_xi[1, disturbances.index("SRS")] = -_PV_SRS_COEF * n
    rows = StageRows(
        F_x=np.zeros((2, 0)),
        F_u=np.array([[-1.0], [1.0]]),
        F_xi=F_xi,
        h=np.array([0.0, _PV_CONST * n]),
        senses=("<", "<"),
        labels=("pv:nonneg:out", "pv:cap:out"),
    )
    return Device("pv", ("out",), np.zeros((0, 0)), np.zeros((0, 1)),
                  np.zeros(0), rows)


def _battery(n: float, n_dist: int) -> Device:
    F_x = np.array([
        [0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0],
        [1.0, 1.0],
        [-1.0, -1.0],
        [-1.0, 0.0],
        [0.0, -1.0],
        [-0.62, -0.27],
        [0.84, 0.37],
        [0.73, 0.73],
    ])
    F_u = np.array([
        [-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0],
        [0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0],
        [0.0, 1.0],
        [1.0, 0.0],
        [1.0, 0.0],
    ])
    h = np.array([0.0, _BATT_FLOW_CAP * n, 0.0, _BATT_FLOW_CAP * n,
                  5.0 * n, -1.0 * n, 0.0, 0.0, 0.0, 2.58 * n, 3.66 * n])
    rows = StageRows(
        F_x=F_x,
        F_u=F_u,
        F_xi=np.zeros((11, n_dist)),
        h=h,
        senses=("<",) * 11,
        labels=(
            "battery:nonneg:in", "battery:cap:in",
            "battery:nonneg:out", "battery:cap:out",
            "battery:soc:hi", "battery:soc:lo",
            "battery:soc:nonneg1", "battery:soc:nonneg2",
            "battery:discharge", "battery:charge1", "battery:charge2",
        ),
    )
    return Device("battery", ("in", "out"), _BATT_A.copy(), _BATT_B.copy(),
                  np.array([n, n]), rows)


def make_hub(n_buildings: int, disturbances) -> tuple:
    """Build the shared hub devices and balance nodes for a district.

    Per-building quantities (capacities, the PV bound and its disturbance
    gradient, battery limits and initial charge) scale with `n_buildings`;
    conversion ratios and other homogeneous rows do not.
    """
    if n_buildings < 1:
        raise SpecError("need at least one building")
    disturbances = tuple(disturbances)
    n = float(n_buildings)
    n_dist = len(disturbances)
    devices = (
        _converter("chiller", n, n_dist),
        _converter("boiler", n, n_dist),
        _converter("heat_pump", n, n_dist),
        _pv(n, disturbances),
        _battery(n, n_dist),
    )
    nodes = (
        BalanceNode(
            "elec",
            p_coef={"p_elec": 1.0},
            u_coef={
                ("pv", "out"): 1.0,
                ("battery", "out"): 1.0,
                ("heat_pump", "in"): -1.0,
                ("chiller", "in"): -1.0,
                ("boiler", "in"): -1.0,
                ("battery", "in"): -1.0,
            },
            d_coef={"elec": -1.0},
        ),
        BalanceNode(
            "heat",
            p_coef={},
            u_coef={("heat_pump", "out"): 1.0, ("boiler", "out"): 1.0},
            d_coef={"heat": -1.0},
        ),
        BalanceNode(
            "cool",
            p_coef={},
            u_coef={("chiller", "out"): 1.0},
            d_coef={"cool": -1.0},
        ),
    )
    return devices, nodes


# ---------------------------------------------------------------------------
# buildings


@dataclass(frozen=True)
class Building:
    """Two-state-per-room thermal model with bilinear AHU/blind couplings.

    Discrete dynamics: x' = A x + (B + x^T E) u + (D + v^T Cv) xi, where
    E has shape (nx, nx, nu) with term_i = sum_jk E[i,j,k] x_j u_k and
    Cv has shape (nv, nx, nd) with term_i = sum_ml v_m Cv[m,i,l] xi_l.
    `lb`/`ub` give the comfort band per hour of day for the states listed
    in `comfort_states`; `rows` carries the actuator box constraints.
    """

    building_id: str
    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    E: np.ndarray
    Cv: np.ndarray
    inputs: tuple
    comfort_states: tuple
    lb: np.ndarray
    ub: np.ndarray
    rows: StageRows
    x0: np.ndarray
    n_blinds: int
    meta: dict = field(repr=False)

    @property
    def n_states(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class LinearBuilding:
    """Building matrices with the state-input coupling frozen at x_hat."""

    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    Cv: np.ndarray


_MASS_CAPACITANCE = {"heavy": (1.8, 30.0), "light": (1.4, 12.0)}
_K_ROOM_WALL = 0.35
_K_WALL_AMBIENT = 0.05
_K_WALL_GROUND = 0.015
_AHU_GAIN = 0.25
_AHU_SUPPLY_TEMP = 32.0
_SOLAR_APERTURE = 12.0 * 0.7  # kW absorbed per kW/m^2 at full glazing
_ROOM_SOLAR_SHARE = 0.6
_BLIND_BLOCK = 0.7
_ACTUATOR_CAPS = {"radiator": 2.0, "ahu": 1.0, "tabs_heat": 2.0, "tabs_cool": 2.0}
_ORIENTATION_ORDER = ("SRS", "SRE", "SRW", "SRN")
_ACTUATOR_CHOICES = ("radiator", "ahu", "tabs", "blinds")


def _discretize(a_c: np.ndarray) -> tuple:
    """Exact one-hour zero-order hold: returns (A_d, Gamma) with
    A_d = exp(A_c) and Gamma = integral_0^1 exp(A_c s) ds."""
    nx = a_c.shape[0]
    block = np.zeros((2 * nx, 2 * nx))
    block[:nx, :nx] = a_c
    block[:nx, nx:] = np.eye(nx)
    e = expm(block)
    return e[:nx, :nx], e[:nx, nx:]


def make_building(building_id: str, n_rooms: int = 2, mass: str = "heavy",
                  window_fraction: float = 0.5,
                  actuators=("radiator", "ahu", "blinds"),
                  schedule="winter",
                  disturbances=("AT", "GT", "SRS", "IG"),
                  x0_temp: float = 22.0) -> Building:
    """Generate a building model from a small set of design choices.

    Each room contributes a (room air, wall mass) state pair. `actuators`
    selects per-room inputs from radiator / ahu / tabs (tabs expands into
    separate heating and cooling inputs feeding the slab) plus an optional
    building-wide `blinds` position. Rooms cycle through the solar
    orientations available in `disturbances`; without a ground-temperature
    channel the wall-ground conductance reattaches to ambient so the time
    constants are unchanged.
    """
    actuators = tuple(actuators)
    disturbances = tuple(disturbances)
    if mass not in _MASS_CAPACITANCE:
        raise SpecError(f"unknown construction {mass!r}")
    if not 1 <= n_rooms <= 5:
        raise SpecError("n_rooms must be in 1..5")
    if not 0.0 <= window_fraction <= 1.0:
        raise SpecError("window_fraction must be in [0, 1]")
    for a in actuators:
        if a not in _ACTUATOR_CHOICES:
            raise SpecError(f"unknown actuator {a!r}")
    input_kinds = []
    for a in ("radiator", "ahu", "tabs"):
        if a in actuators:
            input_kinds += ["tabs_heat", "tabs_cool"] if a == "tabs" else [a]
    if not input_kinds:
        raise SpecError("building needs at least one thermal actuator")
    if "AT" not in disturbances:
        raise SpecError("disturbance list must include ambient temperature AT")

    c_room, c_wall = _MASS_CAPACITANCE[mass]
    k_ra = 0.03 + 0.04 * window_fraction
    k_wa = _K_WALL_AMBIENT
    k_wg = _K_WALL_GROUND
    idx_at = disturbances.index("AT")
    idx_gt = disturbances.index("GT") if "GT" in disturbances else None
    if idx_gt is None:
        k_wa += k_wg  # ground path reattaches to ambient
        k_wg = 0.0
    idx_ig = disturbances.index("IG") if "IG" in disturbances else None
    sr_ids = [s for s in _ORIENTATION_ORDER if s in disturbances]

    nx = 2 * n_rooms
    nd = len(disturbances)
    inputs = tuple(f"{kind}_r{r}" for r in range(n_rooms) for kind in input_kinds)
    nu = len(inputs)
    has_blinds = "blinds" in actuators and bool(sr_ids)
    nv = 1 if has_blinds else 0

    a_c = np.zeros((nx, nx))
    b_c = np.zeros((nx, nu))
    d_c = np.zeros((nx, nd))
    e_c = np.zeros((nx, nx, nu))
    cv_c = np.zeros((nv, nx, nd))
    aperture = _SOLAR_APERTURE * window_fraction

    for r in range(n_rooms):
        ir, iw = 2 * r, 2 * r + 1
        a_c[ir, ir] = -(_K_ROOM_WALL + k_ra) / c_room
        a_c[ir, iw] = _K_ROOM_WALL / c_room
        a_c[iw, ir] = _K_ROOM_WALL / c_wall
        a_c[iw, iw] = -(_K_ROOM_WALL + k_wa + k_wg) / c_wall
        d_c[ir, idx_at] = k_ra / c_room
        d_c[iw, idx_at] = k_wa / c_wall
        if idx_gt is not None:
            d_c[iw, idx_gt] = k_wg / c_wall
        if idx_ig is not None:
            d_c[ir, idx_ig] += 1.0 / c_room
        if sr_ids:
            idx_sr = disturbances.index(sr_ids[r % len(sr_ids)])
            d_c[ir, idx_sr] += _ROOM_SOLAR_SHARE * aperture / c_room
            d_c[iw, idx_sr] += (1.0 - _ROOM_SOLAR_SHARE) * aperture / c_wall
            if has_blinds:
                cv_c[0, ir, idx_sr] = -_BLIND_BLOCK * _ROOM_SOLAR_SHARE * aperture / c_room
                cv_c[0, iw, idx_sr] = -_BLIND_BLOCK * (1.0 - _ROOM_SOLAR_SHARE) * aperture / c_wall
        for k, kind in enumerate(input_kinds):
            j = r * len(input_kinds) + k
            if kind == "radiator":
                b_c[ir, j] = 1.0 / c_room
            elif kind == "ahu":
                b_c[ir, j] = _AHU_GAIN * _AHU_SUPPLY_TEMP / c_room
                e_c[ir, ir, j] = -_AHU_GAIN / c_room
            elif kind == "tabs_heat":
                b_c[iw, j] = 1.0 / c_wall
            elif kind == "tabs_cool":
                b_c[iw, j] = -1.0 / c_wall

    a_d, gamma = _discretize(a_c)
    b_d = gamma @ b_c
    d_d = gamma @ d_c
    e_d = np.einsum("ip,pjk->ijk", gamma, e_c)
    cv_d = np.einsum("ip,mpl->mil", gamma, cv_c)

    caps = np.array([_ACTUATOR_CAPS[name.rsplit("_r", 1)[0]] for name in inputs])
    F_u = np.vstack([np.eye(nu), -np.eye(nu)])
    h = np.concatenate([caps, np.zeros(nu)])
    labels = tuple(f"{building_id}:cap:{n}" for n in inputs) + tuple(
        f"{building_id}:nonneg:{n}" for n in inputs)
    rows = StageRows(
        F_x=np.zeros((2 * nu, nx)),
        F_u=F_u,
        F_xi=np.zeros((2 * nu, nd)),
        h=h,
        senses=("<",) * (2 * nu),
        labels=labels,
    )
    lb, ub = comfort_schedule(schedule)
    meta = {
        "building_id": building_id,
        "n_rooms": n_rooms,
        "mass": mass,
        "window_fraction": window_fraction,
        "actuators": list(actuators),
        "schedule": schedule if isinstance(schedule, str) else dict(schedule),
        "x0_temp": x0_temp,
    }
    return Building(
        building_id=building_id,
        A=a_d, B=b_d, D=d_d, E=e_d, Cv=cv_d,
        inputs=inputs,
        comfort_states=tuple(2 * r for r in range(n_rooms)),
        lb=lb, ub=ub,
        rows=rows,
        x0=np.full(nx, float(x0_temp)),
        n_blinds=nv,
        meta=meta,
    )


def linearize_building(b: Building, x_hat: np.ndarray) -> LinearBuilding:
    """Freeze the state-input coupling at x_hat: B(x_hat) = B + x_hat^T E."""
    x_hat = np.asarray(x_hat, dtype=float)
    if x_hat.shape != (b.n_states,):
        raise ShapeError(f"x_hat must have shape ({b.n_states},)")
    b_lin = b.B + np.einsum("ijk,j->ik", b.E, x_hat)
    return LinearBuilding(A=b.A, B=b_lin, D=b.D, Cv=b.Cv)


def simulate_true_step(b: Building, x: np.ndarray, u: np.ndarray,
                       v: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Advance the true bilinear building dynamics by one hour."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if x.shape != (b.n_states,):
        raise ShapeError(f"x must have shape ({b.n_states},)")
    if u.shape != (len(b.inputs),):
        raise ShapeError(f"u must have shape ({len(b.inputs)},)")
    if v.shape != (b.n_blinds,):
        raise ShapeError(f"v must have shape ({b.n_blinds},)")
    if xi.shape != (b.D.shape[1],):
        raise ShapeError(f"xi must have shape ({b.D.shape[1]},)")
    b_eff = b.B + np.einsum("ijk,j->ik", b.E, x)
    d_eff = b.D + np.einsum("mil,m->il", b.Cv, v)
    return b.A @ x + b_eff @ u + d_eff @ xi


# ---------------------------------------------------------------------------
# tariff and comfort schedules


def default_tariff() -> np.ndarray:
    """Electricity price in CHF/kWh per hour of day (0-23)."""
    c = np.full(24, 0.097)
    c[5:23] = 0.145
    return c


_PRESET_SCHEDULES = {
    # hour-of-day ranges [start, stop) with tight comfort bounds
    "winter": (((5, 23),), (21.0, 25.0), (15.0, 30.0)),
    "summer": (((5, 23),), (20.0, 23.0), (15.0, 30.0)),
    "com": (((9, 19),), (21.0, 25.0), (15.0, 30.0)),
    "res": (((6, 9), (19, 23)), (21.0, 25.0), (15.0, 30.0)),
}


def com_res_schedules_available() -> tuple:
    """Occupancy-staggered presets used when mixing building uses."""
    return ("com", "res")


def comfort_schedule(schedule) -> tuple:
    """Return (lb, ub) comfort bounds per hour of day.

    `schedule` is a preset name or a dict mapping hour-of-day to a
    [lb, ub] pair, with None (or an omitted hour) meaning unconstrained.
    """
    lb = np.full(24, -np.inf)
    ub = np.full(24, np.inf)
    if isinstance(schedule, str):
        if schedule not in _PRESET_SCHEDULES:
            raise SpecError(f"unknown schedule {schedule!r}")
        ranges, tight, relaxed = _PRESET_SCHEDULES[schedule]
        lb[:], ub[:] = relaxed
        for start, stop in ranges:
            lb[start:stop] = tight[0]
            ub[start:stop] = tight[1]
        return lb, ub
    if isinstance(schedule, dict):
        for key, pair in schedule.items():
            h = int(key)
            if not 0 <= h <= 23:
                raise SpecError(f"hour of day {h} out of range")
            if pair is None:
                continue
            lo, hi = float(pair[0]), float(pair[1])
            if lo > hi:
                raise SpecError(f"empty comfort band at hour {h}")
            lb[h], ub[h] = lo, hi
        return lb, ub
    raise SpecError("schedule must be a preset name or an hour-of-day dict")


# ---------------------------------------------------------------------------
# district assembly


@dataclass(frozen=True)
class DistrictModel:
    """Hub devices, buildings, balance nodes, and demand coupling.

    `coupling` lists, per demand stream, the (building_id, input_name)
    pairs whose planned values add up to that demand.
    """

    name: str
    disturbances: tuple
    devices: tuple
    buildings: tuple
    nodes: tuple
    coupling: tuple
    tariff: np.ndarray

    @property
    def n_buildings(self) -> int:
        return len(self.buildings)


_INPUT_DEMAND = {"radiator": "heat", "ahu": "elec",
                 "tabs_heat": "heat", "tabs_cool": "cool"}


def make_district(buildings, disturbances, tariff=None,
                  name: str = "district") -> DistrictModel:
    """Couple buildings to a hub sized for their count.

    Building heating inputs (radiators, slab heating) draw on the heat
    node, slab cooling on the cooling node, and air-handling fans on the
    electricity node.
    """
    buildings = tuple(buildings)
    disturbances = tuple(disturbances)
    if not buildings:
        raise SpecError("district needs at least one building")
    ids = [b.building_id for b in buildings]
    if len(set(ids)) != len(ids):
        raise SpecError("duplicate building ids")
    devices, nodes = make_hub(len(buildings), disturbances)
    feeds = {"elec": [], "heat": [], "cool": []}
    for b in buildings:
        for input_name in b.inputs:
            kind = input_name.rsplit("_r", 1)[0]
            feeds[_INPUT_DEMAND[kind]].append((b.building_id, input_name))
    coupling = tuple((demand, tuple(pairs)) for demand, pairs in feeds.items())
    tariff = default_tariff() if tariff is None else np.asarray(tariff, dtype=float)
    if tariff.shape != (24,):
        raise ShapeError("tariff must have 24 hourly entries")
    return DistrictModel(
        name=name,
        disturbances=disturbances,
        devices=devices,
        buildings=buildings,
        nodes=nodes,
        coupling=coupling,
        tariff=tariff,
    )


def district_to_json(dist: DistrictModel) -> str:
    """Serialize the design choices a district was generated from."""
    payload = {
        "name": dist.name,
        "disturbances": list(dist.disturbances),
        "tariff": [float(c) for c in dist.tariff],
        "buildings": [b.meta for b in dist.buildings],
    }
    return json.dumps(payload, indent=1, sort_keys=True)


def district_from_json(text: str) -> DistrictModel:
    """Rebuild a district from `district_to_json` output."""
    payload = json.loads(text)
    disturbances = tuple(payload["disturbances"])
    buildings = [
        make_building(
            meta["building_id"],
            n_rooms=meta["n_rooms"],
            mass=meta["mass"],
            window_fraction=meta["window_fraction"],
            actuators=tuple(meta["actuators"]),
            schedule=meta["schedule"],
            disturbances=disturbances,
            x0_temp=meta["x0_temp"],
        )
        for meta in payload["buildings"]
    ]
    return make_district(buildings, disturbances,
                         tariff=np.asarray(payload["tariff"], dtype=float),
                         name=payload["name"])
