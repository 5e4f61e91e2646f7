"""Compile robust multistage district problems into finite linear programs.

Pipeline: `stack_system` unrolls the linearized plant over the horizon and
eliminates states by forward substitution, leaving constraint rows that are
affine in the stacked noise w with coefficients affine in the decisions;
`parametrize` substitutes the strictly causal affine policy (or the open-loop
/ certainty-equivalent special cases); `robustify` applies the exact
axis-aligned-box counterpart (worst case of an affine row over a box sits at
a vertex, captured by absolute-value auxiliaries); `epigraph_objective`
bounds the mean-substituted cost by a scalar tau over the mean rectangle.
`compile_problem` chains the steps and emits a tagged LinearProgram whose
objective is min tau.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .dist_model import StackedDisturbanceMap, UncertaintyBox
from .lp import LinearProgram
from .plant import DistrictModel, linearize_building

MODES = ("CEP", "OLP", "ADR")


class DimensionError(ValueError):
    """Inputs disagree on horizon, disturbance set, or state dimensions."""


class CausalityError(ValueError):
    """A decision would depend on noise not yet observed at its step."""


class UnboundedStateError(UserWarning):
    """A state influences no constraint; flagged, never raised."""


class InfeasibleInstanceError(ValueError):
    """A decision-free constraint already fails at the measured state."""


@dataclass(frozen=True)
class PolicySpec:
    """Which decision rule to compile and its scalar knobs.

    CEP plans against the point forecast (optionally with comfort bounds
    tightened by c_b), OLP robustly with a constant plan, ADR robustly with
    decisions affine in past noise. gamma prices comfort slack in the
    objective; epsilon is the per-plan violation budget the box was built for.
    """

    mode: str
    horizon: int
    n_dist: int
    c_b: float = 0.0
    gamma: float = 1e3
    epsilon: float = 0.01

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.n_dist < 1:
            raise ValueError("need at least one disturbance")
        if self.c_b < 0.0:
            raise ValueError("comfort tightening must be nonnegative")
        if self.c_b > 0.0 and self.mode != "CEP":
            raise ValueError("comfort tightening is reserved for CEP")
        if self.gamma < 0.0:
            raise ValueError("slack penalty must be nonnegative")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")


@dataclass(frozen=True)
class StreamLayout:
    """Column layout before policy substitution.

    One column per (step, stream) pair, step-major, followed by the
    here-and-now blind positions. `keys` identifies each stream as
    ("p", name), ("dev", (device, input)), ("bld", (building, input)),
    or ("slack", (building, room)).
    """

    keys: tuple
    names: tuple
    T: int
    n_dist: int
    v_keys: tuple

    @property
    def nsd(self) -> int:
        return len(self.keys)

    @property
    def nv(self) -> int:
        return len(self.v_keys)

    @property
    def nw(self) -> int:
        return self.n_dist * self.T

    @property
    def nq(self) -> int:
        return self.T * self.nsd + self.nv

    def qcol(self, t: int, idx: int) -> int:
        return t * self.nsd + idx

    def vcol(self, m: int) -> int:
        return self.T * self.nsd + m


@dataclass(frozen=True)
class PolicyLayout:
    """Column layout after policy substitution: [pi0 | gains | v].

    pi0 mirrors the stream-step grid; under ADR each (step t, stream)
    additionally owns one gain column per strictly earlier noise coordinate,
    grouped by step. gain_col maps (t, stream, flat noise index) to its
    column and rejects non-causal requests.
    """

    keys: tuple
    names: tuple
    T: int
    n_dist: int
    v_keys: tuple
    mode: str

    @property
    def nsd(self) -> int:
        return len(self.keys)

    @property
    def nv(self) -> int:
        return len(self.v_keys)

    @property
    def nw(self) -> int:
        return self.n_dist * self.T

    @property
    def gain_base(self) -> int:
        return self.T * self.nsd

    @property
    def n_gains(self) -> int:
        if self.mode != "ADR":
            return 0
        return self.nsd * self.n_dist * self.T * (self.T - 1) // 2

    @property
    def v_base(self) -> int:
        return self.gain_base + self.n_gains

    @property
    def nz(self) -> int:
        return self.v_base + self.nv

    def qcol(self, t: int, idx: int) -> int:
        return t * self.nsd + idx

    def vcol(self, m: int) -> int:
        return self.v_base + m

    def gain_offset(self, t: int) -> int:
        return self.nsd * self.n_dist * (t * (t - 1) // 2)

    def gain_col(self, t: int, stream: int, jw: int) -> int:
        if self.mode != "ADR":
            raise CausalityError("this policy has no gain columns")
        if jw % self.T >= t:
            raise CausalityError(
                f"decision at step {t} may not see noise step {jw % self.T}")
        local = (jw // self.T) * t + (jw % self.T)
        return self.gain_base + self.gain_offset(t) + stream * (self.n_dist * t) + local

    def causal_cols(self, t: int) -> np.ndarray:
        """Flat noise indices observable by a step-t decision, local order."""
        d = np.repeat(np.arange(self.n_dist), t)
        s = np.tile(np.arange(t), self.n_dist)
        return d * self.T + s


@dataclass(frozen=True)
class AffineInW:
    """Rows c0 + Z z + sum_j (W0[:, j] + WZ[row*nw+j] z) w_j (<=|=) rhs."""

    c0: np.ndarray
    Z: sp.csr_matrix
    W0: sp.csr_matrix
    WZ: sp.csr_matrix
    rhs: np.ndarray
    senses: tuple
    tags: tuple
    layout: object = None

    def __post_init__(self):
        m = len(self.rhs)
        nw = self.W0.shape[1]
        if self.Z.shape[0] != m or self.W0.shape[0] != m:
            raise DimensionError("row blocks disagree")
        if self.WZ.shape != (m * nw, self.Z.shape[1]):
            raise DimensionError("bilinear block must be (rows*nw, ncols)")
        if len(self.c0) != m or len(self.senses) != m or len(self.tags) != m:
            raise DimensionError("per-row metadata length mismatch")


def evaluate_rows(rows: AffineInW, z: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Evaluate every row at a concrete decision vector and noise sample."""
    z = np.asarray(z, dtype=float)
    w = np.asarray(w, dtype=float)
    m = len(rows.rhs)
    nw = rows.W0.shape[1]
    vals = rows.c0 + rows.Z.dot(z) + rows.W0.dot(w)
    if rows.WZ.nnz:
        vals = vals + rows.WZ.dot(z).reshape(m, nw) @ w
    return vals


# ---------------------------------------------------------------------------
# stacking


class _RowBuilder:
    def __init__(self, nq: int, nw: int):
        self.nq = nq
        self.nw = nw
        self.c0 = []
        self.rhs = []
        self.senses = []
        self.tags = []
        self._z = ([], [], [])
        self._w = ([], [], [])
        self._wz = ([], [], [])

    def add(self, tag, sense, rhs, c0=0.0, z=None, w=None, wz=None):
        i = len(self.rhs)
        self.c0.append(float(c0))
        self.rhs.append(float(rhs))
        self.senses.append(sense)
        self.tags.append(tag)
        if z is not None:
            cols, vals = z
            cols = np.asarray(cols, dtype=np.int64).ravel()
            vals = np.asarray(vals, dtype=float).ravel()
            keep = vals != 0.0
            self._z[0].append(np.full(keep.sum(), i, dtype=np.int64))
            self._z[1].append(cols[keep])
            self._z[2].append(vals[keep])
        if w is not None:
            wcols, vals = w
            wcols = np.asarray(wcols, dtype=np.int64).ravel()
            vals = np.asarray(vals, dtype=float).ravel()
            keep = vals != 0.0
            self._w[0].append(np.full(keep.sum(), i, dtype=np.int64))
            self._w[1].append(wcols[keep])
            self._w[2].append(vals[keep])
        if wz is not None:
            wcols, zcols, vals = wz
            wcols = np.asarray(wcols, dtype=np.int64).ravel()
            zcols = np.asarray(zcols, dtype=np.int64).ravel()
            vals = np.asarray(vals, dtype=float).ravel()
            keep = vals != 0.0
            self._wz[0].append(i * self.nw + wcols[keep])
            self._wz[1].append(zcols[keep])
            self._wz[2].append(vals[keep])
        return i

    def _mat(self, parts, shape):
        if parts[0]:
            r = np.concatenate(parts[0])
            c = np.concatenate(parts[1])
            v = np.concatenate(parts[2])
        else:
            r = c = v = np.zeros(0)
        return sp.coo_matrix((v, (r, c)), shape=shape).tocsr()

    def build(self, layout) -> AffineInW:
        m = len(self.rhs)
        return AffineInW(
            c0=np.array(self.c0),
            Z=self._mat(self._z, (m, self.nq)),
            W0=self._mat(self._w, (m, self.nw)),
            WZ=self._mat(self._wz, (m * self.nw, self.nq)),
            rhs=np.array(self.rhs),
            senses=tuple(self.senses),
            tags=tuple(self.tags),
            layout=layout,
        )


def _safe(label: str) -> str:
    return label.replace(":", ".")


def _flag_unconstrained_states(b, bounded_rooms):
    """Warn about states that reach no constrained room state."""
    nx = b.n_states
    reach = (np.abs(b.A) > 1e-12) | np.eye(nx, dtype=bool)
    for _ in range(max(1, int(np.ceil(np.log2(nx))) + 1)):
        reach = reach @ reach
    flagged = []
    for j in range(nx):
        if j in bounded_rooms:
            continue
        if not any(reach[i, j] for i in bounded_rooms):
            flagged.append(j)
    if flagged:
        warnings.warn(
            f"states {flagged} of {b.building_id} influence no constraint",
            UnboundedStateError,
        )
    return flagged


def stack_system(district: DistrictModel, smap: StackedDisturbanceMap,
                 x_hat: dict, T: int, c_b: float = 0.0,
                 start_hour: int = 0) -> AffineInW:
    """Unroll the district over T steps into noise-affine constraint rows.

    States are eliminated by forward substitution along the linearized
    dynamics, with the disturbance replaced by its stacked affine-in-noise
    map. Comfort rows get a per-room slack (and an optional fixed tightening
    c_b); storage devices contribute their operating rows at every step plus
    their pure-state rows at the horizon end. Blind positions appear as
    here-and-now variables whose products with noise are kept as
    decision-affine noise gradients.
    """
    if smap.horizon != T:
        raise DimensionError(f"map horizon {smap.horizon} != {T}")
    if tuple(smap.disturbance_ids) != tuple(district.disturbances):
        raise DimensionError("district and map disagree on disturbances")
    ids = district.disturbances
    D = len(ids)
    nw = D * T

    keys, names = [("p", "p_elec")], ["p_elec"]
    for dev in district.devices:
        for inp in dev.inputs:
            keys.append(("dev", (dev.device_id, inp)))
            names.append(f"dev.{dev.device_id}.{inp}")
    for b in district.buildings:
        for inp in b.inputs:
            keys.append(("bld", (b.building_id, inp)))
            names.append(f"bld.{b.building_id}.{inp}")
    for b in district.buildings:
        for r in range(len(b.comfort_states)):
            keys.append(("slack", (b.building_id, r)))
            names.append(f"sl.{b.building_id}.r{r}")
    v_keys = tuple((b.building_id, m)
                   for b in district.buildings for m in range(b.n_blinds))
    layout = StreamLayout(keys=tuple(keys), names=tuple(names), T=T,
                          n_dist=D, v_keys=v_keys)
    nsd = layout.nsd
    key_col = {k: j for j, k in enumerate(keys)}
    v_off = {}
    off = 0
    for b in district.buildings:
        v_off[b.building_id] = off
        off += b.n_blinds

    f = smap.offset.reshape(D, T)
    G = np.stack([smap.gain[np.arange(D) * T + t] for t in range(T)])  # (T, D, nw)
    wcols_all = np.arange(nw)

    bld = _RowBuilder(layout.nq, nw)
    unconstrained = {}

    # per-building forward substitution
    bstate = {}
    for b in district.buildings:
        if b.building_id not in x_hat:
            raise DimensionError(f"missing state estimate for {b.building_id}")
        xh = np.asarray(x_hat[b.building_id], dtype=float)
        if xh.shape != (b.n_states,):
            raise DimensionError(f"state estimate for {b.building_id} has wrong shape")
        lin = linearize_building(b, xh)
        nx, nu, nv = b.n_states, len(b.inputs), b.n_blinds
        const = np.zeros((T + 1, nx))
        xu = np.zeros((T + 1, nx, T, nu))
        xw = np.zeros((T + 1, nx, nw))
        xv = np.zeros((T + 1, nx, nv))
        xvw = np.zeros((T + 1, nv, nx, nw))
        const[0] = xh
        for t in range(T):
            const[t + 1] = lin.A @ const[t] + lin.D @ f[:, t]
            xu[t + 1] = np.einsum("ip,psk->isk", lin.A, xu[t])
            xu[t + 1][:, t, :] += lin.B
            xw[t + 1] = lin.A @ xw[t] + lin.D @ G[t]
            if nv:
                xv[t + 1] = lin.A @ xv[t] + np.einsum("mil,l->im", lin.Cv, f[:, t])
                xvw[t + 1] = np.einsum("ip,mpw->miw", lin.A, xvw[t]) \
                    + np.einsum("mil,lw->miw", lin.Cv, G[t])
        bstate[b.building_id] = (const, xu, xw, xv, xvw)
        bounded = [ir for ir in b.comfort_states
                   if np.any(np.isfinite(b.lb)) or np.any(np.isfinite(b.ub))]
        unconstrained[b.building_id] = _flag_unconstrained_states(b, bounded)

    # storage-device forward substitution (linear, noise-free)
    dstate = {}
    for dev in district.devices:
        if not dev.n_states:
            continue
        if dev.device_id not in x_hat:
            raise DimensionError(f"missing state estimate for {dev.device_id}")
        xh = np.asarray(x_hat[dev.device_id], dtype=float)
        if xh.shape != (dev.n_states,):
            raise DimensionError(f"state estimate for {dev.device_id} has wrong shape")
        nx, nu = dev.n_states, len(dev.inputs)
        const = np.zeros((T + 1, nx))
        xu = np.zeros((T + 1, nx, T, nu))
        const[0] = xh
        for t in range(T):
            const[t + 1] = dev.A @ const[t]
            xu[t + 1] = np.einsum("ip,psk->isk", dev.A, xu[t])
            xu[t + 1][:, t, :] += dev.B
        dstate[dev.device_id] = (const, xu)

    coupling = dict(district.coupling)
    p_col = key_col[("p", "p_elec")]

    def dev_state_terms(dev, frow, t):
        """Z-columns/values and constant for F_x @ x_t of a storage device."""
        const, xu = dstate[dev.device_id]
        c = float(frow @ const[t])
        coef = np.einsum("i,isk->sk", frow, xu[t])  # (T, nu)
        cols, vals = [], []
        for s in range(t):
            for k, inp in enumerate(dev.inputs):
                if coef[s, k] != 0.0:
                    cols.append(layout.qcol(s, key_col[("dev", (dev.device_id, inp))]))
                    vals.append(coef[s, k])
        return c, cols, vals

    for t in range(T):
        hod_x = (start_hour + t + 1) % 24
        # balance nodes
        for node in district.nodes:
            cols, vals = [], []
            for name, coef in node.p_coef.items():
                cols.append(layout.qcol(t, key_col[("p", name)]))
                vals.append(coef)
            for (dev_id, inp), coef in node.u_coef.items():
                cols.append(layout.qcol(t, key_col[("dev", (dev_id, inp))]))
                vals.append(coef)
            for demand, coef in node.d_coef.items():
                for (bid, inp) in coupling.get(demand, ()):
                    cols.append(layout.qcol(t, key_col[("bld", (bid, inp))]))
                    vals.append(coef)
            bld.add(f"t{t}.balance.{node.name}", "=", 0.0,
                    z=(np.array(cols), np.array(vals)))
        # device operating rows
        for dev in district.devices:
            rows = dev.rows
            ucols = np.array([layout.qcol(t, key_col[("dev", (dev.device_id, inp))])
                              for inp in dev.inputs], dtype=np.int64)
            for r in range(len(rows.h)):
                cols = list(ucols[rows.F_u[r] != 0.0])
                vals = list(rows.F_u[r][rows.F_u[r] != 0.0])
                c0 = 0.0
                if dev.n_states and np.any(rows.F_x[r] != 0.0):
                    c, scols, svals = dev_state_terms(dev, rows.F_x[r], t)
                    c0 += c
                    cols += scols
                    vals += svals
                w = None
                if np.any(rows.F_xi[r] != 0.0):
                    c0 += float(rows.F_xi[r] @ f[:, t])
                    w = (wcols_all, rows.F_xi[r] @ G[t])
                bld.add(f"t{t}.{_safe(rows.labels[r])}", rows.senses[r],
                        rows.h[r], c0=c0, z=(np.array(cols), np.array(vals)), w=w)
        # building operating rows (actuator boxes; no state/noise part)
        for b in district.buildings:
            rows = b.rows
            ucols = np.array([layout.qcol(t, key_col[("bld", (b.building_id, inp))])
                              for inp in b.inputs], dtype=np.int64)
            for r in range(len(rows.h)):
                sel = rows.F_u[r] != 0.0
                bld.add(f"t{t}.{_safe(rows.labels[r])}", rows.senses[r],
                        rows.h[r], z=(ucols[sel], rows.F_u[r][sel]))
        # comfort of the state reached at the end of step t, with slack
        for b in district.buildings:
            const, xu, xw, xv, xvw = bstate[b.building_id]
            nu, nv = len(b.inputs), b.n_blinds
            ucols = np.array([[layout.qcol(s, key_col[("bld", (b.building_id, inp))])
                               for inp in b.inputs] for s in range(T)], dtype=np.int64)
            vcols = np.array([layout.vcol(v_off[b.building_id] + m)
                              for m in range(nv)], dtype=np.int64)
            for r, ir in enumerate(b.comfort_states):
                scol = layout.qcol(t, key_col[("slack", (b.building_id, r))])
                zc = list(ucols[: t + 1].ravel()) + list(vcols) + [scol]
                base_zv = np.concatenate([
                    xu[t + 1][ir, : t + 1, :].ravel(), xv[t + 1][ir], [-1.0]])
                wgrad = xw[t + 1][ir]
                if nv:
                    wz = (np.tile(wcols_all, nv),
                          np.repeat(vcols, nw),
                          xvw[t + 1][:, ir, :].ravel())
                    wz_neg = (wz[0], wz[1], -wz[2])
                else:
                    wz = wz_neg = None
                ub = b.ub[hod_x]
                if np.isfinite(ub):
                    bld.add(f"t{t}.comfort.{b.building_id}.r{r}.up", "<",
                            ub - c_b, c0=const[t + 1][ir],
                            z=(np.array(zc), base_zv),
                            w=(wcols_all, wgrad), wz=wz)
                lb = b.lb[hod_x]
                if np.isfinite(lb):
                    zv = -base_zv.copy()
                    zv[-1] = -1.0  # slack still relaxes the flipped row
                    bld.add(f"t{t}.comfort.{b.building_id}.r{r}.lo", "<",
                            -(lb + c_b), c0=-const[t + 1][ir],
                            z=(np.array(zc), zv),
                            w=(wcols_all, -wgrad), wz=wz_neg)
                bld.add(f"t{t}.slack.{b.building_id}.r{r}", "<", 0.0,
                        z=(np.array([scol]), np.array([-1.0])))
        bld.add(f"t{t}.nonneg.p_elec", "<", 0.0,
                z=(np.array([layout.qcol(t, p_col)]), np.array([-1.0])))

    # horizon-end pure-state rows of storage devices
    for dev in district.devices:
        if not dev.n_states:
            continue
        rows = dev.rows
        for r in range(len(rows.h)):
            if np.any(rows.F_u[r] != 0.0) or np.any(rows.F_xi[r] != 0.0):
                continue
            if not np.any(rows.F_x[r] != 0.0):
                continue
            c, scols, svals = dev_state_terms(dev, rows.F_x[r], T)
            bld.add(f"terminal.{_safe(rows.labels[r])}", rows.senses[r],
                    rows.h[r], c0=c, z=(np.array(scols), np.array(svals)))

    rows = bld.build(layout)
    object.__setattr__(rows, "layout", layout)
    return rows


# ---------------------------------------------------------------------------
# policy substitution


def parametrize(spec: PolicySpec, rows: AffineInW) -> AffineInW:
    """Substitute the policy into every row.

    Stream-step values become pi0 plus, under ADR, gain terms on strictly
    earlier noise coordinates; blind variables stay here-and-now. The
    resulting rows are affine in noise with coefficients affine in the new
    decision vector [pi0 | gains | v].
    """
    lay = rows.layout
    if lay is None or not isinstance(lay, StreamLayout):
        raise DimensionError("rows must come from stack_system")
    if spec.horizon != lay.T or spec.n_dist != lay.n_dist:
        raise DimensionError("policy and rows disagree on horizon or noise dim")
    pol = PolicyLayout(keys=lay.keys, names=lay.names, T=lay.T,
                       n_dist=lay.n_dist, v_keys=lay.v_keys, mode=spec.mode)
    T, nsd, D, nw = lay.T, lay.nsd, lay.n_dist, lay.nw
    m = len(rows.rhs)
    stream_cols_end = T * nsd

    z = rows.Z.tocoo()
    z_r, z_c, z_v = z.row.copy(), z.col.copy(), z.data.copy()
    vmask = z_c >= stream_cols_end
    z_c[vmask] += pol.v_base - stream_cols_end

    wz = rows.WZ.tocoo()
    if wz.nnz and np.any(wz.col < stream_cols_end):
        raise CausalityError(
            "noise-coefficient products may only involve here-and-now variables")
    wz_r, wz_c, wz_v = wz.row.copy(), wz.col.copy(), wz.data.copy()
    wz_c += pol.v_base - stream_cols_end

    if spec.mode == "ADR":
        sm = ~vmask
        si, sc, sv = z_r[sm], z_c[sm], z_v[sm]
        t_of = sc // nsd
        stream_of = sc % nsd
        gr, gc, gv = [wz_r], [wz_c], [wz_v]
        for t in range(1, T):
            sel = t_of == t
            if not np.any(sel):
                continue
            jw = pol.causal_cols(t)
            nc = len(jw)
            local = (jw // T) * t + (jw % T)
            ni = int(sel.sum())
            gr.append(np.repeat(si[sel], nc) * nw + np.tile(jw, ni))
            gc.append(pol.gain_base + pol.gain_offset(t)
                      + np.repeat(stream_of[sel], nc) * (D * t) + np.tile(local, ni))
            gv.append(np.repeat(sv[sel], nc))
        wz_r = np.concatenate(gr)
        wz_c = np.concatenate(gc)
        wz_v = np.concatenate(gv)

    return AffineInW(
        c0=rows.c0.copy(),
        Z=sp.coo_matrix((z_v, (z_r, z_c)), shape=(m, pol.nz)).tocsr(),
        W0=rows.W0.copy(),
        WZ=sp.coo_matrix((wz_v, (wz_r, wz_c)), shape=(m * nw, pol.nz)).tocsr(),
        rhs=rows.rhs.copy(),
        senses=rows.senses,
        tags=rows.tags,
        layout=pol,
    )


# ---------------------------------------------------------------------------
# box robust counterpart


@dataclass
class RobustBlock:
    """Finite LP rows produced by robustification.

    Rows 0..m-1 are the transformed input rows (constants moved to the
    right-hand side); auxiliary absolute-value rows and per-coordinate
    gradient equalities follow. Columns >= aux_col_base are the auxiliaries.
    """

    row_idx: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    rhs: np.ndarray
    senses: tuple
    tags: tuple
    n_aux: int
    aux_pairs: np.ndarray
    n_own: int = 0
    shared_z: np.ndarray = None
    shared_aux: np.ndarray = None
    shared_row_base: int = 0


def robustify(rows: AffineInW, lower: np.ndarray, upper: np.ndarray,
              aux_col_base: int) -> RobustBlock:
    """Exact finite counterpart of the rows over an axis-aligned noise box.

    Inequalities: each noise coordinate contributes its center to the row
    and its halfwidth times the absolute gradient; constant gradients fold
    directly, decision-dependent ones get an auxiliary y >= |gradient|.
    Auxiliaries are pooled wherever that is exact: coordinates whose gradient
    is exactly one decision column (coefficient +-1, no constant part) share
    a single y >= |column| auxiliary, and coordinates whose gradients agree
    up to overall sign (e.g. the lower and upper rows of one band) share a
    y >= |gradient| auxiliary. Pooling keeps the counterpart exact since y
    only ever tightens <=-rows with nonnegative halfwidth coefficients.
    Equalities must hold identically in the noise, so every coordinate with
    positive width yields a gradient-equals-zero equality row.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    m, nw = rows.W0.shape
    if lower.shape != (nw,) or upper.shape != (nw,):
        raise DimensionError(f"box must be two ({nw},) vectors")
    if np.any(lower > upper + 1e-15):
        raise ValueError("box lower bound exceeds upper bound")
    center = 0.5 * (lower + upper)
    half = 0.5 * (upper - lower)
    eqmask = np.array([s == "=" for s in rows.senses])

    rhs = rows.rhs - rows.c0
    tri_r, tri_c, tri_v = [], [], []
    z = rows.Z.tocoo()
    tri_r.append(z.row)
    tri_c.append(z.col)
    tri_v.append(z.data)

    w0 = rows.W0.tocoo()
    w0_lin = w0.row * nw + w0.col
    np.subtract.at(rhs, w0.row, w0.data * center[w0.col])

    wz = rows.WZ.tocsr()
    nnz = np.diff(wz.indptr)
    pair_lin = np.flatnonzero(nnz)
    pi = pair_lin // nw
    pj = pair_lin % nw

    if len(pair_lin):
        sub = wz[pair_lin].tocoo()
        tri_r.append(pi[sub.row])
        tri_c.append(sub.col)
        tri_v.append(sub.data * center[pj[sub.row]])

    # W0 values aligned to decision-dependent pairs
    order = np.argsort(w0_lin)
    w0_lin_sorted = w0_lin[order]
    w0_dat_sorted = w0.data[order]

    def w0_at(lin_ids):
        out = np.zeros(len(lin_ids))
        if not len(w0_lin_sorted) or not len(lin_ids):
            return out
        pos = np.searchsorted(w0_lin_sorted, lin_ids)
        ok = pos < len(w0_lin_sorted)
        hit = ok & (w0_lin_sorted[np.minimum(pos, len(w0_lin_sorted) - 1)] == lin_ids)
        out[hit] = w0_dat_sorted[pos[hit]]
        return out

    zdep = np.isin(w0_lin, pair_lin)
    fold = (~zdep) & (half[w0.col] > 0.0) & (~eqmask[w0.row])
    np.subtract.at(rhs, w0.row[fold], np.abs(w0.data[fold]) * half[w0.col[fold]])
    bad = (~zdep) & (half[w0.col] > 0.0) & eqmask[w0.row]
    if np.any(bad):
        i = int(w0.row[np.flatnonzero(bad)[0]])
        raise ValueError(
            f"equality row {rows.tags[i]} has a fixed nonzero noise gradient "
            "over a box of positive width")

    pair_w0 = w0_at(pair_lin)
    pair_pos = half[pj] > 0.0
    aux_sel = pair_pos & ~eqmask[pi]
    eq_sel = pair_pos & eqmask[pi]

    # pairs whose gradient is a single decision column with coefficient +-1
    # and no constant part can share one |column| auxiliary
    single = nnz[pair_lin] == 1
    first_ptr = wz.indptr[pair_lin]
    first_val = np.where(single, wz.data[np.minimum(first_ptr, wz.nnz - 1)], 0.0)
    first_col = np.where(single, wz.indices[np.minimum(first_ptr, wz.nnz - 1)], -1)
    pure = single & (np.abs(first_val) == 1.0) & (pair_w0 == 0.0)
    own_sel = aux_sel & ~pure
    sh_sel = aux_sel & pure

    senses = list(rows.senses)
    tags = list(rows.tags)
    rhs_parts = [rhs]

    sh_cols_z = first_col[sh_sel]
    uniq_z, uniq_first, sh_inv = np.unique(
        sh_cols_z, return_index=True, return_inverse=True)
    n_shared = len(uniq_z)

    # pool composite pairs whose gradients agree up to overall sign
    own_idx = np.flatnonzero(own_sel)
    group_of = np.empty(len(own_idx), dtype=np.int64)
    groups = {}
    rep = []
    for a, k in enumerate(own_idx):
        lin = pair_lin[k]
        lo_p, hi_p = wz.indptr[lin], wz.indptr[lin + 1]
        dat = wz.data[lo_p:hi_p]
        sgn = 1.0 if dat[0] > 0 else -1.0
        key = (wz.indices[lo_p:hi_p].tobytes(), (sgn * dat).tobytes(),
               float(sgn * pair_w0[k]))
        g = groups.get(key)
        if g is None:
            g = len(rep)
            groups[key] = g
            rep.append(k)
        group_of[a] = g
    rep = np.asarray(rep, dtype=np.int64)
    n_own = len(rep)
    n_aux = n_own + n_shared

    pairs = [np.stack([pi[rep], pj[rep]], axis=1)] if n_own else []
    if n_shared:
        sh_pi = pi[sh_sel]
        sh_pj = pj[sh_sel]
        pairs.append(np.stack([sh_pi[uniq_first], sh_pj[uniq_first]], axis=1))
    aux_pairs = np.concatenate(pairs) if pairs else np.zeros((0, 2), dtype=np.int64)

    if n_own:
        aux_cols = aux_col_base + np.arange(n_own)
        tri_r.append(pi[own_idx])
        tri_c.append(aux_cols[group_of])
        tri_v.append(half[pj[own_idx]])
        subA = wz[pair_lin[rep]].tocoo()
        base = m
        plus_rows = base + 2 * subA.row
        minus_rows = base + 2 * subA.row + 1
        tri_r += [plus_rows, minus_rows,
                  base + 2 * np.arange(n_own), base + 2 * np.arange(n_own) + 1]
        tri_c += [subA.col, subA.col, aux_cols, aux_cols]
        tri_v += [subA.data, -subA.data,
                  np.full(n_own, -1.0), np.full(n_own, -1.0)]
        aux_rhs = np.empty(2 * n_own)
        aux_rhs[0::2] = -pair_w0[rep]
        aux_rhs[1::2] = pair_w0[rep]
        rhs_parts.append(aux_rhs)
        for k in rep:
            tags.append(f"{rows.tags[pi[k]]}.abs.up")
            tags.append(f"{rows.tags[pi[k]]}.abs.dn")
        senses += ["<"] * (2 * n_own)

    if n_shared:
        sh_aux_cols = aux_col_base + n_own + np.arange(n_shared)
        tri_r.append(pi[sh_sel])
        tri_c.append(sh_aux_cols[sh_inv])
        tri_v.append(half[pj[sh_sel]])
        base = m + 2 * n_own
        up = base + 2 * np.arange(n_shared)
        dn = up + 1
        tri_r += [up, dn, up, dn]
        tri_c += [uniq_z, uniq_z, sh_aux_cols, sh_aux_cols]
        tri_v += [np.ones(n_shared), -np.ones(n_shared),
                  np.full(n_shared, -1.0), np.full(n_shared, -1.0)]
        rhs_parts.append(np.zeros(2 * n_shared))
        for zc in uniq_z:
            tags.append(f"gain.c{zc}.abs.up")
            tags.append(f"gain.c{zc}.abs.dn")
        senses += ["<"] * (2 * n_shared)

    n_eq = int(eq_sel.sum())
    if n_eq:
        subE = wz[pair_lin[eq_sel]].tocoo()
        base = m + 2 * n_own + 2 * n_shared
        tri_r.append(base + subE.row)
        tri_c.append(subE.col)
        tri_v.append(subE.data)
        rhs_parts.append(-pair_w0[eq_sel])
        for k in np.flatnonzero(eq_sel):
            tags.append(f"{rows.tags[pi[k]]}.gw{pj[k]}")
        senses += ["="] * n_eq

    return RobustBlock(
        row_idx=np.concatenate(tri_r) if tri_r else np.zeros(0, dtype=np.int64),
        col_idx=np.concatenate(tri_c) if tri_c else np.zeros(0, dtype=np.int64),
        values=np.concatenate(tri_v) if tri_v else np.zeros(0),
        rhs=np.concatenate(rhs_parts),
        senses=tuple(senses),
        tags=tuple(tags),
        n_aux=n_aux,
        aux_pairs=aux_pairs,
        n_own=n_own,
        shared_z=uniq_z,
        shared_aux=aux_col_base + n_own + np.arange(n_shared),
        shared_row_base=m + 2 * n_own,
    )


# ---------------------------------------------------------------------------
# epigraph objective


def epigraph_objective(layout: PolicyLayout, tariff_steps: np.ndarray,
                       gamma: float, mu_lower: np.ndarray,
                       mu_upper: np.ndarray, tau_col: int,
                       aux_col_base: int) -> RobustBlock:
    """Bound the mean-substituted cost by tau over the mean rectangle.

    The stage cost prices grid purchases by the tariff and comfort slack by
    gamma. Substituting the noise mean for the noise in the policy makes the
    cost affine in the unknown mean, which is then robustified over its own
    rectangle with the same box counterpart; the resulting rows read
    cost(z, mu) <= tau for the worst mean.
    """
    T, nsd, nw = layout.T, layout.nsd, layout.nw
    cols, vals = [int(tau_col)], [-1.0]
    wz_w, wz_c, wz_v = [], [], []
    for t in range(T):
        for j, (kind, _) in enumerate(layout.keys):
            if kind == "p":
                coef = float(tariff_steps[t])
            elif kind == "slack":
                coef = float(gamma)
            else:
                continue
            if coef == 0.0:
                continue
            cols.append(layout.qcol(t, j))
            vals.append(coef)
            if layout.mode == "ADR" and t >= 1:
                jw = layout.causal_cols(t)
                local = (jw // T) * t + (jw % T)
                wz_w.append(jw)
                wz_c.append(layout.gain_base + layout.gain_offset(t)
                            + j * (layout.n_dist * t) + local)
                wz_v.append(np.full(len(jw), coef))
    ncols = tau_col + 1
    if wz_w:
        wz_rows = np.concatenate(wz_w)  # single row: linear id = 0*nw + jw
        wz_cols = np.concatenate(wz_c)
        wz_vals = np.concatenate(wz_v)
    else:
        wz_rows = wz_cols = np.zeros(0, dtype=np.int64)
        wz_vals = np.zeros(0)
    row = AffineInW(
        c0=np.zeros(1),
        Z=sp.coo_matrix((vals, (np.zeros(len(cols), dtype=np.int64), cols)),
                        shape=(1, ncols)).tocsr(),
        W0=sp.csr_matrix((1, nw)),
        WZ=sp.coo_matrix((wz_vals, (wz_rows, wz_cols)),
                         shape=(nw, ncols)).tocsr(),
        rhs=np.zeros(1),
        senses=("<",),
        tags=("epigraph.cost",),
        layout=None,
    )
    return robustify(row, mu_lower, mu_upper, aux_col_base)


# ---------------------------------------------------------------------------
# full pipeline


def _sorted_match(sorted_vals: np.ndarray, query: np.ndarray):
    """Membership test of query values in a sorted array, with positions."""
    if not len(sorted_vals) or not len(query):
        return np.zeros(len(query), dtype=bool), np.zeros(len(query), dtype=np.int64)
    pos = np.searchsorted(sorted_vals, query)
    posc = np.minimum(pos, len(sorted_vals) - 1)
    return sorted_vals[posc] == query, posc


def _split_shared_gains(row_idx, col_idx, values, kill_rows, z_cols, aux_cols):
    """Re-express shared |gain| auxiliaries as positive/negative gain parts.

    A gain column z with shared auxiliary y (defined by rows y >= z and
    y >= -z) satisfies z = pos - neg, y = pos + neg for a unique pos, neg >= 0
    with min(pos, neg) = 0. Reusing the z column for pos and the y column for
    neg turns every reference a*z + b*y into (a+b)*pos + (b-a)*neg and makes
    the two defining rows redundant, shrinking the LP without changing its
    projection onto the remaining columns.
    """
    keep = ~np.isin(row_idx, kill_rows)
    row_idx, col_idx, values = row_idx[keep], col_idx[keep], values[keep]

    z_order = np.argsort(z_cols)
    z_sorted = z_cols[z_order]
    aux_of_z = aux_cols[z_order]
    a_order = np.argsort(aux_cols)
    a_sorted = aux_cols[a_order]
    z_of_aux = z_cols[a_order]

    hit_z, at_z = _sorted_match(z_sorted, col_idx)
    hit_a, at_a = _sorted_match(a_sorted, col_idx)

    new_r = [row_idx, row_idx[hit_z], row_idx[hit_a]]
    new_c = [col_idx, aux_of_z[at_z[hit_z]], z_of_aux[at_a[hit_a]]]
    new_v = [values, -values[hit_z], values[hit_a]]
    return (np.concatenate(new_r), np.concatenate(new_c), np.concatenate(new_v))


@dataclass(frozen=True)
class FirstStep:
    """Here-and-now slice of a solved policy (step-0 values are noise-free)."""

    p: dict
    device_inputs: dict
    building_inputs: dict
    slack: dict
    v: dict
    tau: float


@dataclass(frozen=True)
class CompiledRobustLP:
    """Finite LP for one horizon problem, with origin-tagged rows.

    `policy_rows` are the parametrized rows before robustification — useful
    for sampling-based verification that the counterpart is exact.
    """

    lp: LinearProgram
    layout: PolicyLayout
    policy_rows: AffineInW
    tau_col: int
    n_aux: int
    meta: dict

    def extract_first_step(self, x: np.ndarray) -> FirstStep:
        lay = self.layout
        p, dev, slack = {}, {}, {}
        bld_vals = {}
        for j, (kind, key) in enumerate(lay.keys):
            val = float(x[lay.qcol(0, j)])
            if kind == "p":
                p[key] = val
            elif kind == "dev":
                dev[key] = val
            elif kind == "bld":
                bld_vals.setdefault(key[0], []).append(val)
            elif kind == "slack":
                slack[key] = val
        bld = {bid: np.array(vals) for bid, vals in bld_vals.items()}
        v = {}
        for m, (bid, _) in enumerate(lay.v_keys):
            v.setdefault(bid, []).append(float(x[lay.vcol(m)]))
        v = {bid: np.array(vals) for bid, vals in v.items()}
        for bid in bld:
            v.setdefault(bid, np.zeros(0))
        return FirstStep(p=p, device_inputs=dev, building_inputs=bld,
                         slack=slack, v=v, tau=float(x[self.tau_col]))


def compile_problem(district: DistrictModel, spec: PolicySpec,
                    box: UncertaintyBox, smap: StackedDisturbanceMap,
                    x_hat: dict, start_hour: int = 0) -> CompiledRobustLP:
    """Stack, parametrize, robustify, and attach the epigraph objective.

    CEP collapses both the noise box and the mean rectangle to the estimated
    mean before robustification, recovering a deterministic plan against the
    point forecast. The returned LP minimizes the single epigraph variable.
    """
    T = spec.horizon
    if smap.horizon != T or box.horizon != T:
        raise DimensionError("horizon mismatch between spec, map, and box")
    if tuple(box.disturbance_ids) != tuple(district.disturbances):
        raise DimensionError("district and box disagree on disturbances")
    if spec.n_dist != len(district.disturbances):
        raise DimensionError("policy noise dimension disagrees with district")

    rows_q = stack_system(district, smap, x_hat, T, c_b=spec.c_b,
                          start_hour=start_hour)
    rows_z = parametrize(spec, rows_q)
    lay = rows_z.layout

    w_lo = box.flat(box.lower)
    w_hi = box.flat(box.upper)
    mu_lo = box.flat(box.mu_lo)
    mu_hi = box.flat(box.mu_hi)
    if spec.mode == "CEP":
        center = 0.5 * (mu_lo + mu_hi)
        w_lo = w_hi = center
        mu_lo = mu_hi = center

    nz = lay.nz
    tau_col = nz
    aux_base = nz + 1
    blk = robustify(rows_z, w_lo, w_hi, aux_col_base=aux_base)
    tariff_steps = np.array([district.tariff[(start_hour + t) % 24]
                             for t in range(T)])
    epi = epigraph_objective(lay, tariff_steps, spec.gamma, mu_lo, mu_hi,
                             tau_col, aux_col_base=aux_base + blk.n_aux)

    n_main = len(blk.rhs)
    row_idx = np.concatenate([blk.row_idx, epi.row_idx + n_main])
    col_idx = np.concatenate([blk.col_idx, epi.col_idx])
    values = np.concatenate([blk.values, epi.values])
    rhs = np.concatenate([blk.rhs, epi.rhs])
    senses = list(blk.senses) + list(epi.senses)
    tags = list(blk.tags) + list(epi.tags)

    # shared |gain| auxiliaries become positive/negative gain parts; their
    # defining rows empty out and are dropped below (only gain columns split,
    # since those are free variables)
    seen, split_z, split_aux, kill = set(), [], [], []
    for off, b in ((0, blk), (n_main, epi)):
        if b.shared_z is None:
            continue
        for k, (zc, ac) in enumerate(zip(b.shared_z, b.shared_aux)):
            if zc < lay.gain_base or zc >= lay.v_base or zc in seen:
                continue
            seen.add(int(zc))
            split_z.append(int(zc))
            split_aux.append(int(ac))
            kill += [off + b.shared_row_base + 2 * k,
                     off + b.shared_row_base + 2 * k + 1]
    if split_z:
        row_idx, col_idx, values = _split_shared_gains(
            row_idx, col_idx, values, np.asarray(kill),
            np.asarray(split_z), np.asarray(split_aux))

    # drop rows whose coefficients all vanished, verifying they hold
    n_rows = len(rhs)
    keep_entry = values != 0.0
    row_idx, col_idx, values = (row_idx[keep_entry], col_idx[keep_entry],
                                values[keep_entry])
    touched = np.zeros(n_rows, dtype=bool)
    touched[row_idx] = True
    for i in np.flatnonzero(~touched):
        if senses[i] == "<" and rhs[i] >= -1e-9:
            continue
        if senses[i] == "=" and abs(rhs[i]) <= 1e-9:
            continue
        raise InfeasibleInstanceError(f"constant row {tags[i]} is infeasible")
    new_id = np.cumsum(touched) - 1
    row_idx = new_id[row_idx]
    rhs = rhs[touched]
    senses = [s for i, s in enumerate(senses) if touched[i]]
    tags = [t for i, t in enumerate(tags) if touched[i]]

    n_cols = aux_base + blk.n_aux + epi.n_aux
    lower = np.full(n_cols, -np.inf)
    upper = np.full(n_cols, np.inf)
    for m in range(lay.nv):
        lower[lay.vcol(m)] = 0.0
        upper[lay.vcol(m)] = 1.0
    lower[aux_base:] = 0.0
    if split_z:
        lower[np.asarray(split_z)] = 0.0

    names = [f"pi0.t{t}.{name}" for t in range(T) for name in lay.names]
    if lay.mode == "ADR":
        for t in range(1, T):
            jw = lay.causal_cols(t)
            for name in lay.names:
                names.extend(f"g.t{t}.{name}.w{j}" for j in jw)
    names.extend(f"v.{bid}.{m}" for bid, m in lay.v_keys)
    names.append("tau")
    names.extend(f"y{k}" for k in range(blk.n_aux))
    names.extend(f"ymu{k}" for k in range(epi.n_aux))
    for zc, ac in zip(split_z, split_aux):
        names[ac] = names[zc] + ".neg"
        names[zc] = names[zc] + ".pos"

    objective = np.zeros(n_cols)
    objective[tau_col] = 1.0
    lp = LinearProgram(
        objective=objective,
        row_idx=row_idx, col_idx=col_idx, values=values,
        senses=senses, rhs=rhs,
        lower=lower, upper=upper,
        col_names=names, row_names=tags,
    )
    meta = {
        "start_hour": start_hour,
        "mode": spec.mode,
        "tariff_steps": tariff_steps,
        "n_main_rows": n_main,
    }
    return CompiledRobustLP(lp=lp, layout=lay, policy_rows=rows_z,
                            tau_col=tau_col, n_aux=blk.n_aux + epi.n_aux,
                            meta=meta)
