"""Sparse LP container, deterministic solve, independent verification, and a
text-format export/import compatible with mainstream solvers.

The solve step is delegated to scipy's HiGHS backend; everything observable
(statuses, residual verification, serialization) is recomputed here so that
solutions can be cross-checked without trusting solver internals.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

STATUS_OPTIMAL = "OPTIMAL"
STATUS_INFEASIBLE = "INFEASIBLE"
STATUS_UNBOUNDED = "UNBOUNDED"
STATUS_ITER_LIMIT = "ITER_LIMIT"

_SCIPY_STATUS = {
    0: STATUS_OPTIMAL,
    1: STATUS_ITER_LIMIT,
    2: STATUS_INFEASIBLE,
    3: STATUS_UNBOUNDED,
    4: STATUS_ITER_LIMIT,  # numerical trouble, surfaced rather than silent
}


class ParseError(ValueError):
    """Malformed LP text; carries 1-based line and column."""

    def __init__(self, line: int, col: int, message: str):
        super().__init__(f"line {line}, col {col}: {message}")
        self.line = line
        self.col = col


@dataclass
class LinearProgram:
    """Minimization LP in sparse triplet form.

    Rows are either '<' (a x <= rhs) or '=' (a x = rhs); variable bounds are
    stored separately and may be infinite. Duplicate triplets sum.
    """

    objective: np.ndarray
    row_idx: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray
    senses: list
    rhs: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    col_names: list | None = None
    row_names: list | None = None

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float)
        self.row_idx = np.asarray(self.row_idx, dtype=np.int64)
        self.col_idx = np.asarray(self.col_idx, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        self.rhs = np.asarray(self.rhs, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        n, m = self.n_cols, self.n_rows
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError("bounds must match column count")
        if len(self.rhs) != m:
            raise ValueError("rhs must match sense count")
        if not (len(self.row_idx) == len(self.col_idx) == len(self.values)):
            raise ValueError("triplet arrays must have equal length")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("matrix coefficients must be finite")
        if not np.all(np.isfinite(self.objective)):
            raise ValueError("objective coefficients must be finite")
        if not np.all(np.isfinite(self.rhs)):
            raise ValueError("right-hand sides must be finite")
        if m and (len(self.row_idx) == 0 or self.row_idx.max() >= m or self.row_idx.min() < 0):
            raise ValueError("row indices out of range")
        if len(self.col_idx) and (self.col_idx.max() >= n or self.col_idx.min() < 0):
            raise ValueError("column indices out of range")
        if any(s not in ("<", "=") for s in self.senses):
            raise ValueError("senses must be '<' or '='")
        present = np.zeros(m, dtype=bool)
        present[self.row_idx] = True
        if not np.all(present):
            missing = int(np.flatnonzero(~present)[0])
            raise ValueError(f"row {missing} has no coefficients")
        if self.col_names is not None and len(self.col_names) != n:
            raise ValueError("col_names length mismatch")
        if self.row_names is not None and len(self.row_names) != m:
            raise ValueError("row_names length mismatch")

    @property
    def n_cols(self) -> int:
        return len(self.objective)

    @property
    def n_rows(self) -> int:
        return len(self.senses)

    def matrix(self) -> sp.csr_matrix:
        a = sp.coo_matrix(
            (self.values, (self.row_idx, self.col_idx)), shape=(self.n_rows, self.n_cols)
        )
        return a.tocsr()

    def dense_matrix(self) -> np.ndarray:
        return self.matrix().toarray()

    def column_name(self, j: int) -> str:
        return self.col_names[j] if self.col_names else f"x{j}"

    def row_name(self, i: int) -> str:
        return self.row_names[i] if self.row_names else f"r{i}"


@dataclass
class Solution:
    status: str
    x: np.ndarray | None
    objective: float | None
    max_residual: float
    message: str = ""


@dataclass
class VerifyReport:
    ok: bool
    max_violation: float
    worst_label: str
    objective: float


def solve(lp: LinearProgram, tol: float = 1e-8, iter_limit: int | None = None) -> Solution:
    """Minimize the LP with HiGHS; residuals are recomputed independently."""
    a = lp.matrix()
    sense_arr = np.array([s == "=" for s in lp.senses])
    eq_rows = np.flatnonzero(sense_arr)
    ub_rows = np.flatnonzero(~sense_arr)
    a_ub = a[ub_rows] if len(ub_rows) else None
    b_ub = lp.rhs[ub_rows] if len(ub_rows) else None
    a_eq = a[eq_rows] if len(eq_rows) else None
    b_eq = lp.rhs[eq_rows] if len(eq_rows) else None
    bounds = np.column_stack((lp.lower, lp.upper))
    options = {"presolve": True}
    if iter_limit is not None:
        options["maxiter"] = int(iter_limit)
    res = linprog(
        lp.objective,
        A_ub=a_ub,
        b_ub=b_ub,
        A_eq=a_eq,
        b_eq=b_eq,
        bounds=bounds,
        method="highs",
        options=options,
    )
    status = _SCIPY_STATUS.get(res.status, STATUS_ITER_LIMIT)
    if status != STATUS_OPTIMAL or res.x is None:
        return Solution(status=status, x=None, objective=None, max_residual=np.inf,
                        message=str(res.message))
    x = np.asarray(res.x, dtype=float)
    rep = verify(lp, x, tol=tol, matrix=a)
    return Solution(
        status=STATUS_OPTIMAL,
        x=x,
        objective=rep.objective,
        max_residual=rep.max_violation,
        message=str(res.message),
    )


def verify(lp: LinearProgram, x: np.ndarray, tol: float = 1e-8,
           matrix: sp.csr_matrix | None = None) -> VerifyReport:
    """Recompute all residuals of `x` against the LP, independent of the solver."""
    x = np.asarray(x, dtype=float)
    if x.shape != (lp.n_cols,):
        raise ValueError(f"point has shape {x.shape}, expected ({lp.n_cols},)")
    ax = (lp.matrix() if matrix is None else matrix) @ x
    resid = ax - lp.rhs
    sense_eq = np.array([s == "=" for s in lp.senses])
    row_viol = np.where(sense_eq, np.abs(resid), np.maximum(resid, 0.0))
    worst = -1.0
    label = ""
    if lp.n_rows:
        i = int(np.argmax(row_viol))
        worst = float(row_viol[i])
        label = lp.row_name(i)
    bound_viol = np.maximum(lp.lower - x, x - lp.upper)
    if lp.n_cols:
        j = int(np.argmax(bound_viol))
        if float(bound_viol[j]) > worst:
            worst = float(bound_viol[j])
            label = f"bound:{lp.column_name(j)}"
    worst = max(worst, 0.0)
    return VerifyReport(
        ok=worst <= tol,
        max_violation=worst,
        worst_label=label,
        objective=float(lp.objective @ x),
    )


def solution_to_json(sol: Solution, lp: LinearProgram) -> str:
    """Serialize a solution with named variable values."""
    payload = {
        "status": sol.status,
        "objective": sol.objective,
        "max_residual": None if not np.isfinite(sol.max_residual) else sol.max_residual,
    }
    if sol.x is not None:
        payload["values"] = {lp.column_name(j): float(v) for j, v in enumerate(sol.x)}
    return json.dumps(payload, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# LP text format

_NAME_RE = r"[A-Za-z_][A-Za-z0-9_.()]*"
_NUM_RE = r"[0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?|[0-9]+\.?"
_TOKEN_RE = re.compile(
    rf"(?P<num>{_NUM_RE})|(?P<inf>[+-]?infinity|[+-]?inf\b)|(?P<name>{_NAME_RE})"
    r"|(?P<sense><=|>=|=)|(?P<sign>[+-])|(?P<colon>:)|(?P<bad>\S)"
)

_SECTION_WORDS = {
    "minimize": "objective",
    "min": "objective",
    "maximize": "objective_max",
    "max": "objective_max",
    "subject": None,  # handled with 'to'
    "bounds": "bounds",
    "end": "end",
}


def _fmt(v: float) -> str:
    return repr(float(v))


def export_lp(lp: LinearProgram) -> str:
    """Render the LP in the de-facto text LP format.

    Every variable gets an explicit Bounds line, so the format's implicit
    x >= 0 default never applies on re-import.
    """
    a = lp.matrix()
    out = ["Minimize"]
    nz = np.flatnonzero(lp.objective)
    if len(nz):
        terms = [_term_str(lp.objective[j], lp.column_name(j), k == 0)
                 for k, j in enumerate(nz)]
    else:
        terms = [f"0 {lp.column_name(0)}"] if lp.n_cols else ["0"]
    out.extend(_wrap(" obj: ", terms))
    out.append("Subject To")
    indptr, indices, data = a.indptr, a.indices, a.data
    for i in range(lp.n_rows):
        cols = indices[indptr[i]:indptr[i + 1]]
        vals = data[indptr[i]:indptr[i + 1]]
        parts = [_term_str(v, lp.column_name(j), k == 0)
                 for k, (j, v) in enumerate(zip(cols, vals)) if v != 0.0]
        if not parts:  # all-zero row after duplicate folding
            parts = [f"0 {lp.column_name(0)}"]
        sense = "<=" if lp.senses[i] == "<" else "="
        parts.append(f"{sense} {_fmt(lp.rhs[i])}")
        out.extend(_wrap(f" {lp.row_name(i)}: ", parts))
    out.append("Bounds")
    for j in range(lp.n_cols):
        lo, hi = lp.lower[j], lp.upper[j]
        name = lp.column_name(j)
        if np.isneginf(lo) and np.isposinf(hi):
            out.append(f" {name} free")
        else:
            lo_s = "-infinity" if np.isneginf(lo) else _fmt(lo)
            hi_s = "+infinity" if np.isposinf(hi) else _fmt(hi)
            out.append(f" {lo_s} <= {name} <= {hi_s}")
    out.append("End")
    return "\n".join(out) + "\n"


def _term_str(coef: float, name: str, first: bool) -> str:
    mag = _fmt(abs(coef))
    if first:
        return f"{mag} {name}" if coef >= 0 else f"- {mag} {name}"
    return f"+ {mag} {name}" if coef >= 0 else f"- {mag} {name}"


def _wrap(prefix: str, parts: list, width: int = 78) -> list:
    lines = [prefix]
    for p in parts:
        if len(lines[-1]) + len(p) + 1 > width and lines[-1] != prefix:
            lines.append("   ")
        if lines[-1].endswith(" "):
            lines[-1] += p
        else:
            lines[-1] += " " + p
    return lines


class _Token:
    __slots__ = ("kind", "text", "line", "col")

    def __init__(self, kind, text, line, col):
        self.kind = kind
        self.text = text
        self.line = line
        self.col = col


def _tokenize(text: str) -> list:
    tokens = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("\\", 1)[0]  # backslash starts a comment
        for m in _TOKEN_RE.finditer(line):
            kind = m.lastgroup
            tok = _Token(kind, m.group(), lineno, m.start() + 1)
            if kind == "bad":
                raise ParseError(lineno, tok.col, f"unexpected character {tok.text!r}")
            tokens.append(tok)
    return tokens


def import_lp(text: str) -> LinearProgram:
    """Parse LP text produced by export_lp (and common solver variants).

    '>=' rows are normalized to '<' by negation. A Maximize objective is
    negated into minimization form.
    """
    tokens = _tokenize(text)
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else None

    def take():
        nonlocal pos
        tok = peek()
        if tok is None:
            last = tokens[-1] if tokens else _Token("", "", 1, 1)
            raise ParseError(last.line, last.col, "unexpected end of input")
        pos += 1
        return tok

    def at_keyword(*words):
        tok = peek()
        return tok is not None and tok.kind == "name" and tok.text.lower() in words

    # objective sense
    if not (at_keyword("minimize", "min", "maximize", "max")):
        tok = peek() or _Token("", "", 1, 1)
        raise ParseError(tok.line, tok.col, "expected Minimize or Maximize")
    maximize = take().text.lower().startswith("max")

    col_index: dict = {}
    col_names: list = []

    def col_of(name: str) -> int:
        if name not in col_index:
            col_index[name] = len(col_names)
            col_names.append(name)
        return col_index[name]

    def parse_expr(stop_kinds):
        """Parse signed linear terms until a token of a stop kind; returns dict col->coef."""
        coefs: dict = {}
        while True:
            tok = peek()
            if tok is None or tok.kind in stop_kinds:
                return coefs
            if tok.kind == "name" and tok.text.lower() in ("subject", "bounds", "end", "st"):
                return coefs
            sign = 1.0
            while tok is not None and tok.kind == "sign":
                take()
                if tok.text == "-":
                    sign = -sign
                tok = peek()
            if tok is None:
                return coefs
            if tok.kind == "num":
                take()
                coef = sign * float(tok.text)
                nxt = peek()
                if nxt is not None and nxt.kind == "name" and nxt.text.lower() not in (
                    "subject", "bounds", "end", "st",
                ):
                    take()
                    j = col_of(nxt.text)
                    coefs[j] = coefs.get(j, 0.0) + coef
                else:
                    # bare number: constant term is not allowed in this format
                    raise ParseError(tok.line, tok.col, "number without a variable")
            elif tok.kind == "name":
                take()
                j = col_of(tok.text)
                coefs[j] = coefs.get(j, 0.0) + sign
            else:
                return coefs

    # objective expression (optional "obj:" label)
    if peek() is not None and peek().kind == "name" and not at_keyword("subject", "st"):
        save = pos
        label = take()
        if peek() is not None and peek().kind == "colon":
            take()
        else:
            pos = save
    obj_start = peek()
    obj_coefs = parse_expr(stop_kinds=("sense",))
    if not obj_coefs:
        tok = obj_start or _Token("", "", 1, 1)
        raise ParseError(tok.line, tok.col, "empty objective section")

    # Subject To
    if not at_keyword("subject", "st"):
        tok = peek() or _Token("", "", 1, 1)
        raise ParseError(tok.line, tok.col, "expected Subject To")
    if take().text.lower() == "subject":
        if not at_keyword("to"):
            tok = peek() or _Token("", "", 1, 1)
            raise ParseError(tok.line, tok.col, "expected To after Subject")
        take()

    rows_ri: list = []
    rows_ci: list = []
    rows_v: list = []
    senses: list = []
    rhs: list = []
    row_names: list = []

    while not at_keyword("bounds", "end"):
        tok = peek()
        if tok is None:
            raise ParseError(tokens[-1].line, tokens[-1].col, "missing Bounds/End")
        row_label = None
        if tok.kind == "name":
            save = pos
            cand = take()
            if peek() is not None and peek().kind == "colon":
                take()
                row_label = cand.text
            else:
                pos = save
        coefs = parse_expr(stop_kinds=("sense",))
        sense_tok = peek()
        if sense_tok is None or sense_tok.kind != "sense":
            tok = sense_tok or tokens[-1]
            raise ParseError(tok.line, tok.col, "expected <=, >= or = in constraint")
        take()
        sign = 1.0
        rtok = take()
        while rtok.kind == "sign":
            if rtok.text == "-":
                sign = -sign
            rtok = take()
        if rtok.kind == "inf":
            raise ParseError(rtok.line, rtok.col, "infinite right-hand side")
        if rtok.kind != "num":
            raise ParseError(rtok.line, rtok.col, "expected numeric right-hand side")
        b = sign * float(rtok.text)
        if not coefs:
            raise ParseError(sense_tok.line, sense_tok.col, "constraint with no terms")
        flip = -1.0 if sense_tok.text == ">=" else 1.0
        i = len(senses)
        for j, v in sorted(coefs.items()):
            rows_ri.append(i)
            rows_ci.append(j)
            rows_v.append(flip * v)
        senses.append("=" if sense_tok.text == "=" else "<")
        rhs.append(flip * b)
        row_names.append(row_label if row_label is not None else f"r{i}")

    bound_ops: list = []  # (col, kind, value); applied once n_cols is final

    if at_keyword("bounds"):
        take()
        while not at_keyword("end"):
            tok = peek()
            if tok is None:
                raise ParseError(tokens[-1].line, tokens[-1].col, "missing End")

            def bound_value(t):
                sign = 1.0
                while t.kind == "sign":
                    if t.text == "-":
                        sign = -sign
                    t = take()
                if t.kind == "inf":
                    word = t.text.lstrip("+-")
                    val = np.inf
                    if t.text.startswith("-"):
                        val = -np.inf
                    return sign * val
                if t.kind != "num":
                    raise ParseError(t.line, t.col, "expected bound value")
                return sign * float(t.text)

            if tok.kind == "name":
                # a variable may appear for the first time in Bounds
                name_tok = take()
                j = col_of(name_tok.text)
                nxt = peek()
                if nxt is not None and nxt.kind == "name" and nxt.text.lower() == "free":
                    take()
                    bound_ops.append((j, "free", 0.0))
                elif nxt is not None and nxt.kind == "sense":
                    op = take().text
                    val = bound_value(take())
                    if op == "<=":
                        bound_ops.append((j, "hi", val))
                    elif op == ">=":
                        bound_ops.append((j, "lo", val))
                    else:
                        bound_ops.append((j, "fix", val))
                else:
                    t = nxt or tokens[-1]
                    raise ParseError(t.line, t.col, "malformed bound line")
            else:
                lo = bound_value(take())
                op1 = take()
                if op1.kind != "sense" or op1.text != "<=":
                    raise ParseError(op1.line, op1.col, "expected <= in bound")
                name_tok = take()
                if name_tok.kind != "name":
                    raise ParseError(name_tok.line, name_tok.col, "expected variable name")
                j = col_of(name_tok.text)
                op2 = take()
                if op2.kind != "sense" or op2.text != "<=":
                    raise ParseError(op2.line, op2.col, "expected second <= in bound")
                hi = bound_value(take())
                bound_ops.append((j, "lo", lo))
                bound_ops.append((j, "hi", hi))

    if not at_keyword("end"):
        tok = peek() or (tokens[-1] if tokens else _Token("", "", 1, 1))
        raise ParseError(tok.line, tok.col, "expected End")
    take()

    n = len(col_names)
    lower = np.zeros(n)  # format default: x >= 0
    upper = np.full(n, np.inf)
    for j, kind, val in bound_ops:
        if kind == "free":
            lower[j], upper[j] = -np.inf, np.inf
        elif kind == "lo":
            lower[j] = val
        elif kind == "hi":
            upper[j] = val
        else:
            lower[j] = upper[j] = val

    objective = np.zeros(n)
    for j, v in obj_coefs.items():
        objective[j] = -v if maximize else v

    return LinearProgram(
        objective=objective,
        row_idx=np.asarray(rows_ri, dtype=np.int64),
        col_idx=np.asarray(rows_ci, dtype=np.int64),
        values=np.asarray(rows_v, dtype=float),
        senses=senses,
        rhs=np.asarray(rhs, dtype=float),
        lower=lower,
        upper=upper,
        col_names=col_names,
        row_names=row_names,
    )
