"""Disturbance uncertainty modeling.

Pipeline: per-disturbance histories of hourly (forecast, realization) pairs
are fitted with a per-hour AR(1) model of the forecast error; the residual
noise gets mean/variance confidence bounds (Student t / chi-square); those
bounds yield a hyperrectangular noise set with per-coordinate violation
budgets; finally the error recursion is unrolled into an affine map from
stacked noise to stacked disturbances over the control horizon.

Hour-of-day indices are 0-based throughout the code (0..23); the CSV
interface uses the 1..24 labeling.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .quantiles import chi2_quantile, normal_quantile, student_t_quantile

HOURS_PER_DAY = 24


class ShapeError(ValueError):
    """Inconsistent array shapes or insufficient sample counts."""


class DegenerateVariance(ValueError):
    """An operation that requires spread received constant data."""


class CsvFormatError(ValueError):
    """Malformed history CSV; carries file path and 1-based line number."""

    def __init__(self, path: str, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


@dataclass(frozen=True)
class DisturbanceHistory:
    """N days of hourly forecasts and realizations for one disturbance."""

    disturbance_id: str
    forecasts: np.ndarray  # (N, 24)
    realizations: np.ndarray  # (N, 24)

    def __post_init__(self):
        f = np.asarray(self.forecasts, dtype=float)
        r = np.asarray(self.realizations, dtype=float)
        if f.ndim != 2 or f.shape[1] != HOURS_PER_DAY:
            raise ShapeError(f"forecasts must be (N, 24), got {f.shape}")
        if f.shape != r.shape:
            raise ShapeError(f"shape mismatch: forecasts {f.shape} vs realizations {r.shape}")
        if f.shape[0] < 3:
            raise ShapeError(f"need at least 3 days of history, got {f.shape[0]}")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(r))):
            raise ShapeError("history contains non-finite values")
        object.__setattr__(self, "forecasts", f)
        object.__setattr__(self, "realizations", r)

    @property
    def n_days(self) -> int:
        return self.forecasts.shape[0]

    @property
    def errors(self) -> np.ndarray:
        return self.realizations - self.forecasts


@dataclass
class ARModel:
    """Per-hour AR(1) coefficients and residual statistics of forecast errors."""

    disturbance_id: str
    alpha: np.ndarray  # (24,)
    residuals: list  # 24 arrays; hour index 23 holds one fewer sample (wrap)
    mu_hat: np.ndarray  # (24,)
    var_hat: np.ndarray  # (24,)
    zero_energy: np.ndarray  # (24,) bool: no error energy at that hour


@dataclass(frozen=True)
class AmbiguityBounds:
    """Confidence rectangle for the (mean, variance) of one noise coordinate."""

    mu_lo: float
    mu_hi: float
    var_lo: float
    var_hi: float
    mu_hat: float
    var_hat: float
    delta_chi: float
    delta_st: float
    n: int
    degenerate: bool = False

    def __post_init__(self):
        if not self.degenerate:
            if not (self.mu_lo <= self.mu_hat <= self.mu_hi):
                raise ValueError("mean bounds must bracket the sample mean")
            if not (0.0 < self.var_lo <= self.var_hat <= self.var_hi):
                raise ValueError("variance bounds must bracket the sample variance")
        if not (0.0 < self.delta_chi + self.delta_st < 1.0):
            raise ValueError("combined confidence level must lie in (0, 1)")


@dataclass(frozen=True)
class UncertaintyBox:
    """Hyperrectangle for stacked noise, with per-coordinate tail budgets.

    Arrays are (D, T): disturbance-major, horizon step within. The
    mean-rectangle and upper standard deviation are kept because the
    worst-case-expectation objective needs the same rectangle.
    """

    disturbance_ids: tuple
    lower: np.ndarray
    upper: np.ndarray
    beta_lo: np.ndarray
    beta_hi: np.ndarray
    mu_lo: np.ndarray
    mu_hi: np.ndarray
    sigma_hi: np.ndarray
    epsilon: float

    def __post_init__(self):
        if np.any(self.lower > self.upper + 1e-15):
            raise ValueError("box lower bound exceeds upper bound")
        total = float(np.sum(self.beta_lo) + np.sum(self.beta_hi))
        if abs(total - self.epsilon) > 1e-12:
            raise ValueError(f"violation budgets sum to {total}, expected {self.epsilon}")

    @property
    def horizon(self) -> int:
        return self.lower.shape[1]

    def flat(self, arr: np.ndarray) -> np.ndarray:
        """Flatten a (D, T) array disturbance-major to match the stacked map."""
        return np.asarray(arr, dtype=float).reshape(-1)


@dataclass(frozen=True)
class StackedDisturbanceMap:
    """Affine map xi = offset + gain @ w over the horizon.

    Stacking is disturbance-major: index i*T + s is disturbance i, step s.
    gain is block-diagonal across disturbances and lower-triangular within
    each block (step t sees only noise from steps <= t).
    """

    disturbance_ids: tuple
    offset: np.ndarray  # (D*T,)
    gain: np.ndarray  # (D*T, D*T)
    e_hat: np.ndarray  # (D,)
    horizon: int


def fit_ar(history: DisturbanceHistory) -> ARModel:
    """Least-squares AR(1) fit of forecast errors, one coefficient per hour.

    The hour-24 transition wraps to hour 1 of the next day, so the final day
    contributes no residual there. Hours with zero error energy get alpha = 0
    and are flagged.
    """
    e = history.errors
    alpha = np.zeros(HOURS_PER_DAY)
    zero = np.zeros(HOURS_PER_DAY, dtype=bool)
    residuals = []
    mu_hat = np.zeros(HOURS_PER_DAY)
    var_hat = np.zeros(HOURS_PER_DAY)
    for t in range(HOURS_PER_DAY):
        if t < HOURS_PER_DAY - 1:
            cur, nxt = e[:, t], e[:, t + 1]
        else:
            cur, nxt = e[:-1, t], e[1:, 0]
        denom = float(cur @ cur)
        if denom == 0.0:
            zero[t] = True
        else:
            alpha[t] = float(cur @ nxt) / denom
        res = nxt - alpha[t] * cur
        residuals.append(res)
        mu_hat[t] = float(res.mean())
        var_hat[t] = float(res.var(ddof=1)) if len(res) > 1 else 0.0
    return ARModel(
        disturbance_id=history.disturbance_id,
        alpha=alpha,
        residuals=residuals,
        mu_hat=mu_hat,
        var_hat=var_hat,
        zero_energy=zero,
    )


def ambiguity_bounds_from_samples(
    samples: Sequence[float], delta_chi: float, delta_st: float
) -> AmbiguityBounds:
    """Confidence rectangle for (mean, variance) of i.i.d. Gaussian samples.

    Variance bounds come from the chi-square distribution of
    (n-1) * var_hat / var; mean bounds from the Student t distribution of
    sqrt(n) * (mu_hat - mu) / sqrt(var_hat). Zero sample variance collapses
    the rectangle to a point (flagged), it does not raise.
    """
    x = np.asarray(samples, dtype=float)
    n = len(x)
    if n < 3:
        raise ShapeError(f"need at least 3 samples, got {n}")
    mu_hat = float(x.mean())
    var_hat = float(x.var(ddof=1))
    if var_hat == 0.0:
        return AmbiguityBounds(
            mu_lo=mu_hat, mu_hi=mu_hat, var_lo=0.0, var_hi=0.0,
            mu_hat=mu_hat, var_hat=0.0,
            delta_chi=delta_chi, delta_st=delta_st, n=n, degenerate=True,
        )
    dof = n - 1
    var_lo = dof * var_hat / chi2_quantile(1.0 - delta_chi / 2.0, dof)
    var_hi = dof * var_hat / chi2_quantile(delta_chi / 2.0, dof)
    half = student_t_quantile(1.0 - delta_st / 2.0, dof) * math.sqrt(var_hat / n)
    return AmbiguityBounds(
        mu_lo=mu_hat - half, mu_hi=mu_hat + half, var_lo=var_lo, var_hi=var_hi,
        mu_hat=mu_hat, var_hat=var_hat,
        delta_chi=delta_chi, delta_st=delta_st, n=n,
    )


def ambiguity_bounds(
    model: ARModel, hour: int, delta_chi: float, delta_st: float
) -> AmbiguityBounds:
    """Rectangle for the residual noise of `model` at hour-of-day `hour` (0-based)."""
    if not (0 <= hour < HOURS_PER_DAY):
        raise ShapeError(f"hour must be in 0..23, got {hour}")
    return ambiguity_bounds_from_samples(model.residuals[hour], delta_chi, delta_st)


def build_box(
    disturbance_ids: Sequence[str],
    bounds_grid: Sequence[Sequence[AmbiguityBounds]],
    epsilon: float,
    beta_lo: np.ndarray | None = None,
    beta_hi: np.ndarray | None = None,
) -> UncertaintyBox:
    """Noise hyperrectangle covering every distribution in the ambiguity set.

    Each coordinate (i, s) gets edges mu_lo - z(beta_lo)*sigma_hi and
    mu_hi + z(beta_hi)*sigma_hi with z the upper-tail normal quantile. The
    default budget allocation is uniform, epsilon / (2*T*D) per side; custom
    allocations must sum to epsilon within 1e-12.
    """
    if not (0.0 < epsilon < 1.0):
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    D = len(bounds_grid)
    if D == 0 or len(disturbance_ids) != D:
        raise ShapeError("bounds grid and disturbance ids disagree")
    T = len(bounds_grid[0])
    if any(len(row) != T for row in bounds_grid):
        raise ShapeError("bounds grid rows have unequal horizon lengths")
    if beta_lo is None:
        beta_lo = np.full((D, T), epsilon / (2.0 * T * D))
    if beta_hi is None:
        beta_hi = np.full((D, T), epsilon / (2.0 * T * D))
    beta_lo = np.asarray(beta_lo, dtype=float)
    beta_hi = np.asarray(beta_hi, dtype=float)
    if beta_lo.shape != (D, T) or beta_hi.shape != (D, T):
        raise ShapeError("beta arrays must be (D, T)")

    mu_lo = np.array([[b.mu_lo for b in row] for row in bounds_grid])
    mu_hi = np.array([[b.mu_hi for b in row] for row in bounds_grid])
    sigma_hi = np.sqrt(np.array([[b.var_hi for b in row] for row in bounds_grid]))
    z_lo = np.array([[normal_quantile(1.0 - b) for b in row] for row in beta_lo])
    z_hi = np.array([[normal_quantile(1.0 - b) for b in row] for row in beta_hi])
    lower = mu_lo - z_lo * sigma_hi
    upper = mu_hi + z_hi * sigma_hi
    return UncertaintyBox(
        disturbance_ids=tuple(disturbance_ids),
        lower=lower, upper=upper,
        beta_lo=beta_lo, beta_hi=beta_hi,
        mu_lo=mu_lo, mu_hi=mu_hi, sigma_hi=sigma_hi,
        epsilon=epsilon,
    )


def stack_disturbance(
    models: Sequence[ARModel],
    forecasts: np.ndarray,
    e_hat: np.ndarray,
    horizon: int,
    start_hour: int = 0,
) -> StackedDisturbanceMap:
    """Unroll the error recursion into xi = offset + gain @ w over the horizon.

    With e_0 = e_hat (the last measured error) and e_{s+1} = a_s e_s + w_s,
    the disturbance at step s (0-based) is forecast[s] + e_{s+1}. a_s is the
    fitted coefficient at hour-of-day (start_hour + s) mod 24, i.e. the hour
    the transition originates from.
    """
    forecasts = np.asarray(forecasts, dtype=float)
    e_hat = np.asarray(e_hat, dtype=float)
    D = len(models)
    if forecasts.shape != (D, horizon):
        raise ShapeError(f"forecasts must be ({D}, {horizon}), got {forecasts.shape}")
    if e_hat.shape != (D,):
        raise ShapeError(f"e_hat must be ({D},), got {e_hat.shape}")
    T = horizon
    offset = np.zeros(D * T)
    gain = np.zeros((D * T, D * T))
    for i, model in enumerate(models):
        a = np.array([model.alpha[(start_hour + s) % HOURS_PER_DAY] for s in range(T)])
        blk = np.zeros((T, T))
        coef_ehat = np.zeros(T)
        for t in range(1, T + 1):
            prod = 1.0
            for s in range(t - 1, -1, -1):
                blk[t - 1, s] = prod
                prod *= a[s]
            coef_ehat[t - 1] = prod
        offset[i * T : (i + 1) * T] = forecasts[i] + coef_ehat * e_hat[i]
        gain[i * T : (i + 1) * T, i * T : (i + 1) * T] = blk
    return StackedDisturbanceMap(
        disturbance_ids=tuple(m.disturbance_id for m in models),
        offset=offset, gain=gain, e_hat=e_hat.copy(), horizon=T,
    )


def pearson_correlation(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError("inputs must be 1-d arrays of equal length")
    if len(x) < 3:
        raise ShapeError(f"need at least 3 samples, got {len(x)}")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateVariance("correlation undefined for constant input")
    return float(dx @ dy) / math.sqrt(sxx * syy)


# ---------------------------------------------------------------------------
# CSV and JSON interfaces


def load_history_csv(path: str, disturbance_id: str | None = None) -> DisturbanceHistory:
    """Read a history CSV with header day,hour,forecast,realization.

    Hours are labeled 1..24; days must be contiguous and complete.
    """
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip().lower() for c in header] != [
            "day", "hour", "forecast", "realization",
        ]:
            raise CsvFormatError(path, 1, "expected header day,hour,forecast,realization")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise CsvFormatError(path, lineno, f"expected 4 fields, got {len(row)}")
            try:
                day = int(row[0])
                hour = int(row[1])
                f = float(row[2])
                r = float(row[3])
            except ValueError as exc:
                raise CsvFormatError(path, lineno, str(exc)) from None
            if not (1 <= hour <= 24):
                raise CsvFormatError(path, lineno, f"hour must be 1..24, got {hour}")
            if (day, hour) in rows:
                raise CsvFormatError(path, lineno, f"duplicate (day={day}, hour={hour})")
            rows[(day, hour)] = (f, r)
    if not rows:
        raise CsvFormatError(path, 2, "no data rows")
    days = sorted({d for d, _ in rows})
    if days != list(range(days[0], days[0] + len(days))):
        raise CsvFormatError(path, 2, "days are not contiguous")
    n = len(days)
    forecasts = np.empty((n, HOURS_PER_DAY))
    realizations = np.empty((n, HOURS_PER_DAY))
    for k, day in enumerate(days):
        for hour in range(1, 25):
            if (day, hour) not in rows:
                raise CsvFormatError(path, 2, f"missing hour {hour} of day {day}")
            forecasts[k, hour - 1], realizations[k, hour - 1] = rows[(day, hour)]
    if disturbance_id is None:
        import os

        disturbance_id = os.path.splitext(os.path.basename(path))[0]
    return DisturbanceHistory(disturbance_id, forecasts, realizations)


def save_history_csv(path: str, history: DisturbanceHistory) -> None:
    """Write a history CSV in the load_history_csv format."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["day", "hour", "forecast", "realization"])
        for k in range(history.n_days):
            for t in range(HOURS_PER_DAY):
                writer.writerow(
                    [
                        k + 1,
                        t + 1,
                        repr(float(history.forecasts[k, t])),
                        repr(float(history.realizations[k, t])),
                    ]
                )


def ar_model_to_dict(model: ARModel) -> dict:
    return {
        "disturbance_id": model.disturbance_id,
        "alpha": model.alpha.tolist(),
        "residuals": [np.asarray(r).tolist() for r in model.residuals],
        "mu_hat": model.mu_hat.tolist(),
        "var_hat": model.var_hat.tolist(),
        "zero_energy": [bool(z) for z in model.zero_energy],
    }


def ar_model_from_dict(d: dict) -> ARModel:
    return ARModel(
        disturbance_id=d["disturbance_id"],
        alpha=np.asarray(d["alpha"], dtype=float),
        residuals=[np.asarray(r, dtype=float) for r in d["residuals"]],
        mu_hat=np.asarray(d["mu_hat"], dtype=float),
        var_hat=np.asarray(d["var_hat"], dtype=float),
        zero_energy=np.asarray(d["zero_energy"], dtype=bool),
    )


def bounds_to_dict(b: AmbiguityBounds) -> dict:
    return {
        "mu_lo": b.mu_lo, "mu_hi": b.mu_hi,
        "var_lo": b.var_lo, "var_hi": b.var_hi,
        "mu_hat": b.mu_hat, "var_hat": b.var_hat,
        "delta_chi": b.delta_chi, "delta_st": b.delta_st,
        "n": b.n, "degenerate": b.degenerate,
    }


def bounds_from_dict(d: dict) -> AmbiguityBounds:
    return AmbiguityBounds(**d)


def box_to_dict(box: UncertaintyBox) -> dict:
    return {
        "disturbance_ids": list(box.disturbance_ids),
        "lower": box.lower.tolist(), "upper": box.upper.tolist(),
        "beta_lo": box.beta_lo.tolist(), "beta_hi": box.beta_hi.tolist(),
        "mu_lo": box.mu_lo.tolist(), "mu_hi": box.mu_hi.tolist(),
        "sigma_hi": box.sigma_hi.tolist(),
        "epsilon": box.epsilon,
    }


def box_from_dict(d: dict) -> UncertaintyBox:
    return UncertaintyBox(
        disturbance_ids=tuple(d["disturbance_ids"]),
        lower=np.asarray(d["lower"], dtype=float),
        upper=np.asarray(d["upper"], dtype=float),
        beta_lo=np.asarray(d["beta_lo"], dtype=float),
        beta_hi=np.asarray(d["beta_hi"], dtype=float),
        mu_lo=np.asarray(d["mu_lo"], dtype=float),
        mu_hi=np.asarray(d["mu_hi"], dtype=float),
        sigma_hi=np.asarray(d["sigma_hi"], dtype=float),
        epsilon=float(d["epsilon"]),
    )
