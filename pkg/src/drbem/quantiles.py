"""High-accuracy CDFs and inverse CDFs for chi-square, Student t, and normal.

Quantiles are computed by monotone bracketing plus bisection on CDFs built
from series / continued-fraction evaluations of the regularized incomplete
gamma and beta functions. No statistics library is used here, so the module
can be validated against fully independent integration oracles.

Absolute quantile tolerance: 1e-9.
"""

from __future__ import annotations

import math

_QUANTILE_TOL = 1e-9
_CF_EPS = 3e-16
_CF_TINY = 1e-300
_MAX_ITER = 500


class DomainError(ValueError):
    """Argument outside the mathematical domain of the function."""


def _reg_gamma_series(a: float, x: float) -> float:
    # lower regularized incomplete gamma P(a, x) by power series, for x < a + 1
    term = 1.0 / a
    total = term
    denom = a
    for _ in range(_MAX_ITER):
        denom += 1.0
        term *= x / denom
        total += term
        if abs(term) < abs(total) * _CF_EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))

def _reg_gamma_cf(a: float, x: float) -> float:
    # upper regularized incomplete gamma Q(a, x) by Lentz continued fraction,
    # for x >= a + 1
    b = x + 1.0 - a
    c = 1.0 / _CF_TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = b + an / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))

def reg_gamma_p(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x) for a > 0, x >= 0."""
    if a <= 0.0:
        raise DomainError(f"gamma shape must be positive, got {a}")
    if x < 0.0:
        raise DomainError(f"gamma argument must be nonnegative, got {x}")
    if x == 0.0:
        return 0.0
    if x < a + 1.0:
        return _reg_gamma_series(a, x)
    return 1.0 - _reg_gamma_cf(a, x)

def _beta_cf(a: float, b: float, x: float) -> float:
    # Lentz continued fraction for the incomplete beta function
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            break
    return h

def reg_inc_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) for a, b > 0, x in [0, 1]."""
    if a <= 0.0 or b <= 0.0:
        raise DomainError(f"beta shapes must be positive, got ({a}, {b})")
    if x < 0.0 or x > 1.0:
        raise DomainError(f"beta argument must lie in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    # use the representation that converges fastest
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b

def chi2_cdf(x: float, dof: int) -> float:
    """CDF of the chi-square distribution with `dof` degrees of freedom."""
    _check_dof(dof)
    if x <= 0.0:
        return 0.0
    return reg_gamma_p(dof / 2.0, x / 2.0)

def student_t_cdf(x: float, dof: int) -> float:
    """CDF of the Student t distribution with `dof` degrees of freedom."""
    _check_dof(dof)
    if x == 0.0:
        return 0.5
    tail = 0.5 * reg_inc_beta(dof / 2.0, 0.5, dof / (dof + x * x))
    return 1.0 - tail if x > 0.0 else tail

def normal_cdf(x: float) -> float:
    """Standard normal CDF."""
    return 0.5 * math.erfc(-x / math.sqrt(2.0))

def _check_dof(dof: int) -> None:
    if int(dof) != dof or dof < 1:
        raise DomainError(f"degrees of freedom must be a positive integer, got {dof}")

def _check_prob(p: float) -> None:
    if not (0.0 < p < 1.0):
        raise DomainError(f"probability must lie strictly in (0, 1), got {p}")

def _bisect(cdf, p: float, lo: float, hi: float) -> float:
    # cdf monotone increasing with cdf(lo) <= p <= cdf(hi)
    for _ in range(200):
        if hi - lo <= _QUANTILE_TOL:
            break
        mid = 0.5 * (lo + hi)
        if cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)

def chi2_quantile(p: float, dof: int) -> float:
    """Inverse chi-square CDF, absolute tolerance 1e-9."""
    _check_prob(p)
    _check_dof(dof)
    hi = float(dof) + 10.0
    while chi2_cdf(hi, dof) < p:
        hi *= 2.0
    return _bisect(lambda x: chi2_cdf(x, dof), p, 0.0, hi)

def student_t_quantile(p: float, dof: int) -> float:
    """Inverse Student t CDF, absolute tolerance 1e-9."""
    _check_prob(p)
    _check_dof(dof)
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -student_t_quantile(1.0 - p, dof)
    hi = 1.0
    while student_t_cdf(hi, dof) < p:
        hi *= 2.0
    return _bisect(lambda x: student_t_cdf(x, dof), p, 0.0, hi)

def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF, absolute tolerance 1e-9."""
    _check_prob(p)
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -normal_quantile(1.0 - p)
    hi = 1.0
    while normal_cdf(hi) < p:
        hi *= 2.0
    return _bisect(normal_cdf, p, 0.0, hi)
