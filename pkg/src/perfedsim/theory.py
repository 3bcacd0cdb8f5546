"""Asymptotic risk predictors.

Identity-covariance limits are closed forms in the Marchenko-Pastur Stieltjes
transform. General-covariance limits evaluate implicit spectral systems; both
reduce to the closed forms at a unit point-mass spectrum, and that reduction
is re-checked at every call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import (
    DegenerateHomogeneity,
    DomainError,
    InternalInconsistency,
    InvalidSpec,
    NoRoot,
    NonConvergence,
)
from .model import SpectralDistribution

_NEG_CLAMP = -1e-10
_NEG_RAISE = -1e-6


@dataclass(frozen=True)
class TheoryLimit:
    """Predicted asymptotic (bias, variance) with the inputs echoed back."""

    algorithm: str
    bias: float
    variance: float
    risk: float
    r: float | None = None
    sigma: float | None = None
    gamma: float | None = None
    lam: float | None = None
    alpha: float | None = None


def _clamp_nonneg(value: float, what: str) -> float:
    if value < _NEG_RAISE:
        raise InternalInconsistency(f"{what} = {value} is substantially negative")
    return 0.0 if value < 0.0 else float(value)


def _make_limit(algorithm: str, bias: float, variance: float, **inputs) -> TheoryLimit:
    bias = _clamp_nonneg(bias, f"{algorithm} predicted bias")
    variance = _clamp_nonneg(variance, f"{algorithm} predicted variance")
    return TheoryLimit(algorithm, bias, variance, bias + variance, **inputs)


def _check_rs(r: float, sigma: float) -> None:
    if not (np.isfinite(r) and r >= 0):
        raise DomainError("r must be a finite nonnegative real")
    if not (np.isfinite(sigma) and sigma >= 0):
        raise DomainError("sigma must be a finite nonnegative real")


def mp_stieltjes(lam: float, gamma: float) -> float:
    """Stieltjes transform m(-lam) of the limiting sample-covariance law.

    Closed form for the aspect ratio gamma, solving
    gamma*lam*m^2 + b*m - 1 = 0 with b = 1 - gamma + lam on the m > 0
    branch. The direct root (sqrt(D) - b)/(2*gamma*lam) subtracts nearly
    equal quantities when b > 0 and the conjugate form 2/(sqrt(D) + b)
    does so when b < 0, so the two are chosen by the sign of b.
    """
    if not (np.isfinite(lam) and lam > 0):
        raise DomainError("lam must be a positive real")
    if not (np.isfinite(gamma) and gamma > 1):
        raise DomainError("gamma must exceed 1")
    b = 1.0 - gamma + lam
    root = math.sqrt(b * b + 4.0 * gamma * lam)
    if b >= 0.0:
        return 2.0 / (root + b)
    return (root - b) / (2.0 * gamma * lam)


def mp_stieltjes_deriv(lam: float, gamma: float) -> float:
    """d/dz of the transform at z = -lam.

    Implicit differentiation of gamma*z*m^2 - (1-gamma-z)*m + 1 = 0 gives
    m' = (gamma*m^2 + m) / sqrt(discriminant); positive on the chosen branch.
    """
    m = mp_stieltjes(lam, gamma)
    b = 1.0 - gamma + lam
    return (gamma * m * m + m) / math.sqrt(b * b + 4.0 * gamma * lam)


def ftfa_limit(r: float, sigma: float, gamma: float) -> TheoryLimit:
    """Limiting (bias, variance) of fine-tuning from the global model.

    bias = r^2 (1 - 1/gamma), variance = sigma^2 / (gamma - 1). The same pair
    is the limit of the meta-learned variant for any fixed lookahead step.
    """
    _check_rs(r, sigma)
    if not (np.isfinite(gamma) and gamma > 1):
        raise DomainError("gamma must exceed 1")
    bias = r * r * (1.0 - 1.0 / gamma)
    variance = sigma * sigma / (gamma - 1.0)
    return _make_limit("ftfa", bias, variance, r=r, sigma=sigma, gamma=gamma)


def rtfa_limit(r: float, sigma: float, gamma: float, lam: float) -> TheoryLimit:
    """Limiting pair for ridge-tuning: bias r^2 lam^2 m'(-lam), variance
    sigma^2 gamma (m(-lam) - lam m'(-lam)). Also the proximal-coupling limit.
    """
    _check_rs(r, sigma)
    m = mp_stieltjes(lam, gamma)
    mp = mp_stieltjes_deriv(lam, gamma)
    bias = r * r * lam * lam * mp
    variance = sigma * sigma * gamma * (m - lam * mp)
    return _make_limit("rtfa", bias, variance, r=r, sigma=sigma, gamma=gamma, lam=lam)


def rtfa_optimal(r: float, sigma: float, gamma: float) -> tuple[float, TheoryLimit]:
    """Risk-minimizing penalty lam* = sigma^2 gamma / r^2 and its limit.

    The optimal risk sigma^2 gamma m(-lam*) is cross-checked against the
    completing-the-square closed form; disagreement is an internal error.
    sigma = 0 returns the ridgeless infimum at lam* = 0.
    """
    _check_rs(r, sigma)
    if not (np.isfinite(gamma) and gamma > 1):
        raise DomainError("gamma must exceed 1")
    if r == 0.0:
        raise DegenerateHomogeneity("lam* is infinite when r = 0")
    s2 = sigma * sigma
    r2 = r * r
    bias_free = r2 * (1.0 - 1.0 / gamma)
    risk_sq = 0.5 * (
        bias_free
        - s2
        + math.sqrt(bias_free * bias_free + s2 * s2 + 2.0 * s2 * r2 * (1.0 + 1.0 / gamma))
    )
    if sigma == 0.0:
        # risk(lam) decreases to the ridgeless value as lam -> 0+
        limit = _make_limit("rtfa", bias_free, 0.0, r=r, sigma=sigma, gamma=gamma, lam=0.0)
        if abs(risk_sq - limit.risk) > 1e-10 * max(1.0, limit.risk):
            raise InternalInconsistency("optimal-risk formulas disagree at sigma = 0")
        return 0.0, limit
    lam_star = s2 * gamma / r2
    risk_m = s2 * gamma * mp_stieltjes(lam_star, gamma)
    if abs(risk_m - risk_sq) > 1e-10 * max(1.0, abs(risk_m)):
        raise InternalInconsistency(
            f"optimal-risk formulas disagree: {risk_m} vs {risk_sq}"
        )
    limit = rtfa_limit(r, sigma, gamma, lam_star)
    if abs(limit.risk - risk_m) > 1e-10 * max(1.0, abs(risk_m)):
        raise InternalInconsistency("bias+variance at lam* disagrees with m-form risk")
    return lam_star, limit


def fedavg_limit(r: float) -> TheoryLimit:
    """Global-model-only limit: bias r^2, variance 0."""
    if not (np.isfinite(r) and r >= 0):
        raise DomainError("r must be a finite nonnegative real")
    return _make_limit("fedavg", r * r, 0.0, r=r)


def naive_limit(rho: float, sigma: float, gamma: float) -> TheoryLimit:
    """Purely local min-norm limit: the fine-tuning pair with rho in place of r."""
    base = ftfa_limit(rho, sigma, gamma)
    return TheoryLimit("naive", base.bias, base.variance, base.risk,
                       r=rho, sigma=sigma, gamma=gamma)


def naive_ridge_limit(rho: float, sigma: float, gamma: float, lam: float) -> TheoryLimit:
    base = rtfa_limit(rho, sigma, gamma, lam)
    return TheoryLimit("naive-ridge", base.bias, base.variance, base.risk,
                       r=rho, sigma=sigma, gamma=gamma, lam=lam)


def naive_ridge_optimal(rho: float, sigma: float, gamma: float) -> tuple[float, TheoryLimit]:
    lam_star, base = rtfa_optimal(rho, sigma, gamma)
    return lam_star, TheoryLimit("naive-ridge", base.bias, base.variance, base.risk,
                                 r=rho, sigma=sigma, gamma=gamma, lam=lam_star)


def ftfa_beats_fedavg(r: float, sigma: float, gamma: float) -> bool:
    """True iff sigma^2 < r^2 (gamma - 1) / gamma.

    The threshold is algebraically equivalent to comparing the two limiting
    risks; both routes are evaluated and must agree away from exact ties.
    """
    _check_rs(r, sigma)
    if not (np.isfinite(gamma) and gamma > 1):
        raise DomainError("gamma must exceed 1")
    condition = sigma * sigma < r * r * (gamma - 1.0) / gamma
    ftfa_risk = ftfa_limit(r, sigma, gamma).risk
    fedavg_risk = fedavg_limit(r).risk
    by_risks = ftfa_risk < fedavg_risk
    if condition != by_risks and abs(ftfa_risk - fedavg_risk) > 1e-12 * max(1.0, fedavg_risk):
        raise InternalInconsistency("threshold and risk comparison disagree")
    return condition


def _check_spectrum(h: SpectralDistribution, name: str) -> None:
    if np.any(h.support <= 0):
        raise DomainError(f"{name} must be supported on positive reals")


def solve_c0(h: SpectralDistribution, gamma: float) -> float:
    """Root of 1 - 1/gamma = integral dH / (1 + c0 gamma s) over c0 >= 0."""
    if not (np.isfinite(gamma) and gamma > 1):
        raise DomainError("gamma must exceed 1")
    _check_spectrum(h, "H")
    target = 1.0 - 1.0 / gamma

    def phi(c: float) -> float:
        return h.integrate(lambda s: 1.0 / (1.0 + c * gamma * s)) - target

    hi = 1.0
    while phi(hi) > 0.0:
        hi *= 2.0
        if hi > 1e15:
            raise NoRoot("no bracket for c0")
    c0 = float(optimize.brentq(phi, 0.0, hi, xtol=1e-15, rtol=1e-15, maxiter=200))
    if abs(phi(c0)) > 1e-12:
        raise NoRoot(f"c0 residual {phi(c0)} above tolerance")
    return c0


def ridgeless_limits_general(h: SpectralDistribution, g: SpectralDistribution,
                             r: float, sigma: float, gamma: float) -> TheoryLimit:
    """Min-norm interpolation limits for a general covariance spectrum H and
    signal-alignment spectrum G, via the implicit c0 system.
    """
    _check_rs(r, sigma)
    _check_spectrum(g, "G")
    bias, variance = _ridgeless_pair(h, g, r, sigma, gamma)
    point = SpectralDistribution.point_mass(1.0)
    check_b, check_v = _ridgeless_pair(point, point, r, sigma, gamma)
    ref = ftfa_limit(r, sigma, gamma)
    if abs(check_b - ref.bias) > 1e-10 * max(1.0, ref.bias) or \
       abs(check_v - ref.variance) > 1e-10 * max(1.0, ref.variance):
        raise InternalInconsistency(
            "point-mass reduction of the ridgeless predictor broke: "
            f"({check_b}, {check_v}) vs ({ref.bias}, {ref.variance})"
        )
    return _make_limit("ftfa", bias, variance, r=r, sigma=sigma, gamma=gamma)


def _ridgeless_pair(h: SpectralDistribution, g: SpectralDistribution,
                    r: float, sigma: float, gamma: float) -> tuple[float, float]:
    c0 = solve_c0(h, gamma)
    den = lambda s: (1.0 + c0 * gamma * s) ** 2
    i1h = h.integrate(lambda s: s / den(s))
    i2h = h.integrate(lambda s: s * s / den(s))
    i1g = g.integrate(lambda s: s / den(s))
    ratio = gamma * c0 * i2h / i1h
    bias = r * r * (1.0 + ratio) * i1g
    variance = sigma * sigma * ratio
    return bias, variance


@dataclass(frozen=True)
class StieltjesSolution:
    lam: float
    gamma: float
    m: float
    m_prime: float
    method: str  # "closed-form" | "fixed-point"


def solve_mn(lam: float, h: SpectralDistribution, gamma: float,
             method: str = "auto") -> StieltjesSolution:
    """m_n(-lam) for spectrum H: the positive solution of
    m = integral dH / (s(1 - gamma + gamma lam m) + lam).

    Single-atom spectra use the scaled closed form. Otherwise a 0.5-damped
    fixed point from m0 = 1/lam runs to 1e-12 and is polished by Newton so
    the derivative below survives finite-difference scrutiny.
    """
    if not (np.isfinite(lam) and lam > 0):
        raise DomainError("lam must be a positive real")
    if not (np.isfinite(gamma) and gamma > 1):
        raise DomainError("gamma must exceed 1")
    _check_spectrum(h, "H")
    if method not in ("auto", "fixed-point"):
        raise InvalidSpec(f"unknown method {method!r}")

    if method == "auto" and h.support.size == 1:
        # Sigma = s I rescales the unit-spectrum transform exactly
        s = float(h.support[0])
        m = mp_stieltjes(lam / s, gamma) / s
        m_prime = mp_stieltjes_deriv(lam / s, gamma) / (s * s)
        return StieltjesSolution(lam, gamma, m, m_prime, "closed-form")

    support = h.support
    masses = h.masses

    def f(m: float) -> float:
        u = 1.0 - gamma + gamma * lam * m
        return float(np.sum(masses / (support * u + lam)))

    m = 1.0 / lam
    converged = False
    for _ in range(100_000):
        nxt = 0.5 * m + 0.5 * f(m)
        if not np.isfinite(nxt):
            raise NonConvergence("fixed point left the finite domain")
        if abs(nxt - m) < 1e-12:
            m = nxt
            converged = True
            break
        m = nxt
    if not converged:
        raise NonConvergence("fixed point did not reach 1e-12 in 1e5 iterations")

    for _ in range(3):  # Newton polish to machine precision
        u = 1.0 - gamma + gamma * lam * m
        den = support * u + lam
        resid = m - float(np.sum(masses / den))
        fprime = 1.0 + gamma * lam * float(np.sum(masses * support / (den * den)))
        m -= resid / fprime

    u = 1.0 - gamma + gamma * lam * m
    den2 = (support * u + lam) ** 2
    i2 = float(np.sum(masses * support / den2))
    j = float(np.sum(masses / den2))
    m_prime = (gamma * m * i2 + j) / (1.0 + gamma * lam * i2)
    if m <= 0.0 or m_prime <= 0.0 or u <= 0.0:
        # the damped iteration loses contraction at small penalties and can
        # settle on a spurious root with u < 0; refuse rather than return it
        raise NonConvergence(
            f"iteration settled on a non-physical branch at lam={lam:g} "
            "(penalty too small for the pinned damping)")
    return StieltjesSolution(lam, gamma, m, m_prime, "fixed-point")


def mn1(lam: float, h: SpectralDistribution, gamma: float) -> float:
    """Companion functional m_{n,1}(-lam) entering the ridge bias."""
    sol = solve_mn(lam, h, gamma)
    u = 1.0 - gamma + gamma * lam * sol.m
    den2 = (h.support * u + lam) ** 2
    k = float(np.sum(h.masses * h.support ** 2 / den2))
    i2 = float(np.sum(h.masses * h.support / den2))
    return u * k / (1.0 + gamma * lam * i2)


def ridge_limits_general(h: SpectralDistribution, g: SpectralDistribution,
                         r: float, sigma: float, gamma: float, lam: float) -> TheoryLimit:
    """Ridge limits for general spectra via the m_n / m_{n,1} system."""
    _check_rs(r, sigma)
    _check_spectrum(g, "G")
    bias, variance = _ridge_pair(h, g, r, sigma, gamma, lam)
    point = SpectralDistribution.point_mass(1.0)
    try:
        # exercise the general fixed-point path, not the closed-form shortcut
        check_b, check_v = _ridge_pair(point, point, r, sigma, gamma, lam,
                                       method="fixed-point")
    except NonConvergence:
        check_b, check_v = _ridge_pair(point, point, r, sigma, gamma, lam)
    ref = rtfa_limit(r, sigma, gamma, lam)
    if abs(check_b - ref.bias) > 1e-8 * max(1.0, ref.bias) or \
       abs(check_v - ref.variance) > 1e-8 * max(1.0, ref.variance):
        raise InternalInconsistency(
            "point-mass reduction of the ridge predictor broke: "
            f"({check_b}, {check_v}) vs ({ref.bias}, {ref.variance})"
        )
    return _make_limit("rtfa", bias, variance, r=r, sigma=sigma, gamma=gamma, lam=lam)


def _ridge_pair(h: SpectralDistribution, g: SpectralDistribution,
                r: float, sigma: float, gamma: float, lam: float,
                method: str = "auto") -> tuple[float, float]:
    sol = solve_mn(lam, h, gamma, method=method)
    u = 1.0 - gamma + gamma * lam * sol.m
    hden2 = (h.support * u + lam) ** 2
    k = float(np.sum(h.masses * h.support ** 2 / hden2))
    i2 = float(np.sum(h.masses * h.support / hden2))
    mn1v = u * k / (1.0 + gamma * lam * i2)
    i2g = float(np.sum(g.masses * g.support / (g.support * u + lam) ** 2))
    bias = lam * lam * r * r * (1.0 + gamma * mn1v) * i2g
    # the lam^2 (not lam) factor on m' is what makes the point-mass
    # reduction land on the closed form; see the reduction check above
    variance = sigma * sigma * gamma * (1.0 - gamma + gamma * lam * lam * sol.m_prime) * k
    return bias, variance
