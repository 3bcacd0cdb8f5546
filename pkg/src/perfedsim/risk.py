"""Exact conditional risk per client, plus a Monte Carlo oracle.

Every estimator is affine in the stacked noise: theta_hat = mean_part +
sum_j K_j xi_j with K_j a d x n_j map. Conditional on (X, theta*):
bias = ||Sigma^{1/2}(mean_part - theta_i*)||^2 and the variance splits into
(i) the global-noise quadratic summed over clients, (ii) twice the cross
term between client i's global and local noise paths, (iii) the local
quadratic. The traces are evaluated on tall-skinny factors only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import InvalidSpec, NumericalInconsistency
from .estimators import (
    coupling_solver,
    fedavg_global,
    ftfa_personalize,
    maml_global,
    maml_personalize,
    naive_minnorm,
    naive_ridge,
    pfedme_solve,
    rtfa_personalize,
    weighted_gram_solver,
    _check_lam,
    _lookahead_sq_apply,
)
from .model import ClientData, FederatedDataset
from .numerics import SpdFactor

_NEG_CLAMP = -1e-10
_NEG_RAISE = -1e-6


@dataclass(frozen=True)
class RiskReport:
    client_index: int
    algorithm: str
    bias: float
    variance: float
    risk: float
    variance_terms: tuple[float, float, float] | None = None
    se: float | None = None


def _clamped(value: float, what: str) -> float:
    if value < _NEG_RAISE:
        raise NumericalInconsistency(f"{what} = {value} is substantially negative")
    return 0.0 if value < 0.0 else float(value)


def _report(i: int, algorithm: str, bias: float, terms, se=None) -> RiskReport:
    bias = _clamped(bias, f"{algorithm} bias")
    variance = _clamped(float(terms[0] + terms[1] + terms[2]), f"{algorithm} variance")
    return RiskReport(i, algorithm, bias, variance, bias + variance,
                      (float(terms[0]), float(terms[1]), float(terms[2])), se)


def _pinv_matrix(c: ClientData) -> np.ndarray:
    """X^+ as an explicit d x n map (rank-truncated)."""
    u, s, vt = c.svd
    if s.size == 0:
        return np.zeros((c.d, c.n))
    return (vt.T / s) @ u.T


def _cross(sf: SpdFactor, a: np.ndarray, b: np.ndarray) -> float:
    """tr(a^T Sigma b) for d x n factors a, b."""
    return float(np.sum(a * sf.apply(b)))


def _hetero_rhs(ds: FederatedDataset, i: int) -> np.ndarray:
    """h = sum_j (p_j/n_j) X_j^T X_j (theta_j* - theta_i*)."""
    target = ds.clients[i].theta_star
    h = np.zeros(ds.d)
    for w, c in zip(ds.weights, ds.clients):
        delta = c.theta_star - target
        if np.any(delta):
            h += (w / c.n) * (c.x.T @ (c.x @ delta))
    return h


def exact_ftfa_risk(ds: FederatedDataset, i: int) -> RiskReport:
    ci = ds.clients[i]
    sf = ci.sigma_factor
    solve = weighted_gram_solver(ds, 0.0)
    bias = sf.quad(ci.proj_null(solve(_hetero_rhs(ds, i))))
    k_loc = _pinv_matrix(ci)
    term_i = 0.0
    term_ii = 0.0
    for j, (w, c) in enumerate(zip(ds.weights, ds.clients)):
        sig = c.spec.sigma
        if sig == 0.0 and j != i:
            continue
        kg = ci.proj_null(solve(c.x.T)) * (w / c.n)
        if sig != 0.0:
            term_i += sig * sig * sf.quad_frobenius(kg)
        if j == i and sig != 0.0:
            term_ii = 2.0 * sig * sig * _cross(sf, kg, k_loc)
    sig_i = ci.spec.sigma
    term_iii = sig_i * sig_i * sf.quad_frobenius(k_loc) if sig_i != 0.0 else 0.0
    return _report(i, "ftfa", bias, (term_i, term_ii, term_iii))


def exact_fedavg_risk(ds: FederatedDataset, i: int) -> RiskReport:
    ci = ds.clients[i]
    sf = ci.sigma_factor
    solve = weighted_gram_solver(ds, 0.0)
    bias = sf.quad(solve(_hetero_rhs(ds, i)))
    term_i = 0.0
    for w, c in zip(ds.weights, ds.clients):
        sig = c.spec.sigma
        if sig == 0.0:
            continue
        kg = solve(c.x.T) * (w / c.n)
        term_i += sig * sig * sf.quad_frobenius(kg)
    return _report(i, "fedavg", bias, (term_i, 0.0, 0.0))


def exact_rtfa_risk(ds: FederatedDataset, i: int, lam: float) -> RiskReport:
    lam = _check_lam(lam)
    ci = ds.clients[i]
    sf = ci.sigma_factor
    solve = weighted_gram_solver(ds, 0.0)
    mean_dev = lam * ci.ridge_resolvent_apply(solve(_hetero_rhs(ds, i)), lam)
    bias = sf.quad(mean_dev)
    k_loc = ci.ridge_resolvent_apply(ci.x.T, lam) / ci.n
    term_i = 0.0
    term_ii = 0.0
    for j, (w, c) in enumerate(zip(ds.weights, ds.clients)):
        sig = c.spec.sigma
        if sig == 0.0 and j != i:
            continue
        kg = lam * (w / c.n) * ci.ridge_resolvent_apply(solve(c.x.T), lam)
        if sig != 0.0:
            term_i += sig * sig * sf.quad_frobenius(kg)
        if j == i and sig != 0.0:
            term_ii = 2.0 * sig * sig * _cross(sf, kg, k_loc)
    sig_i = ci.spec.sigma
    term_iii = sig_i * sig_i * sf.quad_frobenius(k_loc) if sig_i != 0.0 else 0.0
    return _report(i, "rtfa", bias, (term_i, term_ii, term_iii))


def exact_maml_risk(ds: FederatedDataset, i: int, alpha: float) -> RiskReport:
    ci = ds.clients[i]
    sf = ci.sigma_factor
    alpha = float(alpha)
    solve = weighted_gram_solver(ds, alpha)
    target = ci.theta_star
    h = np.zeros(ds.d)
    for w, c in zip(ds.weights, ds.clients):
        delta = c.theta_star - target
        if np.any(delta):
            h += (w / c.n) * (c.x.T @ _lookahead_sq_apply(c, alpha, c.x @ delta))
    bias = sf.quad(ci.proj_null(solve(h)))
    k_loc = _pinv_matrix(ci)
    term_i = 0.0
    term_ii = 0.0
    for j, (w, c) in enumerate(zip(ds.weights, ds.clients)):
        sig = c.spec.sigma
        if sig == 0.0 and j != i:
            continue
        # K_j = Pi_i G^{-1} (p_j/n_j) X_j^T W_j^2, as a d x n factor
        kg = ci.proj_null(solve(_lookahead_sq_apply(c, alpha, c.x).T)) * (w / c.n)
        if sig != 0.0:
            term_i += sig * sig * sf.quad_frobenius(kg)
        if j == i and sig != 0.0:
            term_ii = 2.0 * sig * sig * _cross(sf, kg, k_loc)
    sig_i = ci.spec.sigma
    term_iii = sig_i * sig_i * sf.quad_frobenius(k_loc) if sig_i != 0.0 else 0.0
    return _report(i, "maml", bias, (term_i, term_ii, term_iii))


def exact_pfedme_risk(ds: FederatedDataset, i: int, lam: float) -> RiskReport:
    lam = _check_lam(lam)
    ci = ds.clients[i]
    sf = ci.sigma_factor
    qsolve = coupling_solver(ds, lam)
    anchor = ds.theta0_star
    s_vec = np.zeros(ds.d)
    for w, c in zip(ds.weights, ds.clients):
        delta = c.theta_star - anchor
        if np.any(delta):
            # T_j^{-1} Sigma_hat_j delta = X_j^T C_j^{-1} X_j delta
            s_vec += w * (c.x.T @ linalg.cho_solve(c.ridge_gram_factor(lam), c.x @ delta))
    mean_dev = lam * ci.ridge_resolvent_apply(anchor - ci.theta_star + qsolve(s_vec), lam)
    bias = sf.quad(mean_dev)
    k_loc = ci.ridge_resolvent_apply(ci.x.T, lam) / ci.n
    term_i = 0.0
    term_ii = 0.0
    for j, (w, c) in enumerate(zip(ds.weights, ds.clients)):
        sig = c.spec.sigma
        if sig == 0.0 and j != i:
            continue
        # K_j = lam T_i^{-1} Q^{-1} p_j X_j^T C_j^{-1}
        nj = linalg.cho_solve(c.ridge_gram_factor(lam), c.x).T
        kg = lam * w * ci.ridge_resolvent_apply(qsolve(nj), lam)
        if sig != 0.0:
            term_i += sig * sig * sf.quad_frobenius(kg)
        if j == i and sig != 0.0:
            term_ii = 2.0 * sig * sig * _cross(sf, kg, k_loc)
    sig_i = ci.spec.sigma
    term_iii = sig_i * sig_i * sf.quad_frobenius(k_loc) if sig_i != 0.0 else 0.0
    return _report(i, "pfedme", bias, (term_i, term_ii, term_iii))


def exact_naive_risks(client: ClientData, lam: float | None = None,
                      client_index: int = -1) -> RiskReport:
    """Purely local estimators: min-norm (lam None) or ridge."""
    sf = client.sigma_factor
    sig = client.spec.sigma
    if lam is None:
        bias = sf.quad(client.proj_null(client.theta_star))
        k_loc = _pinv_matrix(client)
        tag = "naive"
    else:
        lam = _check_lam(lam)
        bias = lam * lam * sf.quad(client.ridge_resolvent_apply(client.theta_star, lam))
        k_loc = client.ridge_resolvent_apply(client.x.T, lam) / client.n
        tag = "naive-ridge"
    term_iii = sig * sig * sf.quad_frobenius(k_loc) if sig != 0.0 else 0.0
    return _report(client_index, tag, bias, (0.0, 0.0, term_iii))


def mc_risk(algorithm: str, ds: FederatedDataset, i: int, noise_redraws: int,
            stream, lam: float | None = None, alpha: float | None = None) -> RiskReport:
    """Monte Carlo oracle: redraw the noise conditional on (X, theta*),
    recompute the estimator through its public code path, and decompose the
    sample risk into bias of the mean estimator plus covariance trace.
    """
    if noise_redraws < 2:
        raise InvalidSpec("noise_redraws must be at least 2")
    ci = ds.clients[i]
    sf = ci.sigma_factor
    means = [c.x @ c.theta_star for c in ds.clients]
    rows = np.empty((noise_redraws, ds.d))
    for t in range(noise_redraws):
        ys = [mu + c.spec.sigma * stream.standard_normal(c.n)
              for mu, c in zip(means, ds.clients)]
        theta = _estimate(algorithm, ds, i, ys, lam, alpha)
        rows[t] = sf.sqrt_apply(theta)
    center = sf.sqrt_apply(ci.theta_star)
    errs = np.sum((rows - center) ** 2, axis=1)
    mean_row = rows.mean(axis=0)
    bias = float(np.sum((mean_row - center) ** 2))
    variance = float(np.mean(np.sum((rows - mean_row) ** 2, axis=1)))
    se = float(np.std(errs, ddof=1) / np.sqrt(noise_redraws))
    bias = _clamped(bias, "mc bias")
    variance = _clamped(variance, "mc variance")
    return RiskReport(i, algorithm, bias, variance, bias + variance, None, se)


def _estimate(algorithm: str, ds: FederatedDataset, i: int, ys,
              lam, alpha) -> np.ndarray:
    if algorithm == "ftfa":
        return ftfa_personalize(ds, i, fedavg_global(ds, ys), y=ys[i]).theta
    if algorithm == "rtfa":
        if lam is None:
            raise InvalidSpec("rtfa requires lam")
        return rtfa_personalize(ds, i, fedavg_global(ds, ys), lam, y=ys[i]).theta
    if algorithm == "maml":
        if alpha is None:
            raise InvalidSpec("maml requires alpha")
        return maml_personalize(ds, i, maml_global(ds, alpha, ys), y=ys[i]).theta
    if algorithm == "pfedme":
        if lam is None:
            raise InvalidSpec("pfedme requires lam")
        _, personals = pfedme_solve(ds, lam, ys, personal_indices=[i])
        return personals[0].theta
    if algorithm == "fedavg":
        return fedavg_global(ds, ys).theta
    if algorithm == "naive":
        return naive_minnorm(ds.clients[i], y=ys[i], client_index=i).theta
    if algorithm == "naive-ridge":
        if lam is None:
            raise InvalidSpec("naive-ridge requires lam")
        return naive_ridge(ds.clients[i], lam, y=ys[i], client_index=i).theta
    raise InvalidSpec(f"unknown algorithm {algorithm!r}")
