"""Closed-form global and personalized estimators.

Every estimator here is affine in the noise vector, which the risk module
exploits; all accept an optional response override so risk evaluation can
redraw noise without touching the stored dataset.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import (
    InvalidSpec,
    NonFiniteInput,
    NonPositiveLambda,
    SingularCoupling,
    SingularGlobalGram,
    SingularMetaGram,
)
from .model import ClientData, FederatedDataset
from .numerics import spd_solver


@dataclass(frozen=True)
class GlobalModel:
    theta: np.ndarray
    algorithm: str  # fedavg | maml | pfedme
    hyper: float | None = None


@dataclass(frozen=True)
class PersonalModel:
    client_index: int
    theta: np.ndarray
    algorithm: str  # ftfa | rtfa | maml | pfedme | naive | naive-ridge
    hyper: float | None = None


def _check_lam(lam: float) -> float:
    if not (np.isfinite(lam) and lam > 0):
        raise NonPositiveLambda(f"penalty must be a positive real, got {lam}")
    return float(lam)


def _finite(theta: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(theta)):
        raise NonFiniteInput(f"{what} produced non-finite entries")
    return theta


def _lookahead_rows(c: ClientData, alpha: float) -> np.ndarray:
    """W X with W = I - (alpha/n) X X^T, or X itself at alpha = 0."""
    if alpha == 0.0:
        return c.x
    return c.x - (alpha / c.n) * (c.gram @ c.x)


def _lookahead_sq_apply(c: ClientData, alpha: float, v: np.ndarray) -> np.ndarray:
    """W^2 v in the n-dimensional space without materializing W."""
    if alpha == 0.0:
        return v
    gv = c.gram @ v
    return v - (2.0 * alpha / c.n) * gv + (alpha / c.n) ** 2 * (c.gram @ gv)


def weighted_gram_solver(ds: FederatedDataset, alpha: float = 0.0):
    """Factorized solver for sum_j (p_j/n_j) X_j^T W_j^2 X_j, cached per alpha.

    alpha = 0 is the plain pooled weighted Gram; the two cases share one code
    path so the meta-learning system at alpha = 0 is the identical matrix.
    """
    key = ("wgram", float(alpha))
    if key not in ds._cache:
        d = ds.d
        g = np.zeros((d, d))
        for w, c in zip(ds.weights, ds.clients):
            b = _lookahead_rows(c, alpha)
            g += (w / c.n) * (b.T @ b)
        err = SingularGlobalGram if alpha == 0.0 else SingularMetaGram
        label = "pooled weighted Gram" if alpha == 0.0 else "meta Gram"
        ds._cache[key] = spd_solver(g, err, label)
    return ds._cache[key]


def _weighted_rhs(ds: FederatedDataset, alpha: float, ys) -> np.ndarray:
    rhs = np.zeros(ds.d)
    for j, (w, c) in enumerate(zip(ds.weights, ds.clients)):
        y = c.y if ys is None else ys[j]
        rhs += (w / c.n) * (c.x.T @ _lookahead_sq_apply(c, alpha, y))
    return rhs


def fedavg_global(ds: FederatedDataset, ys=None) -> GlobalModel:
    """theta0 = (sum p_j Sigma_hat_j)^{-1} sum p_j X_j^T y_j / n_j."""
    solve = weighted_gram_solver(ds, 0.0)
    theta = solve(_weighted_rhs(ds, 0.0, ys))
    return GlobalModel(_finite(theta, "fedavg global"), "fedavg")


def maml_global(ds: FederatedDataset, alpha: float, ys=None) -> GlobalModel:
    """Meta objective minimizer with one-step lookahead W_j = I - (alpha/n_j) X_j X_j^T."""
    if not np.isfinite(alpha):
        raise InvalidSpec("alpha must be a finite real")
    solve = weighted_gram_solver(ds, float(alpha))
    theta = solve(_weighted_rhs(ds, float(alpha), ys))
    return GlobalModel(_finite(theta, "meta global"), "maml", float(alpha))


def ftfa_personalize(ds: FederatedDataset, i: int, global_model: GlobalModel,
                     y=None) -> PersonalModel:
    """Min-norm interpolant closest to the global model:
    theta_i = Pi_i theta0 + X_i^+ y_i."""
    c = ds.clients[i]
    y = c.y if y is None else y
    theta = c.proj_null(global_model.theta) + c.pinv_apply(y)
    return PersonalModel(i, _finite(theta, "fine-tuned model"), "ftfa")


def maml_personalize(ds: FederatedDataset, i: int, global_model: GlobalModel,
                     y=None) -> PersonalModel:
    base = ftfa_personalize(ds, i, global_model, y)
    return PersonalModel(i, base.theta, "maml", global_model.hyper)


def rtfa_personalize(ds: FederatedDataset, i: int, global_model: GlobalModel,
                     lam: float, y=None) -> PersonalModel:
    """theta_i = (Sigma_hat_i + lam I)^{-1} (lam theta0 + X_i^T y_i / n_i)."""
    lam = _check_lam(lam)
    c = ds.clients[i]
    y = c.y if y is None else y
    theta = c.ridge_resolvent_apply(lam * global_model.theta + c.xty_over_n(y), lam)
    return PersonalModel(i, _finite(theta, "ridge-tuned model"), "rtfa", lam)


def coupling_solver(ds: FederatedDataset, lam: float):
    """Solver for Q = sum_j p_j X_j^T (X_j X_j^T + n_j lam I)^{-1} X_j.

    The Woodbury form of I - lam sum_j p_j T_j^{-1}; symmetric PSD, singular
    exactly when the pooled data cannot identify the anchor.
    """
    key = ("coupling", float(lam))
    if key not in ds._cache:
        q = np.zeros((ds.d, ds.d))
        for w, c in zip(ds.weights, ds.clients):
            s = linalg.cho_solve(c.ridge_gram_factor(lam), c.x)
            q += w * (c.x.T @ s)
        ds._cache[key] = spd_solver(q, SingularCoupling, "proximal coupling matrix")
    return ds._cache[key]


def pfedme_solve(ds: FederatedDataset, lam: float, ys=None, personal_indices=None):
    """Joint stationary point of the proximally coupled objective.

    Returns (GlobalModel, [PersonalModel]) solving
    theta_j = T_j^{-1}(X_j^T y_j / n_j + lam theta0) and
    Q theta0 = sum_j p_j T_j^{-1} X_j^T y_j / n_j.
    personal_indices restricts which personal models are materialized.
    """
    lam = _check_lam(lam)
    solve_q = coupling_solver(ds, lam)
    rhs = np.zeros(ds.d)
    for j, (w, c) in enumerate(zip(ds.weights, ds.clients)):
        y = c.y if ys is None else ys[j]
        rhs += w * (c.x.T @ linalg.cho_solve(c.ridge_gram_factor(lam), y))
    theta0 = _finite(solve_q(rhs), "proximal anchor")
    wanted = range(ds.m) if personal_indices is None else personal_indices
    personals = []
    for j in wanted:
        c = ds.clients[j]
        y = c.y if ys is None else ys[j]
        # theta_j = theta0 + X_j^T C_j^{-1} (y_j - X_j theta0), the kernel-side
        # form of T_j^{-1}(X_j^T y_j / n_j + lam theta0)
        resid = y - c.x @ theta0
        theta_j = theta0 + c.x.T @ linalg.cho_solve(c.ridge_gram_factor(lam), resid)
        personals.append(PersonalModel(j, _finite(theta_j, "proximal personal"), "pfedme", lam))
    return GlobalModel(theta0, "pfedme", lam), personals


def naive_minnorm(client: ClientData, y=None, client_index: int = -1) -> PersonalModel:
    """Purely local min-norm least squares: X^+ y."""
    y = client.y if y is None else y
    theta = client.pinv_apply(y)
    return PersonalModel(client_index, _finite(theta, "local min-norm model"), "naive")


def naive_ridge(client: ClientData, lam: float, y=None,
                client_index: int = -1) -> PersonalModel:
    """Purely local ridge: (Sigma_hat + lam I)^{-1} X^T y / n."""
    lam = _check_lam(lam)
    y = client.y if y is None else y
    theta = client.ridge_resolvent_apply(client.xty_over_n(y), lam)
    return PersonalModel(client_index, _finite(theta, "local ridge model"), "naive-ridge", lam)
