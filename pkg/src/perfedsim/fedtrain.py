"""Iterative federated training loops on the linear model.

These are the stochastic-gradient counterparts of the closed-form
estimators; deterministic full-batch configurations converge to them, which
the tests verify quantitatively.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import Diverged, InvalidSpec, NonPositiveLambda
from .model import ClientData, FederatedDataset
from .numerics import RngStream

_DIVERGE_NORM = 1e12


@dataclass
class TrainConfig:
    rounds: int = 100
    sampled_users: int | None = None  # None = full participation
    local_steps: int = 1
    batch_size: int | None = None  # None = full batch
    global_stepsize: float = 0.1
    personal_stepsize: float = 0.1
    personalization_steps: int = 0
    lam: float | None = None
    pfedme_mixing: float = 1.0
    hf_delta: float = 1e-5
    init: object = "zero"  # "zero" | explicit vector
    shared_batch: bool = False

    def validate(self) -> None:
        if self.rounds < 0 or self.local_steps < 0 or self.personalization_steps < 0:
            raise InvalidSpec("round/step counts must be nonnegative")
        if self.sampled_users is not None and self.sampled_users < 1:
            raise InvalidSpec("sampled_users must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidSpec("batch_size must be >= 1")
        if not (np.isfinite(self.global_stepsize) and self.global_stepsize > 0):
            raise InvalidSpec("global_stepsize must be positive")
        if not (np.isfinite(self.personal_stepsize) and self.personal_stepsize >= 0):
            raise InvalidSpec("personal_stepsize must be nonnegative")
        if not (0.0 < self.pfedme_mixing <= 1.0):
            raise InvalidSpec("pfedme_mixing must lie in (0, 1]")
        if not (np.isfinite(self.hf_delta) and self.hf_delta > 0):
            raise InvalidSpec("hf_delta must be positive")

    def initial(self, d: int) -> np.ndarray:
        if isinstance(self.init, str):
            if self.init != "zero":
                raise InvalidSpec(f"unknown init {self.init!r}")
            return np.zeros(d)
        vec = np.asarray(self.init, dtype=float)
        if vec.shape != (d,):
            raise InvalidSpec("init vector must have length d")
        return vec.copy()


@dataclass
class Trajectory:
    snapshots: list = field(default_factory=list)  # global iterate per round, incl. init
    mean_risks: list = field(default_factory=list)
    final_global: np.ndarray | None = None
    final_personals: list | None = None


def local_gradient(client: ClientData, theta: np.ndarray, batch_indices) -> np.ndarray:
    """(1/|b|) sum_{k in b} x_k (x_k^T theta - y_k); partial batches divide
    by their actual size."""
    idx = np.asarray(batch_indices)
    if idx.size == 0:
        raise InvalidSpec("batch must be nonempty")
    xb = client.x[idx]
    return xb.T @ (xb @ theta - client.y[idx]) / idx.size


def _guard(theta: np.ndarray, context: str) -> None:
    norm = float(np.linalg.norm(theta))
    if not np.isfinite(norm) or norm > _DIVERGE_NORM:
        raise Diverged(f"{context}: iterate norm {norm:.3e} exceeded {_DIVERGE_NORM:.0e}; "
                       "step size likely too large")


def _mean_risk(ds: FederatedDataset, theta: np.ndarray) -> float:
    total = 0.0
    for w, c in zip(ds.weights, ds.clients):
        resid = c.x @ theta - c.y
        total += w * float(resid @ resid) / (2.0 * c.n)
    return total


def _step_batch(stream: RngStream | None, n: int, b: int | None) -> np.ndarray:
    """One SGM batch: the full index set when b covers it (no draw), else a
    sorted uniform draw without replacement."""
    if b is None or b >= n:
        return np.arange(n)
    if stream is None:
        raise InvalidSpec("stochastic batches require a stream")
    return stream.choice_without_replacement(n, b)


def _epoch_batches(stream: RngStream | None, n: int, b: int | None):
    """ceil(n/b) batches covering a fresh permutation; full batch = [all]."""
    if b is None or b >= n:
        yield np.arange(n)
        return
    if stream is None:
        raise InvalidSpec("stochastic batches require a stream")
    perm = stream.permutation(n)
    for lo in range(0, n, b):
        yield np.sort(perm[lo:lo + b])


def _sample_clients(stream: RngStream, m: int, d_users: int | None) -> np.ndarray:
    if d_users is None or d_users >= m:
        return np.arange(m)
    return stream.choice_without_replacement(m, d_users)


def _server_average(ds: FederatedDataset, sampled, locals_) -> np.ndarray:
    n_tot = float(sum(ds.clients[j].n for j in sampled))
    out = np.zeros(ds.d)
    for j, theta_j in zip(sampled, locals_):
        out += (ds.clients[j].n / n_tot) * theta_j
    return out


def fedavg_train(ds: FederatedDataset, cfg: TrainConfig, stream: RngStream) -> Trajectory:
    """Sampled-client rounds of K local SGM steps, n-weighted server average."""
    cfg.validate()
    if cfg.sampled_users is not None and cfg.sampled_users > ds.m:
        raise InvalidSpec("sampled_users exceeds the client count")
    theta = cfg.initial(ds.d)
    traj = Trajectory([theta.copy()], [_mean_risk(ds, theta)])
    for _ in range(cfg.rounds):
        sampled = _sample_clients(stream, ds.m, cfg.sampled_users)
        locals_ = []
        for j in sampled:
            c = ds.clients[j]
            tj = theta.copy()
            for _ in range(cfg.local_steps):
                batch = _step_batch(stream, c.n, cfg.batch_size)
                tj -= cfg.global_stepsize * local_gradient(c, tj, batch)
            locals_.append(tj)
        theta = _server_average(ds, sampled, locals_)
        _guard(theta, "fedavg round")
        traj.snapshots.append(theta.copy())
        traj.mean_risks.append(_mean_risk(ds, theta))
    traj.final_global = theta
    return traj


def _personal_sgm(global_theta, client: ClientData, cfg: TrainConfig,
                  stream: RngStream | None, lam: float | None,
                  history: list | None = None) -> np.ndarray:
    """P epochs of SGM from the global warm start; lam recenters the gradient."""
    theta = np.asarray(getattr(global_theta, "theta", global_theta), dtype=float).copy()
    anchor = theta.copy()
    if history is not None:
        history.append(theta.copy())
    for _ in range(cfg.personalization_steps):
        for batch in _epoch_batches(stream, client.n, cfg.batch_size):
            g = local_gradient(client, theta, batch)
            if lam is not None:
                g = g + lam * (theta - anchor)
            theta -= cfg.personal_stepsize * g
        _guard(theta, "personalization epoch")
        if history is not None:
            history.append(theta.copy())
    return theta


def ftfa_train(global_theta, client: ClientData, cfg: TrainConfig,
               stream: RngStream | None = None, history: list | None = None) -> np.ndarray:
    cfg.validate()
    return _personal_sgm(global_theta, client, cfg, stream, None, history)


def rtfa_train(global_theta, client: ClientData, cfg: TrainConfig,
               stream: RngStream | None = None, history: list | None = None) -> np.ndarray:
    cfg.validate()
    if cfg.lam is None or not (np.isfinite(cfg.lam) and cfg.lam > 0):
        raise NonPositiveLambda("rtfa_train requires a positive lam in the config")
    return _personal_sgm(global_theta, client, cfg, stream, float(cfg.lam), history)


def local_train(client: ClientData, cfg: TrainConfig, stream: RngStream | None = None,
                history: list | None = None) -> np.ndarray:
    """Plain local SGM from zero init, local_steps epochs."""
    cfg.validate()
    theta = np.zeros(client.d)
    if history is not None:
        history.append(theta.copy())
    for _ in range(cfg.local_steps):
        for batch in _epoch_batches(stream, client.n, cfg.batch_size):
            theta -= cfg.personal_stepsize * local_gradient(client, theta, batch)
        _guard(theta, "local epoch")
        if history is not None:
            history.append(theta.copy())
    return theta


def maml_train(ds: FederatedDataset, cfg: TrainConfig, stream: RngStream,
               variant: str = "first-order") -> Trajectory:
    """Meta-training with a one-step lookahead per local step.

    first-order uses the lookahead gradient as the meta-gradient; hessian-free
    multiplies by (I - alpha H) with H approximated by central differences of
    the batch gradient.
    """
    cfg.validate()
    if variant not in ("first-order", "hessian-free"):
        raise InvalidSpec(f"unknown variant {variant!r}")
    if cfg.sampled_users is not None and cfg.sampled_users > ds.m:
        raise InvalidSpec("sampled_users exceeds the client count")
    alpha = cfg.personal_stepsize
    theta = cfg.initial(ds.d)
    traj = Trajectory([theta.copy()], [_mean_risk(ds, theta)])
    for _ in range(cfg.rounds):
        sampled = _sample_clients(stream, ds.m, cfg.sampled_users)
        locals_ = []
        for j in sampled:
            c = ds.clients[j]
            tj = theta.copy()
            for _ in range(cfg.local_steps):
                b1 = _step_batch(stream, c.n, cfg.batch_size)
                b2 = b1 if cfg.shared_batch else _step_batch(stream, c.n, cfg.batch_size)
                g1 = local_gradient(c, tj, b1)
                w = tj - alpha * g1
                meta = local_gradient(c, w, b2)
                if variant == "hessian-free":
                    meta = meta - alpha * _hessian_product(c, tj, b1, meta, cfg.hf_delta)
                tj -= cfg.global_stepsize * meta
            locals_.append(tj)
        theta = _server_average(ds, sampled, locals_)
        _guard(theta, "meta round")
        traj.snapshots.append(theta.copy())
        traj.mean_risks.append(_mean_risk(ds, theta))
    traj.final_global = theta
    traj.final_personals = [
        _personal_sgm(theta, c, cfg, stream, None) for c in ds.clients
    ]
    return traj


def _hessian_product(client: ClientData, theta: np.ndarray, batch,
                     v: np.ndarray, delta: float) -> np.ndarray:
    gp = local_gradient(client, theta + delta * v, batch)
    gm = local_gradient(client, theta - delta * v, batch)
    return (gp - gm) / (2.0 * delta)


def pfedme_train(ds: FederatedDataset, cfg: TrainConfig, stream: RngStream) -> Trajectory:
    """Proximal rounds: exact inner batch-ridge argmin, outer envelope step
    theta <- theta - eta*lam*(theta - theta_i), mixed server average."""
    cfg.validate()
    if cfg.lam is None or not (np.isfinite(cfg.lam) and cfg.lam > 0):
        raise NonPositiveLambda("pfedme_train requires a positive lam in the config")
    if cfg.sampled_users is not None and cfg.sampled_users > ds.m:
        raise InvalidSpec("sampled_users exceeds the client count")
    lam = float(cfg.lam)
    theta = cfg.initial(ds.d)
    personals = [theta.copy() for _ in range(ds.m)]
    traj = Trajectory([theta.copy()], [_mean_risk(ds, theta)])
    for _ in range(cfg.rounds):
        sampled = _sample_clients(stream, ds.m, cfg.sampled_users)
        locals_ = []
        for j in sampled:
            c = ds.clients[j]
            tj = theta.copy()
            for _ in range(cfg.local_steps):
                batch = _step_batch(stream, c.n, cfg.batch_size)
                prox = _batch_prox(c, tj, batch, lam)
                personals[j] = prox
                tj -= cfg.global_stepsize * lam * (tj - prox)
            locals_.append(tj)
        avg = _server_average(ds, sampled, locals_)
        theta = (1.0 - cfg.pfedme_mixing) * theta + cfg.pfedme_mixing * avg
        _guard(theta, "proximal round")
        traj.snapshots.append(theta.copy())
        traj.mean_risks.append(_mean_risk(ds, theta))
    traj.final_global = theta
    traj.final_personals = personals
    return traj


def _batch_prox(client: ClientData, anchor: np.ndarray, batch, lam: float) -> np.ndarray:
    """argmin over theta of (1/2|b|)||X_b theta - y_b||^2 + (lam/2)||theta - anchor||^2,
    solved exactly in the |b| x |b| kernel space."""
    idx = np.asarray(batch)
    xb = client.x[idx]
    resid = client.y[idx] - xb @ anchor
    cb = xb @ xb.T + idx.size * lam * np.eye(idx.size)
    return anchor + xb.T @ linalg.cho_solve(linalg.cho_factor(cb), resid)
