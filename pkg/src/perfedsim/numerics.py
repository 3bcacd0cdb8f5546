"""Deterministic sampling and the dense linear-algebra kernels used everywhere.

All randomness flows through counter-based Philox streams so that trials are
reproducible independent of execution order or parallelism.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import InvalidSpec, NonFiniteInput, NonPositiveLambda, NumericalInconsistency

# Singular values below RANK_TOL * s_max are treated as zero throughout.
RANK_TOL = 1e-10

_MASK64 = (1 << 64) - 1


class RngStream:
    """One independent random stream, addressed by (master_seed, substream_id).

    Philox is counter-based: the 128-bit key is set directly from the two ids,
    so streams with distinct ids are independent and a given stream produces
    bit-identical draws on every platform regardless of what other streams did.
    Instances are stateful and must not be shared across concurrent tasks.
    """

    def __init__(self, master_seed: int, substream_id: int):
        if master_seed < 0 or substream_id < 0:
            raise InvalidSpec("stream ids must be nonnegative integers")
        self.master_seed = int(master_seed)
        self.substream_id = int(substream_id)
        key = np.array([master_seed & _MASK64, substream_id & _MASK64], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        # Sorted so that downstream summation order is canonical: the same set
        # of indices always produces the same floating-point result.
        return np.sort(self._gen.choice(n, size=k, replace=False))

    def __repr__(self) -> str:  # pragma: no cover
        return f"RngStream(master_seed={self.master_seed}, substream_id={self.substream_id})"


def substream(master_seed: int, trial_index: int) -> RngStream:
    """Derive the independent stream for one trial."""
    return RngStream(master_seed, trial_index)


class SpdFactor:
    """Eigendecomposition of a symmetric positive-definite covariance.

    Stored as eigenvalues (sorted descending, all > 0) plus an optional
    orthonormal basis; basis None means the eigenbasis is the standard one.
    """

    def __init__(self, eigenvalues, basis: np.ndarray | None = None):
        eig = np.asarray(eigenvalues, dtype=float)
        if eig.ndim != 1 or eig.size == 0:
            raise InvalidSpec("eigenvalues must be a nonempty 1-d array")
        if not np.all(np.isfinite(eig)):
            raise NonFiniteInput("eigenvalues must be finite")
        if np.any(eig <= 0):
            raise InvalidSpec("eigenvalues must be strictly positive")
        if np.any(np.diff(eig) > 0):
            raise InvalidSpec("eigenvalues must be sorted descending")
        self.eigenvalues = eig
        self.d = eig.size
        if basis is not None:
            basis = np.asarray(basis, dtype=float)
            if basis.shape != (self.d, self.d):
                raise InvalidSpec("basis must be d x d")
            if not np.all(np.isfinite(basis)):
                raise NonFiniteInput("basis must be finite")
            err = np.abs(basis.T @ basis - np.eye(self.d)).max()
            if err > 1e-10:
                raise InvalidSpec(f"basis not orthonormal (max deviation {err:.2e})")
        self.basis = basis

    @classmethod
    def identity(cls, d: int) -> "SpdFactor":
        if d < 1:
            raise InvalidSpec("dimension must be positive")
        return cls(np.ones(d))

    @property
    def is_identity(self) -> bool:
        return self.basis is None and bool(np.all(self.eigenvalues == 1.0))

    def apply(self, m: np.ndarray) -> np.ndarray:
        """Sigma @ m for a vector or (d, k) matrix."""
        if self.basis is None:
            if m.ndim == 1:
                return self.eigenvalues * m
            return self.eigenvalues[:, None] * m
        q = self.basis
        if m.ndim == 1:
            return q @ (self.eigenvalues * (q.T @ m))
        return q @ (self.eigenvalues[:, None] * (q.T @ m))

    def sqrt_apply(self, m: np.ndarray) -> np.ndarray:
        """Sigma^{1/2} @ m for a vector or (d, k) matrix."""
        root = np.sqrt(self.eigenvalues)
        if self.basis is None:
            if m.ndim == 1:
                return root * m
            return root[:, None] * m
        q = self.basis
        if m.ndim == 1:
            return q @ (root * (q.T @ m))
        return q @ (root[:, None] * (q.T @ m))

    def sqrt_apply_rows(self, z: np.ndarray) -> np.ndarray:
        """Rows of z mapped through Sigma^{1/2} (i.e. z @ Sigma^{1/2})."""
        root = np.sqrt(self.eigenvalues)
        if self.basis is None:
            return z * root[None, :]
        q = self.basis
        return ((z @ q) * root[None, :]) @ q.T

    def quad(self, v: np.ndarray) -> float:
        """v^T Sigma v, evaluated as a squared norm so it is nonnegative."""
        w = self.sqrt_apply(v)
        return float(w @ w)

    def quad_frobenius(self, m: np.ndarray) -> float:
        """tr(M^T Sigma M) for a (d, k) matrix, via || Sigma^{1/2} M ||_F^2."""
        w = self.sqrt_apply(m)
        return float(np.sum(w * w))

    def matrix(self) -> np.ndarray:
        """Dense Sigma; meant for small-instance tests."""
        if self.basis is None:
            return np.diag(self.eigenvalues)
        return (self.basis * self.eigenvalues[None, :]) @ self.basis.T

    def trace(self) -> float:
        return float(self.eigenvalues.sum())


def sample_gaussian_rows(stream: RngStream, n: int, sigma_factor: SpdFactor) -> np.ndarray:
    """n rows of Sigma^{1/2} z with z standard normal."""
    if n < 1:
        raise InvalidSpec("n must be >= 1")
    z = stream.standard_normal((n, sigma_factor.d))
    return sigma_factor.sqrt_apply_rows(z)


def sample_sphere(stream: RngStream, center: np.ndarray, radius: float) -> np.ndarray:
    """Uniform draw from the sphere of given radius about center."""
    if radius < 0:
        raise InvalidSpec("radius must be nonnegative")
    center = np.asarray(center, dtype=float)
    if radius == 0.0:
        return center.copy()
    g = stream.standard_normal(center.size)
    norm = np.linalg.norm(g)
    while norm == 0.0:  # probability-zero event, but the contract requires a resample
        g = stream.standard_normal(center.size)
        norm = np.linalg.norm(g)
    return center + (radius / norm) * g


def _check_finite(name: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteInput(f"{name}: input contains NaN or infinity")


def min_norm_solve(a: np.ndarray, b: np.ndarray, tol: float = RANK_TOL) -> np.ndarray:
    """Minimum-l2-norm least-squares solution of A theta = b.

    Singular values below tol * s_max are treated as zero.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_finite("min_norm_solve", a, b)
    if tol <= 0:
        raise InvalidSpec("tol must be positive")
    theta, _, _, _ = np.linalg.lstsq(a, b, rcond=tol)
    return theta


def ridge_solve(g: np.ndarray, rhs: np.ndarray, lam: float) -> np.ndarray:
    """Solve (G + lambda I) theta = rhs with G symmetric PSD, by Cholesky."""
    g = np.asarray(g, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    _check_finite("ridge_solve", g, rhs)
    if lam <= 0:
        raise NonPositiveLambda("ridge_solve requires lambda > 0")
    d = g.shape[0]
    t = g + lam * np.eye(d)
    try:
        factor = cho_factor(t, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - PSD + lam > 0 should not fail
        raise NumericalInconsistency(f"Cholesky failed on G + lambda I: {exc}") from exc
    theta = cho_solve(factor, rhs, check_finite=False)
    # One step of iterative refinement keeps the residual at the contract level
    # even for ill-conditioned G.
    resid = rhs - t @ theta
    theta = theta + cho_solve(factor, resid, check_finite=False)
    resid = rhs - t @ theta
    scale = max(np.linalg.norm(rhs), 1e-300)
    if np.linalg.norm(resid) / scale > 1e-8:
        raise NumericalInconsistency("ridge_solve residual exceeds tolerance")
    return theta


def null_projector_apply(x: np.ndarray, v: np.ndarray, tol: float = RANK_TOL) -> np.ndarray:
    """Project v onto the null space of X, via the row-space basis from an SVD
    of X itself (never the d x d Gram)."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    _check_finite("null_projector_apply", x, v)
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return v.copy()
    rank = int(np.sum(s > tol * s[0]))
    vr = vt[:rank]
    return v - vr.T @ (vr @ v)


def weighted_quadratic_norm(sigma: SpdFactor, v: np.ndarray) -> float:
    """v^T Sigma v."""
    v = np.asarray(v, dtype=float)
    if v.shape != (sigma.d,):
        raise InvalidSpec("dimension mismatch")
    return sigma.quad(v)


def spd_solver(w: np.ndarray, err: type, label: str):
    """Cholesky-factor a symmetric matrix and verify it is numerically
    nonsingular (min eig > RANK_TOL * max eig, estimated by power iteration).

    Returns a solve(b) closure for vectors or matrices of right-hand sides.
    Raises err (an exception class) when the factorization or the
    conditioning check fails.
    """
    d = w.shape[0]
    try:
        factor = cho_factor(w, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise err(f"{label}: not positive definite ({exc})") from exc

    # Deterministic power iterations for the extreme eigenvalues; an order of
    # magnitude of accuracy is plenty against a 1e-10 threshold.
    probe_gen = np.random.Generator(np.random.Philox(key=np.array([0, 0], dtype=np.uint64)))
    v = probe_gen.standard_normal(d)
    v /= np.linalg.norm(v)
    for _ in range(30):
        v = w @ v
        v /= np.linalg.norm(v)
    s_max = float(v @ (w @ v))
    u = probe_gen.standard_normal(d)
    u /= np.linalg.norm(u)
    for _ in range(30):
        u = cho_solve(factor, u, check_finite=False)
        u /= np.linalg.norm(u)
    s_min = float(u @ (w @ u))
    if not np.isfinite(s_min) or s_min <= RANK_TOL * s_max:
        raise err(f"{label}: numerically singular (min/max eig ratio {s_min / s_max:.2e})")

    def solve(b: np.ndarray) -> np.ndarray:
        return cho_solve(factor, b, check_finite=False)

    return solve
