"""Statistical population of heterogeneous linear-regression clients.

Client i observes y = X theta_i* + xi with X rows drawn as Sigma_i^{1/2} z and
theta_i* uniform on a sphere of radius r_i about a shared center theta0*.
Ground truth is retained so conditional risk can be computed exactly.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import InvalidSpec, NonFiniteInput, ZeroVector
from .numerics import RANK_TOL, RngStream, SpdFactor, sample_gaussian_rows, sample_sphere


@dataclass(frozen=True)
class ClientSpec:
    """Per-client sampling description.

    spectrum is None for identity covariance, a length-d sequence of
    eigenvalues, or a {eigenvalue: mass} dict expanded to atom counts at
    validation time. gamma = d / n is informational and filled in during
    population validation.
    """

    n: int
    r: float
    sigma: float
    spectrum: object = None
    haar_basis: bool = False
    gamma: float | None = None


@dataclass(frozen=True)
class PopulationSpec:
    m: int
    d: int
    template: ClientSpec | None = None
    clients: tuple[ClientSpec, ...] | None = None
    theta0: np.ndarray | None = None
    theta0_norm: float = 1.0
    weight_scheme: str = "uniform"
    cov_bound: float = 1e6

    def resolved_clients(self) -> list[ClientSpec]:
        """Validate and return the m per-client specs with gamma filled in."""
        if self.m < 1 or self.d < 1:
            raise InvalidSpec("m and d must be >= 1")
        if self.clients is not None:
            specs = list(self.clients)
            if len(specs) != self.m:
                raise InvalidSpec(f"expected {self.m} client specs, got {len(specs)}")
        elif self.template is not None:
            specs = [self.template] * self.m
        else:
            raise InvalidSpec("population needs a template or an explicit client list")
        if self.weight_scheme not in ("uniform", "proportional"):
            raise InvalidSpec(f"unknown weight scheme {self.weight_scheme!r}")
        if self.theta0 is not None:
            t0 = np.asarray(self.theta0, dtype=float)
            if t0.shape != (self.d,):
                raise InvalidSpec("theta0 must have length d")
            if not np.all(np.isfinite(t0)):
                raise NonFiniteInput("theta0 must be finite")
        elif not (np.isfinite(self.theta0_norm) and self.theta0_norm >= 0):
            raise InvalidSpec("theta0_norm must be a finite nonnegative real")

        out = []
        for k, c in enumerate(specs):
            if c.n < 1:
                raise InvalidSpec(f"client {k}: n must be >= 1")
            if not (np.isfinite(c.r) and c.r >= 0):
                raise InvalidSpec(f"client {k}: r must be a finite nonnegative real")
            if not (np.isfinite(c.sigma) and c.sigma >= 0):
                raise InvalidSpec(f"client {k}: sigma must be a finite nonnegative real")
            eigs = expand_spectrum(c.spectrum, self.d)
            if np.any(eigs > self.cov_bound) or np.any(eigs < 1.0 / self.cov_bound):
                raise InvalidSpec(
                    f"client {k}: covariance eigenvalues outside [1/{self.cov_bound:g}, {self.cov_bound:g}]"
                )
            out.append(
                ClientSpec(
                    n=c.n,
                    r=c.r,
                    sigma=c.sigma,
                    spectrum=c.spectrum,
                    haar_basis=c.haar_basis,
                    gamma=self.d / c.n,
                )
            )

        gammas = np.array([s.gamma for s in out])
        if np.any(gammas <= 1.0):
            warnings.warn(
                "some clients have d/n <= 1; local data identifies the model and "
                "interpolation-regime asymptotics do not apply",
                UserWarning,
                stacklevel=2,
            )
        if gammas.max() / gammas.min() > 100.0:
            warnings.warn(
                "extreme spread of overparameterization ratios across clients",
                UserWarning,
                stacklevel=2,
            )
        mean_n = float(np.mean([s.n for s in out]))
        if self.m ** 1.5 < mean_n:
            warnings.warn(
                "client count is small relative to per-client sample size; "
                "many-client asymptotics are strained",
                UserWarning,
                stacklevel=2,
            )
        return out


def expand_spectrum(spectrum, d: int) -> np.ndarray:
    """Turn a spectrum description into a descending length-d eigenvalue array."""
    if spectrum is None:
        return np.ones(d)
    if isinstance(spectrum, dict):
        items = sorted(((float(s), float(w)) for s, w in spectrum.items()), reverse=True)
        masses = np.array([w for _, w in items])
        if np.any(masses < 0) or abs(masses.sum() - 1.0) > 1e-9:
            raise InvalidSpec("spectrum masses must be nonnegative and sum to 1")
        counts = np.array([int(round(w * d)) for w in masses])
        counts[np.argmax(masses)] += d - counts.sum()  # absorb rounding drift
        if np.any(counts < 0) or counts.sum() != d:
            raise InvalidSpec("spectrum masses do not yield a valid atom count split")
        eigs = np.repeat([s for s, _ in items], counts)
    else:
        eigs = np.sort(np.asarray(spectrum, dtype=float))[::-1]
        if eigs.shape != (d,):
            raise InvalidSpec(f"explicit spectrum must list exactly d={d} eigenvalues")
    if not np.all(np.isfinite(eigs)) or np.any(eigs <= 0):
        raise InvalidSpec("spectrum eigenvalues must be finite and positive")
    return eigs


class ClientData:
    """One client's draw: X (n x d), y, ground-truth parameter and noise.

    The thin SVD of X is computed lazily and cached; it powers the null-space
    projector, the pseudo-inverse, and the ridge resolvent, all of which are
    exact in the spectral representation for any penalty.
    """

    def __init__(self, x: np.ndarray, y: np.ndarray, theta_star: np.ndarray,
                 xi: np.ndarray, spec: ClientSpec, sigma_factor: SpdFactor):
        self.x = x
        self.y = y
        self.theta_star = theta_star
        self.xi = xi
        self.spec = spec
        self.sigma_factor = sigma_factor
        self._svd = None
        self._gram = None
        self._ridge_factors: dict = {}

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def svd(self):
        """(U, s, Vt) thin SVD of X, truncated at RANK_TOL * s_max."""
        if self._svd is None:
            u, s, vt = np.linalg.svd(self.x, full_matrices=False)
            if s.size and s[0] > 0:
                rank = int(np.sum(s > RANK_TOL * s[0]))
            else:
                rank = 0
            self._svd = (u[:, :rank], s[:rank], vt[:rank])
        return self._svd

    @property
    def shat_eigs(self) -> np.ndarray:
        """Nonzero eigenvalues of the sample covariance X^T X / n."""
        _, s, _ = self.svd
        return s * s / self.n

    @property
    def gram(self) -> np.ndarray:
        """X X^T (n x n); cached because the meta-learning path reuses it."""
        if self._gram is None:
            self._gram = self.x @ self.x.T
        return self._gram

    def xty_over_n(self, y: np.ndarray | None = None) -> np.ndarray:
        y = self.y if y is None else y
        return self.x.T @ y / self.n

    def proj_null(self, m: np.ndarray) -> np.ndarray:
        """Null-space projection of a vector or (d, k) matrix."""
        _, _, vt = self.svd
        if vt.shape[0] == 0:
            return m.copy()
        return m - vt.T @ (vt @ m)

    def pinv_apply(self, y: np.ndarray | None = None) -> np.ndarray:
        """X^+ y, the minimum-norm least-squares solution for this client."""
        u, s, vt = self.svd
        y = self.y if y is None else y
        if s.size == 0:
            return np.zeros(self.d)
        return vt.T @ ((u.T @ y) / s)

    def ridge_resolvent_apply(self, m: np.ndarray, lam: float) -> np.ndarray:
        """(X^T X / n + lambda I)^{-1} applied to a vector or (d, k) matrix.

        Spectral split form: 1/(shat + lambda) on the row space, 1/lambda on
        its complement. Assembling the two parts separately avoids the
        catastrophic cancellation of the rank-one-update form at small lambda.
        """
        _, _, vt = self.svd
        shat = self.shat_eigs
        vm = vt @ m
        null = m - vt.T @ vm
        # one refinement pass: the first projection leaves an eps-sized
        # row-space residue that 1/lam would otherwise amplify
        null -= vt.T @ (vt @ null)
        if m.ndim == 1:
            return vt.T @ (vm / (shat + lam)) + null / lam
        return vt.T @ (vm / (shat + lam)[:, None]) + null / lam

    def ridge_gram_factor(self, lam: float):
        """Cholesky factor of n*lam*I + X X^T, cached per penalty.

        Powers the kernel-side ridge identity (X^T X / n + lam I)^{-1} X^T
        = X^T (X X^T + n lam I)^{-1}, which stays n x n.
        """
        key = float(lam)
        if key not in self._ridge_factors:
            c = self.gram + self.n * lam * np.eye(self.n)
            self._ridge_factors[key] = linalg.cho_factor(c)
        return self._ridge_factors[key]

    def cov_pinv_apply(self, m: np.ndarray) -> np.ndarray:
        """(X^T X / n)^+ applied to a vector or (d, k) matrix."""
        _, _, vt = self.svd
        shat = self.shat_eigs
        vm = vt @ m
        if m.ndim == 1:
            return vt.T @ (vm / shat)
        return vt.T @ (vm / shat[:, None])


class FederatedDataset:
    """All clients' draws plus the shared center and aggregation weights."""

    def __init__(self, theta0_star: np.ndarray, clients: list[ClientData], weights: np.ndarray):
        weights = np.asarray(weights, dtype=float)
        if len(clients) != weights.size:
            raise InvalidSpec("one weight per client required")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise InvalidSpec("weights must be nonnegative and sum to 1")
        self.theta0_star = theta0_star
        self.clients = clients
        self.weights = weights
        self._cache: dict = {}

    @property
    def m(self) -> int:
        return len(self.clients)

    @property
    def d(self) -> int:
        return self.clients[0].d

    @property
    def n_list(self) -> np.ndarray:
        return np.array([c.n for c in self.clients])

    def ys(self) -> list[np.ndarray]:
        return [c.y for c in self.clients]


def client_weights(scheme: str, n_list) -> np.ndarray:
    """uniform -> 1/m each; proportional -> n_j / sum(n)."""
    n_arr = np.asarray(n_list, dtype=float)
    if n_arr.size == 0 or np.any(n_arr <= 0):
        raise InvalidSpec("n_list must be positive")
    if scheme == "uniform":
        return np.full(n_arr.size, 1.0 / n_arr.size)
    if scheme == "proportional":
        return n_arr / n_arr.sum()
    raise InvalidSpec(f"unknown weight scheme {scheme!r}")


def _haar_basis(stream: RngStream, d: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix via QR with sign correction."""
    g = stream.standard_normal((d, d))
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))[None, :]


def generate_population(spec: PopulationSpec, stream: RngStream) -> FederatedDataset:
    """Draw one federated dataset.

    Draw order is fixed (center, then per client: parameter, basis, features,
    noise) so a given stream always yields the same dataset.
    """
    specs = spec.resolved_clients()
    d = spec.d
    if spec.theta0 is not None:
        theta0 = np.asarray(spec.theta0, dtype=float).copy()
    else:
        theta0 = sample_sphere(stream, np.zeros(d), spec.theta0_norm)

    clients = []
    for cs in specs:
        theta_star = sample_sphere(stream, theta0, cs.r)
        eigs = expand_spectrum(cs.spectrum, d)
        basis = _haar_basis(stream, d) if cs.haar_basis else None
        sigma_factor = SpdFactor(eigs, basis)
        x = sample_gaussian_rows(stream, cs.n, sigma_factor)
        xi = cs.sigma * stream.standard_normal(cs.n)
        y = x @ theta_star + xi
        clients.append(ClientData(x, y, theta_star, xi, cs, sigma_factor))

    weights = client_weights(spec.weight_scheme, [c.n for c in clients])
    return FederatedDataset(theta0, clients, weights)


@dataclass(frozen=True)
class SpectralDistribution:
    """Discrete spectral distribution: atoms at `support` with `masses`."""

    support: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        support = np.asarray(self.support, dtype=float)
        masses = np.asarray(self.masses, dtype=float)
        if support.shape != masses.shape or support.ndim != 1 or support.size == 0:
            raise InvalidSpec("support and masses must be matching nonempty 1-d arrays")
        if not (np.all(np.isfinite(support)) and np.all(np.isfinite(masses))):
            raise NonFiniteInput("spectral distribution entries must be finite")
        if np.any(support < 0):
            raise InvalidSpec("support must be nonnegative")
        if np.any(masses < 0) or abs(masses.sum() - 1.0) > 1e-12:
            raise InvalidSpec("masses must be nonnegative and sum to 1")
        order = np.argsort(support)[::-1]
        object.__setattr__(self, "support", support[order])
        object.__setattr__(self, "masses", masses[order])

    @classmethod
    def point_mass(cls, s: float = 1.0) -> "SpectralDistribution":
        return cls(np.array([s]), np.array([1.0]))

    def integrate(self, fn) -> float:
        """sum_k mass_k * fn(s_k) with fn vectorized over the support."""
        return float(np.sum(self.masses * fn(self.support)))


def esd(sigma: SpdFactor) -> SpectralDistribution:
    """Empirical spectral distribution: mass 1/d per eigenvalue, merged atoms."""
    vals, counts = np.unique(sigma.eigenvalues, return_counts=True)
    return SpectralDistribution(vals, counts / sigma.d)


def wesd(sigma: SpdFactor, delta: np.ndarray) -> SpectralDistribution:
    """Eigenvalue distribution reweighted by squared alignments of delta."""
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (sigma.d,):
        raise InvalidSpec("delta must have length d")
    norm_sq = float(delta @ delta)
    if norm_sq == 0.0:
        raise ZeroVector("wesd requires a nonzero direction")
    coords = delta if sigma.basis is None else sigma.basis.T @ delta
    weights = coords * coords / norm_sq
    vals = sigma.eigenvalues
    uniq, inverse = np.unique(vals, return_inverse=True)
    masses = np.zeros(uniq.size)
    np.add.at(masses, inverse, weights)
    return SpectralDistribution(uniq, masses)
