import numpy as np
import pytest

from perfedsim.errors import NonPositiveLambda, SingularCoupling, SingularGlobalGram
from perfedsim.estimators import (fedavg_global, ftfa_personalize, maml_global,
                                  maml_personalize, naive_minnorm, naive_ridge,
                                  pfedme_solve, rtfa_personalize,
                                  weighted_gram_solver)
from perfedsim.model import ClientSpec, PopulationSpec, generate_population
from perfedsim.numerics import substream


@pytest.fixture(scope="module")
def ds():
    spec = PopulationSpec(m=5, d=30, template=ClientSpec(n=15, r=1.0, sigma=0.5))
    with pytest.warns(UserWarning):
        return generate_population(spec, substream(21, 0))


def weighted_gram(ds):
    w = np.zeros((ds.d, ds.d))
    for p, c in zip(ds.weights, ds.clients):
        w += p * (c.x.T @ c.x) / c.n
    return w


class TestFedAvg:
    def test_stationarity(self, ds):
        g = fedavg_global(ds)
        rhs = sum(p * c.x.T @ c.y / c.n for p, c in zip(ds.weights, ds.clients))
        assert np.allclose(weighted_gram(ds) @ g.theta, rhs, atol=1e-9)
        assert g.algorithm == "fedavg"

    def test_singular_when_underdetermined(self):
        spec = PopulationSpec(m=2, d=30, template=ClientSpec(n=3, r=1.0, sigma=0.5))
        with pytest.warns(UserWarning):
            tiny = generate_population(spec, substream(21, 1))
        with pytest.raises(SingularGlobalGram):
            fedavg_global(tiny)

    def test_solver_cached(self, ds):
        assert weighted_gram_solver(ds) is weighted_gram_solver(ds)


class TestFtfa:
    def test_interpolates_and_stays_close(self, ds):
        g = fedavg_global(ds)
        p = ftfa_personalize(ds, 0, g)
        c = ds.clients[0]
        assert np.allclose(c.x @ p.theta, c.y, atol=1e-9)
        # the correction to the global model lives in the row space
        assert np.allclose(c.proj_null(p.theta - g.theta), 0, atol=1e-9)

    def test_exact_decomposition(self, ds):
        g = fedavg_global(ds)
        c = ds.clients[0]
        want = c.proj_null(g.theta) + c.pinv_apply()
        assert np.allclose(ftfa_personalize(ds, 0, g).theta, want, atol=1e-12)

    def test_maml_personalize_is_same_map(self, ds):
        g = maml_global(ds, 0.05)
        a = ftfa_personalize(ds, 0, g).theta
        b = maml_personalize(ds, 0, g).theta
        assert (a == b).all()


class TestRtfa:
    def test_stationarity(self, ds):
        g = fedavg_global(ds)
        lam = 0.8
        p = rtfa_personalize(ds, 0, g, lam)
        c = ds.clients[0]
        grad = c.x.T @ (c.x @ p.theta - c.y) / c.n + lam * (p.theta - g.theta)
        assert np.linalg.norm(grad) < 1e-8

    def test_large_lambda_returns_global(self, ds):
        g = fedavg_global(ds)
        p = rtfa_personalize(ds, 0, g, 1e10)
        assert np.allclose(p.theta, g.theta, atol=1e-6)

    def test_small_lambda_approaches_ftfa(self, ds):
        # below ~1e-9 the eps-level null-space content of X^T y / n starts
        # to dominate through the 1/lam split, so probe at the sweet spot
        g = fedavg_global(ds)
        p = rtfa_personalize(ds, 0, g, 1e-8)
        f = ftfa_personalize(ds, 0, g)
        assert np.allclose(p.theta, f.theta, atol=1e-6)

    def test_rejects_nonpositive_lambda(self, ds):
        g = fedavg_global(ds)
        with pytest.raises(NonPositiveLambda):
            rtfa_personalize(ds, 0, g, 0.0)


class TestMaml:
    def test_zero_lookahead_is_fedavg(self, ds):
        a = maml_global(ds, 0.0)
        b = fedavg_global(ds)
        assert (a.theta == b.theta).all()

    def test_stationarity(self, ds):
        alpha = 0.05
        g = maml_global(ds, alpha)
        lhs = np.zeros(ds.d)
        rhs = np.zeros(ds.d)
        for p, c in zip(ds.weights, ds.clients):
            w = np.eye(c.n) - (alpha / c.n) * (c.x @ c.x.T)
            w2 = w @ w
            lhs += (p / c.n) * c.x.T @ (w2 @ (c.x @ g.theta))
            rhs += (p / c.n) * c.x.T @ (w2 @ c.y)
        assert np.allclose(lhs, rhs, atol=1e-9)


class TestPfedme:
    def test_consensus(self, ds):
        g, personals = pfedme_solve(ds, 1.0)
        avg = sum(p * pm.theta for p, pm in zip(ds.weights, personals))
        assert np.allclose(avg, g.theta, atol=1e-10)

    def test_block_stationarity(self, ds):
        lam = 0.7
        g, personals = pfedme_solve(ds, lam)
        for c, pm in zip(ds.clients, personals):
            grad = c.x.T @ (c.x @ pm.theta - c.y) / c.n + lam * (pm.theta - g.theta)
            assert np.linalg.norm(grad) < 1e-8

    def test_personal_indices_subset(self, ds):
        g_all, personals = pfedme_solve(ds, 1.0)
        g_sub, subset = pfedme_solve(ds, 1.0, personal_indices=(2,))
        assert (g_all.theta == g_sub.theta).all()
        assert len(subset) == 1
        assert np.allclose(subset[0].theta, personals[2].theta)

    def test_rejects_nonpositive_lambda(self, ds):
        with pytest.raises(NonPositiveLambda):
            pfedme_solve(ds, -1.0)

    def test_singular_coupling_single_underdetermined_client(self):
        # one client with n < d makes Q = X^T C^{-1} X rank deficient
        spec = PopulationSpec(m=1, d=30, template=ClientSpec(n=10, r=1.0, sigma=0.5))
        with pytest.warns(UserWarning):
            tiny = generate_population(spec, substream(21, 2))
        with pytest.raises(SingularCoupling):
            pfedme_solve(tiny, 1.0)


class TestNaive:
    def test_minnorm_interpolates(self, ds):
        c = ds.clients[0]
        p = naive_minnorm(c, client_index=0)
        assert np.allclose(c.x @ p.theta, c.y, atol=1e-9)
        assert np.allclose(c.proj_null(p.theta), 0, atol=1e-9)
        assert p.client_index == 0

    def test_ridge_stationarity(self, ds):
        c = ds.clients[0]
        lam = 1.3
        p = naive_ridge(c, lam, client_index=0)
        grad = c.x.T @ (c.x @ p.theta - c.y) / c.n + lam * p.theta
        assert np.linalg.norm(grad) < 1e-8

    def test_ridge_rejects_nonpositive_lambda(self, ds):
        with pytest.raises(NonPositiveLambda):
            naive_ridge(ds.clients[0], 0.0)


class TestAffineInNoise:
    """Every estimator is affine in the noise: the average of the fits under
    xi and -xi equals the fit under zero noise."""

    @staticmethod
    def flip(ds):
        plus = [c.y for c in ds.clients]
        zero = [c.x @ c.theta_star for c in ds.clients]
        minus = [2 * z - y for y, z in zip(plus, zero)]
        return plus, minus, zero

    def test_global_maps(self, ds):
        plus, minus, zero = self.flip(ds)
        for fit in (lambda ys: fedavg_global(ds, ys=ys).theta,
                    lambda ys: maml_global(ds, 0.05, ys=ys).theta,
                    lambda ys: pfedme_solve(ds, 1.0, ys=ys, personal_indices=())[0].theta):
            avg = 0.5 * (fit(plus) + fit(minus))
            assert np.allclose(avg, fit(zero), atol=1e-9)

    def test_personal_maps(self, ds):
        plus, minus, zero = self.flip(ds)
        g = fedavg_global(ds)
        for fit in (lambda y: ftfa_personalize(ds, 0, g, y=y).theta,
                    lambda y: rtfa_personalize(ds, 0, g, 0.9, y=y).theta,
                    lambda y: naive_minnorm(ds.clients[0], y=y).theta,
                    lambda y: naive_ridge(ds.clients[0], 1.1, y=y).theta):
            avg = 0.5 * (fit(plus[0]) + fit(minus[0]))
            assert np.allclose(avg, fit(zero[0]), atol=1e-9)
