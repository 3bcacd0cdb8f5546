import numpy as np
import pytest

from perfedsim.errors import InvalidSpec, ZeroVector
from perfedsim.model import (ClientSpec, PopulationSpec, SpectralDistribution,
                             client_weights, esd, expand_spectrum,
                             generate_population, wesd)
from perfedsim.numerics import SpdFactor, substream


def small_spec(**kw):
    defaults = dict(m=5, d=24, template=ClientSpec(n=12, r=1.0, sigma=0.5))
    defaults.update(kw)
    return PopulationSpec(**defaults)


class TestSpecValidation:
    def test_rejects_bad_counts(self):
        with pytest.raises(InvalidSpec):
            PopulationSpec(m=0, d=4, template=ClientSpec(n=2, r=1, sigma=1)).resolved_clients()

    def test_rejects_missing_clients(self):
        with pytest.raises(InvalidSpec):
            PopulationSpec(m=2, d=4).resolved_clients()

    def test_rejects_client_count_mismatch(self):
        spec = PopulationSpec(m=3, d=4, clients=(ClientSpec(n=2, r=1, sigma=1),))
        with pytest.raises(InvalidSpec):
            spec.resolved_clients()

    def test_rejects_negative_r(self):
        with pytest.raises(InvalidSpec):
            small_spec(template=ClientSpec(n=12, r=-1.0, sigma=0.5)).resolved_clients()

    def test_rejects_bad_weight_scheme(self):
        with pytest.raises(InvalidSpec):
            small_spec(weight_scheme="exotic").resolved_clients()

    def test_gamma_filled_in(self):
        specs = small_spec().resolved_clients()
        assert all(s.gamma == 2.0 for s in specs)

    def test_warns_underparameterized(self):
        spec = PopulationSpec(m=40, d=4, template=ClientSpec(n=8, r=1, sigma=1))
        with pytest.warns(UserWarning, match="d/n"):
            spec.resolved_clients()

    def test_warns_few_clients(self):
        spec = PopulationSpec(m=4, d=400, template=ClientSpec(n=200, r=1, sigma=1))
        with pytest.warns(UserWarning, match="client count"):
            spec.resolved_clients()

    def test_rejects_extreme_eigenvalues(self):
        spec = small_spec(template=ClientSpec(n=12, r=1, sigma=1, spectrum={1e9: 1.0}),
                          cov_bound=1e6)
        with pytest.raises(InvalidSpec):
            spec.resolved_clients()


class TestSpectrum:
    def test_none_is_identity(self):
        assert (expand_spectrum(None, 5) == 1.0).all()

    def test_dict_expansion(self):
        eigs = expand_spectrum({2.0: 0.5, 1.0: 0.5}, 4)
        assert eigs.tolist() == [2.0, 2.0, 1.0, 1.0]

    def test_dict_rounding_drift_absorbed(self):
        eigs = expand_spectrum({2.0: 1 / 3, 1.0: 2 / 3}, 10)
        assert len(eigs) == 10
        assert np.isclose((eigs == 2.0).sum() / 10, 1 / 3, atol=0.05)

    def test_masses_must_sum_to_one(self):
        with pytest.raises(InvalidSpec):
            expand_spectrum({2.0: 0.7, 1.0: 0.7}, 4)

    def test_explicit_length_checked(self):
        with pytest.raises(InvalidSpec):
            expand_spectrum([1.0, 2.0], 3)

    def test_nonpositive_rejected(self):
        with pytest.raises(InvalidSpec):
            expand_spectrum([1.0, 0.0], 2)


class TestGeneration:
    def test_deterministic(self):
        spec = small_spec()
        a = generate_population(spec, substream(9, 0))
        b = generate_population(spec, substream(9, 0))
        assert (a.clients[0].x == b.clients[0].x).all()
        assert (a.theta0_star == b.theta0_star).all()

    def test_streams_independent(self):
        spec = small_spec()
        a = generate_population(spec, substream(9, 0))
        b = generate_population(spec, substream(9, 1))
        assert not np.allclose(a.clients[0].x, b.clients[0].x)

    def test_geometry(self):
        spec = small_spec(theta0_norm=2.0)
        ds = generate_population(spec, substream(9, 2))
        assert np.isclose(np.linalg.norm(ds.theta0_star), 2.0)
        for c in ds.clients:
            assert np.isclose(np.linalg.norm(c.theta_star - ds.theta0_star), 1.0)

    def test_noiseless_interpolation(self):
        spec = small_spec(template=ClientSpec(n=12, r=1.0, sigma=0.0))
        ds = generate_population(spec, substream(9, 3))
        c = ds.clients[0]
        assert np.allclose(c.y, c.x @ c.theta_star)

    def test_weights(self):
        assert np.allclose(client_weights("uniform", [2, 4, 6]), [1 / 3] * 3)
        assert np.allclose(client_weights("proportional", [2, 4, 6]), [1 / 6, 2 / 6, 3 / 6])
        ds = generate_population(small_spec(), substream(9, 4))
        assert np.isclose(ds.weights.sum(), 1.0)

    def test_haar_rotated_covariance(self):
        template = ClientSpec(n=12, r=1.0, sigma=0.5, spectrum={2.0: 0.5, 1.0: 0.5},
                              haar_basis=True)
        ds = generate_population(small_spec(template=template), substream(9, 5))
        sf = ds.clients[0].sigma_factor
        mat = sf.matrix()
        assert np.allclose(mat, mat.T)
        assert np.isclose(np.trace(mat), 24 * 1.5)
        # off-diagonal mass distinguishes a rotated basis from a diagonal one
        assert np.abs(mat - np.diag(np.diag(mat))).max() > 1e-3


@pytest.fixture(scope="module")
def client():
    ds = generate_population(small_spec(), substream(10, 0))
    return ds.clients[0]


class TestClientData:
    def test_proj_null_annihilates_rows(self, client):
        v = np.arange(24.0)
        piv = client.proj_null(v)
        assert np.allclose(client.x @ piv, 0, atol=1e-9)
        assert np.allclose(client.proj_null(piv), piv)

    def test_pinv_matches_lstsq(self, client):
        want = np.linalg.lstsq(client.x, client.y, rcond=None)[0]
        assert np.allclose(client.pinv_apply(), want, atol=1e-9)

    def test_ridge_resolvent_matches_dense(self, client):
        lam = 0.7
        shat = client.x.T @ client.x / client.n
        want = np.linalg.solve(shat + lam * np.eye(24), np.ones(24))
        got = client.ridge_resolvent_apply(np.ones(24), lam)
        assert np.allclose(got, want, atol=1e-9)

    def test_ridge_resolvent_small_lam_stable(self, client):
        # split row/null assembly avoids the cancellation of the
        # rank-one-update form at tiny regularization
        lam = 1e-12
        v = np.ones(24)
        got = client.ridge_resolvent_apply(v, lam)
        null_part = client.proj_null(v)
        assert np.allclose(lam * got, null_part, atol=1e-6)

    def test_ridge_gram_factor(self, client):
        from scipy import linalg

        lam = 0.5
        factor = client.ridge_gram_factor(lam)
        rhs = np.ones(client.n)
        cmat = client.x @ client.x.T + client.n * lam * np.eye(client.n)
        assert np.allclose(cmat @ linalg.cho_solve(factor, rhs), rhs)
        assert client.ridge_gram_factor(lam) is factor  # cached

    def test_cov_pinv(self, client):
        shat = client.x.T @ client.x / client.n
        v = np.ones(24)
        assert np.allclose(client.cov_pinv_apply(v), np.linalg.pinv(shat) @ v, atol=1e-8)


class TestSpectralDistribution:
    def test_point_mass(self):
        h = SpectralDistribution.point_mass(2.0)
        assert np.isclose(h.integrate(lambda s: s), 2.0)

    def test_sorted_and_normalized(self):
        h = SpectralDistribution((1.0, 3.0), (0.25, 0.75))
        assert h.support[0] == 3.0
        assert np.isclose(h.integrate(lambda s: 1.0), 1.0)
        assert np.isclose(h.integrate(lambda s: s), 0.75 * 3 + 0.25 * 1)

    def test_esd_groups_multiplicity(self):
        h = esd(SpdFactor(np.array([2.0, 2.0, 1.0, 1.0])))
        assert h.support.tolist() == [2.0, 1.0]
        assert h.masses.tolist() == [0.5, 0.5]

    def test_spd_factor_requires_descending(self):
        with pytest.raises(InvalidSpec):
            SpdFactor(np.array([1.0, 2.0]))

    def test_wesd_weights_by_alignment(self):
        sf = SpdFactor(np.array([2.0, 1.0]))
        delta = np.array([1.0, 0.0])  # aligned with the top eigendirection
        g = wesd(sf, delta)
        assert np.isclose(g.integrate(lambda s: s), 2.0)

    def test_wesd_rotated_basis(self):
        q = np.array([[1.0, 1.0], [1.0, -1.0]]) / np.sqrt(2)
        sf = SpdFactor(np.array([2.0, 1.0]), basis=q)
        # direction along the first basis column picks out the top atom
        g = wesd(sf, q[:, 0])
        assert np.isclose(g.integrate(lambda s: s), 2.0)

    def test_wesd_rejects_zero(self):
        with pytest.raises(ZeroVector):
            wesd(SpdFactor(np.array([2.0, 1.0])), np.zeros(2))
