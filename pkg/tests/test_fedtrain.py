"""Training loops against their closed-form fixed points.

Full-batch, full-participation configurations are deterministic gradient
methods on quadratics, so they must land on the corresponding closed-form
solutions to near machine precision given enough rounds. Stochastic
configurations are only checked for determinism and plumbing.
"""
import numpy as np
import pytest

from perfedsim.errors import Diverged, InvalidSpec, NonPositiveLambda
from perfedsim.estimators import (
    fedavg_global,
    ftfa_personalize,
    maml_global,
    naive_minnorm,
    pfedme_solve,
    rtfa_personalize,
)
from perfedsim.fedtrain import (
    TrainConfig,
    fedavg_train,
    ftfa_train,
    local_train,
    maml_train,
    pfedme_train,
    rtfa_train,
    _batch_prox,
    _epoch_batches,
    _hessian_product,
    local_gradient,
)
from perfedsim.model import ClientSpec, PopulationSpec, generate_population
from perfedsim.numerics import substream


@pytest.fixture(scope="module")
def ds():
    spec = PopulationSpec(m=6, d=40, template=ClientSpec(n=20, r=1.0, sigma=0.5))
    with pytest.warns(UserWarning):
        return generate_population(spec, substream(41, 0))


class TestClosedFormConvergence:
    def test_fedavg(self, ds):
        cfg = TrainConfig(rounds=800, global_stepsize=0.2)
        traj = fedavg_train(ds, cfg, substream(41, 1))
        target = fedavg_global(ds).theta
        assert np.max(np.abs(traj.final_global - target)) < 1e-8
        assert traj.mean_risks[-1] < traj.mean_risks[0]

    def test_ftfa(self, ds):
        g = fedavg_global(ds)
        cfg = TrainConfig(personalization_steps=3000, personal_stepsize=0.2)
        theta = ftfa_train(g, ds.clients[0], cfg)
        target = ftfa_personalize(ds, 0, g).theta
        assert np.max(np.abs(theta - target)) < 1e-8

    def test_rtfa(self, ds):
        g = fedavg_global(ds)
        cfg = TrainConfig(personalization_steps=3000, personal_stepsize=0.2, lam=1.0)
        theta = rtfa_train(g, ds.clients[1], cfg)
        target = rtfa_personalize(ds, 1, g, 1.0).theta
        assert np.max(np.abs(theta - target)) < 1e-8

    def test_pfedme(self, ds):
        cfg = TrainConfig(rounds=900, global_stepsize=0.5, lam=1.0)
        traj = pfedme_train(ds, cfg, substream(41, 2))
        g, personals = pfedme_solve(ds, 1.0)
        assert np.max(np.abs(traj.final_global - g.theta)) < 1e-8
        for got, want in zip(traj.final_personals, personals):
            assert np.max(np.abs(got - want.theta)) < 1e-8

    def test_local(self, ds):
        cfg = TrainConfig(local_steps=4000, personal_stepsize=0.2)
        theta = local_train(ds.clients[2], cfg)
        target = naive_minnorm(ds.clients[2]).theta
        assert np.max(np.abs(theta - target)) < 1e-8

    def test_maml_hessian_free(self, ds):
        cfg = TrainConfig(rounds=800, global_stepsize=0.2, personal_stepsize=0.1)
        traj = maml_train(ds, cfg, substream(41, 3), variant="hessian-free")
        target = maml_global(ds, 0.1).theta
        assert np.max(np.abs(traj.final_global - target)) < 1e-8


class TestMamlDegenerate:
    def test_alpha_zero_is_fedavg_bitwise(self, ds):
        # full batch means no stream draws, so trajectories are comparable
        base = TrainConfig(rounds=40, global_stepsize=0.2, personal_stepsize=0.0)
        ref = fedavg_train(ds, base, substream(41, 4))
        for variant in ("first-order", "hessian-free"):
            cfg = TrainConfig(rounds=40, global_stepsize=0.2, personal_stepsize=0.0)
            traj = maml_train(ds, cfg, substream(41, 5), variant=variant)
            for a, b in zip(ref.snapshots, traj.snapshots):
                assert (a == b).all()

    def test_hessian_product_accuracy(self, ds):
        c = ds.clients[0]
        stream = substream(41, 6)
        theta = stream.standard_normal(ds.d)
        v = stream.standard_normal(ds.d)
        batch = np.arange(c.n)
        got = _hessian_product(c, theta, batch, v, 1e-5)
        want = c.x.T @ (c.x @ v) / c.n
        assert np.max(np.abs(got - want)) < 1e-4

    def test_rejects_unknown_variant(self, ds):
        with pytest.raises(InvalidSpec):
            maml_train(ds, TrainConfig(rounds=1), substream(41, 7), variant="implicit")


class TestStochasticRuns:
    def test_same_stream_same_trajectory(self, ds):
        cfg = TrainConfig(rounds=30, sampled_users=3, batch_size=8,
                          local_steps=2, global_stepsize=0.1)
        a = fedavg_train(ds, cfg, substream(41, 8))
        b = fedavg_train(ds, cfg, substream(41, 8))
        for sa, sb in zip(a.snapshots, b.snapshots):
            assert (sa == sb).all()

    def test_different_stream_differs(self, ds):
        cfg = TrainConfig(rounds=30, sampled_users=3, batch_size=8, global_stepsize=0.1)
        a = fedavg_train(ds, cfg, substream(41, 9))
        b = fedavg_train(ds, cfg, substream(41, 10))
        assert not np.allclose(a.final_global, b.final_global)

    def test_shared_batch_changes_meta_updates(self, ds):
        kw = dict(rounds=20, batch_size=8, global_stepsize=0.1, personal_stepsize=0.1)
        a = maml_train(ds, TrainConfig(shared_batch=True, **kw), substream(41, 11))
        b = maml_train(ds, TrainConfig(shared_batch=False, **kw), substream(41, 11))
        assert not np.allclose(a.final_global, b.final_global)

    def test_stochastic_batch_requires_stream(self, ds):
        g = fedavg_global(ds)
        cfg = TrainConfig(personalization_steps=2, batch_size=4)
        with pytest.raises(InvalidSpec):
            ftfa_train(g, ds.clients[0], cfg, stream=None)

    def test_epoch_batches_partition(self):
        batches = list(_epoch_batches(substream(41, 12), 20, 7))
        assert [len(b) for b in batches] == [7, 7, 6]
        joined = np.concatenate(batches)
        assert sorted(joined.tolist()) == list(range(20))
        for b in batches:
            assert (np.diff(b) > 0).all()


class TestGuardsAndValidation:
    def test_divergence_guard(self, ds):
        cfg = TrainConfig(rounds=200, global_stepsize=50.0)
        with pytest.raises(Diverged):
            fedavg_train(ds, cfg, substream(41, 13))

    @pytest.mark.parametrize("bad", [
        dict(rounds=-1),
        dict(local_steps=-1),
        dict(personalization_steps=-2),
        dict(sampled_users=0),
        dict(batch_size=0),
        dict(global_stepsize=0.0),
        dict(global_stepsize=float("nan")),
        dict(personal_stepsize=-0.1),
        dict(pfedme_mixing=0.0),
        dict(pfedme_mixing=1.5),
        dict(hf_delta=0.0),
        dict(init="warm"),
    ])
    def test_invalid_config(self, ds, bad):
        cfg = TrainConfig(**bad)
        with pytest.raises(InvalidSpec):
            fedavg_train(ds, cfg, substream(41, 14))

    def test_init_vector_length_checked(self, ds):
        cfg = TrainConfig(rounds=1, init=np.zeros(ds.d + 1))
        with pytest.raises(InvalidSpec):
            fedavg_train(ds, cfg, substream(41, 15))

    def test_sampled_users_capped_by_m(self, ds):
        cfg = TrainConfig(rounds=1, sampled_users=ds.m + 1)
        with pytest.raises(InvalidSpec):
            fedavg_train(ds, cfg, substream(41, 16))

    def test_rtfa_requires_lam(self, ds):
        g = fedavg_global(ds)
        with pytest.raises(NonPositiveLambda):
            rtfa_train(g, ds.clients[0], TrainConfig(personalization_steps=1))

    def test_pfedme_requires_lam(self, ds):
        with pytest.raises(NonPositiveLambda):
            pfedme_train(ds, TrainConfig(rounds=1), substream(41, 17))

    def test_empty_batch_rejected(self, ds):
        with pytest.raises(InvalidSpec):
            local_gradient(ds.clients[0], np.zeros(ds.d), np.array([], dtype=int))


class TestPlumbing:
    def test_zero_rounds_returns_init(self, ds):
        init = substream(41, 18).standard_normal(ds.d)
        cfg = TrainConfig(rounds=0, init=init)
        traj = fedavg_train(ds, cfg, substream(41, 19))
        assert (traj.final_global == init).all()
        assert len(traj.snapshots) == 1

    def test_zero_personalization_is_identity(self, ds):
        g = fedavg_global(ds)
        theta = ftfa_train(g, ds.clients[0], TrainConfig(personalization_steps=0))
        assert (theta == g.theta).all()

    def test_trajectory_lengths(self, ds):
        cfg = TrainConfig(rounds=12, global_stepsize=0.1)
        traj = fedavg_train(ds, cfg, substream(41, 20))
        assert len(traj.snapshots) == 13
        assert len(traj.mean_risks) == 13
        assert (traj.snapshots[0] == 0.0).all()

    def test_personalization_history(self, ds):
        g = fedavg_global(ds)
        hist = []
        cfg = TrainConfig(personalization_steps=5, personal_stepsize=0.1)
        theta = ftfa_train(g, ds.clients[0], cfg, history=hist)
        assert len(hist) == 6
        assert (hist[0] == g.theta).all()
        assert (hist[-1] == theta).all()

    def test_local_history(self, ds):
        hist = []
        cfg = TrainConfig(local_steps=3, personal_stepsize=0.1)
        local_train(ds.clients[0], cfg, history=hist)
        assert len(hist) == 4
        assert (hist[0] == 0.0).all()

    def test_gradient_partial_batch_normalization(self, ds):
        c = ds.clients[0]
        theta = substream(41, 21).standard_normal(ds.d)
        idx = np.array([3, 11])
        want = (c.x[3] * (c.x[3] @ theta - c.y[3])
                + c.x[11] * (c.x[11] @ theta - c.y[11])) / 2.0
        assert np.allclose(local_gradient(c, theta, idx), want, rtol=1e-12)

    def test_batch_prox_stationarity(self, ds):
        c = ds.clients[0]
        anchor = substream(41, 22).standard_normal(ds.d)
        idx = np.arange(0, 12)
        lam = 0.7
        prox = _batch_prox(c, anchor, idx, lam)
        grad = local_gradient(c, prox, idx) + lam * (prox - anchor)
        assert np.max(np.abs(grad)) < 1e-10
