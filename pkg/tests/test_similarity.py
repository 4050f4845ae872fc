import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orbitalign import autodiff as ad
from orbitalign import dynsys as ds
from orbitalign import sampling as sp
from orbitalign import similarity as sim
from orbitalign.errors import ContractError, DegenerateBatchError
from orbitalign.iresnet import IResNet, LinearMap

from conftest import central_difference, net_loss_fn


def perturbed_net(dim, layers, seed, scale=0.3):
    r = np.random.default_rng(seed)
    net = IResNet(dim, layers, seed=seed)
    for k in ("W2", "b1", "b2"):
        net.params[k] = r.normal(0, scale, size=net.params[k].shape)
    return net.project_spectral_norms()


class TestPerPointLoss:
    def test_parallel_is_zero(self):
        loss, ex = sim.loss_from_velocities(np.array([[1.0, 2.0]]), np.array([[3.0, 6.0]]))
        assert loss == pytest.approx(0.0, abs=1e-15) and ex == 0

    def test_orthogonal_is_two(self):
        loss, _ = sim.loss_from_velocities(np.array([[1.0, 0.0]]), np.array([[0.0, 5.0]]))
        assert loss == pytest.approx(2.0, abs=1e-15)

    def test_antiparallel_is_four(self):
        loss, _ = sim.loss_from_velocities(np.array([[1.0, 1.0]]), np.array([[-2.0, -2.0]]))
        assert loss == pytest.approx(4.0, abs=1e-15)

    def test_degenerate_rows_excluded(self):
        u = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
        v = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, -1.0]])
        loss, ex = sim.loss_from_velocities(u, v)
        assert ex == 1
        assert loss == pytest.approx(2.0)

    def test_all_degenerate(self):
        with pytest.raises(DegenerateBatchError):
            sim.loss_from_velocities(np.zeros((3, 2)), np.ones((3, 2)))


class TestOrbitalLoss:
    def test_identity_same_field(self, rng):
        f = ds.VanDerPol(2.0)
        x = sp.vdp_box().draw(128, rng)
        assert sim.orbital_loss(f, f, IResNet(2, seed=0), x) == 0.0

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**16))
    def test_identity_bridge(self, seed):
        r = np.random.default_rng(seed)
        f = ds.VanDerPol(1.0 + r.uniform())
        g = ds.random_linear_with_signs(2, 1, seed=seed)
        net = perturbed_net(2, 3, seed)
        x = r.normal(size=(64, 2)) * 2
        loss = sim.orbital_loss(f, g, net, x)
        c = sim.cosines(f, g, net, x)
        assert np.all(np.isfinite(c))
        assert abs(loss - (2 - 2 * np.mean(c))) < 1e-12

    @settings(max_examples=20, deadline=None)
    @given(alpha=st.floats(1e-3, 1e3), seed=st.integers(0, 2**16))
    def test_scale_invariance(self, alpha, seed):
        r = np.random.default_rng(seed)
        f = ds.VanDerPol(2.0)
        fa = ds.Custom(lambda x: ad.mul(f(x), alpha), 2)
        g = ds.Pitchfork(1.0)
        net = perturbed_net(2, 2, seed)
        x = r.normal(size=(32, 2))
        np.testing.assert_allclose(sim.cosines(fa, g, net, x), sim.cosines(f, g, net, x), rtol=1e-12,
                                   atol=1e-14)
        assert sim.orbital_loss(fa, g, net, x) == pytest.approx(sim.orbital_loss(f, g, net, x),
                                                                rel=1e-12, abs=1e-14)

    def test_taped_matches_untaped(self, rng):
        f, g = ds.VanDerPol(1.0), ds.Pitchfork(2.0)
        net = perturbed_net(2, 4, 3)
        x = rng.normal(size=(16, 2))
        tape = ad.Tape()
        taped = sim.orbital_loss(f, g, net, x, net.bind(tape, "phi"))
        assert float(taped.value) == pytest.approx(sim.orbital_loss(f, g, net, x), rel=1e-14)

    def test_gradient_matches_finite_differences(self, rng):
        f, g = ds.VanDerPol(1.5), ds.random_linear_with_signs(2, 0, seed=2)
        net = perturbed_net(2, 3, 7)
        x = rng.normal(size=(32, 2))
        tape = ad.Tape()
        grads = net.gather_grads(tape.backward(sim.orbital_loss(f, g, net, x, net.bind(tape, "phi"))),
                                 "phi")
        fn, flat, _ = net_loss_fn(net, lambda: sim.orbital_loss(f, g, net, x))
        theta, gvec = flat(net.params), flat(grads)
        for _ in range(5):
            d = rng.normal(size=theta.shape)
            d /= np.linalg.norm(d)
            fd = central_difference(fn, theta, d, 1e-6)
            assert abs(gvec @ d - fd) < 1e-6

    def test_nonzero_gradient_at_identity(self, rng):
        f, g = ds.VanDerPol(2.0), ds.make_conjugate(ds.VanDerPol(2.0), [[1.0, 0.5], [0.0, 1.0]])
        net = IResNet(2, seed=0)
        tape = ad.Tape()
        grads = net.gather_grads(
            tape.backward(sim.orbital_loss(f, g, net, rng.normal(size=(64, 2)), net.bind(tape, "phi"))),
            "phi")
        assert np.abs(grads["W2"]).max() > 1e-6


class TestBatchLosses:
    def test_identity_same_field(self, rng):
        f = ds.VanDerPol(1.0)
        _, br = sim.batch_losses(f, f, IResNet(2, seed=0), IResNet(2, seed=1), rng.normal(size=(32, 2)))
        assert (br.forward, br.backward, br.inverse, br.total) == (0.0, 0.0, 0.0, 0.0)

    def test_inverse_loss_is_mean_squared_shift(self, rng):
        f = ds.Linear([[-1.0]])
        shift = 0.3
        psi = IResNet(1, layers=1, params={"W1": np.zeros((1, 2, 1)), "b1": np.zeros((1, 2)),
                                           "W2": np.zeros((1, 1, 2)), "b2": np.array([[shift]])})
        _, br = sim.batch_losses(f, f, IResNet(1, layers=1, seed=0), psi, rng.normal(size=(20, 1)))
        assert br.inverse == pytest.approx(shift ** 2, rel=1e-12)

    def test_total_is_weighted_sum(self, rng):
        f, g = ds.VanDerPol(1.0), ds.Pitchfork(1.0)
        phi, psi = perturbed_net(2, 2, 1), perturbed_net(2, 2, 2)
        x = rng.normal(size=(32, 2))
        _, br = sim.batch_losses(f, g, phi, psi, x)
        assert br.total == br.forward + br.backward + br.inverse
        _, bw = sim.batch_losses(f, g, phi, psi, x, weights=(0.5, 2.0, 3.0))
        assert bw.total == pytest.approx(0.5 * br.forward + 2.0 * br.backward + 3.0 * br.inverse, rel=1e-14)

    def test_backward_uses_images(self, rng):
        f, g = ds.VanDerPol(1.0), ds.Pitchfork(1.0)
        phi, psi = perturbed_net(2, 2, 1), perturbed_net(2, 2, 2)
        x = rng.normal(size=(32, 2))
        _, br = sim.batch_losses(f, g, phi, psi, x)
        assert br.backward == pytest.approx(sim.orbital_loss(g, f, psi, phi(x)), rel=1e-14)


class TestSimilarity:
    def test_identity_same_field(self):
        f = ds.VanDerPol(2.0)
        rep = sim.similarity(f, f, IResNet(2, seed=0), IResNet(2, seed=1), sp.vdp_box(), sp.vdp_box(),
                             count=500)
        assert rep.similarity == pytest.approx(1.0, abs=1e-12)
        assert rep.sample_count == 1000

    def test_reversed_field(self):
        f = ds.VanDerPol(2.0)
        g = ds.Custom(lambda x: ad.neg(f(x)), 2)
        rep = sim.similarity(f, g, IResNet(2, seed=0), IResNet(2, seed=1), sp.vdp_box(), sp.vdp_box(),
                             count=500)
        assert rep.similarity == pytest.approx(-1.0, abs=1e-12)

    @pytest.mark.parametrize("system", ["vdp", "pitchfork", "linear"])
    def test_exact_oracle_map(self, system, rng):
        if system == "vdp":
            f, p = ds.VanDerPol(2.0), sp.vdp_box()
        elif system == "pitchfork":
            f, p = ds.Pitchfork(1.0), sp.pitchfork_box(1.0)
        else:
            f, p = ds.random_linear_with_signs(4, 2, "mixed", seed=3), sp.Gaussian.standard(4)
        Q = ds.random_invertible(f.dim, rng)
        g = ds.make_conjugate(f, Q)
        H = LinearMap(Q)
        rep = sim.similarity(f, g, H, H.inverted(), p, sp.linear_image(p, Q), count=2000)
        assert abs(rep.similarity - 1.0) < 1e-6

    def test_min_policy(self, rng):
        f, g = ds.VanDerPol(1.0), ds.Pitchfork(1.0)
        rep = sim.similarity(f, g, perturbed_net(2, 2, 1), perturbed_net(2, 2, 2), sp.vdp_box(),
                             sp.pitchfork_box(1.0), count=500)
        assert rep.similarity == min(rep.sim_forward, rep.sim_backward)
        assert -1.0 <= rep.similarity <= 1.0
        s = rep.cosine_summary
        assert s["min"] <= s["median"] <= s["max"]

    def test_invalid_count(self):
        f = ds.VanDerPol()
        with pytest.raises(ContractError):
            sim.similarity(f, f, IResNet(2), IResNet(2), sp.vdp_box(), sp.vdp_box(), count=0)

    def test_equilibrium_points_excluded(self):
        f = ds.Linear(-np.eye(2))
        p = sp.UniformBox([0.0, 0.0], [0.0, 0.0])
        with pytest.raises(DegenerateBatchError):
            sim.similarity(f, f, IResNet(2), IResNet(2), p, p, count=10)
