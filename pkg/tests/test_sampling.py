import warnings

import numpy as np
import pytest

from orbitalign import dynsys as ds
from orbitalign import sampling as sp
from orbitalign.errors import ContractError, NumericalError


def rk4_orbit(f, x0, dt, steps):
    out = np.empty((steps, len(x0)))
    x = np.array(x0, dtype=float)
    for i in range(steps):
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[i] = x
    return out


class TestBoxAndGaussian:
    def test_box_bounds_and_mean(self, rng):
        box = sp.UniformBox([-1.0, -1.0], [1.0, 1.0])
        X = box.draw(1000, rng)
        assert X.shape == (1000, 2)
        assert np.all((X >= -1) & (X <= 1))
        # uniform on [-1, 1] has std 1/sqrt(3)
        assert np.all(np.abs(X.mean(axis=0)) < 3 / np.sqrt(3) / np.sqrt(1000))

    def test_gaussian_covariance(self, rng):
        X = sp.Gaussian.standard(3).draw(10000, rng)
        # entrywise Monte-Carlo error of a unit covariance is about 1/sqrt(N)
        np.testing.assert_allclose(np.cov(X.T), np.eye(3), atol=5 / np.sqrt(10000))

    def test_presets(self):
        vdp = sp.vdp_box()
        np.testing.assert_array_equal(vdp.low, [-3, -4])
        np.testing.assert_array_equal(vdp.high, [3, 4])
        pf = sp.pitchfork_box(4.0)
        np.testing.assert_allclose(pf.low, [-3, -1])
        np.testing.assert_allclose(pf.high, [3, 1])

    def test_invalid_count(self, rng):
        with pytest.raises(ContractError):
            sp.UniformBox([0.0], [1.0]).draw(0, rng)

    def test_mapped_image(self, rng):
        Q = np.array([[2.0, 0.0], [1.0, 1.0]])
        m = sp.linear_image(sp.UniformBox([0.0, 0.0], [1.0, 1.0]), Q)
        X = sp.UniformBox([0.0, 0.0], [1.0, 1.0]).draw(5, np.random.default_rng(1))
        np.testing.assert_allclose(m.draw(5, np.random.default_rng(1)), X @ Q.T)

    def test_seed_determinism(self):
        box = sp.vdp_box()
        a = box.draw(50, np.random.default_rng(3))
        b = box.draw(50, np.random.default_rng(3))
        assert np.array_equal(a, b)


class TestAsymptotic:
    def test_noiseless_contraction(self):
        pool = sp.asymptotic_states(ds.Linear(-np.eye(2)), 0.0, t_burn=10.0, t_end=15.0, trials=50, seed=0)
        assert np.max(np.linalg.norm(pool, axis=1)) < 1e-3

    def test_ornstein_uhlenbeck_variance(self):
        pool = sp.asymptotic_states(ds.Linear(-np.eye(2)), 1.0, trials=1000, seed=1)
        var = pool.var(axis=0)
        assert np.all(np.abs(var - 0.5) < 0.05)

    def test_vdp_limit_cycle(self):
        f = ds.VanDerPol(1.0)
        # reference cycle from one long deterministic integration
        cycle = rk4_orbit(f, [2.0, 0.0], 0.002, 60000)[-20000:]
        pool = sp.asymptotic_states(f, 0.0, t_burn=50.0, t_end=60.0, trials=40, seed=2)
        d = np.min(np.linalg.norm(pool[:, None, :] - cycle[None, ::5, :], axis=2), axis=1)
        assert d.max() < 0.1

    def test_seed_determinism(self):
        f = ds.VanDerPol(1.0)
        a = sp.asymptotic_states(f, 1.5, t_burn=2.0, t_end=4.0, trials=20, seed=5)
        b = sp.asymptotic_states(f, 1.5, t_burn=2.0, t_end=4.0, trials=20, seed=5)
        assert np.array_equal(a, b)

    def test_pool_layout(self):
        pool = sp.asymptotic_states(ds.Linear(-np.eye(3)), 1.0, t_burn=1.0, t_end=3.0, trials=7,
                                    seed=0, record_every=0.5)
        # recorded at t = 1.5, 2.0, 2.5, 3.0
        assert pool.shape == (4 * 7, 3)

    def test_pool_too_small(self, rng):
        s = sp.Asymptotic(np.zeros((100, 2)))
        s.draw(10, rng)
        with pytest.raises(ContractError):
            s.draw(11, rng)

    def test_draws_come_from_pool(self, rng):
        pool = np.arange(2000.0).reshape(1000, 2)
        X = sp.Asymptotic(pool).draw(50, rng)
        rows = X[:, 0].astype(int) // 2
        np.testing.assert_array_equal(X, pool[rows])

    def test_divergent_trials_dropped(self):
        unstable = ds.Custom(lambda x: x * x, 1)
        with pytest.warns(RuntimeWarning):
            pool = sp.asymptotic_states(unstable, 0.0, dt=0.01, t_burn=1.0, t_end=20.0, trials=200, seed=0)
        assert np.all(np.isfinite(pool))

    def test_all_diverged(self):
        unstable = ds.Linear(np.eye(1) * 5.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(NumericalError):
                sp.asymptotic_states(unstable, 0.0, t_burn=1.0, t_end=10.0, trials=5, seed=0)

    def test_invalid_times(self):
        with pytest.raises(ContractError):
            sp.asymptotic_states(ds.VanDerPol(), 1.0, t_burn=5.0, t_end=5.0)
        with pytest.raises(ContractError):
            sp.asymptotic_states(ds.VanDerPol(), 1.0, dt=0.0)
