import json

import numpy as np
import pytest

from orbitalign import autodiff as ad
from orbitalign.errors import CheckpointError, ContractError, DimensionError, IterationLimitError, \
    UnsupportedVersionError
from orbitalign.iresnet import IResNet, LinearMap

from conftest import jacobi_singular_values


def half_gain_net():
    """One 1-D block whose residual is exactly 0.5 x for x > -14."""
    a = np.sqrt(0.5)
    params = {
        "W1": np.array([[[a], [0.0]]]),
        "b1": np.array([[10.0, 0.0]]),
        "W2": np.array([[[a, 0.0]]]),
        "b2": np.array([[-a * 10.0]]),
    }
    return IResNet(1, layers=1, params=params)


def trained_like_net(dim, layers, seed, scale=0.4):
    r = np.random.default_rng(seed)
    net = IResNet(dim, layers, seed=seed)
    net.params["W2"] = r.normal(0, scale, size=net.params["W2"].shape)
    net.params["b1"] = r.normal(0, scale, size=net.params["b1"].shape)
    net.params["b2"] = r.normal(0, scale, size=net.params["b2"].shape)
    net.params["W1"] *= 3.0
    return net.project_spectral_norms()


def test_jacobi_oracle_matches_numpy(rng):
    A = rng.normal(size=(6, 4))
    np.testing.assert_allclose(jacobi_singular_values(A), np.linalg.svd(A, compute_uv=False), rtol=1e-10)


class TestInit:
    def test_identity_at_init(self, rng):
        net = IResNet(3, layers=10, seed=1)
        x = rng.normal(size=(20, 3))
        np.testing.assert_array_equal(net(x), x)
        np.testing.assert_array_equal(net(np.array([1.0, 2.0, 3.0])), [1, 2, 3])

    def test_seed_determinism(self):
        a, b = IResNet(4, seed=7), IResNet(4, seed=7)
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k])

    def test_initial_weights_respect_cap(self):
        net = IResNet(5, layers=4, seed=3)
        for W in net.params["W1"]:
            assert jacobi_singular_values(W)[0] <= 0.99 + 1e-8

    @pytest.mark.parametrize("args", [(0, 3, 0.9), (2, 0, 0.9), (2, 3, 1.0), (2, 3, 0.0)])
    def test_invalid_hyperparameters(self, args):
        with pytest.raises(ContractError):
            IResNet(*args)


class TestForward:
    def test_constructed_half_gain_block(self):
        net = half_gain_net()
        np.testing.assert_allclose(net(np.array([1.0])), [1.5], rtol=1e-15)

    def test_composition_of_blocks(self, rng):
        net = trained_like_net(2, 4, seed=5)
        x = rng.normal(size=(10, 2))
        manual = x
        for l in range(net.layers):
            manual = net.block_forward(l, manual)
        np.testing.assert_array_equal(net(x), manual)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            IResNet(3, seed=0)(np.ones(2))

    def test_dual_forward_carries_jvp(self, rng):
        net = trained_like_net(3, 3, seed=2)
        x, v = rng.normal(size=3), rng.normal(size=3)
        out = net(ad.Dual(x, v))
        np.testing.assert_array_equal(out.primal, net(x))
        np.testing.assert_allclose(out.tangent, net.jacobian(x) @ v, rtol=1e-12)


class TestInverse:
    def test_identity_net_single_iteration(self, rng):
        net = IResNet(3, layers=4, seed=0)
        y = rng.normal(size=(5, 3))
        x, hist = net.inverse(y, return_history=True)
        np.testing.assert_array_equal(x, y)
        assert all(len(h) == 1 for h in hist)

    def test_half_gain_closed_form(self):
        np.testing.assert_allclose(half_gain_net().inverse(np.array([1.5])), [1.0], atol=1e-10)

    def test_reconstruction_random_trained_net(self, rng):
        net = trained_like_net(8, 10, seed=11)
        x = rng.normal(size=(100, 8))
        x_rec = net.inverse(net(x), max_iter=100)
        assert np.max(np.linalg.norm(x_rec - x, axis=1)) < 1e-6

    def test_contraction_per_iteration(self, rng):
        net = trained_like_net(4, 5, seed=3)
        _, hist = net.inverse(net(rng.normal(size=(50, 4))), return_history=True, max_iter=500)
        for steps in hist:
            s = np.array(steps)
            big = s[:-1] > 1e-12
            if big.any():
                assert np.all(s[1:][big] <= 0.99 ** 2 * s[:-1][big] * (1 + 1e-9))

    def test_iteration_limit(self, rng):
        net = trained_like_net(4, 3, seed=9)
        # break the cap on purpose
        net.params["W1"] *= 4.0
        net.params["W2"] *= 4.0
        with pytest.raises(IterationLimitError):
            net.inverse(rng.normal(size=(20, 4)) * 5, max_iter=20)


class TestProjection:
    def test_diagonal(self):
        net = IResNet(2, layers=1, seed=0)
        net.params["W1"][0] = np.array([[2.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
        net.project_spectral_norms(0.99)
        np.testing.assert_allclose(net.params["W1"][0][:2], np.diag([0.99, 0.495]), rtol=1e-6)

    def test_below_cap_untouched(self):
        net = IResNet(2, layers=1, seed=0)
        W = np.zeros((4, 2))
        W[0, 0] = 0.5
        net.params["W1"][0] = W
        net.project_spectral_norms(0.99)
        np.testing.assert_array_equal(net.params["W1"][0], W)

    def test_zero_matrix_untouched(self):
        net = IResNet(3, layers=2, seed=0)
        net.project_spectral_norms()
        assert np.all(net.params["W2"] == 0)

    def test_random_square_matrix(self, rng):
        net = IResNet(5, layers=1, seed=1)
        # a 5x5 block of the 10x5 W1 weight carries the test matrix
        W = np.zeros((10, 5))
        W[:5] = rng.normal(size=(5, 5)) * 2
        net.params["W1"][0] = W
        net.project_spectral_norms(0.99)
        assert jacobi_singular_values(net.params["W1"][0])[0] <= 0.99 + 1e-8

    def test_idempotent(self, rng):
        net = trained_like_net(4, 3, seed=4)
        net.params["W1"] *= 5
        net.project_spectral_norms()
        once = {k: v.copy() for k, v in net.params.items()}
        net.project_spectral_norms()
        for k in once:
            np.testing.assert_allclose(net.params[k], once[k], rtol=1e-5)

    def test_jacobian_orientation(self, rng):
        for seed in range(5):
            net = trained_like_net(3, 6, seed=seed, scale=1.0)
            for x in rng.normal(size=(10, 3)):
                assert np.linalg.det(net.jacobian(x)) > 0


class TestSerialization:
    def test_round_trip(self, tmp_path, rng):
        net = trained_like_net(3, 4, seed=8)
        net.save(tmp_path / "net.json")
        back = IResNet.load(tmp_path / "net.json")
        x = rng.normal(size=(10, 3))
        assert np.array_equal(back(x), net(x))
        assert back.cap == net.cap

    def test_missing_block_field(self):
        data = trained_like_net(2, 5, seed=1).to_dict()
        del data["blocks"][3]["W2"]
        with pytest.raises(CheckpointError, match=r"blocks\[3\]"):
            IResNet.from_dict(data)

    def test_missing_block(self):
        data = trained_like_net(2, 5, seed=1).to_dict()
        data["blocks"][2] = None
        with pytest.raises(CheckpointError, match=r"blocks\[2\]"):
            IResNet.from_dict(data)

    def test_wrong_shape_names_path(self):
        data = trained_like_net(2, 2, seed=1).to_dict()
        data["blocks"][1]["b1"] = [0.0]
        with pytest.raises(CheckpointError, match=r"blocks\[1\]\.b1"):
            IResNet.from_dict(data)

    def test_version_mismatch(self):
        data = IResNet(2, 1, seed=0).to_dict()
        data["format_version"] = 2
        with pytest.raises(UnsupportedVersionError):
            IResNet.from_dict(data)

    def test_schema_fields(self):
        data = json.loads(json.dumps(IResNet(2, 2, seed=0).to_dict()))
        assert set(data) == {"format_version", "dim", "cap", "blocks"}
        assert set(data["blocks"][0]) == {"W1", "b1", "W2", "b2"}


def test_linear_map_inverse(rng):
    Q = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    H = LinearMap(Q, rng.normal(size=3))
    x = rng.normal(size=(4, 3))
    np.testing.assert_allclose(H.inverse(H(x)), x, atol=1e-12)
    np.testing.assert_allclose(H.inverted()(H(x)), x, atol=1e-12)
