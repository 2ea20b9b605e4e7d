import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipsysid import diffcore as dc
from lipsysid import networks as nets
from lipsysid import training as tr
from conftest import central_diff, rel_err

R2 = 1.0 / np.sqrt(2.0)


def random_net(seed, n_in=2, widths=(8, 8), n_out=2, gamma=1.5, activation="relu"):
    rng = np.random.default_rng(seed)
    norm = nets.AffineNormalizer(rng.uniform(0.3, 3.0, n_in), rng.normal(size=n_in))
    net = nets.init_lipschitz_net(norm, widths, n_out, gamma, seed, activation)
    for layer in net.hidden:  # move v, b off their zero init
        layer.v[:] = rng.normal(0, 0.5, layer.v.shape)
        layer.b[:] = rng.normal(0, 0.5, layer.b.shape)
    return net


def max_quotient(f, a, b):
    num = np.linalg.norm(f(a) - f(b), axis=1)
    den = np.linalg.norm(a - b, axis=1)
    return float(np.max(num / den))


class TestNormalizer:
    def test_square_corners(self):
        n = nets.fit_normalizer([(0, 0), (2, 0), (0, 2), (2, 2)])
        assert n.offset.tolist() == [1.0, 1.0]
        assert n.scale.tolist() == [1.0, 1.0]
        assert np.array_equal(n.A_F, np.eye(2))

    def test_population_convention(self):
        n = nets.fit_normalizer([[-1.0], [1.0]])
        assert n.offset[0] == 0.0
        assert n.scale[0] == pytest.approx(1.0)  # population std of {−1, 1} is 1
        # the sample (N−1) convention would give 1/√2
        assert n.scale[0] != pytest.approx(R2)

    def test_norm_is_max_scale(self):
        n = nets.AffineNormalizer([2.0, 0.5], [0.0, 0.0])
        assert n.norm == 2.0
        assert n.norm == pytest.approx(np.linalg.norm(n.A_F, 2))

    def test_degenerate(self):
        with pytest.raises(nets.DegenerateDataError):
            nets.fit_normalizer([[1.0, 2.0]] * 5)
        with pytest.raises(nets.DegenerateDataError):
            nets.fit_normalizer([[1.0, 2.0]])

    def test_nonpositive_scale_rejected(self):
        with pytest.raises(ValueError):
            nets.AffineNormalizer([1.0, 0.0], [0.0, 0.0])


class TestSandwich:
    def _apply(self, h):
        return nets.sandwich_apply(
            np.array([[R2]]), np.array([[R2]]), np.zeros(1), np.zeros(1), np.array([[h]])
        )[0, 0]

    def test_injected_positive(self):
        assert self._apply(3.0) == pytest.approx(3.0, abs=1e-12)

    def test_injected_negative(self):
        assert self._apply(-3.0) == 0.0

    def test_forward_vector_and_batch(self, rng):
        layer = nets.SandwichLayerParams(rng.normal(size=(4, 4)), rng.normal(size=(3, 4)), np.zeros(4), np.zeros(4))
        h = rng.normal(size=(5, 3))
        batch = nets.sandwich_forward(layer, h)
        assert batch.shape == (5, 4)
        assert np.allclose(nets.sandwich_forward(layer, h[2]), batch[2])
        with pytest.raises(ValueError):
            nets.sandwich_forward(layer, np.ones(2))

    @pytest.mark.parametrize("activation", ["relu", "leaky_relu"])
    def test_layer_is_1_lipschitz(self, activation):
        rng = np.random.default_rng(5)
        for trial in range(5):
            n_in, n_out = rng.integers(1, 12, size=2)
            layer = nets.SandwichLayerParams(
                rng.normal(size=(n_out, n_out)), rng.normal(size=(n_in, n_out)),
                rng.normal(0, 1.0, n_out), rng.normal(0, 1.0, n_out),
            )
            a = rng.normal(0, 3, (10_000, n_in))
            d = rng.normal(size=(10_000, n_in))
            b = a + d / np.linalg.norm(d, axis=1, keepdims=True)  # unit-distance pairs
            f = lambda h: nets.sandwich_forward(layer, h, activation)
            assert max_quotient(f, a, b) <= 1.0 + 1e-7


class TestLipschitzNet:
    def test_zero_at_zero_bitwise(self):
        for seed in range(100):
            net = random_net(seed)
            out = nets.net_forward(net, np.zeros(2))
            assert np.all(out == 0.0)
            assert not np.signbit(out).any() or np.all(out == 0.0)

    def test_zero_rows_inside_batch(self, rng):
        net = random_net(3)
        X = rng.normal(size=(7, 2))
        X[[0, 4]] = 0.0
        out = net(X)
        assert np.all(out[[0, 4]] == 0.0)
        assert np.all(out[[1, 2, 3, 5, 6]] != 0.0)

    def test_identityish_net(self):
        # one injected layer, γ' = 1, A_F = I, B_L = [[1]]: Φ(x) = ReLU(x)
        layers = [(np.array([[R2]]), np.array([[R2]]), np.zeros(1), np.zeros(1))]
        x = np.array([[-2.0], [0.0], [0.5], [3.0]])
        out = nets.lipnet_apply(x, nets.AffineNormalizer.identity(1), layers, np.array([[1.0]]), 1.0)
        assert np.allclose(out[:, 0], [0.0, 0.0, 0.5, 3.0], atol=1e-12)

    def test_bound_formula(self):
        net = random_net(0)
        assert net.lipschitz_bound() == net.gamma_prime * net.normalizer.scale.max()
        net.gamma_prime = 2.01
        net.normalizer = nets.AffineNormalizer.identity(2)
        assert nets.lipschitz_bound(net) == 2.01
        net.gamma_prime = 1.0
        net.normalizer = nets.AffineNormalizer([2.0, 0.5], [0.0, 0.0])
        assert nets.lipschitz_bound(net) == 2.0
        net.gamma_prime = 0.0
        assert nets.lipschitz_bound(net) == 0.0

    def test_init_sets_requested_gamma(self):
        norm = nets.AffineNormalizer([0.5, 4.0], [0.1, -0.2])
        net = nets.init_lipschitz_net(norm, (4,), 2, gamma=2.01, seed=0)
        assert net.lipschitz_bound() == pytest.approx(2.01, rel=1e-15)

    def test_random_pairs_below_bound(self):
        rng = np.random.default_rng(11)
        for seed in range(3):
            net = random_net(seed, widths=(16, 16, 16))
            a = rng.uniform(-10, 10, (10_000, 2))
            b = rng.uniform(-10, 10, (10_000, 2))
            assert max_quotient(net, a, b) <= net.lipschitz_bound() + 1e-7
            # close pairs probe the local slope
            c = a + rng.normal(0, 1e-3, a.shape)
            assert max_quotient(net, a, c) <= net.lipschitz_bound() + 1e-7

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), gamma=st.floats(0.1, 10.0))
    def test_lipschitz_property(self, seed, gamma):
        net = random_net(seed, widths=(6, 5), gamma=gamma)
        rng = np.random.default_rng(seed)
        a = rng.uniform(-10, 10, (1000, 2))
        b = rng.uniform(-10, 10, (1000, 2))
        assert max_quotient(net, a, b) <= net.lipschitz_bound() + 1e-7

    def test_frozen_matches(self, rng):
        net = random_net(2)
        X = rng.normal(size=(20, 2))
        assert np.allclose(net.frozen()(X), net(X), rtol=0, atol=1e-14)

    def test_copy_is_independent(self):
        net = random_net(1)
        c = net.copy()
        c.hidden[0].X[0, 0] += 1.0
        assert net.hidden[0].X[0, 0] != c.hidden[0].X[0, 0]

    def test_full_loss_gradient(self):
        rng = np.random.default_rng(7)
        net = random_net(7, widths=(4, 3))
        X = rng.normal(size=(6, 2))
        Y = rng.normal(size=(6, 2))

        def loss_of(params):
            return float(tr.batch_mse(net.forward_with(params, X), Y))

        tape = dc.Tape()
        params = net.parameters()
        pv = [tape.watch(p) for p in params]
        grads = tape.gradient(tr.batch_mse(net.forward_with(pv, X), Y), pv)
        for k, p in enumerate(params):
            def f(z, k=k):
                ps = list(params)
                ps[k] = z
                return loss_of(ps)

            assert np.all(rel_err(grads[k], central_diff(f, p), floor=1e-6) <= 1e-4), k


class TestMlp:
    def test_identity_on_positives(self):
        net = nets.MlpBaseline([np.eye(2), np.eye(2)], [np.zeros(2), np.zeros(2)])
        assert np.array_equal(nets.mlp_forward(net, np.array([1.0, 2.0])), [1.0, 2.0])

    def test_constant(self):
        c = np.array([0.3, -1.2])
        net = nets.MlpBaseline([np.zeros((2, 2))], [c])
        assert np.array_equal(net(np.array([[5.0, 6.0], [-1.0, 0.0]])), np.vstack([c, c]))

    def test_deterministic(self):
        a = nets.init_mlp(2, (8, 8), 2, seed=0)
        b = nets.init_mlp(2, (8, 8), 2, seed=0)
        assert np.array_equal(a(np.zeros(2)), b(np.zeros(2)))

    def test_chain_validation(self):
        with pytest.raises(ValueError):
            nets.MlpBaseline([np.eye(2), np.ones((2, 3))], [np.zeros(2), np.zeros(2)])
        with pytest.raises(ValueError):
            nets.mlp_forward(nets.init_mlp(3, (4,), 1), np.ones(2))

    def test_upper_bound_examples(self):
        net = nets.MlpBaseline([np.diag([2.0]), np.diag([3.0])], [np.zeros(1), np.zeros(1)])
        assert nets.mlp_lipschitz_upper(net) == pytest.approx(6.0)
        M = np.array([[-0.2, 2.0], [-2.0, -0.2]])
        net = nets.MlpBaseline([M], [np.zeros(2)])
        assert nets.mlp_lipschitz_upper(net) == pytest.approx(2.0100, abs=5e-5)
        net = nets.MlpBaseline([np.zeros((2, 2)), np.zeros((1, 2))], [np.zeros(2), np.zeros(1)])
        assert nets.mlp_lipschitz_upper(net) == 0.0

    def test_upper_bound_includes_normalizer(self):
        norm = nets.AffineNormalizer([4.0, 1.0], [0.0, 0.0])
        net = nets.MlpBaseline([np.eye(2)], [np.zeros(2)], normalizer=norm)
        assert nets.mlp_lipschitz_upper(net) == pytest.approx(4.0)

    def test_batch_estimate_examples(self, rng):
        batch = rng.normal(size=(30, 2))
        assert nets.batch_lipschitz_estimate(lambda x: x, batch) == pytest.approx(1.0)
        with warnings.catch_warnings():
            warnings.simplefilter("error")  # constant output is not a coincident batch
            assert nets.batch_lipschitz_estimate(lambda x: np.ones_like(x), batch) == 0.0
        assert nets.batch_lipschitz_estimate(lambda x: 3 * x, [[0.0], [1.0], [2.0]]) == pytest.approx(3.0)

    def test_batch_estimate_coincident_warns(self):
        with pytest.warns(RuntimeWarning):
            assert nets.batch_lipschitz_estimate(lambda x: x, np.ones((4, 2))) == 0.0
        with pytest.raises(ValueError):
            nets.batch_lipschitz_estimate(lambda x: x, np.ones((1, 2)))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), act=st.sampled_from(["relu", "leaky_relu"]))
    def test_upper_dominates_estimate(self, seed, act):
        rng = np.random.default_rng(seed)
        norm = nets.AffineNormalizer(rng.uniform(0.2, 3, 2), rng.normal(size=2))
        net = nets.init_mlp(2, (8, 8), 2, act, seed, norm)
        batch = rng.normal(0, 2, (64, 2))
        assert nets.batch_lipschitz_estimate(net, batch) <= nets.mlp_lipschitz_upper(net) * (1 + 1e-9)


class TestSerialization:
    def _roundtrip(self, net, tmp_path, X):
        p = tmp_path / "m.npz"
        nets.save_model(p, net, {"note": "x"})
        back = nets.load_model(p)
        assert type(back) is type(net)
        for a, b in zip(net.parameters(), back.parameters()):
            assert a.dtype == b.dtype and np.array_equal(a, b)
        assert np.array_equal(net(X), back(X))
        assert back.lipschitz_bound() == net.lipschitz_bound()
        assert back.meta["note"] == "x"
        return back

    def test_lipnet(self, tmp_path, rng):
        net = random_net(4)
        back = self._roundtrip(net, tmp_path, rng.normal(size=(9, 2)))
        assert back.gamma_prime == net.gamma_prime
        assert np.array_equal(back.normalizer.scale, net.normalizer.scale)

    @pytest.mark.parametrize("norm", [None, nets.AffineNormalizer([2.0, 0.5], [1.0, -1.0])])
    def test_mlp(self, tmp_path, rng, norm):
        net = nets.init_mlp(2, (5, 3), 2, "leaky_relu", 3, norm)
        back = self._roundtrip(net, tmp_path, rng.normal(size=(9, 2)))
        assert back.activation == "leaky_relu"

    def test_bad_version(self, tmp_path):
        p = tmp_path / "m.npz"
        np.savez(p, format_version=np.array(99), kind=np.array("lipnet"))
        with pytest.raises(ValueError):
            nets.load_model(p)
