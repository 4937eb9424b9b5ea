import numpy as np
import pytest

from faciesmda.geomodel import ChannelGenParams, channel_fraction, generate_dataset
from faciesmda.nn import (NumericalError, ShapeError, VaeNetwork, backward, decode, encode,
                          preset_architecture, reconstruction_accuracy)
from gradcheck import check_network_gradients, random_batch, random_net

SHAPE = (2, 8, 8)


class TestGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_full_network(self, seed):
        net = random_net(seed)
        x, eps = random_batch(seed)
        worst, kinks, total = check_network_gradients(net, x, eps, [0.0, 0.3, 1.0][seed % 3], seed)
        assert worst < 1e-4
        # kink crossings are rare; a flood of them would hide real errors
        assert kinks <= 0.01 * total

    def test_no_kl_path_when_lambda_zero(self):
        # with eps = 0 the heads feed the decoder only through mu; logvar
        # receives gradient from the KL term alone
        net = random_net(3)
        x, _ = random_batch(3)
        grads = backward(net, x, np.zeros((3, 3)), lam=0.0)
        np.testing.assert_array_equal(grads["logvar.weight"], 0.0)
        np.testing.assert_array_equal(grads["logvar.bias"], 0.0)

    def test_duplicated_batch(self):
        net = random_net(4, dropout=0.0)
        x, eps = random_batch(4, n=1)
        g1 = backward(net, x, eps)
        g2 = backward(net, np.concatenate([x, x]), np.concatenate([eps, eps]))
        for k in g1:
            np.testing.assert_allclose(g2[k], g1[k], rtol=1e-12, atol=1e-15)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            backward(random_net(0), np.zeros((0,) + SHAPE), np.zeros((0, 3)))

    def test_nan_names_layer(self):
        net = random_net(0)
        net.params["dec0.weight"][0, 0] = np.nan
        x, eps = random_batch(0)
        with pytest.raises(NumericalError):
            backward(net, x, eps)


class TestConstruction:
    @pytest.mark.parametrize("shape", [(2, 32, 32), (2, 45, 45), (3, 40, 28), (2, 33, 20)])
    def test_desk_preset_reproduces_shape(self, shape):
        net = VaeNetwork.from_preset("table1-desk", shape)
        assert net.decode(np.zeros(net.n_z)).shape == shape

    def test_full_preset_constructs(self):
        net = VaeNetwork.from_preset("table1", (2, 45, 45))
        assert net.n_z == 100

    def test_shape_checked_at_construction(self):
        enc, dec, n_z = preset_architecture("compact", SHAPE)
        with pytest.raises(ShapeError):
            VaeNetwork((2, 9, 8), enc, dec, n_z)

    def test_unknown_preset(self):
        with pytest.raises(KeyError):
            preset_architecture("nope", SHAPE)

    def test_overrides(self):
        net = VaeNetwork.from_preset("table1-desk", (2, 32, 32), n_z=7, dense_units=16)
        assert net.n_z == 7 and net.params["enc4.weight"].shape[1] == 16

    def test_init_is_seeded(self):
        a = VaeNetwork.from_preset("compact", SHAPE, seed=5)
        b = VaeNetwork.from_preset("compact", SHAPE, seed=5)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])
            if k.endswith(".bias"):
                np.testing.assert_array_equal(a.params[k], 0.0)

    def test_he_and_glorot_limits(self):
        net = VaeNetwork.from_preset("compact", SHAPE, seed=0)
        # enc0 is a relu conv: fan_in = 2 * 2 * 2
        assert np.abs(net.params["enc0.weight"]).max() <= np.sqrt(6.0 / 8)
        # mu head is linear: fan_in 12, fan_out 3
        assert np.abs(net.params["mu.weight"]).max() <= np.sqrt(6.0 / 15)


class TestDecode:
    def test_zero_network(self):
        net = VaeNetwork.from_preset("compact", SHAPE)
        for k in net.params:
            net.params[k][...] = 0.0
        np.testing.assert_array_equal(decode(net, np.ones(3)), 0.5)

    def test_range_and_purity(self):
        net = random_net(1)
        z = np.random.default_rng(0).standard_normal((10, 3)) * 5
        a = decode(net, z)
        assert np.all((a > 0) & (a < 1))
        np.testing.assert_array_equal(a, decode(net, z))

    def test_latent_length_checked(self):
        with pytest.raises(ShapeError):
            decode(random_net(1), np.zeros(4))

    def test_encode_pure(self):
        net = random_net(2)
        x, _ = random_batch(2)
        mu1, lv1 = encode(net, x)
        mu2, lv2 = encode(net, x)
        np.testing.assert_array_equal(mu1, mu2)
        np.testing.assert_array_equal(lv1, lv2)
        assert mu1.shape == (3, 3)


class TestAccuracy:
    def test_constant_decoder_counts_tie_break(self):
        # all-0.5 output: argmax ties go to code 0, so accuracy = background share
        net = VaeNetwork.from_preset("compact", SHAPE)
        for k in net.params:
            net.params[k][...] = 0.0
        ds = generate_dataset(ChannelGenParams(nx=8, ny=8), 20, 3)
        f = np.mean([channel_fraction(g) for g in ds])
        np.testing.assert_allclose(reconstruction_accuracy(net, ds), 1.0 - f, atol=1e-12)

    def test_identity_like_net(self):
        # a decoder whose output ignores z but matches a fixed dataset exactly
        net = VaeNetwork.from_preset("compact", SHAPE)
        for k in net.params:
            net.params[k][...] = 0.0
        net.params[f"dec{len(net.decoder) - 1}.bias"][:] = [5.0, -5.0]
        assert reconstruction_accuracy(net, np.zeros((4, 8, 8), dtype=np.uint8)) == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            reconstruction_accuracy(random_net(0), np.zeros((0, 8, 8), dtype=np.uint8))
