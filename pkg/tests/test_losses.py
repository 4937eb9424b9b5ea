import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from faciesmda.nn import BCE_EPS, bce_loss, kl_divergence, reparameterize, total_loss

LN2 = np.log(2.0)


class TestKL:
    def test_zero_at_prior(self):
        assert kl_divergence(np.zeros(4), np.zeros(4)) == 0.0

    def test_unit_mean(self):
        np.testing.assert_allclose(kl_divergence([1.0], [0.0]), 0.5, atol=1e-12)

    def test_variance_four(self):
        expected = 0.5 * (4.0 - np.log(4.0) - 1.0)
        np.testing.assert_allclose(kl_divergence([0.0], [np.log(4.0)]), expected, atol=1e-12)
        np.testing.assert_allclose(expected, 0.806853, atol=1e-6)

    def test_batched(self):
        mu = np.array([[1.0, 0.0], [0.0, 0.0]])
        np.testing.assert_allclose(kl_divergence(mu, np.zeros_like(mu)), [0.5, 0.0])

    @settings(max_examples=200)
    @given(arrays(np.float64, 6, elements=st.floats(-20, 20)),
           arrays(np.float64, 6, elements=st.floats(-20, 20)))
    def test_nonnegative(self, mu, logvar):
        kl = kl_divergence(mu, logvar)
        assert kl >= 0.0
        # zero only at the prior, up to underflow of the squared terms
        if np.max(np.abs(mu)) > 1e-6 or np.max(np.abs(logvar)) > 1e-6:
            assert kl > 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            kl_divergence(np.zeros(2), np.zeros(3))


class TestBCE:
    def test_half(self):
        np.testing.assert_allclose(bce_loss([1.0], [0.5]), LN2, atol=1e-12)

    def test_pair(self):
        np.testing.assert_allclose(bce_loss([0.0, 1.0], [0.5, 0.5]), LN2, atol=1e-12)

    def test_perfect_limit(self):
        x = np.array([0.0, 1.0, 1.0])
        np.testing.assert_allclose(bce_loss(x, x), -np.log1p(-BCE_EPS), rtol=1e-9)
        assert bce_loss(x, x) < 1.1e-7

    def test_clamped_no_inf(self):
        assert np.isfinite(bce_loss([1.0], [0.0]))

    def test_per_sample(self):
        x = np.zeros((2, 1, 2, 2))
        xhat = np.full_like(x, 0.5)
        np.testing.assert_allclose(bce_loss(x, xhat, per_sample_axes=(1, 2, 3)), [LN2, LN2])


class TestTotal:
    def test_sum(self):
        np.testing.assert_allclose(total_loss([1.0], [0.5], [1.0], [0.0], 1.0),
                                   LN2 + 0.5, atol=1e-12)
        np.testing.assert_allclose(LN2 + 0.5, 1.193147, atol=1e-6)

    def test_lambda_zero(self):
        assert total_loss([1.0], [0.3], [2.0], [1.0], 0.0) == bce_loss([1.0], [0.3])

    def test_zero_kl(self):
        for lam in (0.0, 0.5, 10.0):
            assert total_loss([1.0], [0.3], [0.0], [0.0], lam) == bce_loss([1.0], [0.3])

    @settings(max_examples=50)
    @given(st.floats(0, 10), st.floats(0, 10))
    def test_affine_in_lambda(self, a, b):
        args = ([1.0, 0.0], [0.7, 0.2], [0.3, -1.0], [0.5, 0.1])
        kl = kl_divergence(*args[2:])
        np.testing.assert_allclose(total_loss(*args, b) - total_loss(*args, a), (b - a) * kl,
                                   atol=1e-9)


class TestReparameterize:
    def test_value(self):
        np.testing.assert_allclose(reparameterize([1.0], [np.log(4.0)], [2.0]), [5.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            reparameterize([1.0], [0.0, 0.0], [1.0])
