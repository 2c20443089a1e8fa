import numpy as np
import pytest

from vmtlab import kernels

BACKENDS = kernels.backends()


def _probs(rng, n, k):
    z = rng.normal(size=(n, k)) * 3
    e = np.exp(z - z.max(1, keepdims=True))
    return e / e.sum(1, keepdims=True)


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")
    assert "python" in BACKENDS


@pytest.mark.skipif("cython" not in BACKENDS, reason="compiled kernels not built")
class TestBackendsAgree:
    py, cy = BACKENDS.get("python"), BACKENDS.get("cython")

    def test_softmax(self, rng):
        z = rng.normal(size=(37, 5)) * 50
        np.testing.assert_allclose(self.cy.softmax_rows(z), self.py.softmax_rows(z), rtol=0, atol=1e-15)
        s = self.py.softmax_rows(z)
        g = rng.normal(size=z.shape)
        np.testing.assert_allclose(self.cy.softmax_rows_vjp(s, g), self.py.softmax_rows_vjp(s, g), atol=1e-14)

    def test_kl_and_entropy(self, rng):
        p, q = _probs(rng, 50, 4), _probs(rng, 50, 4)
        p[0] = [1.0, 0.0, 0.0, 0.0]
        q[1] = [0.0, 0.0, 0.5, 0.5]
        g = rng.normal(size=50)
        np.testing.assert_allclose(self.cy.kl_rows(p, q), self.py.kl_rows(p, q), atol=1e-13)
        for a, b in zip(self.cy.kl_rows_vjp(p, q, g), self.py.kl_rows_vjp(p, q, g)):
            np.testing.assert_allclose(a, b, atol=1e-9, rtol=1e-12)
        np.testing.assert_allclose(self.cy.entropy_rows(p), self.py.entropy_rows(p), atol=1e-14)
        np.testing.assert_allclose(self.cy.entropy_rows_vjp(p, g), self.py.entropy_rows_vjp(p, g), atol=1e-13)

    @pytest.mark.parametrize("relu", [True, False])
    def test_bias_act(self, rng, relu):
        z = rng.normal(size=(20, 7))
        b = rng.normal(size=7)
        a = z.copy()
        c = z.copy()
        self.py.bias_act_(a, b, relu)
        self.cy.bias_act_(c, b, relu)
        np.testing.assert_array_equal(a, c)
        g = rng.normal(size=z.shape)
        for x, y in zip(self.py.bias_act_vjp(a, g, relu), self.cy.bias_act_vjp(c, g, relu)):
            np.testing.assert_allclose(x, y, atol=1e-14)

    def test_nan_propagates_through_relu(self):
        z = np.array([[np.nan, -1.0]])
        self.cy.bias_act_(z, np.zeros(2), True)
        assert np.isnan(z[0, 0]) and z[0, 1] == 0.0


def test_softmax_extreme_logits():
    s = kernels.softmax_rows(np.array([[1000.0, 0.0, -1000.0]]))
    assert np.isfinite(s).all()
    assert s[0, 0] == pytest.approx(1.0)


def test_kl_zero_times_log_zero():
    p = np.array([[1.0, 0.0]])
    q = np.array([[0.5, 0.5]])
    assert kernels.kl_rows(p, q)[0] == pytest.approx(np.log(2), abs=1e-12)
