import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vmtlab import autodiff as ad


def _grad_of(fn, *points):
    tape = ad.Tape()
    xs = [tape.variable(p) for p in points]
    out = fn(*xs)
    g = ad.backward(tape, out)
    return out, [g.get(x.node_id) for x in xs]


class TestPrimitiveExamples:
    def test_relu_mean(self):
        _, (g,) = _grad_of(lambda x: ad.mean(ad.relu(x)), [-1.0, 2.0])
        np.testing.assert_array_equal(g, [0.0, 0.5])

    def test_matmul_grads(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[0.5], [-1.0]])
        _, (ga, gb) = _grad_of(lambda x, y: ad.sum(ad.matmul(x, y)), a, b)
        np.testing.assert_allclose(ga, np.ones((2, 1)) @ b.T)
        np.testing.assert_allclose(gb, a.T @ np.ones((2, 1)))

    def test_fan_out_sums(self):
        out, (g,) = _grad_of(lambda x: ad.sum(ad.add(x, x)), [1.0, -3.0, 2.0])
        np.testing.assert_array_equal(g, [2.0, 2.0, 2.0])

    def test_softmax_rows_sum_to_one_and_grad_of_sum_is_zero(self, rng):
        z = rng.normal(size=(6, 4)) * 10
        out, (g,) = _grad_of(lambda t: ad.sum(ad.softmax(t)), z)
        np.testing.assert_allclose(ad.softmax(z).data.sum(1), 1.0, atol=1e-15)
        np.testing.assert_allclose(g, 0.0, atol=1e-14)

    def test_sigmoid_stable_at_extremes(self):
        s = ad.sigmoid(np.array([-800.0, 0.0, 800.0])).data
        np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])

    def test_clip_passes_grad_inside_only(self):
        _, (g,) = _grad_of(lambda x: ad.sum(ad.clip(x, 0.0, 1.0)), [-0.5, 0.5, 1.5])
        np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])

    def test_rows_gather_scatters_back(self):
        _, (g,) = _grad_of(lambda x: ad.sum(ad.rows(x, [0, 0, 2])), np.ones((3, 2)))
        np.testing.assert_array_equal(g, [[2, 2], [0, 0], [1, 1]])

    def test_broadcast_bias(self):
        _, (gx, gb) = _grad_of(lambda x, b: ad.sum(ad.add(x, b)), np.zeros((4, 3)), np.zeros(3))
        np.testing.assert_array_equal(gb, [4.0, 4.0, 4.0])
        assert gx.shape == (4, 3)

    def test_untracked_ops_do_not_touch_tape(self):
        tape = ad.Tape()
        x = tape.variable([1.0])
        y = ad.exp(ad.constant([2.0]))
        assert not y.tracked
        assert len(tape) == 1
        assert ad.add(x, y).tracked

    def test_stop_gradient_blocks(self):
        _, (g,) = _grad_of(lambda x: ad.sum(ad.mul(x, ad.stop_gradient(x))), [3.0])
        np.testing.assert_array_equal(g, [3.0])


class TestErrors:
    def test_non_scalar_root(self):
        tape = ad.Tape()
        x = tape.variable([1.0, 2.0])
        with pytest.raises(ad.AutodiffError, match="scalar"):
            ad.backward(tape, ad.relu(x))

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            ad.matmul(np.zeros((2, 3)), np.zeros((4, 5)))

    def test_different_tapes(self):
        a, b = ad.Tape().variable([1.0]), ad.Tape().variable([1.0])
        with pytest.raises(ad.AutodiffError, match="different tapes"):
            ad.add(a, b)

    def test_log_of_zero_raises_overflow(self):
        with pytest.raises(ad.NumericOverflowError, match="log"):
            ad.log(np.array([0.0, 1.0]))

    def test_exp_overflow(self):
        with pytest.raises(ad.NumericOverflowError):
            ad.exp(np.array([1000.0]))

    def test_unknown_primitive(self):
        with pytest.raises(ad.AutodiffError):
            ad.apply_primitive("nope", [1.0])


def _composite(x):
    # touches matmul, dense, softmax, kl, entropy, sigmoid, slicing and broadcast
    w = ad.constant(np.linspace(-1, 1, 12).reshape(3, 4))
    h = ad.dense(x, w, np.linspace(-0.2, 0.3, 4), relu=True)
    p = ad.softmax(h)
    q = ad.softmax(ad.scale(ad.slice_rows(x, 0, x.shape[0]) @ w, 0.5))
    kl = ad.mean(ad.kl_rows(p, q))
    ent = ad.mean(ad.entropy_rows(p))
    s = ad.mean(ad.sigmoid(ad.sum(h, axis=1)))
    return ad.add(ad.add(kl, ent), ad.mul(s, s))


class TestFiniteDifferences:
    def test_composite_random_points(self):
        rng = np.random.default_rng(0)
        failures = []
        for i in range(100):
            point = rng.normal(size=(5, 3))
            rep = ad.finite_diff_check(_composite, point)
            if not rep.passed:
                failures.append((i, rep.max_rel_error))
        assert not failures, failures

    @pytest.mark.parametrize("op", ["exp", "log", "softmax", "sigmoid", "entropy"])
    def test_single_primitive(self, op, rng):
        fns = {
            "exp": lambda x: ad.sum(ad.exp(x)),
            "log": lambda x: ad.sum(ad.log(ad.add(ad.mul(x, x), 1.0))),
            "softmax": lambda x: ad.sum(ad.mul(ad.softmax(x), np.arange(12.0).reshape(3, 4))),
            "sigmoid": lambda x: ad.sum(ad.sigmoid(x)),
            "entropy": lambda x: ad.sum(ad.entropy_rows(ad.softmax(x))),
        }
        rep = ad.finite_diff_check(fns[op], rng.normal(size=(3, 4)))
        assert rep.passed, str(rep)
        assert rep.max_rel_error < 1e-6

    def test_report_flags_wrong_gradient(self):
        # untracked output -> analytic zeros vs nonzero numeric
        rep = ad.finite_diff_check(lambda x: float(np.sum(x.data ** 2)), np.array([1.0, 2.0]))
        assert not rep.passed
        assert rep.worst_index is not None


class TestDeterminism:
    def test_identical_runs_bitwise(self, rng):
        point = rng.normal(size=(5, 3))
        a = _grad_of(_composite, point)[1][0]
        b = _grad_of(_composite, point)[1][0]
        assert np.array_equal(a, b)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-30, 30)))
def test_softmax_is_distribution(z):
    s = ad.softmax(z).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), st.floats(-5, 5))
def test_softmax_shift_invariant(z, c):
    np.testing.assert_allclose(ad.softmax(z).data, ad.softmax(z + c).data, atol=1e-12)
