import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toposurv import autodiff as ad
from toposurv.autodiff import (AdamWState, BatchStandardizer, DegenerateBatch,
                               NotScalar, ShapeMismatch, Tape, Tensor, adamw_step,
                               backward, finite_difference_check)


def scalar_loss(fn):
    """Wrap an op chain ending in sum_all so FD sees a scalar."""
    def wrapped(tape, x):
        return ad.sum_all(tape, fn(tape, x))
    return wrapped


class TestElementwise:
    def test_sigmoid_at_zero(self):
        tape = Tape()
        x = Tensor(np.zeros(()), True)
        y = ad.sigmoid(tape, x)
        assert y.item() == 0.5
        g = backward(tape, y)[x]
        assert g == pytest.approx(0.25)

    def test_relu_negative(self):
        tape = Tape()
        x = Tensor(np.array(-3.0), True)
        y = ad.relu(tape, x)
        assert y.item() == 0.0
        assert backward(tape, y)[x] == 0.0

    def test_add_grads_pass_through(self):
        tape = Tape()
        a = Tensor(np.array([1.0, 2.0]), True)
        b = Tensor(np.array([3.0, 4.0]), True)
        s = ad.sum_all(tape, ad.add(tape, a, b))
        assert np.array_equal(ad.add(Tape(), a, b).values, [4.0, 6.0])
        grads = backward(tape, s)
        assert np.array_equal(grads[a], [1.0, 1.0])
        assert np.array_equal(grads[b], [1.0, 1.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.add(Tape(), Tensor(np.zeros(2)), Tensor(np.zeros(3)))

    def test_fanout_accumulates(self):
        tape = Tape()
        x = Tensor(np.array(1.5), True)
        y = ad.add(tape, x, x)
        assert backward(tape, y)[x] == 2.0

    def test_identity_gradient(self):
        tape = Tape()
        x = Tensor(np.array(2.0), True)
        y = ad.mul(tape, x, 1.0)
        assert backward(tape, y)[x] == 1.0


class TestMatmul:
    def test_identity(self):
        a = np.arange(6.0).reshape(2, 3)
        out = ad.matmul(Tape(), Tensor(a), Tensor(np.eye(3)))
        assert np.array_equal(out.values, a)

    def test_small_product(self):
        out = ad.matmul(Tape(), Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.values == [[11.0]]

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(0)
        b = rng.normal(size=(4, 2))

        def fn(tape, x):
            return ad.sum_all(tape, ad.mul(tape, ad.matmul(tape, x, Tensor(b)),
                                           ad.matmul(tape, x, Tensor(b))))
        err = finite_difference_check(fn, rng.normal(size=(3, 4)))
        assert err < 1e-4

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.matmul(Tape(), Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


class TestConv3d:
    def test_unit_kernel_identity(self):
        x = np.random.default_rng(1).random((1, 3, 3, 3))
        k = np.ones((1, 1, 1, 1, 1))
        out = ad.conv3d(Tape(), Tensor(x), Tensor(k))
        assert np.allclose(out.values, x)

    def test_ones_kernel_sums_window(self):
        x = np.ones((1, 3, 3, 3))
        k = np.ones((1, 1, 2, 2, 2))
        out = ad.conv3d(Tape(), Tensor(x), Tensor(k))
        assert np.allclose(out.values, 8.0)

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(2)
        x0 = rng.normal(size=(2, 4, 4, 4))
        k0 = rng.normal(size=(3, 2, 3, 3, 3))

        def fn_x(tape, x):
            return ad.sum_all(tape, ad.relu(tape, ad.conv3d(tape, x, Tensor(k0),
                                                            stride=1, padding=1)))

        def fn_k(tape, k):
            return ad.sum_all(tape, ad.relu(tape, ad.conv3d(tape, Tensor(x0), k,
                                                            stride=1, padding=1)))
        assert finite_difference_check(fn_x, x0) < 1e-4
        assert finite_difference_check(fn_k, k0) < 1e-4

    def test_empty_output_rejected(self):
        with pytest.raises(ShapeMismatch):
            ad.conv3d(Tape(), Tensor(np.zeros((1, 2, 2, 2))),
                      Tensor(np.zeros((1, 1, 3, 3, 3))))


class TestConvTranspose3d:
    def test_single_stamp(self):
        x = np.ones((1, 1, 1, 1))
        k = np.ones((1, 1, 2, 2, 2))
        out = ad.conv_transpose3d(Tape(), Tensor(x), Tensor(k), stride=2)
        assert out.shape == (1, 2, 2, 2)
        assert np.allclose(out.values, 1.0)

    def test_adjoint_identity(self):
        # extents chosen so stride-2 windows tile the input exactly
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 4, 4, 4))
        k = rng.normal(size=(3, 2, 2, 2, 2))
        y_shape_out = ad.conv3d(Tape(), Tensor(x), Tensor(k), stride=2)
        y = rng.normal(size=y_shape_out.shape)
        lhs = float((y_shape_out.values * y).sum())
        back = ad.conv_transpose3d(Tape(), Tensor(y), Tensor(k), stride=2)
        rhs = float((x * back.values).sum())
        assert abs(lhs - rhs) < 1e-6 * np.linalg.norm(x) * np.linalg.norm(y)

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(4)
        x0 = rng.normal(size=(2, 3, 3, 3))
        k0 = rng.normal(size=(2, 3, 2, 2, 2))

        def fn_x(tape, x):
            return ad.sum_all(tape, ad.conv_transpose3d(tape, x, Tensor(k0), stride=2))

        def fn_k(tape, k):
            out = ad.conv_transpose3d(tape, Tensor(x0), k, stride=2)
            return ad.sum_all(tape, ad.mul(tape, out, out))
        assert finite_difference_check(fn_x, x0) < 1e-4
        assert finite_difference_check(fn_k, k0) < 1e-4


class TestMaxpool:
    def test_constant_halves_extents(self):
        out = ad.maxpool3d(Tape(), Tensor(np.full((1, 4, 4, 4), 0.7)))
        assert out.shape == (1, 2, 2, 2)
        assert np.allclose(out.values, 0.7)

    def test_gradient_routes_to_argmax(self):
        tape = Tape()
        x = Tensor(np.array([1.0, 5.0]).reshape(1, 1, 1, 2), True)
        y = ad.sum_all(tape, ad.maxpool3d(tape, x))
        g = backward(tape, y)[x]
        assert np.array_equal(g.ravel(), [0.0, 1.0])

    def test_tie_goes_to_first_index(self):
        tape = Tape()
        x = Tensor(np.array([2.0, 2.0]).reshape(1, 1, 1, 2), True)
        y = ad.sum_all(tape, ad.maxpool3d(tape, x))
        g = backward(tape, y)[x]
        assert np.array_equal(g.ravel(), [1.0, 0.0])

    def test_odd_extent_padding(self):
        x = np.arange(27.0).reshape(1, 3, 3, 3)
        out = ad.maxpool3d(Tape(), Tensor(x))
        assert out.shape == (1, 2, 2, 2)
        assert out.values[0, 1, 1, 1] == 26.0


class TestSoftmax:
    def test_uniform(self):
        out = ad.softmax(Tape(), Tensor(np.zeros(5)))
        assert np.allclose(out.values, 0.2)

    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=7)
        a = ad.softmax(Tape(), Tensor(logits)).values
        b = ad.softmax(Tape(), Tensor(logits + 123.4)).values
        assert np.abs(a - b).max() < 1e-12

    def test_jacobian_matches_fd(self):
        rng = np.random.default_rng(6)
        w = rng.normal(size=4)

        def fn(tape, x):
            return ad.sum_all(tape, ad.mul(tape, ad.softmax(tape, x), Tensor(w)))
        assert finite_difference_check(fn, rng.normal(size=4)) < 1e-5

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_probability_vector(self, logits):
        p = ad.softmax(Tape(), Tensor(np.array(logits))).values
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) <= 1e-9


class TestLayerNorm:
    def test_constant_input_zeros(self):
        out = ad.layer_norm(Tape(), Tensor(np.full(6, 3.3)),
                            Tensor(np.ones(6)), Tensor(np.zeros(6)))
        assert np.allclose(out.values, 0.0)

    def test_already_normalized(self):
        out = ad.layer_norm(Tape(), Tensor(np.array([1.0, -1.0])),
                            Tensor(np.ones(2)), Tensor(np.zeros(2)))
        assert np.allclose(out.values, [1.0, -1.0], atol=1e-4)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(7)
        gain = Tensor(rng.normal(size=5))
        bias = Tensor(rng.normal(size=5))
        w = rng.normal(size=5)

        def fn(tape, x):
            out = ad.layer_norm(tape, x, gain, bias)
            return ad.sum_all(tape, ad.mul(tape, out, Tensor(w)))
        assert finite_difference_check(fn, rng.normal(size=5)) < 1e-4


class TestBatchStandardize:
    def test_two_point_batch(self):
        bs = BatchStandardizer()
        out = bs.train_batch(np.array([40.0, 60.0]))
        assert np.allclose(out, [-1.0, 1.0], atol=1e-8)

    def test_inference_at_running_mean(self):
        bs = BatchStandardizer()
        bs.train_batch(np.array([40.0, 60.0]))
        assert abs(bs.apply(np.array([bs.running_mean]))[0]) < 1e-12

    def test_running_mean_update(self):
        bs = BatchStandardizer()
        bs.train_batch(np.full(4, 50.0) + np.array([-1.0, 1.0, -1.0, 1.0]))
        assert bs.running_mean == pytest.approx(5.0)

    def test_degenerate_batch(self):
        with pytest.raises(DegenerateBatch):
            BatchStandardizer().train_batch(np.array([1.0]))


class TestBackward:
    def test_loss_must_be_scalar(self):
        tape = Tape()
        x = Tensor(np.zeros(3), True)
        y = ad.relu(tape, x)
        with pytest.raises(NotScalar):
            backward(tape, y)

    def test_gradient_shapes_match(self):
        tape = Tape()
        x = Tensor(np.random.default_rng(8).normal(size=(3, 4)), True)
        loss = ad.sum_all(tape, ad.mul(tape, x, x))
        assert backward(tape, loss)[x].shape == (3, 4)

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(9)
            tape = Tape()
            x = Tensor(rng.normal(size=(2, 3, 3, 3)), True)
            k = Tensor(rng.normal(size=(2, 2, 2, 2, 2)), True)
            loss = ad.sum_all(tape, ad.sigmoid(tape, ad.conv3d(tape, x, k)))
            g = backward(tape, loss)
            return loss.item(), g[x].copy(), g[k].copy()
        l1, gx1, gk1 = run()
        l2, gx2, gk2 = run()
        assert l1 == l2
        assert np.array_equal(gx1, gx2) and np.array_equal(gk1, gk2)


class TestAdamW:
    def test_single_step_no_decay(self):
        params = {"w": Tensor(np.array(1.0), True)}
        adamw_step(params, {"w": np.array(1.0)}, AdamWState(lr=0.1, weight_decay=0.0))
        assert params["w"].values == pytest.approx(0.9, abs=1e-7)

    def test_decoupled_decay(self):
        params = {"w": Tensor(np.array(1.0), True)}
        adamw_step(params, {"w": np.array(1.0)}, AdamWState(lr=0.1, weight_decay=0.05))
        assert params["w"].values == pytest.approx(0.895, abs=1e-7)

    def test_zero_gradient_no_decay_keeps_weight(self):
        params = {"w": Tensor(np.array(2.5), True)}
        adamw_step(params, {"w": np.array(0.0)}, AdamWState(lr=0.1, weight_decay=0.0))
        assert params["w"].values == pytest.approx(2.5)


class TestFiniteDifference:
    def test_quadratic_is_near_exact(self):
        rng = np.random.default_rng(10)

        def fn(tape, x):
            return ad.mul(tape, ad.sum_all(tape, ad.mul(tape, x, x)), 0.5)
        assert finite_difference_check(fn, rng.normal(size=6)) < 1e-6

    def test_sigmoid_derivative_recovered(self):
        def fn(tape, x):
            return ad.sum_all(tape, ad.sigmoid(tape, x))
        assert finite_difference_check(fn, np.zeros(1)) < 1e-6

    def test_conv_relu_composite(self):
        rng = np.random.default_rng(11)
        k = Tensor(rng.normal(size=(2, 1, 2, 2, 2)))
        # nudge inputs away from relu kinks
        x0 = rng.normal(size=(1, 3, 3, 3)) + 0.05

        def fn(tape, x):
            return ad.sum_all(tape, ad.relu(tape, ad.conv3d(tape, x, k)))
        assert finite_difference_check(fn, x0) < 1e-3
