import numpy as np
import pytest

from easyens.tensor import (Tensor, add, concat_channels, div, elementwise,
                            finite_difference_grad, mul, reshape, sub, sum_axis)
from easyens.layers import Dense, relu

from conftest import check_gradient, max_rel_error


class TestElementwise:
    def test_add(self):
        out = add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_mul_by_zero_annihilates(self, rng):
        x = Tensor(rng.normal(size=(3, 4)))
        np.testing.assert_array_equal(mul(x, 0.0).data, np.zeros((3, 4)))

    def test_scalar_scaling(self):
        out = mul(Tensor([8.0, 4.0]), 1 / 4)
        np.testing.assert_array_equal(out.data, [2.0, 1.0])

    def test_sub_div(self):
        a, b = Tensor([6.0, 9.0]), Tensor([2.0, 3.0])
        np.testing.assert_array_equal(sub(a, b).data, [4.0, 6.0])
        np.testing.assert_array_equal(div(a, b).data, [3.0, 3.0])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(3,\)"):
            add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))

    def test_dispatch(self):
        out = elementwise("mul", Tensor([2.0]), Tensor([3.0]))
        assert out.data[0] == 6.0
        with pytest.raises(ValueError, match="unknown elementwise op"):
            elementwise("pow", Tensor([2.0]), 2)

    def test_operator_sugar(self):
        x = Tensor([2.0])
        assert (1.0 - x).data[0] == -1.0
        assert (6.0 / x).data[0] == 3.0
        assert (-x).data[0] == -2.0

    def test_dtype_preserved(self):
        x = Tensor(np.ones(3, dtype=np.float32))
        assert add(x, 1.0).dtype == np.float32
        assert mul(x, 0.5).dtype == np.float32


class TestConcatChannels:
    def test_two_tensors(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 8)))
        b = Tensor(rng.normal(size=(2, 3, 8)))
        out = concat_channels([a, b])
        assert out.shape == (2, 6, 8)
        np.testing.assert_array_equal(out.data[:, :3], a.data)
        np.testing.assert_array_equal(out.data[:, 3:], b.data)

    def test_single_tensor_identity(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 8)))
        np.testing.assert_array_equal(concat_channels([a]).data, a.data)

    def test_repeated_input_shape(self, rng):
        x = Tensor(rng.normal(size=(5, 3, 16)))
        out = concat_channels([x] * 4)
        assert out.shape == (5, 12, 16)
        for g in range(4):
            np.testing.assert_array_equal(out.data[:, 3 * g:3 * (g + 1)], x.data)

    def test_errors(self, rng):
        with pytest.raises(ValueError, match="at least one"):
            concat_channels([])
        a = Tensor(rng.normal(size=(2, 3, 8)))
        b = Tensor(rng.normal(size=(3, 3, 8)))
        with pytest.raises(ValueError, match="batch/width"):
            concat_channels([a, b])
        c = Tensor(rng.normal(size=(2, 3, 9)))
        with pytest.raises(ValueError, match="batch/width"):
            concat_channels([a, c])

    def test_gradient_splits_back(self, rng):
        vals = rng.normal(size=(2, 3, 4))
        check_gradient(lambda t: (concat_channels([t, mul(t, 2.0)]) * 1.5).sum(), vals)


class TestBackward:
    def test_quadratic(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_unused_leaf_gets_zero(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = Tensor([3.0, 4.0], requires_grad=True)
        (x * x).sum().backward()
        # y never participated: no gradient buffer at all
        assert y.grad is None
        x2 = Tensor([1.0, 2.0], requires_grad=True)
        (x2 * 0.0).sum().backward()
        np.testing.assert_array_equal(x2.grad, [0.0, 0.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (x * x).backward()

    def test_accumulates_over_multiple_uses(self):
        x = Tensor([3.0], requires_grad=True)
        a = x + 1.0
        b = x * 2.0
        (a * b).sum().backward()
        # d/dx (x+1)(2x) = 4x + 2
        np.testing.assert_allclose(x.grad, [14.0])

    def test_linearity(self, rng):
        def grads_of(a, b):
            x = Tensor(rng.normal(size=5), requires_grad=False)
            p = Tensor(np.linspace(0.5, 1.5, 5), requires_grad=True)
            loss1 = (p * x).sum()
            loss2 = (p * p).sum()
            (mul(loss1, a) + mul(loss2, b)).backward()
            return p.grad

        rng = np.random.default_rng(0)
        g11 = grads_of(1.0, 0.0)
        rng = np.random.default_rng(0)
        g01 = grads_of(0.0, 1.0)
        rng = np.random.default_rng(0)
        combined = grads_of(0.3, -1.7)
        np.testing.assert_allclose(combined, 0.3 * g11 - 1.7 * g01, atol=1e-10)

    def test_three_layer_net_matches_finite_differences(self, rng):
        layers = [Dense(6, 8, rng=rng), Dense(8, 8, rng=rng), Dense(8, 3, rng=rng)]
        x0 = rng.uniform(-1, 1, size=(4, 6))

        def net(x):
            h = x
            for i, layer in enumerate(layers):
                h = layer(h)
                if i < len(layers) - 1:
                    h = relu(h)
            return (h * h).sum()

        check_gradient(net, x0)
        # parameter gradients against the oracle too
        for layer in layers:
            for param in layer.parameters():
                net(Tensor(x0)).backward()
                analytic = param.grad.copy()
                param.zero_grad()
                original = param.data

                def as_fn(t, _p=param):
                    _p.data = t.data
                    try:
                        return net(Tensor(x0))
                    finally:
                        _p.data = original

                numeric = finite_difference_grad(as_fn, Tensor(original)).data
                assert max_rel_error(analytic, numeric) <= 1e-4

    def test_repeated_backward_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        loss.backward()
        np.testing.assert_allclose(x.grad, [8.0])


class TestShapeOps:
    def test_reshape_roundtrip_gradient(self, rng):
        vals = rng.normal(size=(2, 6))
        check_gradient(lambda t: (reshape(t, (3, 4)) * reshape(t, (3, 4))).sum(), vals)

    def test_sum_axis(self, rng):
        vals = rng.normal(size=(2, 3, 4))
        out = sum_axis(Tensor(vals), 1)
        np.testing.assert_allclose(out.data, vals.sum(axis=1))
        check_gradient(lambda t: (sum_axis(t, 1) * 2.0).sum(), vals)


class TestFiniteDifference:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 2)))
        np.testing.assert_allclose(
            finite_difference_grad(lambda t: t.sum(), x).data, np.ones((3, 2)),
            atol=1e-9)

    def test_square_at_three(self):
        grad = finite_difference_grad(lambda t: (t * t).sum(), Tensor([3.0]))
        assert abs(grad.data[0] - 6.0) <= 1e-6

    def test_rejects_non_scalar_function(self):
        with pytest.raises(ValueError, match="scalar"):
            finite_difference_grad(lambda t: t * 2.0, Tensor([1.0, 2.0]))

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError, match="eps"):
            finite_difference_grad(lambda t: t.sum(), Tensor([1.0]), eps=0.0)


def test_forward_determinism(rng):
    vals = rng.normal(size=(4, 5))
    a = ((Tensor(vals) * 3.0) + Tensor(vals)).data
    b = ((Tensor(vals) * 3.0) + Tensor(vals)).data
    np.testing.assert_array_equal(a, b)


def test_no_nan_from_finite_inputs(rng):
    x = Tensor(rng.normal(size=100))
    out = div(x * x, add(x * x, 1.0))
    assert np.isfinite(out.data).all()
