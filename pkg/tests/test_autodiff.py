import numpy as np
import pytest

from clopasim.autodiff import (
    AutodiffError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    concat,
    conv3d,
    instance_norm,
    leaky_relu,
    softmax_channel,
    upsample_nearest,
)
from clopasim.config import settings


def _param(data, dtype=np.float64):
    return Tensor(data, requires_grad=True, dtype=dtype)


# --- tensors ---

class TestTensor:
    def test_rejects_non_finite(self):
        with pytest.raises(AutodiffError):
            Tensor([1.0, np.nan])

    def test_rejects_empty_extent(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_default_dtype_float32(self):
        assert Tensor([1, 2]).data.dtype == np.float32

    def test_item(self):
        assert Tensor(2.5).item() == 2.5
        with pytest.raises(AutodiffError):
            Tensor([1.0, 2.0]).item()


class TestTape:
    def test_no_recording_outside_tape(self):
        x = _param([1.0, 2.0])
        y = (x * 2.0).sum()
        assert not y.requires_grad
        backward(y)
        assert x.grad is None

    def test_records_only_with_grad_inputs(self):
        with Tape() as tape:
            (Tensor([1.0]) * 2.0).sum()
        assert len(tape) == 0

    def test_records_ops(self):
        x = _param([1.0, 2.0])
        with Tape() as tape:
            (x * 3.0).sum()
        assert len(tape) == 2

    def test_backward_needs_scalar(self):
        x = _param([1.0, 2.0])
        with Tape():
            y = x * 2.0
        with pytest.raises(AutodiffError):
            backward(y)

    def test_debug_catches_non_finite(self):
        settings.DEBUG = True
        x = _param([0.0])
        with Tape(), pytest.raises(AutodiffError):
            x.log()


# --- elementwise gradients ---

class TestElementwise:
    def test_mul_add(self):
        a, b = _param([1.0, 2.0]), _param([3.0, 4.0])
        with Tape():
            loss = (a * b + a).sum()
        backward(loss)
        np.testing.assert_allclose(a.grad, [4.0, 5.0])
        np.testing.assert_allclose(b.grad, [1.0, 2.0])

    def test_div_sub(self):
        a, b = _param([2.0]), _param([4.0])
        with Tape():
            loss = (a / b - b).sum()
        backward(loss)
        np.testing.assert_allclose(a.grad, [0.25])
        np.testing.assert_allclose(b.grad, [-2.0 / 16.0 - 1.0])

    def test_broadcast_reduces(self):
        a = _param(np.ones((2, 3)))
        b = _param(np.ones((1, 3)))
        with Tape():
            loss = (a * b).sum()
        backward(loss)
        np.testing.assert_allclose(b.grad, [[2.0, 2.0, 2.0]])

    def test_reused_input_accumulates(self):
        x = _param([3.0])
        with Tape():
            loss = (x * x).sum()
        backward(loss)
        np.testing.assert_allclose(x.grad, [6.0])

    def test_log_clamp(self):
        x = _param([0.5, 2.0])
        with Tape():
            loss = x.clamp(0.0, 1.0).log().sum()
        backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, 0.0])

    def test_take(self):
        x = _param(np.arange(6.0).reshape(2, 3))
        with Tape():
            loss = x[1].sum()
        backward(loss)
        np.testing.assert_array_equal(x.grad, [[0, 0, 0], [1, 1, 1]])

    def test_concat_splits_gradient(self):
        a, b = _param(np.ones((1, 2))), _param(np.ones((2, 2)))
        with Tape():
            out = concat([a, b])
            loss = (out * Tensor(np.arange(6.0).reshape(3, 2), dtype=np.float64)).sum()
        backward(loss)
        np.testing.assert_array_equal(a.grad, [[0, 1]])
        np.testing.assert_array_equal(b.grad, [[2, 3], [4, 5]])

    def test_grads_accumulate_across_backward_calls(self):
        x = _param([1.0])
        for _ in range(2):
            with Tape():
                loss = (x * 2.0).sum()
            backward(loss)
        np.testing.assert_allclose(x.grad, [4.0])


# --- network ops ---

class TestConv3d:
    def test_identity_kernel(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 4, 4, 4)))
        w = np.zeros((1, 1, 3, 3, 3), dtype=np.float32)
        w[0, 0, 1, 1, 1] = 1.0
        out = conv3d(x, Tensor(w), Tensor([0.0]), pad=1)
        np.testing.assert_allclose(out.data, x.data, atol=1e-6)

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 5, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3, 3))
        b = rng.normal(size=3)
        out = conv3d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64)).data
        assert out.shape == (3, 3, 3, 3)
        expected = np.einsum("oikjl,ikjl->o", w, x[:, 1:4, 0:3, 2:5]) + b
        np.testing.assert_allclose(out[:, 1, 0, 2], expected)

    def test_stride_halves_extent(self):
        x = Tensor(np.ones((1, 8, 8, 8)))
        out = conv3d(x, Tensor(np.ones((2, 1, 3, 3, 3))), Tensor(np.zeros(2)), stride=2, pad=1)
        assert out.shape == (2, 4, 4, 4)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError) as info:
            conv3d(Tensor(np.ones((2, 4, 4, 4))), Tensor(np.ones((1, 3, 3, 3, 3))), Tensor([0.0]))
        assert info.value.op == "conv3d"

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            conv3d(Tensor(np.ones((1, 4, 4, 4))), Tensor(np.ones((1, 1, 2, 2, 2))), Tensor([0.0]))

    def test_bias_gradient(self):
        x = Tensor(np.ones((1, 3, 3, 3)), dtype=np.float64)
        w = _param(np.ones((2, 1, 1, 1, 1)))
        b = _param(np.zeros(2))
        with Tape():
            loss = conv3d(x, w, b).sum()
        backward(loss)
        np.testing.assert_allclose(b.grad, [27.0, 27.0])
        np.testing.assert_allclose(w.grad.reshape(-1), [27.0, 27.0])


class TestInstanceNorm:
    def test_standardises(self):
        x = Tensor(np.random.default_rng(0).normal(3.0, 2.0, size=(2, 4, 4, 4)), dtype=np.float64)
        out = instance_norm(x, Tensor([1.0, 1.0], dtype=np.float64), Tensor([0.0, 0.0], dtype=np.float64)).data
        np.testing.assert_allclose(out.mean(axis=(1, 2, 3)), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.std(axis=(1, 2, 3)), 1.0, atol=1e-4)

    def test_affine_shape_checked(self):
        with pytest.raises(ShapeError):
            instance_norm(Tensor(np.ones((2, 2, 2, 2))), Tensor([1.0]), Tensor([0.0]))


class TestActivations:
    def test_leaky_relu(self):
        out = leaky_relu(Tensor([-1.0, 2.0]))
        np.testing.assert_allclose(out.data, [-0.01, 2.0])

    def test_leaky_relu_slope_range(self):
        with pytest.raises(ValueError):
            leaky_relu(Tensor([1.0]), slope=1.5)

    def test_softmax_sums_to_one(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 3, 3)) * 50)
        probs = softmax_channel(x).data
        np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-6)
        assert np.all(np.isfinite(probs))

    def test_upsample_gradient_sums_blocks(self):
        x = _param(np.ones((1, 2, 2, 2)))
        with Tape():
            loss = upsample_nearest(x).sum()
        backward(loss)
        assert upsample_nearest(Tensor(np.ones((1, 2, 2, 2)))).shape == (1, 4, 4, 4)
        np.testing.assert_allclose(x.grad, np.full((1, 2, 2, 2), 8.0))
