import numpy as np
import pytest

from pansr import ops
from pansr.exceptions import NonFiniteError, ShapeError
from pansr.tensor import Tensor, backward, debug_mode, no_grad


def test_tensor_must_be_4d_float():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((3, 3)))
    # integer data is promoted to the default float32
    assert Tensor(np.zeros((1, 1, 2, 2), dtype=np.int32)).dtype == np.float32
    assert Tensor(np.zeros((1, 1, 2, 2), dtype=np.float16)).dtype == np.float32


def test_f64_is_kept():
    t = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float64))
    assert t.dtype == np.float64


def test_gradient_accumulates_over_reuse(rng):
    # y = x * x + x  ->  dy/dx = 2x + 1
    x = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True, dtype=np.float64)
    y = ops.sum_all(ops.elementwise_add(ops.elementwise_mul(x, x), x))
    backward(y)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1, rtol=1e-12)


def test_double_backward_is_an_error(rng):
    x = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
    loss = ops.sum_all(ops.elementwise_mul(x, x))
    backward(loss)
    with pytest.raises(RuntimeError, match="twice"):
        backward(loss)


def test_backward_needs_scalar(rng):
    x = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(ops.elementwise_mul(x, x))


def test_no_grad_records_nothing(rng):
    x = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
    with no_grad():
        y = ops.elementwise_mul(x, x)
    assert y._node is None and not y.requires_grad


def test_untracked_inputs_get_no_grad(rng):
    x = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
    c = Tensor(rng.standard_normal((1, 1, 2, 2)))
    backward(ops.sum_all(ops.elementwise_mul(x, c)))
    assert c.grad is None
    np.testing.assert_allclose(x.grad, c.data)


def test_mixed_dtypes_rejected():
    a = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
    b = Tensor(np.ones((1, 1, 2, 2), dtype=np.float64))
    with pytest.raises(TypeError, match="mixed dtypes"):
        ops.elementwise_add(a, b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_flags_nan():
    x = Tensor(np.full((1, 1, 2, 2), np.inf))
    with debug_mode(), pytest.raises(NonFiniteError):
        ops.elementwise_add(x, Tensor(np.full((1, 1, 2, 2), -np.inf)))
    # outside debug mode the op is allowed to produce NaN
    out = ops.elementwise_add(x, Tensor(np.full((1, 1, 2, 2), -np.inf)))
    assert np.isnan(out.data).all()


def test_operators_delegate_to_ops(rng):
    a = Tensor(rng.standard_normal((1, 1, 2, 2)))
    b = Tensor(rng.standard_normal((1, 1, 2, 2)))
    np.testing.assert_array_equal((a + b).data, a.data + b.data)
    np.testing.assert_array_equal((a * b).data, a.data * b.data)


def test_item_requires_single_element():
    assert Tensor(np.full((1, 1, 1, 1), 2.5)).item() == 2.5
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 1, 1, 2))).item()
