import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from softrank import ndcore as nd
from softrank.gradcheck import check_gradients, numeric_grad
from softrank.ndcore import ContractError, DimensionError, Tensor


def rand(rng, *shape):
    return nd.parameter(rng.uniform(-1, 1, size=shape))


def test_matmul_identity_cases():
    a = np.arange(9.0).reshape(3, 3)
    assert np.array_equal((Tensor(np.eye(3)) @ Tensor(a)).data, a)
    out = nd.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1, 0], [0, 1]]))
    assert np.array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nd.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 4, 3), rand(rng, 3, 5)
    assert check_gradients(lambda: nd.sum(a @ b), [a, b], atol=1e-6, rtol=1e-6) <= 1.0


def test_tanh_exp_at_zero():
    x = nd.parameter(0.0)
    y = nd.tanh(x)
    nd.backward(y)
    assert y.item() == 0.0 and x.grad == 1.0
    x = nd.parameter(0.0)
    y = nd.exp(x)
    nd.backward(y)
    assert y.item() == 1.0 and x.grad == 1.0


def test_tanh_at_point_seven():
    x = nd.parameter(0.7)
    y = nd.tanh(x)
    nd.backward(y)
    assert y.item() == pytest.approx(np.tanh(0.7), abs=1e-15)
    assert float(x.grad) == pytest.approx(float(numeric_grad(lambda: nd.tanh(x), x)), abs=1e-7)


def test_elementwise_dispatch():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
    assert np.array_equal(nd.elementwise("add", a, b).data, [4, 7])
    assert np.array_equal(nd.elementwise("sub", a, b).data, [-2, -3])
    assert np.array_equal(nd.elementwise("mul", a, b).data, [3, 10])
    assert np.array_equal(nd.elementwise("scale", a, 2.0).data, [2, 4])
    assert np.array_equal(nd.elementwise("neg", a).data, [-1, -2])
    with pytest.raises(ContractError):
        nd.elementwise("sqrt", a)
    with pytest.raises(DimensionError):
        nd.elementwise("add", a, Tensor([1.0, 2.0, 3.0]))


def test_softmax_symmetric_row():
    out = nd.softmax_rows(Tensor([[0.0, 0.0, 0.0, 0.0]]))
    assert np.allclose(out.data, 0.25, rtol=0, atol=1e-15)


def test_softmax_large_logits_do_not_overflow():
    with np.errstate(over="raise"):
        out = nd.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert out[0, 0] == 1.0 and 0.0 <= out[0, 1] < 1e-300


def test_softmax_jvp_matches_finite_differences():
    rng = np.random.default_rng(1)
    a = rand(rng, 3, 5)
    w = Tensor(rng.uniform(-1, 1, size=(3, 5)))
    assert check_gradients(lambda: nd.sum(nd.softmax_rows(a) * w), [a]) <= 1.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    s = nd.softmax_rows(Tensor(x)).data.sum(axis=1)
    assert np.all(np.abs(s - 1.0) <= 1e-12)


def test_layer_norm_constant_row_and_definition():
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    assert np.allclose(nd.layer_norm(Tensor([[5.0, 5.0, 5.0]]), g, b).data, 0.0)
    out = nd.layer_norm(Tensor([[1.0, 2.0, 3.0]]), g, b).data[0]
    assert abs(out.mean()) < 1e-15
    # population variance of [1,2,3] is 2/3; epsilon sits inside the root
    assert out.var() == pytest.approx((2 / 3) / (2 / 3 + 1e-5), rel=1e-12)


def test_layer_norm_gradient():
    rng = np.random.default_rng(2)
    a, g, b = rand(rng, 4, 5), rand(rng, 5), rand(rng, 5)
    w = Tensor(rng.uniform(-1, 1, size=(4, 5)))
    assert check_gradients(lambda: nd.sum(nd.layer_norm(a, g, b) * w), [a, g, b], atol=1e-5, rtol=1e-5) <= 1.0


def test_backward_sum_gives_ones():
    w = nd.parameter(np.arange(6.0).reshape(2, 3))
    nd.backward(nd.sum(w))
    assert np.array_equal(w.grad, np.ones((2, 3)))


def test_backward_square_gives_twice_w():
    w = nd.parameter([1.0, -2.0, 3.5])
    nd.backward(nd.sum(w * w))
    assert np.array_equal(w.grad, 2 * w.data)


def test_backward_composed_graph():
    rng = np.random.default_rng(3)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    assert check_gradients(lambda: nd.sum(nd.tanh(a @ b)), [a, b]) <= 1.0


def test_backward_two_consumers_sum_contributions():
    w = nd.parameter([0.5, -1.0, 2.0])
    nd.backward(nd.sum(w) + nd.sum(w * w))
    assert np.array_equal(w.grad, 1.0 + 2 * w.data)


def test_backward_accumulates_until_zero_grad():
    w = nd.parameter([1.0, 2.0])
    nd.backward(nd.sum(w))
    nd.backward(nd.sum(w))
    assert np.array_equal(w.grad, [2.0, 2.0])
    w.zero_grad()
    nd.backward(nd.sum(w))
    assert np.array_equal(w.grad, [1.0, 1.0])


def test_backward_rejects_non_scalar():
    w = nd.parameter([1.0, 2.0])
    with pytest.raises(ContractError):
        nd.backward(w * 2.0)


def test_no_grad_records_nothing():
    w = nd.parameter([1.0])
    with nd.no_grad():
        y = nd.sum(w * w)
    assert not y.requires_grad


OPS = {
    "add": (lambda x, y: x + y, [(3, 4), (3, 4)]),
    "add_bias": (lambda x, y: x + y, [(3, 4), (4,)]),
    "add_scalar_bcast": (lambda x, y: x + y, [(3, 4), ()]),
    "sub": (lambda x, y: x - y, [(3, 4), (3, 4)]),
    "mul": (lambda x, y: x * y, [(3, 4), (3, 4)]),
    "mul_row": (lambda x, y: x * y, [(2, 3, 4), (4,)]),
    "scale": (lambda x: nd.scale(x, -1.7), [(3, 4)]),
    "neg": (lambda x: -x, [(3, 4)]),
    "tanh": (nd.tanh, [(3, 4)]),
    "exp": (nd.exp, [(3, 4)]),
    "gelu": (nd.gelu, [(3, 4)]),
    "sum_axis": (lambda x: nd.sum(x, axis=1), [(3, 4)]),
    "mean": (lambda x: nd.mean(x, axis=0, keepdims=True), [(3, 4)]),
    "reshape": (lambda x: nd.reshape(x, (2, 6)), [(3, 4)]),
    "swapaxes": (lambda x: nd.swapaxes(x, 0, 2), [(2, 3, 4)]),
    "take_rows": (lambda x: nd.take_rows(x, np.array([[0, 2], [2, 1]])), [(3, 4)]),
    "matmul_batched": (lambda x, y: x @ y, [(2, 3, 4), (2, 4, 5)]),
    "matmul_fold": (lambda x, y: x @ y, [(2, 3, 4), (4, 5)]),
    "softmax": (nd.softmax_rows, [(3, 4)]),
    "log_softmax": (nd.log_softmax_rows, [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_passes_gradient_check(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    params = [rand(rng, *s) for s in shapes]
    out_shape = fn(*params).shape
    weights = Tensor(rng.uniform(-1, 1, size=out_shape))
    assert check_gradients(lambda: nd.sum(fn(*params) * weights), params, h=1e-5, atol=1e-6, rtol=1e-5) <= 1.0


def test_determinism_bit_identical():
    def run(seed):
        rng = np.random.default_rng(seed)
        a, b = rand(rng, 5, 4), rand(rng, 4, 3)
        loss = nd.sum(nd.tanh(a @ b))
        nd.backward(loss)
        return loss.data.tobytes(), a.grad.tobytes()

    assert run(7) == run(7)


def test_debug_mode_flags_non_finite(monkeypatch):
    monkeypatch.setattr(nd, "DEBUG", True)
    with pytest.raises(FloatingPointError):
        nd.exp(Tensor([1000.0]))
