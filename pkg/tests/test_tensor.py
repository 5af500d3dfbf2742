import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import signal
from scipy.special import erf

from focalseg import gradsuite
from focalseg.tensor import (
    ComputationRecord, DimensionError, ParameterError, Tensor, gradient_check, no_grad, ops, precision,
)
from focalseg.tensor.core import make_result

CASES = dict(gradsuite.suite_cases())


@pytest.mark.parametrize("name", [n for n in CASES if n != "toy_focalunetr"])
def test_op_gradients_match_central_differences(name):
    rep, _, n = gradsuite.run_case(name, CASES[name], seeds=range(3))
    assert n == 3
    assert rep.passed, rep.describe()


def test_corrupted_backward_is_reported(double):
    def bad_square(a):
        return make_result(a.data ** 2, (a,), lambda g: (g * a.data,), "bad_square")  # missing factor 2

    rep = gradient_check(bad_square, [Tensor(np.linspace(1, 2, 6).reshape(2, 3), requires_grad=True)])
    assert not rep.passed
    assert rep.max_rel_error > 0.3
    assert "FAIL" in rep.describe() and "index" in rep.describe()


def test_gradient_check_requires_double():
    with precision("single"), pytest.raises(RuntimeError):
        gradient_check(ops.square, [Tensor(np.ones(3), requires_grad=True)])


def test_single_precision_is_preserved_through_ops(rng):
    with precision("single"):
        x = Tensor(rng.standard_normal((2, 6, 6, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 4, 3, 3)), requires_grad=True)
        y = ops.gelu(ops.instance_norm_nhwc(ops.conv2d_nhwc(x, w, padding=1)))
        z = ops.softmax(ops.layer_norm(y, 3), axis=-1)
        loss = ops.mean(ops.div(ops.square(z), ops.add(z, 1.0)))
        loss.backward()
        for t in (y, z, loss):
            assert t.data.dtype == np.float32
        assert x.grad.dtype == np.float32 and w.grad.dtype == np.float32


def test_conv2d_matches_scipy_correlate(double, rng):
    for c in (2, 5):  # im2col path and shifted-GEMM path
        x = rng.standard_normal((2, 7, 6, c))
        w = rng.standard_normal((3, c, 3, 3))
        b = rng.standard_normal(3)
        y = ops.conv2d_nhwc(Tensor(x), Tensor(w), Tensor(b), padding=1).data
        for n in range(2):
            for o in range(3):
                ref = sum(signal.correlate(np.pad(x[n, :, :, ci], 1), w[o, ci], mode="valid") for ci in range(c))
                np.testing.assert_allclose(y[n, :, :, o], ref + b[o], atol=1e-12)


def test_conv2d_stride2_shape_and_values(double, rng):
    x = rng.standard_normal((1, 8, 8, 2))
    w = rng.standard_normal((4, 2, 3, 3))
    y = ops.conv2d_nhwc(Tensor(x), Tensor(w), stride=2, padding=1).data
    assert y.shape == (1, 4, 4, 4)
    full = ops.conv2d_nhwc(Tensor(x), Tensor(w), stride=1, padding=1).data
    np.testing.assert_allclose(y, full[:, ::2, ::2], atol=1e-12)


def test_conv_transpose_scatters_each_pixel_into_its_block(double, rng):
    x = rng.standard_normal((1, 2, 3, 4))
    w = rng.standard_normal((4, 5, 2, 2))
    y = ops.conv_transpose2d_nhwc(Tensor(x), Tensor(w)).data
    assert y.shape == (1, 4, 6, 5)
    for i in range(2):
        for j in range(3):
            block = np.einsum("c,cokl->klo", x[0, i, j], w)
            np.testing.assert_allclose(y[0, 2 * i:2 * i + 2, 2 * j:2 * j + 2], block, atol=1e-12)


def test_gelu_is_exact_erf_form(double):
    x = np.linspace(-4, 4, 41)
    np.testing.assert_allclose(ops.gelu(Tensor(x)).data, 0.5 * x * (1 + erf(x / np.sqrt(2))), atol=1e-14)


def test_layer_norm_and_instance_norm_statistics(double, rng):
    x = rng.standard_normal((3, 4, 5, 6)) * 3 + 2
    ln = ops.layer_norm(Tensor(x), 6).data
    np.testing.assert_allclose(ln.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(ln.var(-1), 1, atol=1e-4)
    inn = ops.instance_norm_nhwc(Tensor(x)).data
    np.testing.assert_allclose(inn.mean((1, 2)), 0, atol=1e-12)
    np.testing.assert_allclose(inn.var((1, 2)), 1, atol=1e-4)


def test_softmax_mask_excludes_and_all_masked_raises(double, rng):
    a = rng.standard_normal((2, 5))
    mask = np.array([True, False, True, True, False])
    y = ops.softmax(Tensor(a), mask=mask).data
    assert np.all(y[:, ~mask] == 0)
    ref = np.exp(a[:, mask]) / np.exp(a[:, mask]).sum(-1, keepdims=True)
    np.testing.assert_allclose(y[:, mask], ref, atol=1e-14)
    with pytest.raises(RuntimeError):
        ops.softmax(Tensor(a), mask=np.zeros(5, bool))


def test_softmax_is_stable_for_large_logits(double):
    y = ops.softmax(Tensor(np.array([[1000.0, 1000.0, -1000.0]]))).data
    np.testing.assert_allclose(y, [[0.5, 0.5, 0.0]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(a):
    with precision("double"):
        y = ops.softmax(Tensor(a), axis=-1).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(-1), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 5), st.booleans())
def test_broadcast_gradients_have_operand_shapes(n, m, k, trailing):
    with precision("double"):
        a = Tensor(np.ones((n, m, k)), requires_grad=True)
        b = Tensor(np.full((k,) if trailing else (m, k), 2.0), requires_grad=True)
        ops.sum(ops.mul(ops.add(a, b), b)).backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    np.testing.assert_allclose(a.grad, 2.0)
    # d/db sum((a+b)*b) = sum over broadcast axes of (a + 2b)
    np.testing.assert_allclose(b.grad, 5.0 * a.size / b.size)


def test_take_accumulates_repeated_indices(double):
    a = Tensor(np.arange(4.0), requires_grad=True)
    ops.sum(ops.take(a, [0, 0, 2, 0], axis=0)).backward()
    np.testing.assert_array_equal(a.grad, [3, 0, 1, 0])


def test_shared_subexpression_gradients_accumulate(double):
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = ops.mul(x, x)
    ops.sum(ops.add(y, y)).backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_computation_record_is_topological():
    with precision("double"):
        x = Tensor(np.ones(3), requires_grad=True)
        out = ops.sum(ops.exp(ops.mul(x, x)))
        rec = ComputationRecord.from_output(out)
    assert len(rec) >= 3
    assert rec.ops[-1] is out


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = ops.exp(x)
    assert not y.requires_grad


def test_shape_errors():
    with pytest.raises(DimensionError):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(DimensionError):
        ops.reshape(Tensor(np.ones(6)), (4, 2))
    with pytest.raises(DimensionError):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ParameterError):
        ops.layer_norm(Tensor(np.ones((2, 3))), 3, eps=0.0)
    with pytest.raises(ParameterError):
        ops.leaky_relu(Tensor(np.ones(2)), slope=-0.1)


def test_operator_overloads(double):
    a = Tensor(np.array([2.0, 4.0]))
    b = Tensor(np.array([1.0, 2.0]))
    np.testing.assert_allclose((a + b).data, [3, 6])
    np.testing.assert_allclose((a - b).data, [1, 2])
    np.testing.assert_allclose((a * b).data, [2, 8])
    np.testing.assert_allclose((a / b).data, [2, 2])
    np.testing.assert_allclose((-a).data, [-2, -4])


def test_worked_examples(double):
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(2)), a).data, a.data)
    np.testing.assert_array_equal(ops.matmul(a, Tensor(np.array([[5.0, 6.0], [7.0, 8.0]]))).data, [[19, 22], [43, 50]])
    np.testing.assert_allclose(ops.softmax(Tensor(np.array([0.0, 0.0]))).data, [0.5, 0.5])
    np.testing.assert_allclose(ops.softmax(Tensor(np.array([0.0, np.log(3.0)]))).data, [0.25, 0.75])
    x = np.ones((1, 5, 5))
    y = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3)))).data
    np.testing.assert_array_equal(y, np.full((1, 3, 3), 9.0))
    ident = ops.conv2d(Tensor(x * np.arange(5)), Tensor(np.ones((1, 1, 1, 1)))).data
    np.testing.assert_array_equal(ident, x * np.arange(5))
    np.testing.assert_array_equal(ops.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.ones((3, 2, 3, 3))),
                                             Tensor(np.array([1.0, 2.0, 3.0])), padding=1).data[:, 2, 2], [1, 2, 3])
    np.testing.assert_array_equal(ops.layer_norm(Tensor(np.full((2, 4), 3.0)), 4).data, 0.0)
    np.testing.assert_allclose(ops.layer_norm(Tensor(np.array([1.0, 3.0])), 2, eps=1e-12).data, [-1, 1])


def test_window_partition_examples(double):
    x = np.arange(16.0).reshape(1, 4, 4)
    w = ops.window_partition(Tensor(x), 2).data
    assert w.shape == (4, 1, 2, 2)
    np.testing.assert_array_equal(w[0, 0], [[0, 1], [4, 5]])
    np.testing.assert_array_equal(ops.window_partition(Tensor(x), 4).data[0], x)
    np.testing.assert_array_equal(ops.window_reverse(Tensor(w), 2, 4, 4).data, x)
    with pytest.raises(DimensionError):
        ops.window_partition(Tensor(np.ones((1, 5, 4))), 2)


def test_conv_kernel_larger_than_input_raises():
    with pytest.raises(DimensionError):
        ops.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


def test_gradient_check_worked_examples(double, rng):
    assert gradient_check(ops.matmul, [Tensor(rng.standard_normal((3, 4)), requires_grad=True),
                                       Tensor(rng.standard_normal((4, 2)), requires_grad=True)]).passed
    assert gradient_check(ops.softmax, [Tensor(rng.standard_normal(7), requires_grad=True)]).passed
    v = rng.standard_normal(5)

    def composed(x, w):
        return ops.sum(ops.mul(ops.softmax(ops.matmul(x, w), axis=-1), Tensor(v)))

    assert gradient_check(composed, [Tensor(rng.standard_normal((2, 3)), requires_grad=True),
                                     Tensor(rng.standard_normal((3, 5)), requires_grad=True)]).passed
