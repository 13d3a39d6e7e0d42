import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from maaf.autodiff import (ShapeError, StaleTapeError, Tape, Tensor, backward, get_default_dtype, gradcheck,
                           no_grad, precision)
from maaf.autodiff import functional as F
from maaf.gradsuite import OP_CASES, op_suite

GOLDEN = Path(__file__).parent / "golden"

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def test_default_precision_is_32_bit():
    assert get_default_dtype() == np.float32
    with precision("float64"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(F.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, rtol=1e-7)


def test_matmul_identity(rng):
    a = rng.standard_normal((3, 3)).astype(np.float32)
    np.testing.assert_array_equal(F.matmul(np.eye(3, dtype=np.float32), Tensor(a)).data, a)


def test_layer_norm_matches_golden(f64):
    g = json.loads((GOLDEN / "layer_norm_123.json").read_text())
    out = F.layer_norm(Tensor(g["input"]), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=g["eps"]).data
    np.testing.assert_allclose(out, [float(v) for v in g["output"]], rtol=0, atol=1e-15)


def test_grad_of_sum_is_ones(f64, rng):
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    with Tape():
        backward(F.sum_(x), [x])
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_grad_of_dot(f64):
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        backward(F.sum_(F.mul(x, x)), [x])
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_unreachable_leaf_gets_zero_grad(f64):
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0], requires_grad=True)
    with Tape():
        backward(F.sum_(x), [x, y])
    np.testing.assert_array_equal(y.grad, [0.0])


def test_repeated_backward_accumulates(f64):
    x = Tensor([1.0, -1.0], requires_grad=True)
    for _ in range(2):
        with Tape():
            backward(F.sum_(F.scale(x, 3.0)), [x])
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_non_scalar_loss_rejected(f64):
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        with pytest.raises(ValueError):
            backward(F.mul(x, x))


def test_stale_node_rejected(f64):
    x = Tensor([1.0, 2.0], requires_grad=True)
    tape = Tape()
    with tape:
        loss = F.sum_(F.mul(x, x))
        tape.clear()
        with pytest.raises(StaleTapeError):
            backward(loss, [x])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape, no_grad():
        F.exp(x)
        assert len(tape) == 0


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as e:
        F.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "matmul" in str(e.value) and "(2, 3)" in str(e.value) and "(4, 2)" in str(e.value)


def test_softmax_over_empty_axis_rejected():
    with pytest.raises(ValueError):
        F.softmax(Tensor(np.zeros((2, 0))))


def test_ops_do_not_mutate_inputs(rng):
    a = rng.standard_normal((3, 4)).astype(np.float32)
    before = a.copy()
    t = Tensor(a)
    F.softmax(t), F.layer_norm(t, Tensor(np.ones(4)), Tensor(np.zeros(4))), F.relu(t), F.l2_normalize(t)
    np.testing.assert_array_equal(t.data, before)


def test_dropout_is_inverted_and_masks_gradient(f64):
    x = Tensor(np.ones((200, 50)), requires_grad=True)
    with Tape():
        y = F.dropout(x, 0.25, np.random.default_rng(0))
        backward(F.sum_(y), [x])
    kept = y.data != 0
    np.testing.assert_allclose(y.data[kept], 1 / 0.75)
    np.testing.assert_array_equal(x.grad, kept / 0.75)
    assert abs(kept.mean() - 0.75) < 0.02


def test_dropout_without_rng_is_identity(rng):
    x = Tensor(rng.standard_normal((3, 3)))
    np.testing.assert_array_equal(F.dropout(x, 0.5, None).data, x.data)


def test_gradcheck_requires_64_bit():
    with pytest.raises(RuntimeError):
        gradcheck(F.exp, [Tensor([1.0])])


def test_gradcheck_constant_function(f64):
    rep = gradcheck(lambda x: Tensor(np.array(3.0)), [Tensor([1.0, 2.0])])
    assert rep.max_rel_err == 0 and rep.passed


def test_gradcheck_excludes_relu_kink(f64):
    rep = gradcheck(F.relu, [Tensor([0.0, 1.5, -2.0])])
    assert rep.excluded == [(0, 0)]
    assert rep.passed and rep.checked == 2


def test_gradcheck_catches_a_wrong_gradient(f64):
    from maaf.autodiff.tensor import make_result

    def bad_square(x):
        return make_result("bad", x.data ** 2, (x,), lambda g: (g * x.data,))

    assert not gradcheck(bad_square, [Tensor([1.0, 2.0])]).passed


def test_softmax_matmul_example(f64, rng):
    a, b = Tensor(rng.standard_normal((4, 4))), Tensor(rng.standard_normal((4, 4)))
    assert gradcheck(lambda a, b: F.softmax(F.matmul(a, b)), [a, b], eps=1e-3, tol=1e-4).passed


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_every_op_passes_gradcheck_on_20_seeds(name):
    (res,) = op_suite(seeds=20, names=[name])
    assert res.passed, f"{name}: max rel err {res.max_rel_err:.3g}"


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one_and_are_positive(x):
    with precision("float64"):
        s = F.softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
    assert (s > 0).all()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_l2_normalize_has_unit_norm(x):
    norms = np.linalg.norm(x, axis=-1)
    if (norms <= 1e-30).any():
        with pytest.raises(ValueError):
            F.l2_normalize(Tensor(x))
        return
    with precision("float64"):
        out = F.l2_normalize(Tensor(x)).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_concat_backward_splits_exactly(wa, wb, rows, seed):
    r = np.random.default_rng(seed)
    with precision("float64"):
        a = Tensor(r.standard_normal((rows, wa)), requires_grad=True)
        b = Tensor(r.standard_normal((rows, wb)), requires_grad=True)
        g = r.standard_normal((rows, wa + wb))
        with Tape():
            backward(F.sum_(F.mul(F.concat([a, b], axis=1), g)), [a, b])
    assert np.array_equal(a.grad, g[:, :wa]) and np.array_equal(b.grad, g[:, wa:])
