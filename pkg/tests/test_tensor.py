import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfgd import tensor as T
from hfgd.tensor import Tensor


def p(x):
    return T.parameter(np.asarray(x, dtype=np.float64))


# -- elementwise -------------------------------------------------------------

def test_add_values():
    assert np.array_equal(T.add(Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])


def test_relu_values():
    assert np.array_equal(T.relu(Tensor([-1, 0, 2])).data, [0, 0, 2])


def test_mul_backward_product_rule():
    a, b = p([2.0]), p([3.0])
    g = T.backward(T.sum(T.mul(a, b)), {"a": a, "b": b})
    assert g["a"].tolist() == [3.0]
    assert g["b"].tolist() == [2.0]


def test_relu_subgradient_at_zero_is_zero():
    x = p([0.0, 1.0])
    g = T.backward(T.sum(T.relu(x)), {"x": x})
    assert g["x"].tolist() == [0.0, 1.0]


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_general_broadcasting_rejected():
    with pytest.raises(T.ShapeError):
        T.mul(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros(4)))


def test_per_channel_broadcast_gradient_sums_over_other_axes():
    x = p(np.ones((2, 3, 2, 2)))
    b = p([1.0, 2.0, 3.0])
    g = T.backward(T.sum(T.add(x, b)), {"b": b})
    assert g["b"].tolist() == [8.0, 8.0, 8.0]


def test_scalar_constant_operands():
    x = Tensor([1.0, 2.0])
    assert T.add(x, 1.5).data.tolist() == [2.5, 3.5]
    assert T.sub(x, 1.0).data.tolist() == [0.0, 1.0]
    assert T.mul(x, -2).data.tolist() == [-2.0, -4.0]


# -- matmul ----------------------------------------------------------------------

def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)


def test_matmul_small():
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_inner_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for q in range(k):
                s += a[i, q] * b[q, j]
            out[i, j] = s
    return out


def test_matmul_matches_triple_loop_4x5x3():
    rng = np.random.default_rng(11)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    assert np.abs(T.matmul(Tensor(a), Tensor(b)).data - triple_loop(a, b)).max() <= 1e-12


def test_matmul_backward_formula():
    rng = np.random.default_rng(0)
    a, b = p(rng.standard_normal((3, 4))), p(rng.standard_normal((4, 2)))
    w = rng.standard_normal((3, 2))
    g = T.backward(T.sum(T.mul(T.matmul(a, b), Tensor(w))), {"a": a, "b": b})
    assert np.allclose(g["a"], w @ b.data.T, atol=1e-14)
    assert np.allclose(g["b"], a.data.T @ w, atol=1e-14)


# -- stop_gradient -----------------------------------------------------------------

def test_stop_gradient_forward_identity():
    x = Tensor([1.5, -2.0])
    assert T.stop_gradient(x).data.tolist() == [1.5, -2.0]


def test_stop_gradient_blocks_gradient():
    w, v = p([1.0, -2.0, 3.0]), p([4.0, 5.0, 6.0])
    g = T.backward(T.sum(T.mul(T.stop_gradient(w), v)), {"w": w, "v": v})
    assert np.array_equal(g["w"], np.zeros(3))
    assert np.array_equal(g["v"], w.data)


def test_stop_gradient_only_unbarriered_path_contributes():
    w = p([1.0, 2.0])
    g = T.backward(T.sum(T.add(w, T.stop_gradient(w))), {"w": w})
    assert g["w"].tolist() == [1.0, 1.0]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=8))
def test_stop_gradient_forward_bit_identical(vals):
    x = Tensor(vals)
    assert np.array_equal(T.stop_gradient(x).data, x.data)


def test_unreached_parameter_gets_exact_zero_entry():
    w, u = p([1.0, 2.0]), p(np.ones((2, 2)))
    g = T.backward(T.sum(w), {"w": w, "u": u})
    assert "u" in g and g["u"].shape == (2, 2) and not g["u"].any()
    assert g.reached == frozenset({"w"})


# -- softmax / cross entropy ------------------------------------------------------

def test_softmax_uniform():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3, atol=1e-15)


def test_softmax_no_overflow():
    assert T.softmax(Tensor([1000.0, 1000.0])).data.tolist() == [0.5, 0.5]


def test_softmax_closed_form():
    out = T.softmax(Tensor([0.0, math.log(3.0)])).data
    assert np.allclose(out, [0.25, 0.75], atol=1e-15)


def test_cross_entropy_confident_correct():
    logits = Tensor(np.eye(3) * 1e6)
    assert T.cross_entropy(logits, [0, 1, 2]).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_uniform_is_ln_c():
    loss = T.cross_entropy(Tensor(np.zeros((5, 4))), [0, 1, 2, 3, 0]).item()
    assert loss == pytest.approx(math.log(4), abs=1e-15)


def test_cross_entropy_ignored_row_dropped():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 3))
    full = T.cross_entropy(Tensor(x), [0, 255, 2, 1]).item()
    kept = T.cross_entropy(Tensor(x[[0, 2, 3]]), [0, 2, 1]).item()
    assert full == pytest.approx(kept, abs=1e-15)


def test_cross_entropy_all_ignored():
    with pytest.raises(T.EmptyLossError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [255, 255])


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


# -- backward --------------------------------------------------------------------

def test_backward_sum_linear():
    w = p([1.0, 2.0, 3.0])
    assert T.backward(T.sum(w), {"w": w})["w"].tolist() == [1.0, 1.0, 1.0]


def test_backward_power_rule():
    w = p([1.0, 2.0])
    assert T.backward(T.sum(T.mul(w, w)), {"w": w})["w"].tolist() == [2.0, 4.0]


def test_backward_non_scalar_loss():
    w = p([1.0, 2.0])
    with pytest.raises(T.ShapeError):
        T.backward(T.scale(w, 2.0), {"w": w})


def test_backward_non_leaf_parameter():
    w = p([1.0, 2.0])
    h = T.scale(w, 2.0)
    with pytest.raises(ValueError, match="not a leaf"):
        T.backward(T.sum(h), {"h": h})


def test_graph_freed_after_backward():
    w = p([1.0, 2.0])
    loss = T.sum(T.mul(w, w))
    T.backward(loss, {"w": w})
    with pytest.raises(T.GraphConsumedError):
        T.backward(loss, {"w": w})


def test_retain_graph_allows_second_backward():
    w = p([1.0, 2.0])
    loss = T.sum(T.mul(w, w))
    g1 = T.backward(loss, {"w": w}, retain_graph=True)
    g2 = T.backward(loss, {"w": w})
    assert np.array_equal(g1["w"], g2["w"])


def test_parameter_used_twice_accumulates():
    rng = np.random.default_rng(5)
    w = p(rng.standard_normal(4))
    v = Tensor(rng.standard_normal(4))
    both = T.backward(T.add(T.sum(T.mul(w, v)), T.sum(T.mul(w, w))), {"w": w})["w"]
    # rewrite with two distinct leaves holding the same values
    w1, w2 = p(w.data.copy()), p(w.data.copy())
    split = T.backward(T.add(T.sum(T.mul(w1, v)), T.sum(T.mul(w2, w2))),
                       {"w1": w1, "w2": w2})
    assert np.allclose(both, split["w1"] + split["w2"], atol=1e-14)


def test_backward_deterministic():
    rng = np.random.default_rng(9)
    data = rng.standard_normal((3, 4))

    def run():
        w = p(data)
        y = T.softmax(T.matmul(w, Tensor(data.T)), axis=1)
        return T.backward(T.sum(T.mul(y, y)), {"w": w})["w"]

    assert np.array_equal(run(), run())


def test_forward_identical_with_and_without_graph():
    rng = np.random.default_rng(2)
    w = p(rng.standard_normal((3, 3)))

    def f():
        return T.softmax(T.matmul(w, w), axis=0).data

    a = f()
    with T.no_grad():
        b = f()
    assert np.array_equal(a, b)


def test_requires_grad_false_never_accumulates():
    x = Tensor([1.0, 2.0])
    w = p([3.0, 4.0])
    g = T.backward(T.sum(T.mul(x, w)), {"w": w})
    assert set(g) == {"w"} and not x.requires_grad


def test_reachable_respects_barriers():
    w, v = p([1.0]), p([2.0])
    loss = T.sum(T.add(T.stop_gradient(w), v))
    ids = T.reachable(loss)
    assert id(v) in ids and id(w) not in ids
    assert id(w) in T.reachable(loss, through_barriers=True)


# -- finite differences ----------------------------------------------------------

def test_finite_diff_polynomial():
    x = p(np.random.default_rng(0).standard_normal(6))
    rep = T.finite_diff_check(lambda: T.sum(T.mul(x, x)), x)
    assert rep.max_rel_err < 1e-6


def test_finite_diff_cross_entropy():
    x = p(np.random.default_rng(1).standard_normal((5, 4)))
    rep = T.finite_diff_check(lambda: T.cross_entropy(x, [0, 1, 2, 3, 255]), x)
    assert rep.max_rel_err < 1e-4


def test_finite_diff_flags_barrier():
    w = p(np.random.default_rng(2).standard_normal(3))

    def f():
        return T.sum(T.mul(T.stop_gradient(w, name="sg"), w))

    rep = T.finite_diff_check(f, w)
    assert rep.barriers == ["sg: barrier, excluded"]
    # with the barrier frozen, d/dw sum(c*w) = c matches backward
    assert rep.max_rel_err < 1e-8


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_composite_chain_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = p(rng.standard_normal((3, 4)))
    b = p(rng.standard_normal((4, 2)))
    labels = rng.integers(0, 2, 3)

    def f():
        h = T.matmul(T.l2_normalize(a, axis=1), b)
        return T.add(T.cross_entropy(h, labels), T.sum(T.softmax(T.scale(h, 0.5), axis=0)))

    assert T.finite_diff_check(f, {"a": a, "b": b}).max_rel_err < 1e-4
