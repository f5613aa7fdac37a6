import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcdistill.autodiff import (
    DomainError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    elementwise,
    matmul,
    reduce,
    scale,
    unary,
)
from pcdistill.gradcheck import check_gradients, numerical_grad, rel_error


def param(arr):
    return Tensor(np.asarray(arr, dtype=float), requires_grad=True)


# -- forward values ----------------------------------------------------------

def test_matmul_identity():
    out = matmul([[1, 0], [0, 1]], [[3], [4]])
    np.testing.assert_array_equal(out.data, [[3], [4]])


def test_matmul_row_times_column():
    np.testing.assert_array_equal(matmul([[1, 2]], [[3], [4]]).data, [[11]])


def test_matmul_broadcasts_leading_extents():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 5, 3)), rng.normal(size=(3, 4))
    np.testing.assert_allclose(matmul(a, b).data, np.einsum("bnk,kj->bnj", a, b), rtol=1e-14)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_reduce_values():
    np.testing.assert_array_equal(reduce([[1, 5, 3]], 1, "max").data, [5])
    np.testing.assert_array_equal(reduce([[1, 5, 3]], 1, "min").data, [1])
    np.testing.assert_array_equal(reduce([[2, 4]], 1, "mean").data, [3])
    np.testing.assert_array_equal(reduce([[2, 4]], 1, "sum").data, [6])


def test_reduce_axis_out_of_range():
    with pytest.raises(IndexError):
        reduce(np.ones((2, 3)), 2, "sum")


def test_abs_sub_and_relu():
    np.testing.assert_array_equal(unary(elementwise([3.0], [5.0], "sub"), "abs").data, [2])
    np.testing.assert_array_equal(unary([-1.0, 2.0], "relu").data, [0, 2])


def test_exp_log_round_trip():
    x = np.random.default_rng(1).uniform(0.01, 20, size=(7, 5))
    back = unary(unary(x, "log"), "exp").data
    assert np.max(np.abs(back - x) / x) < 1e-12


def test_log_rejects_nonpositive():
    with pytest.raises(DomainError):
        unary([1.0, 0.0], "log")


def test_incompatible_broadcast():
    with pytest.raises(ShapeError):
        elementwise(np.ones((2, 3)), np.ones((4,)), "add")


# -- backward rules ----------------------------------------------------------

def test_max_tie_goes_to_lowest_index():
    x = param([7.0, 7.0, 1.0])
    backward(x.max(0))
    np.testing.assert_array_equal(x.grad, [1.0, 0.0, 0.0])


def test_min_tie_goes_to_lowest_index():
    x = param([[3.0, 1.0, 1.0]])
    backward(x.min(1).sum())
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_abs_subgradient_at_zero_is_zero():
    x = param([0.0, -2.0, 3.0])
    backward(x.abs().sum())
    np.testing.assert_array_equal(x.grad, [0.0, -1.0, 1.0])


@pytest.mark.parametrize("shape", [(1,), (3,), (2, 4), (2, 3, 5)])
def test_sum_gives_all_ones(shape):
    x = param(np.random.default_rng(0).normal(size=shape))
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones(shape))


def test_mean_square_closed_form():
    rng = np.random.default_rng(2)
    xv, c = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    x = param(xv)
    d = x - c
    backward((d * d).mean())
    np.testing.assert_allclose(x.grad, 2 * (xv - c) / xv.size, rtol=1e-14, atol=1e-16)


def test_gradients_accumulate_over_multiple_uses():
    x = param([2.0, -1.0])
    y = x * x + x * 3.0
    backward(y.sum())
    np.testing.assert_allclose(x.grad, 2 * np.array([2.0, -1.0]) + 3.0)


def test_backward_needs_scalar():
    x = param([1.0, 2.0])
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(3)
    a, b = param(rng.normal(size=(4, 3))), param(rng.normal(size=(3, 2)))
    err = check_gradients(lambda t: (matmul(t[0], t[1]) * Tensor(rng_weights)).sum(), [a, b])
    assert err < 1e-6


rng_weights = np.random.default_rng(99).normal(size=(4, 2))


def test_tape_is_topological_and_visits_each_node_once():
    x = param([1.0, 2.0])
    y = x * 2.0
    z = y + y
    loss = (z * y).sum()
    tape = Tape.record(loss)
    ids = [id(t) for t in tape.nodes]
    assert len(ids) == len(set(ids))
    position = {i: k for k, i in enumerate(ids)}
    for t in tape.nodes:
        for inp in t.node.inputs:
            if inp.node is not None:
                assert position[id(inp)] < position[id(t)]


# -- properties --------------------------------------------------------------

def _composite(inputs):
    a, b, w = inputs
    h = (matmul(a, w) + b).relu()
    return (h.exp().sum(axis=1).log() + h.max(1) - h.min(1)).mean() + (h - 0.5).abs().mean()


def test_random_composite_gradients():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(10):
        a = param(rng.normal(size=(3, 4, 3)))
        b = param(rng.normal(size=(5,)))
        w = param(rng.normal(size=(3, 5)))
        worst = max(worst, check_gradients(_composite, [a, b, w]))
    assert worst < 1e-4


def test_backward_is_linear():
    rng = np.random.default_rng(5)
    xv = rng.normal(size=(3, 4))

    def grad_of(build):
        x = param(xv)
        backward(build(x))
        return x.grad

    l1 = lambda x: (x * x).sum()  # noqa: E731
    l2 = lambda x: x.exp().mean()  # noqa: E731
    a, b = 0.7, -1.3
    combined = grad_of(lambda x: scale(l1(x), a) + scale(l2(x), b))
    np.testing.assert_allclose(combined, a * grad_of(l1) + b * grad_of(l2), rtol=0, atol=1e-12)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        a, w = param(rng.normal(size=(2, 5, 3))), param(rng.normal(size=(3, 4)))
        loss = matmul(a, w).relu().max(1).sum()
        backward(loss)
        return loss.data.tobytes(), a.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["max", "min"]), st.integers(0, 2))
def test_extremum_backward_conserves_mass(seed, kind, axis):
    rng = np.random.default_rng(seed)
    x = param(rng.normal(size=(3, 4, 5)))
    upstream = rng.normal(size=tuple(n for i, n in enumerate((3, 4, 5)) if i != axis))
    backward((reduce(x, axis, kind) * Tensor(upstream)).sum())
    np.testing.assert_allclose(x.grad.sum(axis=axis), upstream, rtol=0, atol=0)


def test_numerical_grad_oracle_on_known_function():
    x = np.array([0.3, -1.2])
    g = numerical_grad(lambda: float(np.sum(x**3)), x)
    assert rel_error(3 * x**2, g) < 1e-8
