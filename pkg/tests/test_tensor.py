import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mexflow import tensor
from mexflow.rng import Rng
from mexflow.tensor import Tape, Tensor, ShapeError

import oracles


def test_tanh_at_origin():
    assert tensor.tanh(Tensor(0.0)).item() == 0.0


def test_exp_values():
    out = tensor.exp(Tensor([0.0, 1.0]))
    assert np.allclose(out.data, [1.0, math.e], atol=1e-12)


def test_elu_negative_one():
    # direct evaluation of ELU with alpha=1: e^-1 - 1
    out = tensor.elu(Tensor(-1.0))
    assert abs(out.item() - (math.exp(-1.0) - 1.0)) < 1e-15
    assert abs(out.item() - (-0.6321205588285577)) < 1e-12


def test_elementwise_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError) as exc:
        tensor.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    assert "(2, 3)" in str(exc.value) and "(3, 2)" in str(exc.value)


def test_per_channel_broadcast():
    x = Tensor(np.ones((2, 2, 2, 3)))
    s = Tensor([1.0, 2.0, 3.0])
    out = tensor.mul(x, s)
    assert np.allclose(out.data[0, 0, 0], [1.0, 2.0, 3.0])


def test_matmul_identity():
    rng = Rng(1)
    a = rng.normal((2, 2))
    out = tensor.matmul(Tensor(np.eye(2)), Tensor(a))
    assert np.array_equal(out.data, a)


def test_matmul_column_selection():
    out = tensor.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_against_triple_loop_oracle():
    rng = Rng(7)
    a, b = rng.normal((5, 4)), rng.normal((4, 3))
    out = tensor.matmul(Tensor(a), Tensor(b))
    assert np.array_equal(out.data, oracles.matmul_loops(a, b)) or np.allclose(
        out.data, oracles.matmul_loops(a, b), rtol=0, atol=1e-15
    )


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        tensor.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_matmul_associativity(seed):
    rng = Rng(seed)
    a, b, c = rng.normal((3, 4)), rng.normal((4, 5)), rng.normal((5, 2))
    left = tensor.matmul(tensor.matmul(Tensor(a), Tensor(b)), Tensor(c)).data
    right = tensor.matmul(Tensor(a), tensor.matmul(Tensor(b), Tensor(c))).data
    assert oracles.rel_err(left, right) < 1e-10


def test_conv2d_1x1_identity_kernel():
    rng = Rng(3)
    x = rng.normal((5, 5, 3))
    k = np.eye(3).reshape(1, 1, 3, 3)
    out = tensor.conv2d(Tensor(x), Tensor(k))
    assert np.allclose(out.data, x, atol=1e-15)


def test_conv2d_zero_kernel():
    x = Rng(4).normal((4, 4, 2))
    out = tensor.conv2d(Tensor(x), Tensor(np.zeros((3, 3, 2, 3))))
    assert np.all(out.data == 0.0)


def test_conv2d_against_six_loop_oracle():
    rng = Rng(11)
    x = rng.normal((6, 6, 2))
    k = rng.normal((3, 3, 2, 3))
    out = tensor.conv2d(Tensor(x), Tensor(k))
    assert np.abs(out.data - oracles.conv2d_loops(x, k)).max() < 1e-12


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        tensor.conv2d(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((3, 3, 3, 1))))


def test_reduce_sum():
    assert tensor.reduce_sum(Tensor([1.0, 2.0, 3.0])).item() == 6.0
    assert tensor.reduce_sum(Tensor(np.ones((4, 4)))).item() == 16.0


def test_reduce_mean_empty_axes_preserves_input():
    x = Rng(5).normal((3, 2))
    out = tensor.reduce_mean(Tensor(x), axes=())
    assert np.array_equal(out.data, x)


def test_reduce_invalid_axis():
    with pytest.raises(ShapeError):
        tensor.reduce_sum(Tensor(np.zeros((2, 2))), axes=(2,))


def test_reduce_permuted_axes_commute():
    x = Rng(6).normal((3, 4, 5))
    a = tensor.reduce_sum(Tensor(x), axes=(0, 2)).data
    b = tensor.reduce_sum(Tensor(x), axes=(2, 0)).data
    assert np.array_equal(a, b)
    c = tensor.reduce_sum(tensor.reduce_sum(Tensor(x), axes=(2,)), axes=(0,)).data
    assert oracles.rel_err(a, c) < 1e-12


def test_backward_sum_gives_ones():
    w = Tensor(Rng(8).normal((3, 3)), requires_grad=True)
    with Tape() as tp:
        loss = tensor.reduce_sum(w)
    tp.backward(loss, np.ones(()))
    assert np.array_equal(w.grad, np.ones((3, 3)))


def test_backward_quadratic():
    w = Tensor(Rng(9).normal((4,)), requires_grad=True)
    with Tape() as tp:
        loss = tensor.reduce_sum(tensor.mul(w, w))
    tp.backward(loss)
    assert np.allclose(w.grad, 2 * w.data, atol=1e-14)


def test_backward_seed_shape_mismatch():
    w = Tensor(np.zeros((2, 2)), requires_grad=True)
    with Tape() as tp:
        out = tensor.mul(w, w)
    with pytest.raises(ShapeError):
        tp.backward(out, np.ones((3,)))


def test_backward_fanout_accumulates():
    w = Tensor([2.0], requires_grad=True)
    with Tape() as tp:
        out = tensor.add(tensor.mul(w, w), w)  # w^2 + w -> d/dw = 2w + 1
    tp.backward(out)
    assert np.allclose(w.grad, [5.0])


def _fd_check(op, *shapes, seed=0, tol=1e-4, **kwargs):
    """VJP of sum(op(inputs)) against central finite differences."""
    rng = Rng(seed)
    arrays = [rng.normal(s) for s in shapes]
    params = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tp:
        out = tensor.reduce_sum(op(*params, **kwargs))
    tp.backward(out)
    for i, p in enumerate(params):
        def f(a, i=i):
            vals = [q.data for q in params]
            vals[i] = a
            return tensor.reduce_sum(op(*[Tensor(v) for v in vals], **kwargs)).item()

        fd = oracles.fd_gradient(f, arrays[i])
        assert oracles.rel_err(p.grad, fd, floor=1e-6) < tol, f"operand {i} of {op}"


@pytest.mark.parametrize(
    "op,shapes,kwargs",
    [
        (tensor.add, ((3, 4), (3, 4)), {}),
        (tensor.add, ((2, 2, 2, 3), (3,)), {}),
        (tensor.sub, ((3, 4), (3, 4)), {}),
        (tensor.mul, ((3, 4), (3, 4)), {}),
        (tensor.mul, ((2, 2, 2, 3), ()), {}),
        (tensor.neg, ((3, 3),), {}),
        (tensor.exp, ((3, 3),), {}),
        (tensor.tanh, ((3, 3),), {}),
        (tensor.elu, ((3, 3),), {}),
        (tensor.log_abs, ((3, 3),), {}),
        (tensor.matmul, ((3, 4), (4, 2)), {}),
        (tensor.matmul, ((2, 3, 3), (2, 3, 3)), {}),
        (tensor.conv2d, ((4, 4, 2), (3, 3, 2, 2)), {}),
        (tensor.conv2d, ((2, 4, 4, 2), (1, 1, 2, 3)), {}),
        (tensor.trace, ((4, 4),), {}),
        (tensor.trace, ((3, 2, 2),), {}),
        (tensor.reduce_mean, ((3, 4),), {"axes": (1,)}),
        (tensor.reduce_max, ((3, 4),), {}),
        (tensor.reshape, ((3, 4),), {"shape": (2, 6)}),
        (tensor.transpose, ((3, 4),), {"axes": (1, 0)}),
        (tensor.narrow, ((3, 6),), {"axis": 1, "start": 2, "length": 3}),
        (tensor.space_to_channels, ((2, 4, 4, 3),), {}),
        (tensor.channels_to_space, ((2, 2, 2, 8),), {}),
        (tensor.logabsdet, ((4, 4),), {}),
    ],
)
def test_vjp_matches_finite_differences(op, shapes, kwargs):
    _fd_check(op, *shapes, seed=hash((op.__name__, shapes)) % 2**31, **kwargs)


def test_concat_vjp():
    _fd_check(lambda a, b: tensor.concat([a, b], axis=1), (2, 3), (2, 2), seed=13)


def test_squeeze_block_order():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    out = tensor.space_to_channels(Tensor(x))
    # top-left, top-right, bottom-left, bottom-right
    assert np.array_equal(out.data.reshape(4), [1.0, 2.0, 3.0, 4.0])


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_squeeze_roundtrip_bit_exact(seed):
    x = Rng(seed).normal((2, 8, 8, 3))
    back = tensor.channels_to_space(tensor.space_to_channels(Tensor(x)))
    assert np.array_equal(back.data, x)


def test_squeeze_rejects_odd_extents():
    with pytest.raises(ShapeError):
        tensor.space_to_channels(Tensor(np.zeros((1, 3, 4, 1))))


def test_rank_cap():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 2, 2, 2, 2)))


def test_logabsdet_matches_lapack():
    a = Rng(21).normal((5, 5))
    got = tensor.logabsdet(Tensor(a)).item()
    _, want = oracles.lu_slogdet(a)
    assert abs(got - want) < 1e-10
