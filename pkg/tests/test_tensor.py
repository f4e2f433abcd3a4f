import numpy as np
import pytest
from scipy.special import softmax as sp_softmax

from ecoperceiver import tensor as T
from ecoperceiver.tensor import (ContractError, ShapeError, Tensor, TapeStateError, default_dtype,
                                 finite_difference_grad, relative_error)


def _leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _check(fn, leaves, tol=1e-6):
    loss = fn()
    loss.backward()
    for leaf in leaves:
        num = finite_difference_grad(lambda: fn().item(), leaf)
        assert relative_error(leaf.grad, num).max() < tol


def test_default_dtype_is_float32_and_context_switches():
    assert Tensor([1.0]).dtype == np.float32
    with default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_ops_with_broadcasting(op):
    rng = np.random.default_rng(0)
    with default_dtype(np.float64):
        a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
        b.data += 3.0  # keep the divisor away from 0
        f = {"add": lambda: (a + b).sum(), "sub": lambda: (a - b).sum(),
             "mul": lambda: ((a * b) ** 2).sum(), "div": lambda: (a / b).sum()}[op]
        _check(f, [a, b])


def test_unary_and_reduction_grads():
    rng = np.random.default_rng(1)
    with default_dtype(np.float64):
        x = _leaf(rng, 2, 5)
        _check(lambda: T.tanh(x).sum() + T.gelu(x).mean() + T.exp(x * 0.1).sum(axis=0).sum(), [x])
        y = Tensor(rng.uniform(0.5, 2.0, (3,)), requires_grad=True)
        _check(lambda: T.log(y).sum() + (y ** 3).sum(), [y])


def test_matmul_reshape_transpose_getitem_concat():
    rng = np.random.default_rng(2)
    with default_dtype(np.float64):
        a, b, c = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 2, 3, 2)
        f = lambda: ((T.concat([a @ b, c], axis=-1).transpose(0, 2, 1).reshape(2, -1)[:, 1:5]) ** 2).sum()
        _check(f, [a, b, c])


def test_gelu_matches_tanh_formula():
    x = np.linspace(-4, 4, 41)
    with default_dtype(np.float64):
        got = T.gelu(Tensor(x)).data
    want = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_softmax_matches_scipy_and_masks():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(4, 6))
    with default_dtype(np.float64):
        np.testing.assert_allclose(T.softmax(Tensor(z)).data, sp_softmax(z, axis=-1), atol=1e-12)
        mask = rng.random((4, 6)) < 0.6
        mask[2] = False
        out = T.softmax(Tensor(z), mask)
    assert np.all(out.data[~mask] == 0)
    assert np.all(out.data[2] == 0)
    assert out.fully_masked[:, 0].tolist() == [False, False, True, False]
    for r in (0, 1, 3):
        np.testing.assert_allclose(out.data[r, mask[r]], sp_softmax(z[r, mask[r]]), atol=1e-12)


def test_softmax_grad_with_mask():
    rng = np.random.default_rng(4)
    mask = rng.random((3, 5)) < 0.7
    with default_dtype(np.float64):
        x = _leaf(rng, 3, 5)
        w = rng.normal(size=(3, 5))
        _check(lambda: (T.softmax(x, mask) * Tensor(w)).sum(), [x])


def _naive_single_query(q, k, v, mask, h):
    N, H = q.shape
    d = H // h
    out = np.zeros((N, H))
    for n in range(N):
        for j in range(h):
            sl = slice(j * d, (j + 1) * d)
            s = k[n, :, sl] @ q[n, sl]
            keep = mask[n]
            if not keep.any():
                continue
            w = np.where(keep, np.exp(s - s[keep].max()), 0.0)
            out[n, sl] = (w / w.sum()) @ v[n, :, sl]
    return out


def test_single_query_attention_matches_naive_loop():
    rng = np.random.default_rng(5)
    N, L, H, h = 6, 7, 8, 2
    q, k, v = rng.normal(size=(N, H)), rng.normal(size=(N, L, H)), rng.normal(size=(N, L, H))
    mask = rng.random((N, L)) < 0.6
    mask[1] = False
    with default_dtype(np.float64):
        out = T.single_query_attention(Tensor(q), Tensor(k), Tensor(v), mask, h)
    np.testing.assert_allclose(out.data, _naive_single_query(q, k, v, mask, h), atol=1e-12)
    assert out.fully_masked.tolist() == (~mask.any(axis=1)).tolist()
    assert out.weights.shape == (N, L, h)


def test_single_query_attention_grad():
    rng = np.random.default_rng(6)
    mask = rng.random((3, 4)) < 0.7
    mask[0] = False
    with default_dtype(np.float64):
        q, k, v = _leaf(rng, 3, 4), _leaf(rng, 3, 4, 4), _leaf(rng, 3, 4, 4)
        w = Tensor(rng.normal(size=(3, 4)))
        _check(lambda: (T.single_query_attention(q, k, v, mask, 2) * w).sum(), [q, k, v])


def test_single_query_attention_shape_errors():
    with pytest.raises(ShapeError):
        T.single_query_attention(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 3, 4))),
                                 Tensor(np.zeros((2, 3, 4))), np.ones((2, 3), bool), 3)
    with pytest.raises(ShapeError):
        T.single_query_attention(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 3, 4))),
                                 Tensor(np.zeros((2, 3, 4))), np.ones((2, 4), bool), 2)


def test_layer_norm_forward_and_grad():
    rng = np.random.default_rng(7)
    x = rng.normal(2.0, 3.0, size=(4, 6))
    with default_dtype(np.float64):
        out = T.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6)), eps=0.0).data
        np.testing.assert_allclose(out.mean(-1), 0, atol=1e-12)
        np.testing.assert_allclose(out.std(-1), 1, atol=1e-12)
        xt, g, b = _leaf(rng, 2, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
        w = Tensor(rng.normal(size=(2, 3, 6)))
        _check(lambda: (T.layer_norm(xt, g, b) * w).sum(), [xt, g, b])


def test_mask_rows_zeroes_rows_and_blocks_grad():
    with default_dtype(np.float64):
        x = Tensor(np.ones((3, 2)), requires_grad=True)
        keep = np.array([True, False, True])
        y = T.mask_rows(x, keep)
        assert y.data[1].tolist() == [0, 0]
        y.sum().backward()
    assert x.grad[1].tolist() == [0, 0] and x.grad[0].tolist() == [1, 1]


def test_backward_contracts():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2).backward()
    loss = (x * 2).sum()
    loss.backward()
    with pytest.raises(TapeStateError):
        loss.backward()
    with pytest.raises(ContractError):
        Tensor(np.ones(3)).sum().backward()


def test_gradients_accumulate_on_shared_leaf():
    with default_dtype(np.float64):
        x = Tensor(np.array([2.0]), requires_grad=True)
        (x * x + x).sum().backward()
    assert x.grad.tolist() == [5.0]


def test_broadcast_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
