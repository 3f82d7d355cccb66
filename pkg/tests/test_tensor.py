import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ceilcomp import tensor as T
from ceilcomp.errors import ConfigurationError, DimensionError, ParameterError

from .conftest import central_fd, conv_loop, rel_err

seeds = st.integers(0, 2**31 - 1)


def test_conv_scaling_by_1x1_kernel():
    out = T.conv2d_forward(np.ones((1, 1, 3, 3)), np.full((1, 1, 1, 1), 2.0))
    assert out.shape == (1, 1, 3, 3)
    assert np.all(out == 2.0)


def test_conv_zero_input():
    w = np.random.default_rng(0).standard_normal((3, 1, 1, 1))
    assert np.all(T.conv2d_forward(np.zeros((1, 1, 2, 2)), w) == 0)


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = T.conv2d_forward(x, w, b, stride=1, pad=1)
    ref = conv_loop(x.astype(np.float32), w.astype(np.float32), b.astype(np.float32), 1, 1)
    assert got.dtype == np.float32
    assert np.abs(got - ref).max() < 1e-5
    with T.precision(np.float64):
        got64 = T.conv2d_forward(x, w, b, stride=1, pad=1)
    assert np.abs(got64 - conv_loop(x, w, b, 1, 1)).max() < 1e-6


def test_conv_strided_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 7, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    with T.precision(np.float64):
        got = T.conv2d_forward(x, w, stride=2, pad=0)
    assert np.abs(got - conv_loop(x, w, stride=2, pad=0)).max() < 1e-9


def test_conv_errors():
    with pytest.raises(DimensionError, match="c_i"):
        T.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 1, 1)))
    with pytest.raises(ConfigurationError, match="not a positive integer"):
        T.conv2d_forward(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), stride=2)
    with pytest.raises(DimensionError):
        T.conv2d_forward(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), bias=np.zeros(2))


def test_conv_backward_trivial():
    gx, gw, gb = T.conv2d_backward(np.zeros((1, 2, 4, 4)), np.ones((1, 3, 4, 4)), np.ones((2, 3, 3, 3)), 1, 1)
    assert not gx.any() and not gw.any() and not gb.any()
    gx, gw, gb = T.conv2d_backward(np.ones((1, 1, 1, 1)), np.full((1, 1, 1, 1), 3.0), np.full((1, 1, 1, 1), 2.0))
    assert gx.item() == 2.0 and gw.item() == 3.0 and gb.item() == 1.0


def test_conv_backward_shape_error():
    with pytest.raises(DimensionError, match="grad_out"):
        T.conv2d_backward(np.zeros((1, 2, 3, 3)), np.ones((1, 3, 4, 4)), np.ones((2, 3, 3, 3)), 1, 1)


@pytest.mark.parametrize("stride,pad,size", [(1, 1, 5), (2, 1, 5), (1, 0, 4), (2, 0, 5)])
def test_conv_backward_finite_differences(stride, pad, size):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((2, 2, size, size))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    with T.precision(np.float64):
        out = T.conv2d_forward(x, w, b, stride, pad)
        r = rng.standard_normal(out.shape)

        def f():
            return float(np.sum(r * T.conv2d_forward(x, w, b, stride, pad)))

        gx, gw, gb = T.conv2d_backward(r, x, w, stride, pad)
        assert rel_err(gx, central_fd(f, x)) < 1e-3
        assert rel_err(gw, central_fd(f, w)) < 1e-3
        assert rel_err(gb, central_fd(f, b)) < 1e-3


def test_relu_and_pool_backward_finite_differences():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 4, 4))
    with T.precision(np.float64):
        r = rng.standard_normal((2, 3, 2, 2))
        _, idx = T.maxpool2x2_forward(x)
        g = T.maxpool2x2_backward(r, idx)
        assert rel_err(g, central_fd(lambda: float(np.sum(r * T.maxpool2x2_forward(x)[0])), x)) < 1e-3

        y = T.relu_forward(x)
        r2 = rng.standard_normal(x.shape)
        assert rel_err(T.relu_backward(r2, y), central_fd(lambda: float(np.sum(r2 * T.relu_forward(x))), x)) < 1e-3

        x5 = rng.standard_normal((1, 2, 5, 5))
        out, idx = T.maxpool_forward(x5, 3, 2, 1)
        r3 = rng.standard_normal(out.shape)
        g3 = T.maxpool_backward(r3, idx, x5.shape, 3, 2, 1)
        fd = central_fd(lambda: float(np.sum(r3 * T.maxpool_forward(x5, 3, 2, 1)[0])), x5)
        assert rel_err(g3, fd) < 1e-3


def test_maxpool_first_max_wins():
    x = np.ones((1, 1, 2, 2))
    out, idx = T.maxpool2x2_forward(x)
    assert out.item() == 1.0 and idx.item() == 0


def test_reshape_row_major():
    x = np.arange(1, 9, dtype=np.float32).reshape(2, 2, 2)
    assert T.reshape_fm(x).tolist() == [[1, 2, 3, 4], [5, 6, 7, 8]]
    assert np.array_equal(T.unreshape_fm(T.reshape_fm(x), 2, 2), x)
    with pytest.raises(DimensionError):
        T.unreshape_fm(np.zeros((2, 5)), 2, 2)


def test_matmul_shape_error():
    with pytest.raises(DimensionError, match="inner"):
        T.matmul(np.zeros((2, 3)), np.zeros((4, 2)))


@settings(max_examples=30, deadline=None)
@given(seeds, st.floats(-3, 3), st.floats(-3, 3))
def test_conv_linearity(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    y = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    lhs = T.conv2d_forward(alpha * x + beta * y, w, pad=1)
    rhs = alpha * T.conv2d_forward(x, w, pad=1) + beta * T.conv2d_forward(y, w, pad=1)
    assert np.abs(lhs - rhs).max() <= 1e-5 * max(1.0, np.abs(rhs).max())


@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(1, 6), st.integers(1, 6), st.integers(1, 5), st.integers(1, 5))
def test_1x1_conv_is_channel_matmul(seed, c_i, c_o, m, n):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, c_i, m, n)).astype(np.float32)
    w = rng.standard_normal((c_o, c_i, 1, 1)).astype(np.float32)
    out = T.conv2d_forward(x, w)
    for b in range(2):
        ref = T.unreshape_fm(T.matmul(w[:, :, 0, 0], T.reshape_fm(x[b])), m, n)
        assert np.abs(out[b] - ref).max() < 1e-6 * max(1.0, np.abs(ref).max())


# ---------------------------------------------------------------- SVD


def gram_jacobi_eigenvalues(a):
    """Eigenvalues of A^T A by classical two-sided Jacobi in float64 (test oracle)."""
    g = a.T @ a
    n = g.shape[0]
    for _ in range(200):
        off = np.abs(g - np.diag(np.diag(g)))
        p, q = np.unravel_index(np.argmax(off), off.shape)
        if off[p, q] < 1e-15 * np.abs(g).max():
            break
        theta = 0.5 * np.arctan2(2 * g[p, q], g[q, q] - g[p, p])
        c, s = np.cos(theta), np.sin(theta)
        r = np.eye(n)
        r[p, p], r[q, q], r[p, q], r[q, p] = c, c, s, -s
        g = r.T @ g @ r
    return np.sort(np.diag(g))[::-1]


def test_svd_diagonal():
    res = T.truncated_svd(np.diag([3.0, 2.0, 1.0]), 2)
    assert np.allclose(res.sigma, [3, 2])
    assert np.allclose(res.reconstruct(), np.diag([3.0, 2.0, 0.0]), atol=1e-6)


def test_svd_full_rank_reconstructs():
    a = np.random.default_rng(0).standard_normal((5, 7))
    assert np.abs(T.truncated_svd(a, 5).reconstruct() - a).max() < 1e-5


def test_svd_matches_gram_oracle():
    a = np.random.default_rng(1).standard_normal((6, 4))
    res = T.truncated_svd(a, 2)
    ref = np.sqrt(gram_jacobi_eigenvalues(a)[:2])
    assert np.all(np.abs(res.sigma - ref) / ref < 1e-6)


def test_svd_errors():
    with pytest.raises(ParameterError):
        T.truncated_svd(np.eye(3), 0)
    with pytest.raises(ParameterError):
        T.truncated_svd(np.eye(3), 4)


def test_svd_iteration_cap(monkeypatch):
    monkeypatch.setattr(T, "JACOBI_MAX_SWEEPS", 1)
    from ceilcomp.errors import NumericalError

    with pytest.raises(NumericalError, match="cap of 1"):
        T.truncated_svd(np.random.default_rng(0).standard_normal((8, 8)), 2)


def test_svd_equal_singular_values_keep_column_order():
    res = T.truncated_svd(np.eye(4) * 2.0, 2)
    assert np.allclose(np.abs(res.v), np.eye(4)[:, :2])


def test_svd_rank_deficient_completes_basis():
    a = np.zeros((4, 3))
    a[0, 0] = 1.0
    res = T.truncated_svd(a, 3)
    assert np.allclose(res.u.T @ res.u, np.eye(3), atol=1e-6)
    assert np.allclose(res.v.T @ res.v, np.eye(3), atol=1e-6)
    assert np.allclose(res.reconstruct(), a, atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(seeds, st.integers(2, 9), st.integers(2, 9), st.data())
def test_svd_orthonormal_and_eckart_young(seed, d1, d2, data):
    k = data.draw(st.integers(1, min(d1, d2)))
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((d1, d2))
    res = T.truncated_svd(a, k)
    u, v = res.u.astype(np.float64), res.v.astype(np.float64)
    assert np.allclose(u.T @ u, np.eye(k), atol=1e-5)
    assert np.allclose(v.T @ v, np.eye(k), atol=1e-5)
    assert np.all(np.diff(res.sigma) <= 1e-6)
    best = np.linalg.norm(a @ v @ v.T - a)
    for _ in range(20):
        q, _ = np.linalg.qr(rng.standard_normal((d2, k)))
        assert best <= np.linalg.norm(a @ q @ q.T - a) + 1e-5
