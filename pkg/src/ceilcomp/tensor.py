"""Numerical kernels on float32 numpy arrays.

Every public function takes and returns ``np.ndarray`` with dtype float32;
inputs of other float dtypes are cast on entry. Convolution is im2col followed
by a single GEMM. The SVD is a one-sided Jacobi iteration written out here so
its convergence rule and tie-breaking are fixed and testable.
"""
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, NumericalError, ParameterError

DTYPE = np.float32

JACOBI_TOL = 1e-10
JACOBI_MAX_SWEEPS = 100


def as_tensor(x):
    return np.ascontiguousarray(x, dtype=DTYPE)


@contextmanager
def precision(dtype):
    """Temporarily run every kernel in ``dtype`` (tests use float64 for oracles)."""
    global DTYPE
    old, DTYPE = DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = old


# ---------------------------------------------------------------- convolution


def conv_output_size(size, p, stride, pad, axis="h"):
    span = size + 2 * pad - p
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"conv output size along {axis} is not a positive integer: "
            f"({size} + 2*{pad} - {p})/{stride} + 1"
        )
    return span // stride + 1


def _check_conv(x, w):
    if x.ndim != 4:
        raise DimensionError(f"conv input must be [batch,c_i,h,w], got shape {x.shape}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv weight must be [c_o,c_i,p,p], got shape {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"c_i mismatch: input axis 1 has {x.shape[1]} channels, weight axis 1 has {w.shape[1]}"
        )


def im2col(x, p, stride, pad):
    """Return ``(cols, h_out, w_out)`` with ``cols`` of shape [batch*h_out*w_out, c*p*p]."""
    b, c, h, w = x.shape
    h_out = conv_output_size(h, p, stride, pad, "h")
    w_out = conv_output_size(w, p, stride, pad, "w")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (p, p), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: [b, c, h_out, w_out, p, p] -> rows ordered (b, i, j), cols ordered (c, di, dj)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h_out * w_out, c * p * p)
    return cols, h_out, w_out


def col2im(dcols, x_shape, p, stride, pad, h_out, w_out):
    b, c, h, w = x_shape
    d = dcols.reshape(b, h_out, w_out, c, p, p)
    dx = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    for di in range(p):
        for dj in range(p):
            dx[:, :, di:di + stride * h_out:stride, dj:dj + stride * w_out:stride] += (
                d[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
            )
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dx)


def conv2d_forward(x, w, bias=None, stride=1, pad=0):
    """Cross-correlation of ``x`` [batch,c_i,h,w] with ``w`` [c_o,c_i,p,p]."""
    x = as_tensor(x)
    w = as_tensor(w)
    _check_conv(x, w)
    c_o, _, p, _ = w.shape
    if bias is not None and np.shape(bias) != (c_o,):
        raise DimensionError(f"bias must have shape ({c_o},), got {np.shape(bias)}")
    cols, h_out, w_out = im2col(x, p, stride, pad)
    out = cols @ w.reshape(c_o, -1).T
    if bias is not None:
        out += as_tensor(bias)
    return np.ascontiguousarray(out.reshape(x.shape[0], h_out, w_out, c_o).transpose(0, 3, 1, 2))


def conv2d_backward(grad_out, x, w, stride=1, pad=0, need_x=True, need_w=True):
    """Gradients of ``sum(grad_out * conv2d_forward(x, w, b))``.

    Returns ``(grad_x, grad_w, grad_bias)``; entries not requested via
    ``need_x`` / ``need_w`` are ``None``.
    """
    x = as_tensor(x)
    w = as_tensor(w)
    grad_out = as_tensor(grad_out)
    _check_conv(x, w)
    c_o, _, p, _ = w.shape
    h_out = conv_output_size(x.shape[2], p, stride, pad, "h")
    w_out = conv_output_size(x.shape[3], p, stride, pad, "w")
    expected = (x.shape[0], c_o, h_out, w_out)
    if grad_out.shape != expected:
        raise DimensionError(f"grad_out shape {grad_out.shape} != conv output shape {expected}")
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, c_o)
    grad_x = grad_w = grad_b = None
    if need_w:
        cols, _, _ = im2col(x, p, stride, pad)
        grad_w = (g.T @ cols).reshape(w.shape)
        grad_b = g.sum(axis=0)
    if need_x:
        dcols = g @ w.reshape(c_o, -1)
        grad_x = col2im(dcols, x.shape, p, stride, pad, h_out, w_out)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------- elementwise / pooling


def relu_forward(x):
    return np.maximum(x, DTYPE(0))


def relu_backward(grad_out, y):
    return np.where(y > 0, grad_out, DTYPE(0)).astype(DTYPE)


def maxpool2x2_forward(x):
    """2x2 stride-2 max pool; returns ``(out, argmax)`` with argmax in 0..3 (first max wins)."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"MaxPool2x2 needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.uint8)


def maxpool2x2_backward(grad_out, argmax):
    b, c, h2, w2 = grad_out.shape
    blocks = np.zeros((b, c, h2, w2, 4), dtype=DTYPE)
    np.put_along_axis(blocks, argmax[..., None].astype(np.intp), grad_out[..., None], axis=-1)
    dx = blocks.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dx.reshape(b, c, h2 * 2, w2 * 2))


def maxpool_forward(x, k, stride, pad):
    """General max pool (padding never wins); argmax is the flat offset inside the k*k window."""
    b, c, h, w = x.shape
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h_out, :w_out]
    win = win.reshape(b, c, h_out, w_out, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.uint8)


def maxpool_backward(grad_out, argmax, x_shape, k, stride, pad):
    b, c, h, w = x_shape
    _, _, h_out, w_out = grad_out.shape
    dx = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    for di in range(k):
        for dj in range(k):
            hit = np.where(argmax == di * k + dj, grad_out, DTYPE(0))
            dx[:, :, di:di + stride * h_out:stride, dj:dj + stride * w_out:stride] += hit
    if pad:
        dx = dx[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(dx)


# ---------------------------------------------------------------- reshapes / products


def reshape_fm(x):
    """[c, m, n] -> [c, m*n]: channels become rows."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"feature map must be [c,m,n], got shape {x.shape}")
    return x.reshape(x.shape[0], x.shape[1] * x.shape[2])


def unreshape_fm(xhat, m, n):
    xhat = np.asarray(xhat)
    if xhat.ndim != 2 or xhat.shape[1] != m * n:
        raise DimensionError(f"cannot unreshape {xhat.shape} to [c,{m},{n}]: element count mismatch")
    return xhat.reshape(xhat.shape[0], m, n)


def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimension mismatch: {a.shape} @ {b.shape}")
    return a @ b


def channel_mix(x, m):
    """Apply ``m`` [k, c] to the channel axis of ``x`` [batch, c, h, w] -> [batch, k, h, w]."""
    b, c, h, w = x.shape
    if m.shape[1] != c:
        raise DimensionError(f"channel mismatch: matrix {m.shape} vs feature map with {c} channels")
    y = m @ x.reshape(b, c, h * w)
    return y.reshape(b, m.shape[0], h, w)


# ---------------------------------------------------------------- truncated SVD


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray      # [d1, k], orthonormal columns
    sigma: np.ndarray  # [k], non-increasing, >= 0
    v: np.ndarray      # [d2, k], orthonormal columns

    def reconstruct(self):
        return (self.u * self.sigma) @ self.v.T


def _round_robin(n):
    """Rounds of disjoint column pairs covering every pair once (circle method)."""
    players = list(range(n)) + ([None] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a is not None and b is not None:
                pairs.append((min(a, b), max(a, b)))
        pairs.sort()
        rounds.append(np.array(pairs, dtype=np.intp).reshape(-1, 2))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_columns(a):
    """Orthogonalise the columns of ``a`` (f64, d >= n) in place; returns (B, V, sweeps)."""
    b = a.copy()
    n = b.shape[1]
    v = np.eye(n)
    rounds = _round_robin(n)
    # columns at roundoff level (rank-deficient input) count as converged
    floor = (np.finfo(np.float64).eps * np.linalg.norm(b)) ** 2
    for sweep in range(1, JACOBI_MAX_SWEEPS + 1):
        rotated = False
        for pairs in rounds:
            if not len(pairs):
                continue
            i, j = pairs[:, 0], pairs[:, 1]
            bi, bj = b[:, i], b[:, j]
            alpha = np.einsum("dk,dk->k", bi, bi)
            beta = np.einsum("dk,dk->k", bj, bj)
            gamma = np.einsum("dk,dk->k", bi, bj)
            scale = np.sqrt(alpha * beta)
            active = (np.minimum(alpha, beta) > floor) & (np.abs(gamma) > JACOBI_TOL * scale)
            if not active.any():
                continue
            rotated = True
            i, j = i[active], j[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            bi, bj = b[:, i], b[:, j]
            b[:, i], b[:, j] = c * bi - s * bj, s * bi + c * bj
            vi, vj = v[:, i], v[:, j]
            v[:, i], v[:, j] = c * vi - s * vj, s * vi + c * vj
        if not rotated:
            return b, v, sweep
    raise NumericalError(f"Jacobi SVD did not converge within the iteration cap of {JACOBI_MAX_SWEEPS} sweeps")


def _complete_orthonormal(q, cols):
    """Replace the listed columns of ``q`` with unit vectors orthogonal to all others."""
    keep = [c for c in range(q.shape[1]) if c not in set(cols)]
    basis = [q[:, c] for c in keep]
    e = 0
    for c in cols:
        while True:
            cand = np.zeros(q.shape[0])
            cand[e % q.shape[0]] = 1.0
            e += 1
            for bvec in basis:
                cand -= (bvec @ cand) * bvec
            nrm = np.linalg.norm(cand)
            if nrm > 1e-6:
                break
            if e > 2 * q.shape[0]:
                raise NumericalError("could not complete orthonormal basis")
        cand /= nrm
        q[:, c] = cand
        basis.append(cand)
    return q


def truncated_svd(a, k):
    """Rank-``k`` SVD by one-sided Jacobi on the smaller Gram side.

    Accumulates in float64 and returns float32 factors. Equal singular values
    keep their original column order.
    """
    a = np.asarray(a)
    if a.ndim != 2:
        raise DimensionError(f"truncated_svd needs a matrix, got shape {a.shape}")
    d1, d2 = a.shape
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= min(d1, d2):
        raise ParameterError(f"k={k} out of range [1, {min(d1, d2)}] for a {d1}x{d2} matrix")
    work = np.array(a, dtype=np.float64)
    transposed = d2 > d1
    if transposed:
        work = work.T
    b, v, _ = _jacobi_columns(work)
    sigma = np.linalg.norm(b, axis=0)
    order = np.argsort(-sigma, kind="stable")[:k]
    sigma = sigma[order]
    v = v[:, order]
    u = np.zeros((b.shape[0], k))
    zero = []
    for col, src in enumerate(order):
        if sigma[col] > 0:
            u[:, col] = b[:, src] / sigma[col]
        else:
            zero.append(col)
    if zero:
        u = _complete_orthonormal(u, zero)
    if transposed:
        u, v = v, u
    return SvdResult(u=as_tensor(u), sigma=as_tensor(sigma), v=as_tensor(v))
