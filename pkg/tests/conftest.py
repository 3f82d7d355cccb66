import os
from pathlib import Path

import numpy as np
import pytest

from ceilcomp.arch import parse_arch
from ceilcomp.network import NetworkGraph

MNIST_DIR = Path(os.environ.get("CEILCOMP_DATA_DIR", "/root/data")) / "mnist"


def central_fd(f, x, eps=1e-3):
    """Central finite differences of scalar ``f`` at every element of ``x`` (f64)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        g.reshape(-1)[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def conv_loop(x, w, b=None, stride=1, pad=0):
    """Six-nested-loop cross-correlation in float64."""
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    n, c_i, h, wd = x.shape
    c_o, _, p, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - p) // stride + 1
    wo = (wd + 2 * pad - p) // stride + 1
    out = np.zeros((n, c_o, ho, wo))
    for bi in range(n):
        for o in range(c_o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(c_i):
                        for di in range(p):
                            for dj in range(p):
                                acc += xp[bi, c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                    out[bi, o, i, j] = acc + (0.0 if b is None else b[o])
    return out


TOY_ARCH = """
arch toy
input 2x8x8
Conv2d conv1 out=4 k=3 pad=1
ReLU relu1
MaxPool2x2 pool1
Conv2d conv2 out=5 k=3 pad=1
ReLU relu2
Conv2d conv3 out=3 k=1
ReLU relu3
GlobalAvgPool gap
Dense fc out=3
SoftmaxXent loss
"""

RESIDUAL_ARCH = """
arch toyres
input 2x6x6
Conv2d conv1 out=3 k=3 pad=1
ReLU relu1
Conv2d conv2 out=3 k=3 pad=1
ReLU relu2
ResidualAdd add in=relu2,relu1
ReLU relu3
Conv2d conv3 out=4 k=1 in=relu3
ReLU relu4
Flatten flat
Dense fc out=3
SoftmaxXent loss
"""


@pytest.fixture
def toy_net():
    return NetworkGraph.from_arch(parse_arch(TOY_ARCH), seed=3)


@pytest.fixture
def residual_net():
    return NetworkGraph.from_arch(parse_arch(RESIDUAL_ARCH), seed=5)


def random_chain_arch(rng):
    """Random conv chain whose projection sites all feed convolutions."""
    c_in = int(rng.integers(1, 4))
    size = int(rng.choice([4, 6, 8]))
    lines = ["arch rnd", f"input {c_in}x{size}x{size}"]
    n_conv = int(rng.integers(2, 4))
    for i in range(n_conv):
        c = int(rng.integers(3, 9))
        p = int(rng.choice([1, 3]))
        lines.append(f"Conv2d conv{i} out={c} k={p} pad={p // 2}")
        lines.append(f"ReLU relu{i}")
    lines += ["GlobalAvgPool gap", f"Dense fc out={int(rng.integers(2, 6))}", "SoftmaxXent loss"]
    return parse_arch("\n".join(lines))


def requires_mnist():
    if not (MNIST_DIR / "train-images-idx3-ubyte").exists():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR}")
    return MNIST_DIR


ACCEPTANCE_LINES = []


@pytest.fixture
def accept():
    """Record one acceptance line: ``accept(n, ok, detail)``; returns ``ok``."""

    def record(n, ok, detail):
        ACCEPTANCE_LINES.append((n, f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
