import itertools

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def direct_conv3d(x, w):
    """Loop-over-offsets convolution straight from the definition (float64)."""
    S, X, Y, Z = x.shape
    T, _, kx, ky, kz = w.shape
    cx, cy, cz = kx // 2, ky // 2, kz // 2
    out = np.zeros((T, X, Y, Z))
    for a, b, c in itertools.product(range(kx), range(ky), range(kz)):
        # out[x] += w[a] * in[x - (a - cx)]
        dx, dy, dz = a - cx, b - cy, c - cz
        src = np.zeros_like(x, dtype=np.float64)
        xs = slice(max(0, -dx), X - max(0, dx))
        ys = slice(max(0, -dy), Y - max(0, dy))
        zs = slice(max(0, -dz), Z - max(0, dz))
        xd = slice(max(0, dx), X - max(0, -dx))
        yd = slice(max(0, dy), Y - max(0, -dy))
        zd = slice(max(0, dz), Z - max(0, -dz))
        src[:, xd, yd, zd] = x[:, xs, ys, zs]
        out += np.einsum("ts,sxyz->txyz", w[:, :, a, b, c], src)
    return out


def numeric_grad(f, x, probes, rng, eps=1e-6):
    """Central differences of scalar ``f`` at ``probes`` random entries of ``x``."""
    idx = [tuple(int(rng.integers(0, n)) for n in x.shape) for _ in range(probes)]
    out = []
    for i in idx:
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        out.append((fp - fm) / (2 * eps))
    return idx, np.array(out)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(1e-12, np.max(np.abs(b))))
