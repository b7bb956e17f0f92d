"""Independent reference implementations used only by the tests.

Each one is written the slow, obvious way so that it shares no code path
with the package.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def conv1d_loops(x, w, b=None, padding=None):
    """Direct nested-loop zero-padded cross-correlation."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    B, cin, L = x.shape
    cout, _, k = w.shape
    p = (k - 1) // 2 if padding is None else padding
    lout = L + 2 * p - k + 1
    out = np.zeros((B, cout, lout))
    for bi, o, pos in itertools.product(range(B), range(cout), range(lout)):
        acc = 0.0
        for i in range(cin):
            for t in range(k):
                src = pos + t - p
                if 0 <= src < L:
                    acc += w[o, i, t] * x[bi, i, src]
        out[bi, o, pos] = acc + (0.0 if b is None else b[o])
    return out


def softmax_xent(logits, targets):
    """Per-position -log softmax via explicit exponentials, averaged."""
    z = np.asarray(logits, dtype=np.float64)
    total, n = 0.0, 0
    for bi in range(z.shape[0]):
        for pos in range(z.shape[2]):
            col = z[bi, :, pos]
            m = max(col)
            lse = m + math.log(sum(math.exp(v - m) for v in col))
            total += lse - col[int(targets[bi][pos])]
            n += 1
    return total / n


def prefix_parity_cumsum(bits):
    """Cumulative sum then mod 2 (as opposed to a running XOR)."""
    return (np.cumsum(np.asarray(bits, dtype=np.int64), axis=-1) % 2).astype(np.uint8)


def largest_singular_value(m):
    """Square root of the top eigenvalue of M^T M (or M M^T, whichever is smaller)."""
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        return 0.0
    g = m.T @ m if m.shape[1] <= m.shape[0] else m @ m.T
    return math.sqrt(max(0.0, float(np.linalg.eigvalsh(g)[-1])))


def central_difference(f, arrays, h=1e-6):
    """Numerical gradient of scalar ``f(*arrays)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            fp = f(*arrays)
            a[idx] = old - h
            fm = f(*arrays)
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def dense_conv_matrix(w, length, padding=None):
    """Explicit matrix of a zero-padded conv; columns are unit impulses."""
    w = np.asarray(w, dtype=np.float64)
    cout, cin, k = w.shape
    cols = []
    for i in range(cin):
        for pos in range(length):
            e = np.zeros((1, cin, length))
            e[0, i, pos] = 1.0
            cols.append(conv1d_loops(e, w, padding=padding).reshape(-1))
    return np.stack(cols, axis=1)
