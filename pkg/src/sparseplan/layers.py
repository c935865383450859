"""Small differentiable building blocks with explicit backward passes.

Forward functions return (output, cache); the matching backward consumes
the cache and the output cotangent.  Normalizations are smooth (variance
is floored by a small epsilon rather than branching), so every layer here
is safe for central-difference verification.
"""

from __future__ import annotations

import numpy as np

NORM_EPS = 1e-8


def linear_forward(x, W, b):
    """x (..., in) @ W (in, out) + b (out,)."""
    return x @ W + b, (x, W)


def linear_backward(cache, d_out):
    x, W = cache
    x2 = x.reshape(-1, x.shape[-1])
    g2 = d_out.reshape(-1, d_out.shape[-1])
    dW = x2.T @ g2
    db = g2.sum(axis=0)
    dx = d_out @ W.T
    return dx, dW, db


def tanh_forward(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(cache, d_out):
    return d_out * (1.0 - cache * cache)


def layernorm_forward(x, axis=-1):
    """Paramless normalization to zero mean / unit variance along axis."""
    mu = x.mean(axis=axis, keepdims=True)
    var = x.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    y = (x - mu) * inv
    return y, (y, inv, axis, x.shape[axis] if isinstance(axis, int) else None)


def layernorm_backward(cache, d_out):
    y, inv, axis, n = cache
    m1 = d_out.mean(axis=axis, keepdims=True)
    m2 = (d_out * y).mean(axis=axis, keepdims=True)
    return inv * (d_out - m1 - y * m2)


def unitnorm_forward(x, axis=-1):
    """Scale vectors along axis to (smoothed) unit Euclidean norm."""
    r = np.sqrt((x * x).sum(axis=axis, keepdims=True) + NORM_EPS)
    y = x / r
    return y, (x, r, axis)


def unitnorm_backward(cache, d_out):
    x, r, axis = cache
    inner = (x * d_out).sum(axis=axis, keepdims=True)
    return d_out / r - x * inner / r**3


def sinusoidal_encoding(n: int, d: int, rate: float = 10000.0) -> np.ndarray:
    """Fixed (n, d) interleaved sine/cosine position table."""
    pos = np.arange(n)[:, None]
    freq = np.exp(-np.log(rate) * np.arange(0, d, 2) / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq[: pe[:, 1::2].shape[1]])
    return pe


def grid_encoding(h: int, w: int, d: int) -> np.ndarray:
    """Fixed (h*w, d) 2-D positional table: row code in the first half of
    the channels, column code in the second."""
    half = d // 2
    rows = sinusoidal_encoding(h, half)
    cols = sinusoidal_encoding(w, d - half)
    pe = np.zeros((h, w, d))
    pe[:, :, :half] = rows[:, None, :]
    pe[:, :, half:] = cols[None, :, :]
    return pe.reshape(h * w, d)
