"""Pure NumPy implementations of the hot kernels.

Every function here has a twin with an identical signature in the compiled
``_kernels`` extension. Parameters of the two-hidden-layer tanh network are
passed as one flat float64 vector laid out as ``W1, b1, W2, b2, W3, b3`` with
row-major weights of shape ``(fan_in, fan_out)``.
"""

import numpy as np

BACKEND = "python"


def _unpack(flat, dims):
    n_in, h1, h2, n_out = dims
    i = 0
    out = []
    for rows, cols in ((n_in, h1), (h1, h2), (h2, n_out)):
        out.append(flat[i:i + rows * cols].reshape(rows, cols))
        i += rows * cols
        out.append(flat[i:i + cols])
        i += cols
    return out


def mlp_forward(flat, dims, x):
    """Network output for a batch ``x`` of shape (B, n_in)."""
    W1, b1, W2, b2, W3, b3 = _unpack(flat, dims)
    a1 = np.tanh(x @ W1 + b1)
    a2 = np.tanh(a1 @ W2 + b2)
    return a2 @ W3 + b3


def mlp_forward_cache(flat, dims, x):
    """Forward pass that also returns both hidden activations."""
    W1, b1, W2, b2, W3, b3 = _unpack(flat, dims)
    a1 = np.tanh(x @ W1 + b1)
    a2 = np.tanh(a1 @ W2 + b2)
    return a2 @ W3 + b3, a1, a2


def mlp_backward(flat, dims, x, a1, a2, upstream):
    """Flat gradient of ``sum(upstream * output)`` with respect to the parameters."""
    W1, b1, W2, b2, W3, b3 = _unpack(flat, dims)
    grad = np.empty_like(flat)
    gW1, gb1, gW2, gb2, gW3, gb3 = _unpack(grad, dims)
    gW3[...] = a2.T @ upstream
    gb3[...] = upstream.sum(axis=0)
    d2 = (upstream @ W3.T) * (1.0 - a2 * a2)
    gW2[...] = a1.T @ d2
    gb2[...] = d2.sum(axis=0)
    d1 = (d2 @ W2.T) * (1.0 - a1 * a1)
    gW1[...] = x.T @ d1
    gb1[...] = d1.sum(axis=0)
    return grad


def systematic_resample(weights, u):
    """Ancestor indices from one offset ``u`` in [0, 1) and normalized weights."""
    weights = np.asarray(weights, dtype=np.float64)
    n = weights.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    cdf = np.cumsum(weights)
    # rounding in the cumulative sum must never select a trailing zero weight
    last = np.flatnonzero(weights > 0)[-1]
    positions = (np.arange(n) + u) / n
    idx = np.searchsorted(cdf, positions, side="right")
    return np.minimum(idx, last).astype(np.int64)


def lorenz96_drift(x, forcing, damping):
    """Lorenz-96 tendency for a batch of states, shape (M, d)."""
    adv = (np.roll(x, -1, axis=1) - np.roll(x, 2, axis=1)) * np.roll(x, 1, axis=1)
    if damping:
        return adv - x + forcing
    return adv + forcing
