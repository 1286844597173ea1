"""Pure-numpy MLP kernels.

Reference implementation of the two hot kernels. The compiled module
``_kernels`` exposes the same functions with the same signatures and is
preferred when importable.
"""

import numpy as np


def _silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def _unpack(theta, n_in, h1, h2, n_out):
    o = 0
    W1 = theta[o:o + n_in * h1].reshape(n_in, h1); o += n_in * h1
    b1 = theta[o:o + h1]; o += h1
    W2 = theta[o:o + h1 * h2].reshape(h1, h2); o += h1 * h2
    b2 = theta[o:o + h2]; o += h2
    W3 = theta[o:o + h2 * n_out].reshape(h2, n_out); o += h2 * n_out
    b3 = theta[o:o + n_out]
    return W1, b1, W2, b2, W3, b3


def mlp_forward(theta, X, h1, h2, n_out):
    """Evaluate the two-hidden-layer SiLU MLP on the rows of ``X``."""
    W1, b1, W2, b2, W3, b3 = _unpack(theta, X.shape[1], h1, h2, n_out)
    a1, _ = _silu(X @ W1 + b1)
    a2, _ = _silu(a1 @ W2 + b2)
    return a2 @ W3 + b3


def mlp_mse_grad(theta, X, target, h1, h2, n_out):
    """Mean over rows of the squared-error sum, and its gradient w.r.t. ``theta``."""
    n_in = X.shape[1]
    B = X.shape[0]
    W1, b1, W2, b2, W3, b3 = _unpack(theta, n_in, h1, h2, n_out)
    u1 = X @ W1 + b1
    a1, s1 = _silu(u1)
    u2 = a1 @ W2 + b2
    a2, s2 = _silu(u2)
    y = a2 @ W3 + b3
    r = y - target
    loss = float(np.sum(r * r) / B)

    dy = (2.0 / B) * r
    gW3 = a2.T @ dy
    gb3 = dy.sum(axis=0)
    da2 = dy @ W3.T
    du2 = da2 * (s2 * (1.0 + u2 * (1.0 - s2)))
    gW2 = a1.T @ du2
    gb2 = du2.sum(axis=0)
    da1 = du2 @ W2.T
    du1 = da1 * (s1 * (1.0 + u1 * (1.0 - s1)))
    gW1 = X.T @ du1
    gb1 = du1.sum(axis=0)
    grad = np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2, gW3.ravel(), gb3])
    return loss, grad
