"""Pure-numpy reference versions of the hot kernels.

Every function here has a twin in ``_kernels.pyx`` with the same signature
and the same in-place semantics. All arrays are C-contiguous float64.
"""
import numpy as np


def dense_forward(x, W, b, out, apply_tanh):
    np.matmul(x, W, out=out)
    out += b
    if apply_tanh:
        np.tanh(out, out=out)


def dense_backward(x, W, y, dy, dW, db, dx, apply_tanh):
    """Backprop through ``y = act(x @ W + b)``.

    ``dx`` may be None when the input gradient is not wanted.
    """
    dz = dy * (1.0 - y * y) if apply_tanh else dy
    np.matmul(x.T, dz, out=dW)
    np.sum(dz, axis=0, out=db)
    if dx is not None:
        np.matmul(dz, W.T, out=dx)


def adam_update(p, g, m, v, lr, beta1, beta2, eps, t):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def polyak(target, online, tau):
    target *= 1.0 - tau
    target += tau * online


def quantile_huber(pred, target, taus, kappa, grad):
    """Quantile-regression Huber loss, mean over batch and all (i, j) pairs.

    Writes d loss / d pred into ``grad`` and returns the scalar loss.
    """
    B, N = pred.shape
    M = target.shape[1]
    u = target[:, None, :] - pred[:, :, None]
    absu = np.abs(u)
    huber = np.where(absu <= kappa, 0.5 * u * u, kappa * (absu - 0.5 * kappa))
    weight = np.abs(taus[None, :, None] - (u < 0.0))
    scale = 1.0 / (B * N * M)
    loss = float(np.sum(weight * huber) / kappa * scale)
    dh = np.clip(u, -kappa, kappa)
    grad[...] = -np.sum(weight * dh, axis=2) / kappa * scale
    return loss
