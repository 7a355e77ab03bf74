"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
Arrays are float64, C-contiguous, laid out as [N, C, L].
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x, k, pad):
    n, c_in, length = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    l_out = length + 2 * pad - k + 1
    cols = sliding_window_view(x, k, axis=2)  # [N, C_in, L_out, K]
    return cols.transpose(0, 2, 1, 3).reshape(n * l_out, c_in * k), l_out


def conv1d_forward(x, w, b, pad):
    n = x.shape[0]
    c_out, c_in, k = w.shape
    cols, l_out = _im2col(x, k, pad)
    out = cols @ w.reshape(c_out, c_in * k).T
    out += b
    return np.ascontiguousarray(out.reshape(n, l_out, c_out).transpose(0, 2, 1))


def conv1d_weight_grad(x, gout, pad):
    """(grad_w, grad_b) of ``conv1d_forward(x, w, b, pad)`` given the output gradient."""
    n, c_in, _ = x.shape
    c_out, l_out = gout.shape[1], gout.shape[2]
    k = x.shape[2] + 2 * pad - l_out + 1
    cols, _ = _im2col(x, k, pad)
    g = gout.transpose(0, 2, 1).reshape(n * l_out, c_out)
    return (g.T @ cols).reshape(c_out, c_in, k), g.sum(axis=0)


def conv1d_input_grad(w, gout, length, pad):
    """grad_x of ``conv1d_forward`` for an input of the given length."""
    n, c_out, l_out = gout.shape
    _, c_in, k = w.shape
    g = gout.transpose(0, 2, 1).reshape(n * l_out, c_out)
    gcols = (g @ w.reshape(c_out, c_in * k)).reshape(n, l_out, c_in, k)
    gpad = np.zeros((n, c_in, length + 2 * pad))
    for j in range(k):
        gpad[:, :, j:j + l_out] += gcols[:, :, :, j].transpose(0, 2, 1)
    return np.ascontiguousarray(gpad[:, :, pad:pad + length])


def conv1d_backward(x, w, gout, pad):
    """Return (grad_x, grad_w, grad_b) for ``conv1d_forward(x, w, b, pad)``."""
    gw, gb = conv1d_weight_grad(x, gout, pad)
    return conv1d_input_grad(w, gout, x.shape[2], pad), gw, gb


def batchnorm_forward(x, gamma, beta, eps):
    """Train-mode batch norm. Returns (y, xhat, mean, biased_var)."""
    mean = x.mean(axis=(0, 2))
    centered = x - mean[None, :, None]
    var = (centered * centered).mean(axis=(0, 2))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std[None, :, None]
    y = xhat * gamma[None, :, None] + beta[None, :, None]
    return y, xhat, mean, var


def batchnorm_backward(gout, xhat, gamma, inv_std):
    """Gradients of train-mode batch norm. Returns (grad_x, grad_gamma, grad_beta)."""
    m = gout.shape[0] * gout.shape[2]
    gbeta = gout.sum(axis=(0, 2))
    ggamma = (gout * xhat).sum(axis=(0, 2))
    scale = (gamma * inv_std / m)[None, :, None]
    gx = scale * (m * gout - gbeta[None, :, None] - xhat * ggamma[None, :, None])
    return gx, ggamma, gbeta
