"""Pure-numpy implementations of the hot kernels.

Same signatures as the compiled module ``_ckernels``; arrays are float64
and C-contiguous. These are the reference implementations the compiled
versions are tested against.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D array."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_grad(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Backward of softmax_rows: gx = y * (gy - sum(gy * y))."""
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layer_norm_rows(x: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise pre-affine layer norm; returns (normalized, inv_std)."""
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * inv_std[:, None]
    return y, inv_std


def layer_norm_rows_grad(y: np.ndarray, inv_std: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Backward of layer_norm_rows given the normalized output y."""
    m1 = gy.mean(axis=1, keepdims=True)
    m2 = (gy * y).mean(axis=1, keepdims=True)
    return inv_std[:, None] * (gy - m1 - y * m2)


def scatter_add_rows(out: np.ndarray, idx: np.ndarray, src: np.ndarray) -> None:
    """out[idx[i], :] += src[i, :] with repeated indices accumulated."""
    np.add.at(out, idx, src)


def kmeans_assign(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per row (squared Euclidean; ties -> lowest index).

    Returns (labels int64, squared distance to the assigned centroid).
    """
    # (N, K, D) differences; fine at the scales this package runs at.
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    return labels.astype(np.int64), d2[np.arange(x.shape[0]), labels]


def adam_step(
    p: np.ndarray,
    g: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    weight_decay: float,
) -> None:
    """One in-place Adam update (L2 weight decay folded into the gradient)."""
    if weight_decay != 0.0:
        g = g + weight_decay * p
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    p -= lr * mhat / (np.sqrt(vhat) + eps)
