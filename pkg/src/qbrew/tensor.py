"""Dense CNN kernels on numpy arrays (NCHW feature maps, OIKK kernels).

Convolution is cross-correlation (no kernel flip) computed through an
im2col view; the reference loops in the tests pin it down.
"""

from __future__ import annotations

import contextlib
from typing import Iterator, List, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


_mac_counters: List[list] = []


@contextlib.contextmanager
def count_macs() -> Iterator[list]:
    """Collect ``(kernel_name, macs)`` for every conv/fc call in the block."""
    log: list = []
    _mac_counters.append(log)
    try:
        yield log
    finally:
        _mac_counters.remove(log)


def _record(name: str, macs: int) -> None:
    for log in _mac_counters:
        log.append((name, int(macs)))


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if span < 0 or stride < 1 or span % stride:
        raise ShapeError(
            f"kernel {kernel} with stride {stride}, pad {pad} does not tile extent {size}"
        )
    return span // stride + 1


def pool_output_size(size: int, kernel: int, stride: int) -> int:
    if kernel > size or stride < 1:
        raise ShapeError(f"pool window {kernel} larger than extent {size}")
    return (size - kernel) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> Tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    r = conv_output_size(h, k, stride, pad)
    cc = conv_output_size(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # rows: (n, r, c); columns: (channel, ki, kj) to match kernels.reshape(M, -1)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * r * cc, c * k * k)
    return cols, r, cc


def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, stride: int = 1,
           pad: int = 0) -> np.ndarray:
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIKK kernels, got {x.shape}, {kernels.shape}")
    m, cin, k, k2 = kernels.shape
    if k != k2 or x.shape[1] != cin or bias.shape != (m,):
        raise ShapeError(f"incompatible conv shapes {x.shape}, {kernels.shape}, {bias.shape}")
    n = x.shape[0]
    cols, r, cc = _im2col(x, k, stride, pad)
    out = cols @ kernels.reshape(m, -1).T
    out += bias
    _record("conv2d", n * r * cc * m * cin * k * k)
    return np.ascontiguousarray(out.reshape(n, r, cc, m).transpose(0, 3, 1, 2))


def conv2d_backward(dout: np.ndarray, x: np.ndarray, kernels: np.ndarray, stride: int = 1,
                    pad: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. input, kernels and bias."""
    n, cin, h, w = x.shape
    m, _, k, _ = kernels.shape
    cols, r, cc = _im2col(x, k, stride, pad)
    d2 = dout.transpose(0, 2, 3, 1).reshape(n * r * cc, m)
    dkernels = (d2.T @ cols).reshape(kernels.shape)
    dbias = d2.sum(axis=0)
    dcols = (d2 @ kernels.reshape(m, -1)).reshape(n, r, cc, cin, k, k)
    dxp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad), dtype=np.result_type(dout, kernels))
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki:ki + stride * r:stride, kj:kj + stride * cc:stride] += (
                dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    return dx, dkernels, dbias


def fully_connected(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``out[n, m] = bias[m] + sum_d weights[m, d] * x[n, d]``; extra input dims are flattened."""
    x2 = x.reshape(x.shape[0], -1)
    if weights.ndim != 2 or x2.shape[1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise ShapeError(f"incompatible fc shapes {x.shape}, {weights.shape}, {bias.shape}")
    _record("fully_connected", x2.shape[0] * weights.size)
    return x2 @ weights.T + bias


def fully_connected_backward(dout: np.ndarray, x: np.ndarray,
                             weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x2 = x.reshape(x.shape[0], -1)
    dx = (dout @ weights).reshape(x.shape)
    return dx, dout.T @ x2, dout.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def _pool_windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"max_pool expects NCHW input, got {x.shape}")
    pool_output_size(x.shape[2], k, stride)
    pool_output_size(x.shape[3], k, stride)
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def max_pool(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    return _pool_windows(x, k, stride).max(axis=(4, 5))


def max_pool_backward(dout: np.ndarray, x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Route each output gradient to the first maximal element of its window."""
    win = _pool_windows(x, k, stride)
    n, c, r, cc = win.shape[:4]
    arg = win.reshape(n, c, r, cc, k * k).argmax(axis=4)
    dx = np.zeros_like(x, dtype=np.result_type(dout, x))
    for idx in range(k * k):
        ki, kj = divmod(idx, k)
        dx[:, :, ki:ki + stride * r:stride, kj:kj + stride * cc:stride] += dout * (arg == idx)
    return dx


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> Tuple[float, np.ndarray]:
    """Mean negative log-likelihood over the batch and its gradient w.r.t. logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    d = np.exp(logp)
    d[rows, labels] -= 1
    return float(loss), d / n
