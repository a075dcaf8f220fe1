"""Numpy convolution primitives (NCHW, same padding) with manual backprop."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def same_output_size(size: int, stride: int) -> int:
    return math.ceil(size / stride)


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """(before, after) padding so the output has ceil(size / stride) entries."""
    out = same_output_size(size, stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _windows(x: np.ndarray, kernel: int, stride: int):
    _, _, h, w = x.shape
    ph, pw = same_padding(h, kernel, stride), same_padding(w, kernel, stride)
    xp = np.pad(x, ((0, 0), (0, 0), ph, pw))
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    return win, ph, pw, xp.shape


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int):
    """Forward pass. Returns (output NCHW, cache for :func:`conv2d_backward`)."""
    kernel = weight.shape[-1]
    win, ph, pw, padded_shape = _windows(x, kernel, stride)
    # (B, C, Ho, Wo, k, k) x (O, C, k, k) -> (B, Ho, Wo, O)
    out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3]))
    out += bias
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return out, (win, weight, stride, ph, pw, padded_shape)


def conv2d_backward(grad_out: np.ndarray, cache):
    win, weight, stride, ph, pw, padded_shape = cache
    kernel = weight.shape[-1]
    grad_w = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = grad_out.sum(axis=(0, 2, 3))
    # (B, O, Ho, Wo) x (O, C, k, k) -> (B, Ho, Wo, C, k, k)
    cols = np.tensordot(grad_out, weight, axes=([1], [0]))
    grad_xp = np.zeros(padded_shape, dtype=grad_out.dtype)
    ho, wo = grad_out.shape[2], grad_out.shape[3]
    for i in range(kernel):
        for j in range(kernel):
            grad_xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
    h = padded_shape[2] - ph[0] - ph[1]
    w = padded_shape[3] - pw[0] - pw[1]
    grad_x = grad_xp[:, :, ph[0]:ph[0] + h, pw[0]:pw[0] + w]
    return grad_x, grad_w, grad_b


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
