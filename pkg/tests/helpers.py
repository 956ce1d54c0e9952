"""Shared numeric helpers for the test suite (independent of the package)."""

import math

import numpy as np
import torch


def central_difference(fn, tensor, h=1e-5):
    """Numerical gradient of scalar fn w.r.t. every entry of tensor (float64)."""
    grad = torch.zeros_like(tensor)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


def bilinear_oracle(arr, target_h, target_w):
    """Half-pixel-center bilinear resize of a 2D array, clamp-to-edge."""
    h, w = arr.shape
    out = np.zeros((target_h, target_w), dtype=np.float64)

    def at(r, c):
        return arr[min(max(r, 0), h - 1), min(max(c, 0), w - 1)]

    for i in range(target_h):
        for j in range(target_w):
            y = (i + 0.5) * h / target_h - 0.5
            x = (j + 0.5) * w / target_w - 0.5
            y0, x0 = math.floor(y), math.floor(x)
            dy, dx = y - y0, x - x0
            out[i, j] = (
                at(y0, x0) * (1 - dy) * (1 - dx)
                + at(y0 + 1, x0) * dy * (1 - dx)
                + at(y0, x0 + 1) * (1 - dy) * dx
                + at(y0 + 1, x0 + 1) * dy * dx
            )
    return out
