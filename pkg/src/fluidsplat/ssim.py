"""Windowed SSIM with an analytic gradient.

11x11 Gaussian window (sigma 1.5), standard constants C1 = 0.01^2 and
C2 = 0.03^2 on the [0,1] range, weighted (not sample) covariances, and
'valid' windows only (a 5-pixel border is excluded), computed per channel
and averaged.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation

WINDOW = 11
SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _window_1d() -> np.ndarray:
    x = np.arange(WINDOW, dtype=np.float64) - (WINDOW - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * SIGMA * SIGMA))
    return w / w.sum()


_W1 = _window_1d()


def _filter_valid(img: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation with the Gaussian window (2D input)."""
    h, w = img.shape
    hc, wc = h - WINDOW + 1, w - WINDOW + 1
    tmp = np.zeros((hc, w))
    for k in range(WINDOW):
        tmp += _W1[k] * img[k:k + hc, :]
    out = np.zeros((hc, wc))
    for k in range(WINDOW):
        out += _W1[k] * tmp[:, k:k + wc]
    return out


def _filter_valid_adjoint(cot: np.ndarray, shape) -> np.ndarray:
    """Adjoint of _filter_valid: scatter the cotangent back to full size."""
    h, w = shape
    hc, wc = cot.shape
    tmp = np.zeros((hc, w))
    for k in range(WINDOW):
        tmp[:, k:k + wc] += _W1[k] * cot
    out = np.zeros((h, w))
    for k in range(WINDOW):
        out[k:k + hc, :] += _W1[k] * tmp
    return out


def ssim(x: np.ndarray, y: np.ndarray, grad: bool = False):
    """Mean SSIM between two H x W x C images in [0,1].

    Returns (value, d(ssim)/dx) when grad is set, else just the value.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractViolation(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x = x[:, :, None]
        y = y[:, :, None]
    h, w, nc = x.shape
    if h < WINDOW or w < WINDOW:
        raise ContractViolation(f"images must be at least {WINDOW}x{WINDOW} for SSIM")
    total = 0.0
    gx = np.zeros_like(x) if grad else None
    count = (h - WINDOW + 1) * (w - WINDOW + 1) * nc
    for c in range(nc):
        xc, yc = x[:, :, c], y[:, :, c]
        mx = _filter_valid(xc)
        my = _filter_valid(yc)
        x2 = _filter_valid(xc * xc)
        y2 = _filter_valid(yc * yc)
        xy = _filter_valid(xc * yc)
        vx = x2 - mx * mx
        vy = y2 - my * my
        vxy = xy - mx * my
        A = 2.0 * mx * my + C1
        B = 2.0 * vxy + C2
        Cq = mx * mx + my * my + C1
        D = vx + vy + C2
        s = (A * B) / (Cq * D)
        total += s.sum()
        if grad:
            gs = 1.0 / count  # cotangent of each window's s toward the mean
            dA = gs * B / (Cq * D)
            dB = gs * A / (Cq * D)
            dC = -gs * A * B / (Cq * Cq * D)
            dD = -gs * A * B / (Cq * D * D)
            c_x2 = dD
            c_xy = 2.0 * dB
            c_mx = 2.0 * my * dA + 2.0 * mx * dC - 2.0 * mx * c_x2 - my * c_xy
            gx[:, :, c] = (_filter_valid_adjoint(c_mx, (h, w))
                           + 2.0 * xc * _filter_valid_adjoint(c_x2, (h, w))
                           + yc * _filter_valid_adjoint(c_xy, (h, w)))
    value = total / count
    if grad:
        return value, gx
    return value
