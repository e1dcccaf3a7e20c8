"""Image quality metrics: PSNR and windowed SSIM (with analytic gradient).

SSIM uses an 11x11 Gaussian window (sigma 1.5), C1=0.01^2, C2=0.03^2,
computed per channel on zero-padded same-size windows and averaged. The
zero-padded window makes the filtering self-adjoint, which keeps the SSIM
gradient exact.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np
from scipy.ndimage import correlate1d

from .core import InputError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images return 99.0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gauss_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


_KERNEL = _gauss_kernel()


def _blur(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian window, zero padding, same size; acts on (H, W)."""
    out = correlate1d(img, _KERNEL, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _KERNEL, axis=1, mode="constant", cval=0.0)


def _as_channels(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[:, :, None]
    if img.ndim == 3:
        return img
    raise InputError(f"expected (H, W) or (H, W, C) image, got shape {img.shape}")


def ssim_and_grad(x: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean SSIM of x against reference y, plus d(SSIM)/dx.

    The gradient treats y as constant; use it for losses of the form
    lam * (1 - SSIM(render, target)).
    """
    xs = _as_channels(x)
    ys = _as_channels(y)
    if xs.shape != ys.shape:
        raise InputError(f"image shapes differ: {xs.shape} vs {ys.shape}")
    h, w, c = xs.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise InputError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")

    total = 0.0
    grad = np.zeros_like(xs)
    n = h * w * c
    for ch in range(c):
        xc, yc = xs[:, :, ch], ys[:, :, ch]
        mx, my = _blur(xc), _blur(yc)
        x2, y2, xy = _blur(xc * xc), _blur(yc * yc), _blur(xc * yc)
        vx = x2 - mx * mx
        vy = y2 - my * my
        cxy = xy - mx * my
        a1 = 2.0 * mx * my + _C1
        a2 = 2.0 * cxy + _C2
        b1 = mx * mx + my * my + _C1
        b2 = vx + vy + _C2
        s = (a1 * a2) / (b1 * b2)
        total += s.sum()

        # upstream 1/n per map pixel; backprop through the three blurs of x
        u = 1.0 / n
        ds_dm = 2.0 * my * (a2 - a1) / (b1 * b2) + 2.0 * mx * s * (1.0 / b2 - 1.0 / b1)
        ds_dx2 = -s / b2
        ds_dxy = 2.0 * a1 / (b1 * b2)
        grad[:, :, ch] = u * (_blur(ds_dm) + 2.0 * xc * _blur(ds_dx2) + yc * _blur(ds_dxy))

    value = total / n
    if np.asarray(x).ndim == 2:
        grad = grad[:, :, 0]
    return float(value), grad


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM in [-1, 1]; per-channel averaged."""
    value, _ = ssim_and_grad(a, b)
    return value
