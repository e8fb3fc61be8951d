"""SSIM with an analytic gradient, shared by the mapping loss and the
evaluation metrics.

Local statistics use an 11x11 Gaussian window (sigma 1.5) applied as a
separable 'same' convolution with zero padding; the zero-padded adjoint is
the same convolution, which keeps the backward pass exact. Constants
assume unit dynamic range.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve1d

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def _window() -> np.ndarray:
    half = (WINDOW_SIZE - 1) / 2.0
    t = np.arange(WINDOW_SIZE) - half
    w = np.exp(-0.5 * (t / WINDOW_SIGMA) ** 2)
    return w / w.sum()


_W = _window()


def _filter2d(img: np.ndarray) -> np.ndarray:
    out = convolve1d(img, _W, axis=0, mode="constant", cval=0.0)
    return convolve1d(out, _W, axis=1, mode="constant", cval=0.0)


def _ssim_channel(x: np.ndarray, y: np.ndarray):
    mu_x = _filter2d(x)
    mu_y = _filter2d(y)
    exx = _filter2d(x * x)
    eyy = _filter2d(y * y)
    exy = _filter2d(x * y)
    sxx = exx - mu_x * mu_x
    syy = eyy - mu_y * mu_y
    sxy = exy - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + C1
    a2 = 2.0 * sxy + C2
    b1 = mu_x * mu_x + mu_y * mu_y + C1
    b2 = sxx + syy + C2
    s = (a1 * a2) / (b1 * b2)
    return s, (mu_x, mu_y, a1, a2, b1, b2, s)


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Mean SSIM over pixels (and channels for (H,W,3) input)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 2:
        return float(_ssim_channel(x, y)[0].mean())
    vals = [_ssim_channel(x[..., c], y[..., c])[0].mean() for c in range(x.shape[-1])]
    return float(np.mean(vals))


def ssim_with_grad(x: np.ndarray, y: np.ndarray):
    """Mean SSIM and its gradient w.r.t. x (same shape as x)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    single = x.ndim == 2
    xs = x[..., None] if single else x
    ys = y[..., None] if single else y
    n_chan = xs.shape[-1]
    n_out = xs.shape[0] * xs.shape[1] * n_chan

    total = 0.0
    grad = np.zeros_like(xs)
    for c in range(n_chan):
        xc, yc = xs[..., c], ys[..., c]
        s, (mu_x, mu_y, a1, a2, b1, b2, s_map) = _ssim_channel(xc, yc)
        total += s.sum()
        u = np.full_like(s, 1.0 / n_out)
        d_mu = u * (2.0 * mu_y * (a2 - a1) / (b1 * b2)
                    - 2.0 * mu_x * s_map / b1 + 2.0 * mu_x * s_map / b2)
        d_exx = u * (-s_map / b2)
        d_exy = u * (2.0 * a1 / (b1 * b2))
        grad[..., c] = (
            _filter2d(d_mu) + 2.0 * xc * _filter2d(d_exx) + yc * _filter2d(d_exy)
        )
    value = total / n_out
    return value, (grad[..., 0] if single else grad)
