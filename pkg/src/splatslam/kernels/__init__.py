"""Rasterization kernel backend selection.

The compiled Cython kernel is preferred; the pure-numpy implementation is
the fallback. Set SPLATSLAM_KERNEL=python (or =compiled) to force one.
"""

from __future__ import annotations

import os

import numpy as np

from . import blend_py

_requested = os.environ.get("SPLATSLAM_KERNEL", "auto").strip().lower()

if _requested in ("auto", "", "compiled", "c"):
    try:
        from . import _blend as _impl

        BACKEND = "compiled"
    except ImportError:
        if _requested in ("compiled", "c"):
            raise
        _impl = blend_py
        BACKEND = "python"
elif _requested in ("python", "py"):
    _impl = blend_py
    BACKEND = "python"
else:
    raise ValueError(f"unknown SPLATSLAM_KERNEL backend {_requested!r}")

forward_blend = _impl.forward_blend
backward_blend = _impl.backward_blend

ALPHA_MIN = blend_py.ALPHA_MIN
ALPHA_MAX = blend_py.ALPHA_MAX
T_MIN = blend_py.T_MIN


def build_pixel_records(rec_pix, rec_idx, rec_alpha, rec_T, n_pixels):
    """Regroup splat-major contribution records into per-pixel CSR layout.

    The stable sort keeps splat (front-to-back) order within each pixel.
    Returns (offsets (n_pixels+1,), rec_idx, rec_alpha, rec_T).
    """
    order = np.argsort(rec_pix, kind="stable")
    pix_sorted = rec_pix[order]
    counts = np.bincount(pix_sorted, minlength=n_pixels)
    offsets = np.zeros(n_pixels + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return offsets, rec_idx[order], rec_alpha[order], rec_T[order]
