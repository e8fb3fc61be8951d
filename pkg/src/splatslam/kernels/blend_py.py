"""Pure-numpy alpha-blending kernels (fallback backend).

Semantics are shared with the compiled backend in ``_blend.pyx``:
splats arrive sorted front-to-back, per-pixel transmittance is the running
product of (1 - alpha), contributions below ALPHA_MIN are dropped, alpha is
clamped at ALPHA_MAX, and blending at a pixel stops once transmittance
falls below T_MIN. The forward pass logs one record (pixel, splat, alpha,
transmittance) per surviving contribution, in splat-major order.
"""

from __future__ import annotations

import numpy as np

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.9999
T_MIN = 1e-4


def forward_blend(p0, qmat, depths, opac, colors, bboxes, H, W, gt_depth=None):
    """Front-to-back alpha blending of pre-sorted 2D splats.

    p0: (N,2) pixel means; qmat: (N,3) inverse-covariance entries
    (qa, qb, qc) of [[qa, qb], [qb, qc]]; bboxes: (N,4) int inclusive
    [x0, x1, y0, y1], already clipped to the image.

    Returns (color (H,W,3), depth (H,W), alpha (H,W), unc (H,W),
    rec_pix, rec_idx, rec_alpha, rec_T).
    """
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    alpha_img = np.zeros((H, W))
    unc = np.zeros((H, W))
    T_img = np.ones((H, W))

    pix_chunks, idx_chunks, a_chunks, t_chunks = [], [], [], []
    n = p0.shape[0]
    for i in range(n):
        x0, x1, y0, y1 = bboxes[i]
        dx = np.arange(x0, x1 + 1)[None, :] - p0[i, 0]
        dy = np.arange(y0, y1 + 1)[:, None] - p0[i, 1]
        q = qmat[i, 0] * dx * dx + 2.0 * qmat[i, 1] * dx * dy + qmat[i, 2] * dy * dy
        a = opac[i] * np.exp(-0.5 * q)
        np.minimum(a, ALPHA_MAX, out=a)
        T_sl = T_img[y0 : y1 + 1, x0 : x1 + 1]
        m = (a >= ALPHA_MIN) & (T_sl >= T_MIN)
        if not m.any():
            continue
        w = np.where(m, a, 0.0) * T_sl
        color[y0 : y1 + 1, x0 : x1 + 1] += w[:, :, None] * colors[i]
        depth[y0 : y1 + 1, x0 : x1 + 1] += w * depths[i]
        alpha_img[y0 : y1 + 1, x0 : x1 + 1] += w
        if gt_depth is not None:
            g_sl = gt_depth[y0 : y1 + 1, x0 : x1 + 1]
            unc[y0 : y1 + 1, x0 : x1 + 1] += np.where(
                g_sl > 0.0, w * (depths[i] - g_sl) ** 2, 0.0
            )
        yy, xx = np.nonzero(m)
        pix_chunks.append(((yy + y0) * W + (xx + x0)).astype(np.int64))
        idx_chunks.append(np.full(yy.size, i, dtype=np.int32))
        a_chunks.append(a[yy, xx])
        t_chunks.append(T_sl[yy, xx])
        T_img[y0 : y1 + 1, x0 : x1 + 1] = np.where(m, T_sl * (1.0 - a), T_sl)

    if pix_chunks:
        rec_pix = np.concatenate(pix_chunks)
        rec_idx = np.concatenate(idx_chunks)
        rec_alpha = np.concatenate(a_chunks)
        rec_T = np.concatenate(t_chunks)
    else:
        rec_pix = np.zeros(0, dtype=np.int64)
        rec_idx = np.zeros(0, dtype=np.int32)
        rec_alpha = np.zeros(0)
        rec_T = np.zeros(0)
    return color, depth, alpha_img, unc, rec_pix, rec_idx, rec_alpha, rec_T


def _segment_suffix_excl(v: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Per record, the sum of v over later records of the same segment."""
    counts = np.diff(offsets)
    cum = np.cumsum(v, axis=0)
    seg_tot = np.zeros((counts.size,) + v.shape[1:])
    nz = counts > 0
    seg_tot[nz] = cum[offsets[1:][nz] - 1]
    seg_before = np.zeros_like(seg_tot)
    hb = offsets[:-1] > 0
    seg_before[hb] = cum[offsets[:-1][hb] - 1]
    seg_tot -= seg_before
    incl = cum - np.repeat(seg_before, counts, axis=0)
    return np.repeat(seg_tot, counts, axis=0) - incl


def backward_blend(offsets, rec_idx, rec_alpha, rec_T, p0, qmat, depths, opac,
                   colors, dL_dC, dL_dD, H, W):
    """Gradients of the blended color/depth images w.r.t. 2D splat params.

    Records must be in per-pixel CSR layout (offsets over H*W pixels,
    front-to-back within each pixel). Returns per-splat gradients
    (g_p0 (N,2), g_q (N,3), g_opac (N,), g_color (N,3), g_depth (N,)).
    """
    n = p0.shape[0]
    g_p0 = np.zeros((n, 2))
    g_q = np.zeros((n, 3))
    g_o = np.zeros(n)
    g_c = np.zeros((n, 3))
    g_d = np.zeros(n)
    m = rec_idx.size
    if m == 0:
        return g_p0, g_q, g_o, g_c, g_d

    counts = np.diff(offsets)
    pix = np.repeat(np.arange(H * W, dtype=np.int64), counts)
    gC = dL_dC.reshape(-1, 3)[pix]
    gD = dL_dD.reshape(-1)[pix]
    ci = colors[rec_idx]
    di = depths[rec_idx]
    w = rec_alpha * rec_T

    vC = ci * w[:, None]
    vD = di * w
    sC = _segment_suffix_excl(vC, offsets)
    sD = _segment_suffix_excl(vD, offsets)

    galpha = (np.einsum("ij,ij->i", gC, ci) + gD * di) * rec_T
    galpha -= (np.einsum("ij,ij->i", gC, sC) + gD * sD) / (1.0 - rec_alpha)

    unclamped = rec_alpha < ALPHA_MAX
    go_per = np.where(unclamped, galpha * rec_alpha / opac[rec_idx], 0.0)
    gq_per = np.where(unclamped, -0.5 * rec_alpha * galpha, 0.0)

    dx = (pix % W) - p0[rec_idx, 0]
    dy = (pix // W) - p0[rec_idx, 1]
    qa, qb, qc = qmat[rec_idx, 0], qmat[rec_idx, 1], qmat[rec_idx, 2]

    for k in range(3):
        g_c[:, k] = np.bincount(rec_idx, weights=gC[:, k] * w, minlength=n)
    g_d[:] = np.bincount(rec_idx, weights=gD * w, minlength=n)
    g_o[:] = np.bincount(rec_idx, weights=go_per, minlength=n)
    g_q[:, 0] = np.bincount(rec_idx, weights=gq_per * dx * dx, minlength=n)
    g_q[:, 1] = np.bincount(rec_idx, weights=gq_per * 2.0 * dx * dy, minlength=n)
    g_q[:, 2] = np.bincount(rec_idx, weights=gq_per * dy * dy, minlength=n)
    # delta = u - p0, so d/dp0 = -d/ddelta
    g_p0[:, 0] = np.bincount(
        rec_idx, weights=-gq_per * 2.0 * (qa * dx + qb * dy), minlength=n
    )
    g_p0[:, 1] = np.bincount(
        rec_idx, weights=-gq_per * 2.0 * (qb * dx + qc * dy), minlength=n
    )
    return g_p0, g_q, g_o, g_c, g_d
