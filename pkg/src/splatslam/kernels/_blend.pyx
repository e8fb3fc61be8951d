# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled alpha-blending kernels (hot path).

Must stay semantically aligned with blend_py.py; the thresholds below are
duplicated there and checked for equality by the test suite.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.9999
T_MIN = 1e-4

cdef double C_ALPHA_MIN = 1.0 / 255.0
cdef double C_ALPHA_MAX = 0.9999
cdef double C_T_MIN = 1e-4


def forward_blend(double[:, ::1] p0, double[:, ::1] qmat, double[::1] depths,
                  double[::1] opac, double[:, ::1] colors, long[:, ::1] bboxes,
                  int H, int W, gt_depth=None):
    """See blend_py.forward_blend; identical contract."""
    cdef int n = p0.shape[0]
    color_arr = np.zeros((H, W, 3))
    depth_arr = np.zeros((H, W))
    alpha_arr = np.zeros((H, W))
    unc_arr = np.zeros((H, W))
    T_arr = np.ones((H, W))

    cdef double[:, :, ::1] cimg = color_arr
    cdef double[:, ::1] dimg = depth_arr
    cdef double[:, ::1] aimg = alpha_arr
    cdef double[:, ::1] uimg = unc_arr
    cdef double[:, ::1] Timg = T_arr
    cdef double[:, ::1] gt
    cdef bint has_gt = gt_depth is not None
    if has_gt:
        gt = np.ascontiguousarray(gt_depth)

    cdef Py_ssize_t cap = 4096 if n > 0 else 1
    pix_buf = np.empty(cap, dtype=np.int64)
    idx_buf = np.empty(cap, dtype=np.int32)
    a_buf = np.empty(cap)
    t_buf = np.empty(cap)
    cdef long[::1] pix_v = pix_buf
    cdef int[::1] idx_v = idx_buf
    cdef double[::1] a_v = a_buf
    cdef double[::1] t_v = t_buf
    cdef Py_ssize_t count = 0

    cdef int i, x, y, x0, x1, y0, y1
    cdef double px, py, qa, qb, qc, o, d, cr, cg, cb
    cdef double dx, dy, q, a, T, w, gval

    for i in range(n):
        x0 = <int> bboxes[i, 0]
        x1 = <int> bboxes[i, 1]
        y0 = <int> bboxes[i, 2]
        y1 = <int> bboxes[i, 3]
        px = p0[i, 0]
        py = p0[i, 1]
        qa = qmat[i, 0]
        qb = qmat[i, 1]
        qc = qmat[i, 2]
        o = opac[i]
        d = depths[i]
        cr = colors[i, 0]
        cg = colors[i, 1]
        cb = colors[i, 2]
        for y in range(y0, y1 + 1):
            dy = y - py
            for x in range(x0, x1 + 1):
                T = Timg[y, x]
                if T < C_T_MIN:
                    continue
                dx = x - px
                q = qa * dx * dx + 2.0 * qb * dx * dy + qc * dy * dy
                a = o * exp(-0.5 * q)
                if a < C_ALPHA_MIN:
                    continue
                if a > C_ALPHA_MAX:
                    a = C_ALPHA_MAX
                w = a * T
                cimg[y, x, 0] += w * cr
                cimg[y, x, 1] += w * cg
                cimg[y, x, 2] += w * cb
                dimg[y, x] += w * d
                aimg[y, x] += w
                if has_gt:
                    gval = gt[y, x]
                    if gval > 0.0:
                        uimg[y, x] += w * (d - gval) * (d - gval)
                if count == cap:
                    cap = cap * 2
                    pix_buf = np.concatenate([pix_buf, np.empty(cap - count, dtype=np.int64)])
                    idx_buf = np.concatenate([idx_buf, np.empty(cap - count, dtype=np.int32)])
                    a_buf = np.concatenate([a_buf, np.empty(cap - count)])
                    t_buf = np.concatenate([t_buf, np.empty(cap - count)])
                    pix_v = pix_buf
                    idx_v = idx_buf
                    a_v = a_buf
                    t_v = t_buf
                pix_v[count] = y * W + x
                idx_v[count] = i
                a_v[count] = a
                t_v[count] = T
                count += 1
                Timg[y, x] = T * (1.0 - a)

    return (color_arr, depth_arr, alpha_arr, unc_arr,
            pix_buf[:count].copy(), idx_buf[:count].copy(),
            a_buf[:count].copy(), t_buf[:count].copy())


def backward_blend(long[::1] offsets, int[::1] rec_idx, double[::1] rec_alpha,
                   double[::1] rec_T, double[:, ::1] p0, double[:, ::1] qmat,
                   double[::1] depths, double[::1] opac, double[:, ::1] colors,
                   double[:, :, ::1] dL_dC, double[:, ::1] dL_dD, int H, int W):
    """See blend_py.backward_blend; identical contract."""
    cdef int n = p0.shape[0]
    g_p0_arr = np.zeros((n, 2))
    g_q_arr = np.zeros((n, 3))
    g_o_arr = np.zeros(n)
    g_c_arr = np.zeros((n, 3))
    g_d_arr = np.zeros(n)
    cdef double[:, ::1] g_p0 = g_p0_arr
    cdef double[:, ::1] g_q = g_q_arr
    cdef double[::1] g_o = g_o_arr
    cdef double[:, ::1] g_c = g_c_arr
    cdef double[::1] g_d = g_d_arr

    cdef Py_ssize_t pixc, j
    cdef int i, x, y
    cdef double gC0, gC1, gC2, gD, a, T, w, di, galpha
    cdef double sC0, sC1, sC2, sD
    cdef double dx, dy, gq, qa, qb, qc

    for pixc in range(H * W):
        if offsets[pixc] == offsets[pixc + 1]:
            continue
        y = <int> (pixc // W)
        x = <int> (pixc % W)
        gC0 = dL_dC[y, x, 0]
        gC1 = dL_dC[y, x, 1]
        gC2 = dL_dC[y, x, 2]
        gD = dL_dD[y, x]
        sC0 = 0.0
        sC1 = 0.0
        sC2 = 0.0
        sD = 0.0
        for j in range(offsets[pixc + 1] - 1, offsets[pixc] - 1, -1):
            i = rec_idx[j]
            a = rec_alpha[j]
            T = rec_T[j]
            w = a * T
            di = depths[i]
            g_c[i, 0] += gC0 * w
            g_c[i, 1] += gC1 * w
            g_c[i, 2] += gC2 * w
            g_d[i] += gD * w
            galpha = (gC0 * colors[i, 0] + gC1 * colors[i, 1]
                      + gC2 * colors[i, 2] + gD * di) * T
            galpha -= (gC0 * sC0 + gC1 * sC1 + gC2 * sC2 + gD * sD) / (1.0 - a)
            if a < C_ALPHA_MAX:
                g_o[i] += galpha * a / opac[i]
                gq = -0.5 * a * galpha
                dx = x - p0[i, 0]
                dy = y - p0[i, 1]
                qa = qmat[i, 0]
                qb = qmat[i, 1]
                qc = qmat[i, 2]
                g_q[i, 0] += gq * dx * dx
                g_q[i, 1] += gq * 2.0 * dx * dy
                g_q[i, 2] += gq * dy * dy
                g_p0[i, 0] -= gq * 2.0 * (qa * dx + qb * dy)
                g_p0[i, 1] -= gq * 2.0 * (qb * dx + qc * dy)
            sC0 += colors[i, 0] * w
            sC1 += colors[i, 1] * w
            sC2 += colors[i, 2] * w
            sD += di * w

    return g_p0_arr, g_q_arr, g_o_arr, g_c_arr, g_d_arr
