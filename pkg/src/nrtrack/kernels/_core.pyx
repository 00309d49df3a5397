# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: normal-equation accumulation and dense warping.

Same contracts as numpy_backend; inputs must be C-contiguous float64/int32.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def accumulate_normal(
    double[:, :, :, ::1] blocks,
    int[:, ::1] anchors,
    double[:, ::1] resid,
    double[:, ::1] a_out,
    double[::1] b_out,
):
    cdef Py_ssize_t k = blocks.shape[0]
    cdef Py_ssize_t r = blocks.shape[1]
    cdef Py_ssize_t m = blocks.shape[2]
    cdef Py_ssize_t ik, m1, m2, rr, ci, cj
    cdef int a1, a2
    cdef double acc
    with nogil:
        for ik in range(k):
            for m1 in range(m):
                a1 = anchors[ik, m1]
                if a1 < 0:
                    continue
                for ci in range(6):
                    acc = 0.0
                    for rr in range(r):
                        acc += blocks[ik, rr, m1, ci] * resid[ik, rr]
                    b_out[6 * a1 + ci] -= acc
                for m2 in range(m):
                    a2 = anchors[ik, m2]
                    if a2 < 0:
                        continue
                    for ci in range(6):
                        for cj in range(6):
                            acc = 0.0
                            for rr in range(r):
                                acc += blocks[ik, rr, m1, ci] * blocks[ik, rr, m2, cj]
                            a_out[6 * a1 + ci, 6 * a2 + cj] += acc


def warp_points(
    double[:, ::1] points,
    int[:, ::1] anchors,
    double[:, ::1] weights,
    double[:, ::1] nodes,
    double[:, :, ::1] rot,
    double[:, ::1] trans,
):
    cdef Py_ssize_t p = points.shape[0]
    cdef Py_ssize_t m = anchors.shape[1]
    out_arr = np.zeros((p, 3), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t ip, im, i, j
    cdef int a
    cdef double w
    cdef double d0, d1, d2, r0, r1, r2
    with nogil:
        for ip in range(p):
            for im in range(m):
                a = anchors[ip, im]
                if a < 0:
                    continue
                w = weights[ip, im]
                d0 = points[ip, 0] - nodes[a, 0]
                d1 = points[ip, 1] - nodes[a, 1]
                d2 = points[ip, 2] - nodes[a, 2]
                r0 = rot[a, 0, 0] * d0 + rot[a, 0, 1] * d1 + rot[a, 0, 2] * d2
                r1 = rot[a, 1, 0] * d0 + rot[a, 1, 1] * d1 + rot[a, 1, 2] * d2
                r2 = rot[a, 2, 0] * d0 + rot[a, 2, 1] * d1 + rot[a, 2, 2] * d2
                out[ip, 0] += w * (r0 + nodes[a, 0] + trans[a, 0])
                out[ip, 1] += w * (r1 + nodes[a, 1] + trans[a, 1])
                out[ip, 2] += w * (r2 + nodes[a, 2] + trans[a, 2])
    return out_arr
