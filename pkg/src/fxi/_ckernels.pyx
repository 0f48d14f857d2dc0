# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled trilinear slice/merge kernels.

Mirrors ``fxi._pykernels`` operation for operation, including the order of
floating-point accumulation, so both backends agree to rounding.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef inline bint _locate(double p, Py_ssize_t n, Py_ssize_t *i0, double *f) noexcept nogil:
    cdef Py_ssize_t i
    if p < 0.0 or p > n - 1:
        return False
    i = <Py_ssize_t>floor(p)
    if i >= n - 1:
        i = n - 2
    i0[0] = i
    f[0] = p - i
    return True


def slice_volume(double[:, :, ::1] volume, double[:, :, ::1] rotmats,
                 double[:, ::1] qvox, double[::1] center):
    """Trilinear samples of ``volume`` at ``R_j q_i + center`` for all (j, i)."""
    cdef Py_ssize_t nj = rotmats.shape[0], ni = qvox.shape[0]
    cdef Py_ssize_t n0 = volume.shape[0], n1 = volume.shape[1], n2 = volume.shape[2]
    out_arr = np.zeros((nj, ni), dtype=np.float64)
    valid_arr = np.zeros((nj, ni), dtype=np.uint8)
    cdef double[:, ::1] out = out_arr
    cdef cnp.uint8_t[:, ::1] valid = valid_arr
    cdef Py_ssize_t j, i, x0, y0, z0
    cdef double px, py, pz, fx, fy, fz, gx, gy, gz, acc
    with nogil:
        for j in range(nj):
            for i in range(ni):
                px = (rotmats[j, 0, 0] * qvox[i, 0] + rotmats[j, 0, 1] * qvox[i, 1]
                      + rotmats[j, 0, 2] * qvox[i, 2]) + center[0]
                py = (rotmats[j, 1, 0] * qvox[i, 0] + rotmats[j, 1, 1] * qvox[i, 1]
                      + rotmats[j, 1, 2] * qvox[i, 2]) + center[1]
                pz = (rotmats[j, 2, 0] * qvox[i, 0] + rotmats[j, 2, 1] * qvox[i, 1]
                      + rotmats[j, 2, 2] * qvox[i, 2]) + center[2]
                if not (_locate(px, n0, &x0, &fx) and _locate(py, n1, &y0, &fy)
                        and _locate(pz, n2, &z0, &fz)):
                    continue
                gx = 1.0 - fx
                gy = 1.0 - fy
                gz = 1.0 - fz
                acc = gx * gy * gz * volume[x0, y0, z0]
                acc = acc + gx * gy * fz * volume[x0, y0, z0 + 1]
                acc = acc + gx * fy * gz * volume[x0, y0 + 1, z0]
                acc = acc + gx * fy * fz * volume[x0, y0 + 1, z0 + 1]
                acc = acc + fx * gy * gz * volume[x0 + 1, y0, z0]
                acc = acc + fx * gy * fz * volume[x0 + 1, y0, z0 + 1]
                acc = acc + fx * fy * gz * volume[x0 + 1, y0 + 1, z0]
                acc = acc + fx * fy * fz * volume[x0 + 1, y0 + 1, z0 + 1]
                out[j, i] = acc
                valid[j, i] = 1
    return out_arr, valid_arr.view(bool)


def merge_slices(double[:, :, ::1] vol_sum, double[:, :, ::1] vol_wt,
                 double[:, :, ::1] rotmats, double[:, ::1] qvox, double[::1] center,
                 double[:, ::1] values, double[::1] row_weights,
                 cnp.uint8_t[::1] pixel_mask):
    """Trilinear deposit of ``values[j, i]`` (weight ``row_weights[j]``) in place."""
    cdef Py_ssize_t nj = rotmats.shape[0], ni = qvox.shape[0]
    cdef Py_ssize_t n0 = vol_sum.shape[0], n1 = vol_sum.shape[1], n2 = vol_sum.shape[2]
    cdef Py_ssize_t j, i, x0, y0, z0
    cdef double px, py, pz, fx, fy, fz, gx, gy, gz, v, w, c
    with nogil:
        for j in range(nj):
            w = row_weights[j]
            if w == 0.0:
                continue
            for i in range(ni):
                if not pixel_mask[i]:
                    continue
                px = (rotmats[j, 0, 0] * qvox[i, 0] + rotmats[j, 0, 1] * qvox[i, 1]
                      + rotmats[j, 0, 2] * qvox[i, 2]) + center[0]
                py = (rotmats[j, 1, 0] * qvox[i, 0] + rotmats[j, 1, 1] * qvox[i, 1]
                      + rotmats[j, 1, 2] * qvox[i, 2]) + center[1]
                pz = (rotmats[j, 2, 0] * qvox[i, 0] + rotmats[j, 2, 1] * qvox[i, 1]
                      + rotmats[j, 2, 2] * qvox[i, 2]) + center[2]
                if not (_locate(px, n0, &x0, &fx) and _locate(py, n1, &y0, &fy)
                        and _locate(pz, n2, &z0, &fz)):
                    continue
                v = values[j, i]
                gx = 1.0 - fx
                gy = 1.0 - fy
                gz = 1.0 - fz
                c = gx * gy * gz
                vol_sum[x0, y0, z0] += c * v
                vol_wt[x0, y0, z0] += c * w
                c = gx * gy * fz
                vol_sum[x0, y0, z0 + 1] += c * v
                vol_wt[x0, y0, z0 + 1] += c * w
                c = gx * fy * gz
                vol_sum[x0, y0 + 1, z0] += c * v
                vol_wt[x0, y0 + 1, z0] += c * w
                c = gx * fy * fz
                vol_sum[x0, y0 + 1, z0 + 1] += c * v
                vol_wt[x0, y0 + 1, z0 + 1] += c * w
                c = fx * gy * gz
                vol_sum[x0 + 1, y0, z0] += c * v
                vol_wt[x0 + 1, y0, z0] += c * w
                c = fx * gy * fz
                vol_sum[x0 + 1, y0, z0 + 1] += c * v
                vol_wt[x0 + 1, y0, z0 + 1] += c * w
                c = fx * fy * gz
                vol_sum[x0 + 1, y0 + 1, z0] += c * v
                vol_wt[x0 + 1, y0 + 1, z0] += c * w
                c = fx * fy * fz
                vol_sum[x0 + 1, y0 + 1, z0 + 1] += c * v
                vol_wt[x0 + 1, y0 + 1, z0 + 1] += c * w


def interp_points(double[:, :, ::1] volume, double[:, ::1] points):
    """Trilinear samples at absolute voxel coordinates; returns (values, valid)."""
    cdef Py_ssize_t npts = points.shape[0]
    cdef Py_ssize_t n0 = volume.shape[0], n1 = volume.shape[1], n2 = volume.shape[2]
    out_arr = np.zeros(npts, dtype=np.float64)
    valid_arr = np.zeros(npts, dtype=np.uint8)
    cdef double[::1] out = out_arr
    cdef cnp.uint8_t[::1] valid = valid_arr
    cdef Py_ssize_t p, x0, y0, z0
    cdef double fx, fy, fz, gx, gy, gz, acc
    with nogil:
        for p in range(npts):
            if not (_locate(points[p, 0], n0, &x0, &fx) and _locate(points[p, 1], n1, &y0, &fy)
                    and _locate(points[p, 2], n2, &z0, &fz)):
                continue
            gx = 1.0 - fx
            gy = 1.0 - fy
            gz = 1.0 - fz
            acc = gx * gy * gz * volume[x0, y0, z0]
            acc = acc + gx * gy * fz * volume[x0, y0, z0 + 1]
            acc = acc + gx * fy * gz * volume[x0, y0 + 1, z0]
            acc = acc + gx * fy * fz * volume[x0, y0 + 1, z0 + 1]
            acc = acc + fx * gy * gz * volume[x0 + 1, y0, z0]
            acc = acc + fx * gy * fz * volume[x0 + 1, y0, z0 + 1]
            acc = acc + fx * fy * gz * volume[x0 + 1, y0 + 1, z0]
            acc = acc + fx * fy * fz * volume[x0 + 1, y0 + 1, z0 + 1]
            out[p] = acc
            valid[p] = 1
    return out_arr, valid_arr.view(bool)
