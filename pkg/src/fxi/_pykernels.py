"""Pure-numpy fallback for the trilinear slice/merge kernels.

Same signatures and conventions as the compiled ``fxi._ckernels``. Slicing
and point interpolation evaluate the eight-corner sum in the same order as
the compiled loop; merging accumulates per chunk with ``np.bincount``, so
voxel sums may differ from the compiled backend at the 1e-12 relative level.
"""

import numpy as np

_CHUNK_POINTS = 1 << 20


def _locate(p, n):
    ok = (p >= 0.0) & (p <= n - 1)
    i0 = np.floor(np.where(ok, p, 0.0)).astype(np.intp)
    i0 = np.minimum(i0, n - 2)
    return i0, p - i0, ok


def _rotate(rotmats, qvox, center):
    # (J, I) per component, summed left to right like the compiled loop
    q0, q1, q2 = qvox[:, 0], qvox[:, 1], qvox[:, 2]
    out = []
    for a in range(3):
        r = rotmats[:, a, :]
        p = (r[:, 0, None] * q0 + r[:, 1, None] * q1 + r[:, 2, None] * q2) + center[a]
        out.append(p)
    return out


def _corner_terms(fx, fy, fz):
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    return (
        (gx * gy * gz, 0, 0, 0),
        (gx * gy * fz, 0, 0, 1),
        (gx * fy * gz, 0, 1, 0),
        (gx * fy * fz, 0, 1, 1),
        (fx * gy * gz, 1, 0, 0),
        (fx * gy * fz, 1, 0, 1),
        (fx * fy * gz, 1, 1, 0),
        (fx * fy * fz, 1, 1, 1),
    )


def _sample(volume, px, py, pz):
    n0, n1, n2 = volume.shape
    x0, fx, okx = _locate(px, n0)
    y0, fy, oky = _locate(py, n1)
    z0, fz, okz = _locate(pz, n2)
    ok = okx & oky & okz
    acc = None
    for c, dx, dy, dz in _corner_terms(fx, fy, fz):
        term = c * volume[x0 + dx, y0 + dy, z0 + dz]
        acc = term if acc is None else acc + term
    return np.where(ok, acc, 0.0), ok


def slice_volume(volume, rotmats, qvox, center):
    nj, ni = rotmats.shape[0], qvox.shape[0]
    out = np.zeros((nj, ni))
    valid = np.zeros((nj, ni), dtype=bool)
    step = max(1, _CHUNK_POINTS // max(ni, 1))
    for s in range(0, nj, step):
        px, py, pz = _rotate(rotmats[s:s + step], qvox, center)
        out[s:s + step], valid[s:s + step] = _sample(volume, px, py, pz)
    return out, valid


def merge_slices(vol_sum, vol_wt, rotmats, qvox, center, values, row_weights, pixel_mask):
    shape = vol_sum.shape
    n0, n1, n2 = shape
    size = vol_sum.size
    active = np.flatnonzero(row_weights != 0.0)
    pix = np.flatnonzero(pixel_mask)
    if active.size == 0 or pix.size == 0:
        return
    q = qvox[pix]
    step = max(1, _CHUNK_POINTS // pix.size)
    flat_sum = vol_sum.reshape(-1)
    flat_wt = vol_wt.reshape(-1)
    for s in range(0, active.size, step):
        rows = active[s:s + step]
        px, py, pz = _rotate(rotmats[rows], q, center)
        x0, fx, okx = _locate(px, n0)
        y0, fy, oky = _locate(py, n1)
        z0, fz, okz = _locate(pz, n2)
        ok = okx & oky & okz
        v = values[rows][:, pix]
        w = np.broadcast_to(row_weights[rows][:, None], v.shape)
        v, w = v[ok], w[ok]
        x0, y0, z0 = x0[ok], y0[ok], z0[ok]
        for c, dx, dy, dz in _corner_terms(fx[ok], fy[ok], fz[ok]):
            idx = ((x0 + dx) * n1 + (y0 + dy)) * n2 + (z0 + dz)
            flat_sum += np.bincount(idx, weights=c * v, minlength=size)
            flat_wt += np.bincount(idx, weights=c * w, minlength=size)


def interp_points(volume, points):
    return _sample(volume, points[:, 0], points[:, 1], points[:, 2])
