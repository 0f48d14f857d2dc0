"""Backend selection for the trilinear kernels.

The compiled extension is used when it imports; setting ``FXI_PURE_PYTHON=1``
forces the numpy fallback. ``use_backend`` switches at runtime (tests and the
benchmark use it to compare both paths).
"""

import logging
import os

import numpy as np

from . import _pykernels

log = logging.getLogger(__name__)

try:
    from . import _ckernels
except ImportError:  # pragma: no cover - depends on the build
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_active = None


def available_backends():
    return sorted(_BACKENDS)


def use_backend(name):
    """Select ``"cython"`` or ``"python"``; returns the previous backend name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {available_backends()}")
    prev = backend_name()
    _active = _BACKENDS[name]
    return prev


def backend_name():
    return "cython" if _active is _ckernels and _ckernels is not None else "python"


def _default():
    if os.environ.get("FXI_PURE_PYTHON", "") not in ("", "0") or _ckernels is None:
        return _pykernels
    return _ckernels


_active = _default()
log.debug("fxi kernels backend: %s", backend_name())


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def slice_volume(volume, rotmats, qvox, center):
    """Trilinear samples of ``volume`` at ``R_j @ q_i + center``.

    Parameters
    ----------
    volume : (N0, N1, N2) array
    rotmats : (J, 3, 3) array of rotation matrices
    qvox : (I, 3) array, pixel scattering vectors in voxel units
    center : (3,) array, voxel coordinate of q = 0

    Returns
    -------
    values : (J, I) float64, zero where invalid
    valid : (J, I) bool, False where the point falls outside the grid
    """
    rotmats = _f64(rotmats).reshape(-1, 3, 3)
    return _active.slice_volume(_f64(volume), rotmats, _f64(qvox), _f64(center))


def merge_slices(vol_sum, vol_wt, rotmats, qvox, center, values, row_weights, pixel_mask):
    """Accumulate ``values`` trilinearly into ``vol_sum`` and ``row_weights`` into ``vol_wt``.

    Both accumulators must be C-contiguous float64 and are modified in place.
    """
    for acc in (vol_sum, vol_wt):
        if acc.dtype != np.float64 or not acc.flags.c_contiguous:
            raise ValueError("accumulators must be C-contiguous float64")
    rotmats = _f64(rotmats).reshape(-1, 3, 3)
    mask = np.ascontiguousarray(pixel_mask, dtype=np.uint8).reshape(-1)
    _active.merge_slices(vol_sum, vol_wt, rotmats, _f64(qvox), _f64(center),
                         _f64(values).reshape(rotmats.shape[0], -1), _f64(row_weights), mask)


def interp_points(volume, points):
    """Trilinear samples at absolute voxel coordinates ``points`` (P, 3)."""
    return _active.interp_points(_f64(volume), _f64(points).reshape(-1, 3))
