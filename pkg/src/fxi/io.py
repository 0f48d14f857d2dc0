"""Binary containers, image export and CSV helpers.

FXD (pattern sets), all little-endian::

    b"FXD1"
    u32 version, u32 n_patterns, u32 n_side, u32 dtype   (dtype 1 = u32 counts)
    per pattern:
        u32[n_side * n_side] counts (row-major)
        f64[4] rotation quaternion (w, x, y, z), all NaN when unknown
        f64    fluence, NaN when unknown
        u8     dataset tag

FXV (volumes), all little-endian::

    b"FXV1"
    u32 version, u32 n_side, u32 dtype, u32 has_weights, u32 kind
        dtype 1 = f32; kind 0 = Fourier intensity, 1 = real-space density
    f64 spacing   (q step in nm^-1 for kind 0, voxel size in nm for kind 1)
    f32[n^3] values, then f32[n^3] weights when has_weights

Volumes are stored in single precision, so ``read(write(x))`` reproduces ``x``
exactly when its values are representable as f32 and ``write`` is
byte-stable under any number of round trips.
"""

import csv
import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .simulate import PatternSet
from .volumes import DensityVolume, IntensityVolume

FXD_MAGIC = b"FXD1"
FXV_MAGIC = b"FXV1"
VERSION = 1
DTYPE_U32 = 1
DTYPE_F32 = 1
KIND_INTENSITY = 0
KIND_DENSITY = 1

_FXD_HEADER = struct.Struct("<4sIIII")
_FXV_HEADER = struct.Struct("<4sIIIIId")
_META = np.dtype([("rotation", "<f8", (4,)), ("fluence", "<f8"), ("tag", "u1")])


class FormatError(ValueError):
    pass


def _record_dtype(n_side):
    return np.dtype([("counts", "<u4", (n_side, n_side)), ("rotation", "<f8", (4,)),
                     ("fluence", "<f8"), ("tag", "u1")])


def write_fxd(path, patterns):
    """Write a ``PatternSet`` as an FXD container."""
    n = patterns.n_side
    rec = np.empty(len(patterns), dtype=_record_dtype(n))
    rec["counts"] = patterns.counts
    rec["rotation"] = patterns.rotations
    rec["fluence"] = patterns.fluences
    rec["tag"] = patterns.tags
    with open(path, "wb") as fh:
        fh.write(_FXD_HEADER.pack(FXD_MAGIC, VERSION, len(patterns), n, DTYPE_U32))
        fh.write(rec.tobytes())


def read_fxd_header(path):
    with open(path, "rb") as fh:
        raw = fh.read(_FXD_HEADER.size)
    if len(raw) < _FXD_HEADER.size:
        raise FormatError(f"{path}: truncated FXD header")
    magic, version, m, n, dtype = _FXD_HEADER.unpack(raw)
    if magic != FXD_MAGIC:
        raise FormatError(f"{path}: not an FXD file (magic {magic!r})")
    if version != VERSION or dtype != DTYPE_U32:
        raise FormatError(f"{path}: unsupported FXD version {version} / dtype {dtype}")
    return {"format": "FXD", "version": version, "n_patterns": m, "n_side": n, "dtype": "u32"}


def read_fxd(path):
    """Read an FXD container into a ``PatternSet``."""
    hdr = read_fxd_header(path)
    dt = _record_dtype(hdr["n_side"])
    with open(path, "rb") as fh:
        fh.seek(_FXD_HEADER.size)
        body = fh.read()
    if len(body) != dt.itemsize * hdr["n_patterns"]:
        raise FormatError(f"{path}: payload size does not match header")
    rec = np.frombuffer(body, dtype=dt)
    return PatternSet(rec["counts"].copy(), rec["rotation"].copy(), rec["fluence"].copy(),
                      rec["tag"].copy())


def write_fxv(path, volume):
    """Write an ``IntensityVolume`` or real ``DensityVolume`` as an FXV container."""
    if isinstance(volume, IntensityVolume):
        kind, spacing, values, weights = (KIND_INTENSITY, volume.q_step, volume.values,
                                          volume.weights)
    elif isinstance(volume, DensityVolume):
        if np.iscomplexobj(volume.voxels):
            raise FormatError("FXV stores real densities only")
        kind, spacing, values, weights = KIND_DENSITY, volume.voxel_size, volume.voxels, None
    else:
        raise FormatError(f"cannot store {type(volume).__name__} as FXV")
    n = values.shape[0]
    with open(path, "wb") as fh:
        fh.write(_FXV_HEADER.pack(FXV_MAGIC, VERSION, n, DTYPE_F32, int(weights is not None),
                                  kind, float(spacing)))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
        if weights is not None:
            fh.write(np.ascontiguousarray(weights, dtype="<f4").tobytes())


def read_fxv_header(path):
    with open(path, "rb") as fh:
        raw = fh.read(_FXV_HEADER.size)
    if len(raw) < _FXV_HEADER.size:
        raise FormatError(f"{path}: truncated FXV header")
    magic, version, n, dtype, has_w, kind, spacing = _FXV_HEADER.unpack(raw)
    if magic != FXV_MAGIC:
        raise FormatError(f"{path}: not an FXV file (magic {magic!r})")
    if version != VERSION or dtype != DTYPE_F32 or kind not in (KIND_INTENSITY, KIND_DENSITY):
        raise FormatError(f"{path}: unsupported FXV version/dtype/kind")
    return {"format": "FXV", "version": version, "n_side": n, "dtype": "f32",
            "has_weights": bool(has_w),
            "kind": "intensity" if kind == KIND_INTENSITY else "density", "spacing": spacing}


def read_fxv(path):
    """Read an FXV container; returns ``IntensityVolume`` or ``DensityVolume``."""
    hdr = read_fxv_header(path)
    n = hdr["n_side"]
    size = n ** 3 * 4
    with open(path, "rb") as fh:
        fh.seek(_FXV_HEADER.size)
        body = fh.read()
    if len(body) != size * (2 if hdr["has_weights"] else 1):
        raise FormatError(f"{path}: payload size does not match header")
    vals = np.frombuffer(body[:size], dtype="<f4").reshape(n, n, n).astype(float)
    if hdr["kind"] == "density":
        return DensityVolume(vals, hdr["spacing"])
    w = (np.frombuffer(body[size:], dtype="<f4").reshape(n, n, n).astype(float)
         if hdr["has_weights"] else None)
    return IntensityVolume(vals, hdr["spacing"], w)


def inspect_file(path):
    """Header dictionary of an FXD or FXV file."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == FXD_MAGIC:
        return read_fxd_header(path)
    if magic == FXV_MAGIC:
        return read_fxv_header(path)
    raise FormatError(f"{path}: unknown container (magic {magic!r})")


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# image export


@dataclass(frozen=True)
class ImageScaling:
    """Affine map ``pixel = round((value - vmin) * scale)`` used by a PGM export."""

    vmin: float
    vmax: float
    scale: float


def central_slice(array, axis=0, index=None):
    """2D slice of a 3D array; a 2D array is returned unchanged."""
    a = np.asarray(array)
    if a.ndim == 2:
        return a
    if a.ndim != 3:
        raise ValueError("expected a 2D or 3D array")
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    n = a.shape[axis]
    index = n // 2 if index is None else index
    if not 0 <= index < n:
        raise IndexError(f"slice index {index} out of range [0, {n})")
    return np.take(a, index, axis=axis)


def _values_of(obj):
    if isinstance(obj, IntensityVolume):
        return obj.values
    if isinstance(obj, DensityVolume):
        return np.real(obj.voxels)
    return np.asarray(getattr(obj, "counts", obj), dtype=float)


def write_pgm(path, image):
    """Write a 2D array as 16-bit binary PGM with min-max scaling; returns the scaling."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2 or not np.isfinite(img).all():
        raise ValueError("image must be a finite 2D array")
    lo, hi = float(img.min()), float(img.max())
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    pix = np.rint((img - lo) * scale).astype(">u2")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(pix.tobytes())
    return ImageScaling(lo, hi, scale)


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    dt = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(parts[4], dtype=dt).reshape(h, w).astype(np.int64)


def export_image(obj, path_stem, axis=0, index=None):
    """PGM of a central slice, scaling sidecar and CSV of the slice's central row.

    Writes ``<stem>.pgm``, ``<stem>.pgm.txt`` (``vmin vmax scale``) and
    ``<stem>_profile.csv`` (``index, value``). Returns the three paths.
    """
    sl = central_slice(_values_of(obj), axis, index)
    stem = str(path_stem)
    scaling = write_pgm(stem + ".pgm", sl)
    with open(stem + ".pgm.txt", "w") as fh:
        fh.write(f"vmin {scaling.vmin!r}\nvmax {scaling.vmax!r}\nscale {scaling.scale!r}\n")
    prof = sl[sl.shape[0] // 2]
    write_csv(stem + "_profile.csv", ("index", "value"),
              [(i, repr(float(v))) for i, v in enumerate(prof)])
    return stem + ".pgm", stem + ".pgm.txt", stem + "_profile.csv"


def read_scaling(path):
    vals = {}
    with open(path) as fh:
        for line in fh:
            k, v = line.split()
            vals[k] = float(v)
    return ImageScaling(vals["vmin"], vals["vmax"], vals["scale"])


def read_profile_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["value"]) for r in rows])


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
