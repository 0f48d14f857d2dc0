"""Detector geometry, Ewald-sphere mapping, SO(3) sampling and pixel masks.

Conventions
-----------
* Lengths are nm and scattering vectors nm^-1 internally. ``DetectorGeometry``
  takes keV / mm / um and converts once.
* ``|q| = 2 sin(theta) / lambda``, so the full-period resolution of a pixel is
  ``1 / |q|``.
* Pixel ``(row, col)``: column offsets map to q_x, row offsets to q_y, the
  beam runs along +z.
* Quaternions are ``(w, x, y, z)``; a rotation acts on detector-frame q to
  give the model-frame sampling point ``R @ q``.
"""

from dataclasses import dataclass, field
from itertools import combinations, permutations

import numpy as np

HC_KEV_NM = 1.239841984  # h*c in keV*nm
GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorGeometry:
    """Square single-panel detector in the far field."""

    photon_energy_kev: float
    detector_distance_mm: float
    pixel_pitch_um: float
    n_side: int
    center: tuple = None

    def __post_init__(self):
        if not (self.photon_energy_kev > 0 and self.detector_distance_mm > 0
                and self.pixel_pitch_um > 0):
            raise GeometryError("energy, distance and pixel pitch must be positive")
        if int(self.n_side) != self.n_side or self.n_side < 2:
            raise GeometryError(f"n_side must be an integer >= 2, got {self.n_side}")
        object.__setattr__(self, "n_side", int(self.n_side))
        if self.center is None:
            c = (self.n_side - 1) / 2.0
            object.__setattr__(self, "center", (c, c))
        else:
            object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @classmethod
    def pnccd_1024(cls):
        """1024^2 pnCCD with 75 um pixels at 581 mm, 1.6 keV photons."""
        return cls(1.6, 581.0, 75.0, 1024)

    @property
    def wavelength_nm(self):
        return HC_KEV_NM / self.photon_energy_kev

    @property
    def distance_nm(self):
        return self.detector_distance_mm * 1e6

    @property
    def pitch_nm(self):
        return self.pixel_pitch_um * 1e3

    def binned(self, b):
        """Geometry of the same detector after b x b binning (trailing pixels dropped)."""
        b = int(b)
        if b < 1:
            raise GeometryError("binning factor must be >= 1")
        cy, cx = self.center
        return DetectorGeometry(
            self.photon_energy_kev, self.detector_distance_mm, self.pixel_pitch_um * b,
            self.n_side // b, ((cy + 0.5) / b - 0.5, (cx + 0.5) / b - 0.5))

    def padded(self, pad):
        """Geometry with ``pad`` extra pixels on every side."""
        cy, cx = self.center
        return DetectorGeometry(
            self.photon_energy_kev, self.detector_distance_mm, self.pixel_pitch_um,
            self.n_side + 2 * pad, (cy + pad, cx + pad))

    def q_at_offset(self, dy, dx):
        """q (nm^-1) for a detector point ``(dy, dx)`` pixels from the beam center."""
        dy = np.asarray(dy, dtype=float)
        dx = np.asarray(dx, dtype=float)
        x = dx * self.pitch_nm
        y = dy * self.pitch_nm
        z = np.full(np.broadcast(x, y).shape, self.distance_nm)
        r = np.sqrt(x * x + y * y + z * z)
        lam = self.wavelength_nm
        return np.stack([x / r / lam, y / r / lam, (z / r - 1.0) / lam], axis=-1)

    def pixel_q(self):
        """(n_side, n_side, 3) array of q vectors for every pixel."""
        rows, cols = np.indices((self.n_side, self.n_side), dtype=float)
        return self.q_at_offset(rows - self.center[0], cols - self.center[1])

    def edge_resolution_nm(self):
        q = self.q_at_offset(0.0, self.center[1])
        return 1.0 / np.linalg.norm(q)

    def corner_resolution_nm(self):
        q = self.q_at_offset(self.center[0], self.center[1])
        return 1.0 / np.linalg.norm(q)

    def q_max(self):
        return float(np.linalg.norm(self.pixel_q(), axis=-1).max())

    def to_dict(self):
        return {
            "photon_energy_kev": self.photon_energy_kev,
            "detector_distance_mm": self.detector_distance_mm,
            "pixel_pitch_um": self.pixel_pitch_um,
            "n_side": self.n_side,
            "center_px": list(self.center),
        }


def pixel_to_q(geom, px):
    """Scattering vector (nm^-1) of pixel ``px = (row, col)``."""
    row, col = px
    if not (0 <= row < geom.n_side and 0 <= col < geom.n_side):
        raise IndexError(f"pixel {px} outside {geom.n_side}x{geom.n_side} detector")
    return geom.q_at_offset(row - geom.center[0], col - geom.center[1])


def volume_q_step(geom, n_vol, margin=1.5):
    """Fourier voxel size (nm^-1) so every pixel of ``geom`` fits an ``n_vol`` cube.

    The largest detector |q| lands ``margin`` voxels inside the inscribed
    sphere, which keeps trilinear neighbours in range for every rotation.
    """
    room = n_vol // 2 - margin
    if room <= 0:
        raise GeometryError(f"volume of side {n_vol} too small")
    return geom.q_max() / room


def pixel_qvox(geom, q_step):
    """Detector q vectors in voxel units, flattened row-major to (n_side**2, 3)."""
    return geom.pixel_q().reshape(-1, 3) / q_step


# ---------------------------------------------------------------------------
# quaternions


def quat_to_matrix(q):
    """Rotation matrices for quaternions ``(..., 4)`` in (w, x, y, z) order."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m):
    """Unit quaternions (w >= 0) for rotation matrices ``(..., 3, 3)``."""
    m = np.asarray(m, dtype=float)
    flat = m.reshape(-1, 3, 3)
    out = np.empty((len(flat), 4))
    for k, r in enumerate(flat):
        t = np.trace(r)
        cand = np.array([1 + t, 1 + 2 * r[0, 0] - t, 1 + 2 * r[1, 1] - t, 1 + 2 * r[2, 2] - t])
        i = int(np.argmax(cand))
        s = 2.0 * np.sqrt(cand[i])
        if i == 0:
            q = [s / 4, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        elif i == 1:
            q = [(r[2, 1] - r[1, 2]) / s, s / 4, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        elif i == 2:
            q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, s / 4, (r[1, 2] + r[2, 1]) / s]
        else:
            q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, s / 4]
        q = np.array(q)
        q /= np.linalg.norm(q)
        out[k] = -q if q[0] < 0 else q
    return out.reshape(m.shape[:-2] + (4,))


def quat_multiply(a, b):
    """Hamilton product; ``quat_to_matrix(a*b) == quat_to_matrix(a) @ quat_to_matrix(b)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    w1, x1, y1, z1 = np.moveaxis(a, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(b, -1, 0)
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=-1)


def quat_conj(q):
    q = np.array(q, dtype=float)
    q[..., 1:] *= -1
    return q


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def random_quaternions(rng, n):
    """``n`` Haar-uniform unit quaternions with w >= 0."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1
    return q


def rotation_distance(a, b):
    """Geodesic angle (rad) between the rotations of quaternions ``a`` and ``b``."""
    d = np.abs(np.sum(np.asarray(a) * np.asarray(b), axis=-1))
    return 2.0 * np.arccos(np.clip(d, 0.0, 1.0))


def rotate_q(rotation, q, atol=1e-8):
    """Apply a unit quaternion to a 3-vector (or a stack of them)."""
    rotation = np.asarray(rotation, dtype=float)
    if rotation.shape != (4,) or abs(np.linalg.norm(rotation) - 1.0) > atol:
        raise GeometryError("rotation must be a unit quaternion")
    return np.asarray(q, dtype=float) @ quat_to_matrix(rotation).T


# ---------------------------------------------------------------------------
# 600-cell rotation grid


@dataclass(frozen=True)
class RotationGrid:
    quaternions: np.ndarray
    weights: np.ndarray
    refinement_n: int
    _matrices: np.ndarray = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.quaternions)

    @property
    def matrices(self):
        if self._matrices is None:
            object.__setattr__(self, "_matrices", quat_to_matrix(self.quaternions))
        return self._matrices


def _cell600_vertices():
    verts = []
    for i in range(4):
        for s in (1.0, -1.0):
            v = np.zeros(4)
            v[i] = s
            verts.append(v)
    for signs in np.ndindex(2, 2, 2, 2):
        verts.append(0.5 * (1 - 2 * np.array(signs, dtype=float)))
    base = np.array([GOLDEN, 1.0, 1.0 / GOLDEN, 0.0]) / 2.0
    even = [p for p in permutations(range(4)) if _parity(p) == 0]
    for p in even:
        for signs in np.ndindex(2, 2, 2):
            v = base.copy()
            v[:3] *= 1 - 2 * np.array(signs, dtype=float)
            verts.append(v[list(p)])
    return np.array(verts)


def _parity(p):
    p = list(p)
    swaps = 0
    for i in range(len(p)):
        while p[i] != i:
            j = p[i]
            p[i], p[j] = p[j], p[i]
            swaps += 1
    return swaps % 2


def _cliques(verts):
    adj = (verts @ verts.T) > GOLDEN / 2 - 1e-6
    np.fill_diagonal(adj, False)
    nbrs = [set(np.flatnonzero(row)) for row in adj]
    edges = [(a, b) for a in range(len(verts)) for b in nbrs[a] if a < b]
    faces = [(a, b, c) for a, b in edges for c in nbrs[a] & nbrs[b] if c > b]
    cells = [(a, b, c, d) for a, b, c in faces for d in nbrs[a] & nbrs[b] & nbrs[c] if d > c]
    return edges, faces, cells


def _interior_points(verts, simplices, n):
    """Barycentric lattice points of each simplex with all coordinates >= 1/n."""
    k = len(simplices[0]) if simplices else 0
    coeffs = [c for c in _compositions(n, k) if min(c) >= 1]
    if not coeffs or not simplices:
        return np.zeros((0, 4))
    coeffs = np.array(coeffs, dtype=float) / n
    corners = verts[np.array(simplices)]  # (S, k, 4)
    return np.einsum("ck,skd->scd", coeffs, corners).reshape(-1, 4)


def _compositions(n, k):
    for cut in combinations(range(1, n), k - 1):
        bounds = (0,) + cut + (n,)
        yield tuple(bounds[i + 1] - bounds[i] for i in range(k))


def build_rotation_grid(n):
    """Quasi-uniform SO(3) sampling from the n-fold subdivided 600-cell.

    Returns exactly ``10 * (5 n^3 + n)`` rotations (antipodal quaternions
    merged) with equal weights.
    """
    n = int(n)
    if n < 1:
        raise GeometryError("refinement level must be >= 1")
    verts = _cell600_vertices()
    edges, faces, cells = _cliques(verts)
    pts = [verts]
    for simplices in (edges, faces, cells):
        pts.append(_interior_points(verts, simplices, n))
    q = np.concatenate(pts)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    lead = np.argmax(np.abs(q) > 1e-9, axis=1)
    q = q[q[np.arange(len(q)), lead] > 0]
    q = q[np.lexsort(np.round(q, 12).T[::-1])]
    expected = 10 * (5 * n ** 3 + n)
    if len(q) != expected:  # pragma: no cover - construction invariant
        raise GeometryError(f"600-cell subdivision gave {len(q)} points, expected {expected}")
    weights = np.full(len(q), 1.0 / len(q))
    return RotationGrid(q, weights, n)


# ---------------------------------------------------------------------------
# masks


def circular_mask(n_side, diameter_px, center=None, keep_inside=False):
    """Boolean pixel mask (True = used) excluding (or keeping only) a central disc."""
    if diameter_px < 0:
        raise GeometryError("diameter must be >= 0")
    if center is None:
        center = ((n_side - 1) / 2.0, (n_side - 1) / 2.0)
    rows, cols = np.indices((n_side, n_side), dtype=float)
    inside = np.hypot(rows - center[0], cols - center[1]) < diameter_px / 2.0
    return inside if keep_inside else ~inside


def strip_mask(n_side, width_px, orientation="vertical"):
    """Mask out a central strip of ``width_px`` columns (vertical) or rows (horizontal)."""
    if not 0 <= width_px <= n_side:
        raise GeometryError(f"strip width {width_px} outside [0, {n_side}]")
    if orientation not in ("vertical", "horizontal"):
        raise GeometryError(f"unknown strip orientation {orientation!r}")
    mask = np.ones((n_side, n_side), dtype=bool)
    start = max(0, n_side // 2 - width_px // 2)
    sl = slice(start, start + width_px)
    if orientation == "vertical":
        mask[:, sl] = False
    else:
        mask[sl, :] = False
    return mask
