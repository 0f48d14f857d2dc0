"""Synthetic particles and diffraction-pattern generators.

Forward model: the Fourier intensity of a density is ``|DFT|^2`` of the
zero-padded grid (unnormalised transform, q = 0 shifted to index ``N // 2``),
so Parseval reads ``sum(W) = N**3 * sum(rho**2)`` with N the padded side.
A pattern is the Ewald-sphere slice of that intensity at a random rotation,
scaled by a per-shot fluence, plus optional background, then Poisson sampled.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
from scipy import ndimage
from scipy.spatial import ConvexHull

from . import kernels
from .geometry import (GOLDEN, build_rotation_grid, matrix_to_quat, pixel_qvox, quat_to_matrix,
                       random_quaternions, strip_mask)
from .rng import substream
from .volumes import DensityVolume, IntensityVolume

log = logging.getLogger(__name__)

VARIANTS = ("K", "Kf", "Kb", "Ke")
TAGS = {"K": 0, "Kf": 1, "Kb": 2, "Ke": 3, "experimental": 4}


class SizeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class DiffractionPattern:
    counts: np.ndarray
    true_rotation: np.ndarray = None
    true_fluence: float = None
    dataset_tag: str = "experimental"


@dataclass
class PatternSet:
    """Stack of patterns sharing one detector grid.

    ``rotations`` rows are NaN and ``fluences`` entries NaN where unknown.
    """

    counts: np.ndarray
    rotations: np.ndarray = None
    fluences: np.ndarray = None
    tags: np.ndarray = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if self.counts.ndim != 3 or self.counts.shape[1] != self.counts.shape[2]:
            raise ValueError(f"counts must be (M, n, n), got {self.counts.shape}")
        if np.issubdtype(self.counts.dtype, np.floating) or (self.counts < 0).any():
            raise ValueError("counts must be nonnegative integers")
        self.counts = self.counts.astype(np.uint32, copy=False)
        m = len(self.counts)
        if self.rotations is None:
            self.rotations = np.full((m, 4), np.nan)
        if self.fluences is None:
            self.fluences = np.full(m, np.nan)
        if self.tags is None:
            self.tags = np.full(m, TAGS["experimental"], dtype=np.uint8)
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(m, 4)
        self.fluences = np.asarray(self.fluences, dtype=float).reshape(m)
        self.tags = np.asarray(self.tags, dtype=np.uint8).reshape(m)

    def __len__(self):
        return len(self.counts)

    def __getitem__(self, k):
        if isinstance(k, (int, np.integer)):
            rot = self.rotations[k]
            fl = self.fluences[k]
            tag = {v: n for n, v in TAGS.items()}[int(self.tags[k])]
            return DiffractionPattern(self.counts[k], None if np.isnan(rot).any() else rot,
                                      None if np.isnan(fl) else float(fl), tag)
        idx = np.arange(len(self))[k] if isinstance(k, slice) else np.asarray(k)
        return PatternSet(self.counts[idx], self.rotations[idx], self.fluences[idx],
                          self.tags[idx])

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    @property
    def n_side(self):
        return self.counts.shape[1]

    @property
    def has_truth(self):
        return not np.isnan(self.rotations).any()

    @classmethod
    def concatenate(cls, sets):
        return cls(np.concatenate([s.counts for s in sets]),
                   np.concatenate([s.rotations for s in sets]),
                   np.concatenate([s.fluences for s in sets]),
                   np.concatenate([s.tags for s in sets]))


@dataclass
class BeamConfig:
    fluence_range: tuple = (0.9, 1.1)
    background: np.ndarray = field(default=None, repr=False)
    extra_scatter_p: float = 1e-3

    def __post_init__(self):
        lo, hi = self.fluence_range
        if not 0 < lo <= hi:
            raise ConfigError(f"fluence range must satisfy 0 < lo <= hi, got {self.fluence_range}")
        if not 0 <= self.extra_scatter_p <= 1:
            raise ConfigError("extra_scatter_p must lie in [0, 1]")
        if self.background is not None:
            self.background = np.asarray(self.background, dtype=float)
            if (self.background < 0).any():
                raise ConfigError("background must be nonnegative")


# ---------------------------------------------------------------------------
# particles


def _grid_coords(n_side, voxel_size):
    ax = (np.arange(n_side) - n_side // 2) * voxel_size
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)


def _check_fit(diameter, voxel_size, n_side):
    if diameter < 0:
        raise SizeError("diameter must be >= 0")
    if diameter > n_side * voxel_size:
        raise SizeError(f"particle of {diameter} nm exceeds grid of {n_side * voxel_size} nm")


def icosahedron_vertices(diameter):
    """Vertices of a regular icosahedron with vertex-to-vertex diameter ``diameter``."""
    v = []
    for s1 in (1, -1):
        for s2 in (1, -1):
            v += [(0, s1, s2 * GOLDEN), (s1, s2 * GOLDEN, 0), (s2 * GOLDEN, 0, s1)]
    v = np.array(v, dtype=float)
    return v / np.linalg.norm(v[0]) * diameter / 2.0


def icosahedral_group():
    """The 60 rotations (quaternions) mapping ``icosahedron_vertices`` onto itself."""
    v = icosahedron_vertices(2.0)
    d = np.linalg.norm(v[:, None] - v[None], axis=-1)
    edge = np.min(d[d > 1e-9])

    def frame(a, b):
        e1 = a / np.linalg.norm(a)
        e2 = b - (b @ e1) * e1
        e2 /= np.linalg.norm(e2)
        return np.stack([e1, e2, np.cross(e1, e2)], axis=1)

    src = frame(v[0], v[np.flatnonzero(np.isclose(d[0], edge))[0]])
    mats = []
    for a in range(len(v)):
        for b in np.flatnonzero(np.isclose(d[a], edge)):
            mats.append(frame(v[a], v[b]) @ src.T)
    return matrix_to_quat(np.array(mats))


def icosahedron_volume(diameter):
    """Analytic volume (nm^3) of a regular icosahedron of circumscribed diameter."""
    edge = diameter / np.sqrt(GOLDEN * np.sqrt(5.0))
    return 5.0 / 12.0 * (3.0 + np.sqrt(5.0)) * edge ** 3


def make_icosahedron(diameter, voxel_size, n_side):
    """Uniform-density regular icosahedron centred at voxel ``n_side // 2``."""
    _check_fit(diameter, voxel_size, n_side)
    vox = np.zeros((n_side,) * 3)
    if diameter > 0:
        hull = ConvexHull(icosahedron_vertices(diameter))
        pts = _grid_coords(n_side, voxel_size).reshape(-1, 3)
        inside = np.all(pts @ hull.equations[:, :3].T + hull.equations[:, 3] <= 1e-9, axis=1)
        vox.reshape(-1)[inside] = 1.0
    return DensityVolume(vox, voxel_size)


def make_sphere(diameter, voxel_size, n_side):
    """Uniform-density ball centred at voxel ``n_side // 2``."""
    _check_fit(diameter, voxel_size, n_side)
    vox = np.zeros((n_side,) * 3)
    if diameter > 0:
        r = np.linalg.norm(_grid_coords(n_side, voxel_size), axis=-1)
        vox[r <= diameter / 2.0] = 1.0
    return DensityVolume(vox, voxel_size)


def gaussian_kernel(window=3, sigma=1.0):
    if window % 2 != 1:
        raise ValueError(f"window must be odd, got {window}")
    h = window // 2
    ax = np.arange(-h, h + 1)
    r2 = ax[:, None, None] ** 2 + ax[None, :, None] ** 2 + ax[None, None, :] ** 2
    k = np.exp(-r2 / (2.0 * sigma ** 2))
    return k / k.sum()


def smooth_gaussian(vol, window=3, sigma=1.0):
    """Convolve with a normalised, truncated ``window^3`` Gaussian (zero boundary)."""
    k = gaussian_kernel(window, sigma)
    out = ndimage.convolve(np.asarray(vol.voxels, dtype=float), k, mode="constant", cval=0.0)
    return DensityVolume(out, vol.voxel_size)


def smoothed_icosahedron(diameter, voxel_size, n_side, passes=2):
    """Reference particle: icosahedron blurred by ``passes`` 3^3, sigma = 1 Gaussians."""
    vol = make_icosahedron(diameter, voxel_size, n_side)
    for _ in range(passes):
        vol = smooth_gaussian(vol, 3, 1.0)
    return vol


# ---------------------------------------------------------------------------
# forward model


def pad_density(vol, oversample):
    n = vol.n_side
    big = n * int(oversample)
    out = np.zeros((big,) * 3, dtype=np.asarray(vol.voxels).dtype)
    o = big // 2 - n // 2
    out[o:o + n, o:o + n, o:o + n] = vol.voxels
    return out


def fourier_transform(density):
    """Centred unnormalised DFT (real-space and q origins at index n // 2)."""
    return scipy.fft.fftshift(scipy.fft.fftn(scipy.fft.ifftshift(density)))


def forward_intensity(vol, oversample=2):
    """|DFT|^2 of the density zero-padded by ``oversample``."""
    oversample = int(oversample)
    if oversample < 1:
        raise ValueError("oversample must be >= 1")
    padded = pad_density(vol, oversample)
    w = np.abs(fourier_transform(padded)) ** 2
    return IntensityVolume(w, 1.0 / (padded.shape[0] * vol.voxel_size))


def _center(w):
    return np.full(3, w.n_side // 2, dtype=float)


def slice_ewald(W, rotation, geom):
    """Ewald slice of ``W`` at ``rotation``.

    Returns ``(values, valid)``; ``valid`` is False where the rotated pixel q
    falls outside the volume (values there are 0 and must be masked).
    """
    rot = quat_to_matrix(np.asarray(rotation, dtype=float))[None]
    vals, valid = kernels.slice_volume(W.values, rot, pixel_qvox(geom, W.q_step), _center(W))
    shape = (geom.n_side, geom.n_side)
    return np.maximum(vals[0], 0.0).reshape(shape), valid[0].reshape(shape)


def slice_many(W, rotations, geom):
    """Slices for a stack of quaternions; returns ``(values (J, n, n), valid)``."""
    rots = quat_to_matrix(np.asarray(rotations, dtype=float).reshape(-1, 4))
    vals, valid = kernels.slice_volume(W.values, rots, pixel_qvox(geom, W.q_step), _center(W))
    shape = (len(rots), geom.n_side, geom.n_side)
    return np.maximum(vals, 0.0).reshape(shape), valid.reshape(shape)


def photon_scale(W, geom, photons):
    """Factor mapping ``W`` to ``photons`` expected counts per pattern (rotation averaged)."""
    grid = build_rotation_grid(1)
    vals, _ = slice_many(W, grid.quaternions, geom)
    mean_total = vals.reshape(len(grid), -1).sum(axis=1).mean()
    if mean_total <= 0:
        raise ValueError("intensity has no signal on the detector")
    return photons / mean_total


def scale_to_photons(W, geom, photons):
    return W.replace(W.values * photon_scale(W, geom, photons))


def default_background(n_side, amplitude=0.5, r0_px=None, strip_width_px=0):
    """Radially decaying background ``amplitude / (1 + r / r0)^2`` (counts per pixel)."""
    r0 = n_side / 16.0 if r0_px is None else r0_px
    c = (n_side - 1) / 2.0
    rows, cols = np.indices((n_side, n_side), dtype=float)
    bg = amplitude / (1.0 + np.hypot(rows - c, cols - c) / r0) ** 2
    if strip_width_px:
        bg[~strip_mask(n_side, strip_width_px)] = 0.0
    return bg


def generate_dataset(vol, geom, beam, M, variant, seed, photons_per_pattern=None,
                     oversample=2):
    """Draw ``M`` synthetic patterns of a dataset variant.

    ``vol`` is a density (transformed with ``forward_intensity``) or an
    ``IntensityVolume`` used as is. ``photons_per_pattern`` rescales the
    intensity so a unit-fluence pattern carries that many expected photons.

    Variants: ``K = Poisson(W_j)``, ``Kf = Poisson(phi W_j)``,
    ``Kb = Poisson(phi W_j + K_b)``, ``Ke = Poisson(phi W_j + K_b + B(p))``.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown dataset variant {variant!r}")
    if M < 1:
        raise ConfigError("M must be >= 1")
    if variant in ("Kb", "Ke") and beam.background is None:
        raise ConfigError(f"variant {variant} needs a background frame")
    W = vol if isinstance(vol, IntensityVolume) else forward_intensity(vol, oversample)
    if photons_per_pattern is not None:
        W = scale_to_photons(W, geom, photons_per_pattern)
    n = geom.n_side
    if beam.background is not None and beam.background.shape != (n, n):
        raise ConfigError("background frame shape does not match detector")

    lo, hi = beam.fluence_range
    rotations = np.empty((M, 4))
    fluences = np.empty(M)
    streams = [substream(seed, "simulate", k) for k in range(M)]
    for k, rng in enumerate(streams):
        rotations[k] = random_quaternions(rng, 1)[0]
        phi = rng.uniform(lo, hi)
        fluences[k] = 1.0 if variant == "K" else phi

    slices, valid = slice_many(W, rotations, geom)
    counts = np.empty((M, n, n), dtype=np.uint32)
    for k, rng in enumerate(streams):
        lam = slices[k] * fluences[k]
        if variant in ("Kb", "Ke"):
            lam = lam + beam.background
        if variant == "Ke":
            lam = lam + (rng.random((n, n)) < beam.extra_scatter_p)
        lam = np.where(valid[k], lam, 0.0)
        counts[k] = rng.poisson(lam)
    tags = np.full(M, TAGS[variant], dtype=np.uint8)
    return PatternSet(counts, rotations, fluences, tags)


def lit_pixel_hitfind(patterns, threshold_counts, min_lit):
    """Indices of patterns with at least ``min_lit`` pixels >= ``threshold_counts``."""
    if threshold_counts < 0 or min_lit < 0:
        raise ValueError("thresholds must be >= 0")
    counts = patterns.counts if isinstance(patterns, PatternSet) else np.asarray(
        [p.counts for p in patterns])
    lit = (counts >= threshold_counts).reshape(len(counts), -1).sum(axis=1)
    return np.flatnonzero(lit >= min_lit)
