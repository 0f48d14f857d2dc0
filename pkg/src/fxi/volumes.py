"""Volume containers shared by the reconstruction and analysis modules."""

from dataclasses import dataclass

import numpy as np


@dataclass
class IntensityVolume:
    """3D Fourier intensity on a cubic grid with q = 0 at index ``n // 2``.

    ``weights`` holds merge weights; voxels with zero weight are unobserved.
    ``weights=None`` means every voxel is observed.
    """

    values: np.ndarray
    q_step: float
    weights: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3 or len(set(self.values.shape)) != 1:
            raise ValueError(f"intensity grid must be cubic, got {self.values.shape}")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float)
            if self.weights.shape != self.values.shape:
                raise ValueError("weights shape mismatch")

    @property
    def n_side(self):
        return self.values.shape[0]

    @property
    def observed(self):
        if self.weights is None:
            return np.ones(self.values.shape, dtype=bool)
        return self.weights > 0

    @property
    def voxel_size(self):
        """Real-space voxel size (nm) conjugate to this Fourier grid."""
        return 1.0 / (self.n_side * self.q_step)

    def replace(self, values):
        return IntensityVolume(values, self.q_step, self.weights)


@dataclass
class DensityVolume:
    """Real-space density on a cubic grid (voxel size in nm)."""

    voxels: np.ndarray
    voxel_size: float

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or len(set(self.voxels.shape)) != 1:
            raise ValueError(f"density grid must be cubic, got {self.voxels.shape}")

    @property
    def n_side(self):
        return self.voxels.shape[0]


def radial_index(n, center=None):
    """Distance of every voxel of an n^3 grid from ``center`` (default n // 2)."""
    c = n // 2 if center is None else center
    ax = np.arange(n) - c
    return np.sqrt(ax[:, None, None] ** 2 + ax[None, :, None] ** 2 + ax[None, None, :] ** 2)
