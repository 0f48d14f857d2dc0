"""Iterative phase retrieval of a real-space density from a 3D Fourier intensity.

Each replica starts from the measured moduli with uniformly random phases,
runs relaxed averaged alternating reflections (RAAR), then error reduction
(ER), and keeps the modulus of the final iterate. Replicas are aligned for
the translation and centre-inversion degeneracy of the intensity, then
averaged. Iterates stay complex; only the final modulus makes them real.

Unobserved Fourier voxels are not constrained by the modulus projection.
Internally the arrays are held in FFT order (origin at index 0) so the loop
avoids shifts; public inputs and outputs use the centred convention of the
rest of the package (origin at ``n // 2``).
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .rng import substream
from .volumes import DensityVolume, radial_index

log = logging.getLogger(__name__)

E_INV = float(np.exp(-1.0))


class PhasingError(ValueError):
    pass


def ball_support(n_side, diameter_vox, center=None):
    """Boolean ball of ``diameter_vox`` voxels centred at ``n // 2``."""
    if diameter_vox <= 0:
        raise PhasingError("support diameter must be positive")
    return radial_index(n_side, center) <= diameter_vox / 2.0


@dataclass
class PhasingResult:
    density: DensityVolume
    replicas: list
    E_f: float
    E_r: float
    replica_errors: list
    prtf_curve: np.ndarray
    prtf_q: np.ndarray
    resolution_nm: float


def _fftn(x):
    return scipy.fft.fftn(x, workers=-1)


def _ifftn(x):
    return scipy.fft.ifftn(x, workers=-1)


class _Projector:
    """Modulus and support projections in FFT order."""

    def __init__(self, W, support, dtype=np.complex128):
        values = np.asarray(W.values, dtype=float)
        if (values < 0).any():
            raise PhasingError("intensity must be nonnegative")
        support = np.asarray(support, dtype=bool)
        if support.shape != values.shape:
            raise PhasingError("support shape does not match the intensity grid")
        if not support.any():
            raise PhasingError("support is empty")
        real = np.float32 if dtype == np.complex64 else np.float64
        self.amp = scipy.fft.ifftshift(np.sqrt(values)).astype(real)
        self.obs = scipy.fft.ifftshift(W.observed)
        self.all_obs = bool(self.obs.all())
        self.support = scipy.fft.ifftshift(support)
        self.outside = ~self.support

    def modulus(self, x):
        X = _fftn(x)
        mag = np.abs(X)
        zero = mag == 0
        mag[zero] = 1.0
        np.divide(self.amp, mag, out=mag)
        if not self.all_obs:
            mag[~self.obs] = 1.0
        X *= mag
        # a zero Fourier coefficient takes the measured modulus with zero phase
        if zero.any():
            X[zero & self.obs] = self.amp[zero & self.obs]
        return _ifftn(X)

    def supp(self, x):
        return np.where(self.support, x, 0.0)


def random_start(W, seed, index=0):
    """``IFFT(sqrt(W) exp(i theta))`` with seeded uniform phases (centred grid)."""
    rng = substream(seed, "phase", index)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=W.values.shape)
    amp = np.sqrt(np.maximum(W.values, 0.0)) * W.observed
    X = scipy.fft.ifftshift(amp * np.exp(1j * theta))
    return scipy.fft.fftshift(_ifftn(X))


def raar_er_phase(W, support, n_raar=600, n_er=120, beta=0.87, seed=0, index=0,
                  start=None, callback=None):
    """One replica: ``n_raar`` RAAR steps then ``n_er`` ER steps.

    Returns the complex final iterate on the centred grid (take ``abs`` for
    the density). With no iterations the seeded start is returned.
    ``callback(stage, iteration, x)`` sees every iterate in FFT order.
    """
    x0 = random_start(W, seed, index) if start is None else np.asarray(start, dtype=complex)
    x = scipy.fft.ifftshift(x0)
    if n_raar:
        # RAAR only needs to find the basin; single precision halves its cost
        proj = _Projector(W, support, np.complex64)
        o = proj.outside.astype(np.float32)
        # beta/2 (x + R_S R_M x) + (1 - beta) P_M x reduces to P_M x inside the
        # support and beta x + (1 - 2 beta) P_M x outside
        a = (1.0 - 2.0 * beta * o).astype(np.float32)
        b = (beta * o).astype(np.float32)
        x = x.astype(np.complex64)
        for it in range(n_raar):
            pm = proj.modulus(x)
            pm *= a
            x *= b
            x += pm
            if callback is not None:
                callback("raar", it, x)
        x = x.astype(np.complex128)
    proj = _Projector(W, support)
    for it in range(n_er):
        x = proj.supp(proj.modulus(x))
        if callback is not None:
            callback("er", it, x)
    return scipy.fft.fftshift(x)


def _centered_ft(h):
    return scipy.fft.fftshift(_fftn(scipy.fft.ifftshift(h)))


def phasing_errors(h, W, support):
    """Fourier error ``E_f`` (observed voxels) and real-space error ``E_r``."""
    h = h.voxels if isinstance(h, DensityVolume) else np.asarray(h)
    support = np.asarray(support, dtype=bool)
    if h.shape != W.values.shape or support.shape != h.shape:
        raise PhasingError("density, intensity and support shapes must agree")
    obs = W.observed
    I = W.values[obs]
    if I.sum() <= 0:
        raise PhasingError("intensity has zero total on observed voxels")
    mag = np.abs(_centered_ft(h))[obs]
    e_f = np.sqrt(((mag - np.sqrt(I)) ** 2).sum() / I.sum())
    p = np.abs(h) ** 2
    tot = p.sum()
    e_r = np.sqrt(p[~support].sum() / tot) if tot > 0 else 0.0
    return float(e_f), float(e_r)


def _invert(x):
    """``x(-r)`` about the grid centre ``n // 2`` (index ``i -> n - i``)."""
    return np.roll(np.flip(x), 1, axis=(0, 1, 2))


def _xcorr_peak(ref_ft, b):
    c = np.real(_ifftn(ref_ft * np.conj(_fftn(b))))
    k = int(np.argmax(c))
    return c.flat[k], np.unravel_index(k, c.shape)


def align_shift(ref, replica):
    """(inverted, shift) maximizing the circular cross-correlation of moduli."""
    a = np.abs(np.asarray(ref))
    b = np.abs(np.asarray(replica))
    if a.shape != b.shape:
        raise PhasingError("replica shape mismatch")
    fa = _fftn(a)
    c0, s0 = _xcorr_peak(fa, b)
    c1, s1 = _xcorr_peak(fa, _invert(b))
    return (False, s0) if c0 >= c1 else (True, s1)


def align_replica(ref, replica):
    """Replica translated (and centre-inverted if better) onto ``ref``.

    Inversion of a complex iterate is the twin ``conj(x(-r))``, so the
    Fourier moduli are unchanged.
    """
    is_dv = isinstance(replica, DensityVolume)
    r = replica.voxels if is_dv else np.asarray(replica)
    f = ref.voxels if isinstance(ref, DensityVolume) else ref
    inverted, shift = align_shift(f, r)
    out = np.conj(_invert(r)) if inverted else r
    out = np.roll(out, shift, axis=(0, 1, 2))
    return DensityVolume(out, replica.voxel_size) if is_dv else out


def average_replicas(replicas):
    """Voxelwise mean of replica moduli (replicas assumed aligned)."""
    if not replicas:
        raise PhasingError("need at least one replica")
    arrs = [np.abs(r.voxels if isinstance(r, DensityVolume) else np.asarray(r))
            for r in replicas]
    if len({a.shape for a in arrs}) != 1:
        raise PhasingError("replica shapes differ")
    mean = np.mean(arrs, axis=0)
    vs = replicas[0].voxel_size if isinstance(replicas[0], DensityVolume) else 1.0
    return DensityVolume(mean, vs)


def correlation(a, b, mask=None):
    """Pearson correlation of two real volumes (optionally over ``mask``)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if mask is not None:
        a, b = a[mask], b[mask]
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / den) if den > 0 else 0.0


def aligned_correlation(truth, density):
    """Correlation with ``truth`` after translation/inversion alignment of moduli."""
    t = truth.voxels if isinstance(truth, DensityVolume) else np.asarray(truth)
    d = density.voxels if isinstance(density, DensityVolume) else np.asarray(density)
    d = np.abs(d)
    return correlation(t, np.abs(align_replica(t, d)))


def replica_phases(replicas):
    """Fourier phases ``exp(i phi)`` of the real replica moduli (centred grid)."""
    out = []
    for r in replicas:
        h = np.abs(r.voxels if isinstance(r, DensityVolume) else np.asarray(r))
        F = _centered_ft(h)
        mag = np.abs(F)
        with np.errstate(divide="ignore", invalid="ignore"):
            out.append(np.where(mag > 0, F / np.where(mag > 0, mag, 1.0), 0.0))
    return np.array(out)


def shell_average(values, mask=None):
    """Mean of ``values`` over unit-width radial shells; ``nan`` for empty shells."""
    n = values.shape[0]
    r = np.rint(radial_index(n)).astype(int)
    m = np.ones(values.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    nbins = r.max() + 1
    s = np.bincount(r[m], weights=values[m], minlength=nbins)
    c = np.bincount(r[m], minlength=nbins)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(c > 0, s / np.where(c > 0, c, 1), np.nan), c


def prtf(phases, W, threshold=E_INV):
    """Shell-averaged phase coherence across replicas and the ``threshold`` resolution.

    Parameters
    ----------
    phases : (R, n, n, n) complex
        Unit phasors per replica (centred grid); zeros are ignored voxels.
    W : IntensityVolume
        Supplies the q step and the observed-voxel mask.

    Returns
    -------
    dict with ``curve`` (per shell, nan where no observed voxel), ``q``
    (shell centre, nm^-1) and ``resolution_nm``: the full period ``1 / q``
    of the first shell, scanning outward, whose value is below
    ``threshold``; the outermost observed shell if none is.
    """
    phases = np.asarray(phases)
    if phases.ndim != 4 or len(phases) < 2:
        raise PhasingError("PRTF needs at least two replicas")
    coh = np.abs(phases.mean(axis=0))
    obs = W.observed.copy()
    obs[(W.n_side // 2,) * 3] = False  # q = 0 has no resolution
    curve, counts = shell_average(coh, obs)
    curve = np.clip(curve, 0.0, 1.0)
    q = np.arange(len(curve)) * W.q_step
    shells = np.flatnonzero(counts > 0)
    below = shells[curve[shells] < threshold]
    cut = below[0] if below.size else shells[-1]
    return {"curve": curve, "q": q, "counts": counts, "resolution_nm": float(1.0 / q[cut])}


def phase_replicas(W, support, n_replicas=20, n_raar=600, n_er=120, beta=0.87, seed=0,
                   keep_replicas=True):
    """Phase ``n_replicas`` seeded replicas, align them to the first, average.

    ``E_f``/``E_r`` are reported for the averaged density; per-replica
    errors are kept in ``replica_errors``.
    """
    if n_replicas < 1:
        raise PhasingError("n_replicas must be >= 1")
    support = np.asarray(support, dtype=bool)
    raw = []
    errs = []
    for r in range(n_replicas):
        x = raar_er_phase(W, support, n_raar, n_er, beta, seed, index=r)
        errs.append(phasing_errors(x, W, support))
        raw.append(x)
        log.info("replica %d E_f %.3e E_r %.3e", r, *errs[-1])
    ref = raw[0]
    aligned = [np.abs(ref)] + [np.abs(align_replica(ref, x)) for x in raw[1:]]
    vs = W.voxel_size
    mean = average_replicas(aligned)
    mean = DensityVolume(mean.voxels, vs)
    e_f, e_r = phasing_errors(mean.voxels, W, support)
    if n_replicas >= 2:
        pr = prtf(replica_phases(aligned), W)
        curve, q, res = pr["curve"], pr["q"], pr["resolution_nm"]
    else:
        curve, q, res = np.array([]), np.array([]), float("nan")
    reps = [DensityVolume(a, vs) for a in aligned] if keep_replicas else None
    return PhasingResult(mean, reps, e_f, e_r, errs, curve, q, res)
