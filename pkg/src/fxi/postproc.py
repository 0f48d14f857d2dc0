"""Post-analysis of reconstructed intensities and densities.

Shell statistics use unit-width shells around the q = 0 voxel (``n // 2``):
voxel ``v`` belongs to shell ``u = floor(|v - c|)``, i.e. ``u <= r < u + 1``,
for ``u < n // 2``. Shell means only count observed voxels.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import spearmanr

from . import kernels
from .emc import EmcDivergence, merge_at_rotations, run_emc
from .geometry import build_rotation_grid, quat_multiply, quat_to_matrix, random_quaternions
from .rng import STAGES, substream
from .simulate import PatternSet
from .volumes import DensityVolume, IntensityVolume, radial_index

log = logging.getLogger(__name__)


class PostprocError(ValueError):
    pass


# ---------------------------------------------------------------------------
# shells


@dataclass(frozen=True)
class RadialShells:
    edges: np.ndarray  # shell u spans radius [edges[u], edges[u + 1])
    membership: np.ndarray  # shell index per voxel, -1 outside the last shell

    @property
    def n_shells(self):
        return len(self.edges) - 1

    def counts(self, mask=None):
        m = self.membership >= 0
        if mask is not None:
            m &= mask
        return np.bincount(self.membership[m], minlength=self.n_shells)


def radial_shells(n_side):
    """Unit shells ``[u, u + 1)`` for ``u = 0 .. n // 2 - 1`` around voxel ``n // 2``."""
    r = radial_index(n_side)
    last = n_side // 2
    u = np.floor(r).astype(np.intp)
    u[u >= last] = -1
    return RadialShells(np.arange(last + 1, dtype=float), u)


def _shell_reduce(values, shells, mask, reducer):
    sel = (shells.membership >= 0) & mask
    u = shells.membership[sel]
    v = values[sel]
    out = np.full(shells.n_shells, np.nan)
    if reducer == "mean":
        s = np.bincount(u, weights=v, minlength=shells.n_shells)
        c = np.bincount(u, minlength=shells.n_shells)
        ok = c > 0
        out[ok] = s[ok] / c[ok]
    else:
        order = np.lexsort((v, u))
        u, v = u[order], v[order]
        first = np.flatnonzero(np.r_[True, u[1:] != u[:-1]])
        out[u[first]] = v[first]
    return out


def shell_mean(values, shells, mask=None):
    mask = np.ones(values.shape, dtype=bool) if mask is None else mask
    return _shell_reduce(np.asarray(values, dtype=float), shells, mask, "mean")


def shell_min(values, shells, mask=None):
    mask = np.ones(values.shape, dtype=bool) if mask is None else mask
    return _shell_reduce(np.asarray(values, dtype=float), shells, mask, "min")


def _shells_for(W, shells):
    shells = radial_shells(W.n_side) if shells is None else shells
    if shells.membership.shape != W.values.shape:
        raise PostprocError("shells do not match the volume")
    return shells


def shell_psd(W, shells=None):
    """Mean observed value per shell (``nan`` for shells with no observed voxel)."""
    shells = _shells_for(W, shells)
    return shell_mean(W.values, shells, W.observed)


def shell_background(W, shells=None, beta=0.5):
    """Subtract ``beta`` times each shell's minimum observed value, clipping at zero.

    Returns ``(B_u, W_sub)``; empty shells get ``B_u = 0``.
    """
    if not 0.0 <= beta <= 1.0:
        raise PostprocError("beta must lie in [0, 1]")
    shells = _shells_for(W, shells)
    obs = W.observed
    mins = shell_min(W.values, shells, obs)
    empty = np.isnan(mins)
    if empty.any():
        log.warning("%d empty shells get zero background", int(empty.sum()))
    B = np.where(empty, 0.0, beta * mins)
    per_voxel = np.where(shells.membership >= 0, B[shells.membership], 0.0)
    sub = np.where(obs, np.maximum(W.values - per_voxel, 0.0), W.values)
    return B, W.replace(sub)


# ---------------------------------------------------------------------------
# window


def hann(n):
    """``0.5 (1 - cos(2 pi t / (n - 1)))`` for ``t = 0 .. n - 1``."""
    if n == 1:
        return np.ones(1)
    t = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * t / (n - 1)))


def hann_window_3d(W):
    """Multiply by the separable 3D Hann window (corners 0, centre 1 for odd n)."""
    values = W.values if isinstance(W, IntensityVolume) else np.asarray(W, dtype=float)
    if values.ndim != 3 or len(set(values.shape)) != 1:
        raise PostprocError("Hann window needs a cubic grid")
    h = hann(values.shape[0])
    out = values * h[:, None, None] * h[None, :, None] * h[None, None, :]
    return W.replace(out) if isinstance(W, IntensityVolume) else out


# ---------------------------------------------------------------------------
# contrast


def profile_extrema(profile):
    """Values of alternating local extrema of a 1D profile (plateaus collapsed)."""
    p = np.asarray(profile, dtype=float)
    if p.size < 3:
        return np.array([])
    keep = np.r_[True, np.diff(p) != 0]
    p = p[keep]
    if p.size < 3:
        return np.array([])
    d = np.sign(np.diff(p))
    turn = np.flatnonzero(d[1:] != d[:-1]) + 1
    return p[turn]


def profile_contrast(profile):
    """Per-pair contrasts ``(I_max - I_min) / (I_max + I_min)`` of neighbouring extrema."""
    e = profile_extrema(profile)
    if e.size < 2:
        return np.array([])
    a, b = e[:-1], e[1:]
    hi, lo = np.maximum(a, b), np.minimum(a, b)
    den = hi + lo
    ok = den > 0
    return (hi[ok] - lo[ok]) / den[ok]


def _unit_vectors(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def line_profile(W, direction, step=0.5, radius=None):
    """Trilinear samples along the line through the grid centre in ``direction``.

    Samples leaving the grid or landing on unobserved voxels are dropped.
    """
    values = W.values
    n = values.shape[0]
    c = n // 2
    radius = (n // 2 - 1) if radius is None else radius
    t = np.arange(-radius, radius + step / 2, step)
    pts = c + t[:, None] * np.asarray(direction, dtype=float)[None, :]
    vals, valid = kernels.interp_points(values, pts)
    if W.weights is not None:
        near = np.clip(np.rint(pts).astype(int), 0, n - 1)
        valid &= W.observed[near[:, 0], near[:, 1], near[:, 2]]
    return vals[valid]


def contrast(W, n_lines=100, seed=0, step=0.5, median_window=3, return_count=False):
    """Mean contrast of neighbouring intensity extrema along random central lines.

    Each profile is median filtered (``median_window`` samples) before the
    extrema search; lines without an extremum pair are skipped.
    """
    if n_lines < 1:
        raise PostprocError("n_lines must be >= 1")
    W = W if isinstance(W, IntensityVolume) else IntensityVolume(W, 1.0)
    rng = substream(seed, "contrast", 0)
    dirs = _unit_vectors(rng, n_lines)
    pairs = []
    for d in dirs:
        prof = line_profile(W, d, step)
        # interpolation roundoff on a flat line would otherwise make extrema
        if prof.size == 0 or np.ptp(prof) <= 1e-12 * np.abs(prof).max():
            continue
        if median_window > 1:
            prof = ndimage.median_filter(prof, size=median_window, mode="nearest")
        c = profile_contrast(prof)
        if c.size:
            pairs.append(c)
    if not pairs:
        raise PostprocError("no extremum pairs on any line")
    allc = np.concatenate(pairs)
    value = float(allc.mean())
    return (value, int(allc.size)) if return_count else value


# ---------------------------------------------------------------------------
# rotational alignment of intensity volumes


def rotate_volume(W, rotmat):
    """``V'(x) = V(R x)`` about the grid centre (trilinear, zero outside)."""
    values = W.values if isinstance(W, IntensityVolume) else np.asarray(W, dtype=float)
    n = values.shape[0]
    c = n // 2
    g = np.indices((n, n, n), dtype=float).reshape(3, -1).T - c
    pts = g @ np.asarray(rotmat).T + c
    vals, _ = kernels.interp_points(values, pts)
    return vals.reshape(values.shape)


def _rotated_samples(values, pts_centered, rotmats, c):
    out = np.empty((len(rotmats), len(pts_centered)))
    for j, R in enumerate(rotmats):
        out[j] = kernels.interp_points(values, pts_centered @ R.T + c)[0]
    return out


def _corr_rows(A, b):
    A = A - A.mean(axis=1, keepdims=True)
    b = b - b.mean()
    den = np.sqrt((A * A).sum(1) * (b * b).sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, A @ b / den, -np.inf)


def align_volume(ref, vol, grid_n=3, n_samples=4000, r_min=3.0, seed=0, refine_steps=12):
    """Rotation ``R`` maximising the correlation of ``vol(R x)`` with ``ref(x)``.

    Compared on a seeded sample of observed voxels in the shell band
    ``r_min <= |x| < n / 2 - 1`` (log intensities, so speckles far from the
    centre count). Grid search at ``grid_n`` followed by a shrinking local
    random search. Returns ``(rotated IntensityVolume, quaternion, corr)``.
    """
    n = ref.n_side
    c = n // 2
    r = radial_index(n)
    band = (r >= r_min) & (r < n // 2 - 1) & ref.observed
    idx = np.flatnonzero(band)
    rng = substream(seed, "post", 0)
    pick = rng.choice(idx, size=min(n_samples, idx.size), replace=False)
    pts = np.array(np.unravel_index(pick, ref.values.shape), dtype=float).T - c
    floor = 1e-6 * max(ref.values.max(), 1e-300)
    target = np.log(ref.values.reshape(-1)[pick] + floor)
    vv = np.log(np.maximum(vol.values, 0.0) + floor)

    grid = build_rotation_grid(grid_n)
    corr = np.empty(len(grid))
    for s in range(0, len(grid), 256):
        mats = grid.matrices[s:s + 256]
        corr[s:s + 256] = _corr_rows(_rotated_samples(vv, pts, mats, c), target)
    best_q = grid.quaternions[np.argmax(corr)]
    best_c = corr.max()
    width = np.radians(36.0 / grid_n)
    for _ in range(refine_steps):
        axes = _unit_vectors(rng, 32)
        ang = rng.uniform(-width, width, size=32)
        dq = np.column_stack([np.cos(ang / 2), axes * np.sin(ang / 2)[:, None]])
        cand = quat_multiply(best_q[None, :], dq)
        cc = _corr_rows(_rotated_samples(vv, pts, quat_to_matrix(cand), c), target)
        k = int(np.argmax(cc))
        if cc[k] > best_c:
            best_c, best_q = cc[k], cand[k]
        else:
            width *= 0.6
    R = quat_to_matrix(best_q)
    out = rotate_volume(vol, R)
    weights = None
    if vol.weights is not None:
        weights = rotate_volume(vol.weights, R)
    return IntensityVolume(np.maximum(out, 0.0), vol.q_step, weights), best_q, float(best_c)


# ---------------------------------------------------------------------------
# bootstrap


@dataclass
class BootstrapEnsemble:
    runs: list
    mean: IntensityVolume
    seeds: list
    resamples: list
    dropped: list
    alignment_corr: list


def _derived_seed(seed, r):
    """EMC seed of bootstrap run ``r`` (keyed apart from the resample stream)."""
    key = [int(seed), STAGES["bootstrap"], int(r), 1]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def bootstrap_resample(M, seed, r):
    """With-replacement resample of ``range(M)`` for bootstrap run ``r``."""
    return np.sort(substream(seed, "bootstrap", r).integers(0, M, size=M))


def bootstrap_emc(patterns, geom, config, B, seed, align=True, align_kwargs=None):
    """``B`` EMC runs on resampled pattern sets, rotationally aligned to run 0."""
    if B < 2:
        raise PostprocError("bootstrap needs B >= 2")
    M = len(patterns)
    runs, seeds, res, dropped, corrs = [], [], [], [], []

    for r in range(B):
        idx = bootstrap_resample(M, seed, r)
        s = _derived_seed(seed, r)
        sub = patterns[idx] if isinstance(patterns, PatternSet) else np.asarray(patterns)[idx]
        try:
            st = run_emc(sub, geom, config, seed=s)
        except EmcDivergence as exc:
            log.warning("bootstrap run %d dropped: %s", r, exc)
            dropped.append(r)
            continue
        model = st.model
        if align and runs:
            model, _, cc = align_volume(runs[0], model, **(align_kwargs or {}))
            corrs.append(cc)
        else:
            corrs.append(1.0)
        runs.append(model)
        seeds.append(s)
        res.append(idx)
    if len(runs) < 2:
        raise PostprocError("fewer than two bootstrap runs survived")
    return BootstrapEnsemble(runs, ensemble_mean(runs), seeds, res, dropped, corrs)


def ensemble_mean(runs):
    vals = np.mean([w.values for w in runs], axis=0)
    wts = [w.weights for w in runs]
    weights = None if any(w is None for w in wts) else np.mean(wts, axis=0)
    return IntensityVolume(vals, runs[0].q_step, weights)


def _common_observed(runs):
    obs = np.ones(runs[0].values.shape, dtype=bool)
    for w in runs:
        obs &= w.observed
    return obs


def fourier_uncertainty(ens, shells=None):
    """Per shell: radial mean of ``sqrt(mean_r (W_r - W_m)^2)`` over the shell PSD of ``W_m``."""
    runs = ens.runs
    if len(runs) < 2:
        raise PostprocError("need at least two runs")
    Wm = ens.mean
    shells = _shells_for(Wm, shells)
    obs = _common_observed(runs)
    dev = np.sqrt(np.mean([(w.values - Wm.values) ** 2 for w in runs], axis=0))
    num = shell_mean(dev, shells, obs)
    psd = shell_mean(Wm.values, shells, obs)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(psd > 0, num / psd, np.nan)
    return out


def edge_trend(curve):
    """Spearman rank correlation of a shell curve with shell index (nan skipped)."""
    curve = np.asarray(curve, dtype=float)
    ok = np.isfinite(curve)
    return float(spearmanr(np.flatnonzero(ok), curve[ok]).statistic)


@dataclass
class UncertaintyCurves:
    fourier: np.ndarray
    real_total: np.ndarray
    real_bias: np.ndarray
    real_std: np.ndarray
    r50: float = float("nan")
    r100: float = float("nan")


def _modulus_ft(x):
    from .phase import _centered_ft

    return np.abs(_centered_ft(np.asarray(x.voxels if isinstance(x, DensityVolume) else x)))


def real_uncertainty(O_a, replicas, shells=None, fourier=None):
    """Bias/spread decomposition of replica Fourier moduli around ``O_a``.

    With ``A_x = |FT(x)|`` and ``A_m`` the replica mean, per voxel
    ``mean_r (A_a - A_r)^2 = (A_a - A_m)^2 + Var_r(A_r)``. Each term is
    shell averaged separately and the square root taken, so
    ``real_total^2 = real_bias^2 + real_std^2`` holds per shell; all three
    are divided by the shell mean of ``A_a``.
    """
    if len(replicas) < 2:
        raise PostprocError("need at least two replicas")
    Aa = _modulus_ft(O_a)
    Ar = np.array([_modulus_ft(r) for r in replicas])
    Am = Ar.mean(axis=0)
    shells = radial_shells(Aa.shape[0]) if shells is None else shells
    total = shell_mean(((Aa[None] - Ar) ** 2).mean(axis=0), shells)
    bias = shell_mean((Aa - Am) ** 2, shells)
    var = shell_mean(((Ar - Am[None]) ** 2).mean(axis=0), shells)
    psd = shell_mean(Aa, shells)
    with np.errstate(divide="ignore", invalid="ignore"):
        norm = np.where(psd > 0, 1.0 / psd, np.nan)
    four = np.full(shells.n_shells, np.nan) if fourier is None else np.asarray(fourier)
    return UncertaintyCurves(four, np.sqrt(total) * norm, np.sqrt(bias) * norm,
                             np.sqrt(var) * norm)


def shell_relative_difference(W, truth, shells=None, mask=None):
    """Per shell: mean ``|W - truth|`` over the truth's shell mean (observed in both)."""
    shells = _shells_for(truth, shells)
    m = truth.observed & W.observed if mask is None else mask
    diff = shell_mean(np.abs(W.values - truth.values), shells, m)
    psd = shell_mean(truth.values, shells, m)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(psd > 0, diff / psd, np.nan)


def relative_shell_difference(W, truth, shells=None, mask=None):
    """Intensity-weighted mean of the per-shell relative difference.

    Each shell counts in proportion to its share of the truth's total
    intensity, so photon-starved outer shells (where the truth is almost
    zero) cannot dominate. Equals ``sum |W - truth| / sum truth`` over the
    shells ``1 .. n // 2 - 1``.
    """
    shells = _shells_for(truth, shells)
    m = truth.observed & W.observed if mask is None else mask
    m = m & (shells.membership >= 1)
    tot = truth.values[m].sum()
    if tot <= 0:
        raise PostprocError("truth has no intensity on the compared shells")
    return float(np.abs(W.values - truth.values)[m].sum() / tot)


def r_limits(vol_truth, patterns, geom, fractions=(0.0, 0.5, 1.0), seed=0, grid=None,
             merge_mask=None, friedel=True):
    """Error limits from merging with a fraction of rotations scrambled.

    For each fraction ``f``, a seeded ``f`` share of the patterns is inserted
    at random rotations (drawn from ``grid`` if given, else uniformly) and
    the rest at their true rotations, all scaled by their true fluence.
    Returns ``{f: relative shell difference to vol_truth}``.
    """
    if not isinstance(patterns, PatternSet) or not patterns.has_truth:
        raise PostprocError("r_limits needs patterns with true rotations")
    M = len(patterns)
    n = geom.n_side
    mask = np.ones((n, n), dtype=bool) if merge_mask is None else merge_mask
    out = {}
    for i, f in enumerate(fractions):
        rng = substream(seed, "limits", i)
        k = int(round(f * M))
        scr = rng.choice(M, size=k, replace=False)
        rots = patterns.rotations.copy()
        if grid is not None:
            rots[scr] = grid.quaternions[rng.integers(0, len(grid), size=k)]
        else:
            rots[scr] = random_quaternions(rng, k)
        merged = merge_at_rotations(patterns.counts, rots, patterns.fluences, geom, mask,
                                    vol_truth.n_side, vol_truth.q_step, friedel=friedel)
        out[f] = relative_shell_difference(merged, vol_truth)
    return out


# ---------------------------------------------------------------------------
# shape


@dataclass
class ShapeReport:
    D_r: float
    D_mean: float
    D_max: float
    D_min: float
    contrast: float
    threshold_frac: float
    volume_voxels: int


def sphere_equivalent_diameter(n_voxels, voxel_nm):
    """``2 m (3 V / 4 pi)^(1/3)``."""
    return 2.0 * voxel_nm * (3.0 * n_voxels / (4.0 * np.pi)) ** (1.0 / 3.0)


def _exit_distance(values, thr, origin, direction, step, t_max):
    t = np.arange(0.0, t_max + step, step)
    pts = origin[None, :] + t[:, None] * direction[None, :]
    v, ok = kernels.interp_points(values, pts)
    v = np.where(ok, v, 0.0)
    below = np.flatnonzero(v < thr)
    if below.size == 0:
        return t[-1]
    k = below[0]
    if k == 0:
        return 0.0
    # linear crossing between the last sample above and the first below
    a, b = v[k - 1], v[k]
    return t[k - 1] + step * (a - thr) / (a - b)


def shape_report(h, threshold_frac=0.1, n_pairs=300, voxel_nm=None, seed=0, step=0.25,
                 contrast_value=float("nan")):
    """Sphere-equivalent and chord diameters of the thresholded density.

    ``D_r`` comes from the count of voxels above ``threshold_frac`` of the
    maximum. Chords run through the centroid of that set along ``n_pairs``
    seeded random directions; each chord ends where the trilinear density
    falls below the threshold on both sides.
    """
    if not 0.0 < threshold_frac < 1.0:
        raise PostprocError("threshold_frac must lie in (0, 1)")
    vals = np.abs(h.voxels if isinstance(h, DensityVolume) else np.asarray(h)).astype(float)
    m = voxel_nm if voxel_nm is not None else getattr(h, "voxel_size", 1.0)
    thr = threshold_frac * vals.max()
    inside = vals > thr
    V = int(inside.sum())
    if V == 0 or vals.max() <= 0:
        raise PostprocError("empty thresholded set")
    centroid = np.array(np.nonzero(inside), dtype=float).mean(axis=1)
    rng = substream(seed, "shape", 0)
    dirs = _unit_vectors(rng, n_pairs)
    t_max = float(np.sqrt(3.0) * vals.shape[0])
    chords = np.array([_exit_distance(vals, thr, centroid, d, step, t_max)
                       + _exit_distance(vals, thr, centroid, -d, step, t_max) for d in dirs])
    D = chords * m
    return ShapeReport(sphere_equivalent_diameter(V, m), float(D.mean()), float(D.max()),
                       float(D.min()), float(contrast_value), threshold_frac, V)
