"""Expansion-maximization-compression under the scaled-Poisson model.

Pattern ``k`` is modelled as Poisson around ``phi_jk * W_ij``, where ``W_ij``
is the Ewald slice of the current model at rotation ``j``. One iteration:

* expand: slice the model at every grid rotation;
* maximize: per (rotation, pattern) ML fluence ``phi_jk = sum_i K_ik / sum_i W_ij``
  and posterior ``P_jk`` over rotations (probability mask only);
* compress: deposit every pattern, scaled by ``1 / phi_jk`` and weighted by
  ``P_jk``, back into the volume (merge mask only).

Slicing and merging run over chunks of rotations so the (rotations x pixels)
matrices never exist in full. Log-likelihoods omit the ``-log K!`` term,
which is constant per pattern.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .geometry import (DetectorGeometry, build_rotation_grid, circular_mask, pixel_qvox,
                       quat_multiply, quat_conj, strip_mask, volume_q_step)
from .rng import substream
from .simulate import DiffractionPattern, PatternSet
from .volumes import IntensityVolume

log = logging.getLogger(__name__)


class EmcError(RuntimeError):
    pass


class EmcDivergence(EmcError):
    pass


def default_masks(n_side, reference_side=256, beamstop_px=39.0, strip_px=5):
    """Probability and merge masks scaled from a ``reference_side`` grid.

    The probability mask drops a central disc (``beamstop_px`` across at the
    reference size) and the detector gap strip; the merge mask drops only
    the strip.
    """
    scale = n_side / reference_side
    strip = strip_mask(n_side, max(1, int(round(strip_px * scale))) if strip_px else 0)
    prob = circular_mask(n_side, beamstop_px * scale) & strip
    return prob, strip


@dataclass
class EmcConfig:
    rotation_n: int = 4
    n_vol: int = 64
    prob_mask: np.ndarray = field(default=None, repr=False)
    merge_mask: np.ndarray = field(default=None, repr=False)
    stop_delta: float = 1e-3
    max_iter: int = 50
    binning: int = 1
    zero_pad_px: int = 0
    final_binning: int = None
    init_subsample: int = 200
    init_noise: float = 0.01
    floor_frac: float = 1e-10
    sparse_cut: float = 1e-12
    friedel: bool = True
    divergence_factor: float = 5.0
    divergence_warmup: int = 5
    chunk_rotations: int = 512
    fix_scale: bool = True
    beta_start: float = 1e-4
    beta_factor: float = 2.0

    def __post_init__(self):
        if not self.stop_delta > 0:
            raise ValueError("stop_delta must be > 0")
        if self.binning < 1:
            raise ValueError("binning must be >= 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0 < self.beta_start <= 1 or self.beta_factor <= 1:
            raise ValueError("need 0 < beta_start <= 1 and beta_factor > 1")

    def beta(self, iteration):
        """Inverse temperature applied to log-likelihoods at a 0-based iteration."""
        return min(1.0, self.beta_start * self.beta_factor ** iteration)

    def masks(self, n_side):
        prob, merge = default_masks(n_side)
        prob = prob if self.prob_mask is None else np.asarray(self.prob_mask, dtype=bool)
        merge = merge if self.merge_mask is None else np.asarray(self.merge_mask, dtype=bool)
        if prob.shape != (n_side, n_side) or merge.shape != (n_side, n_side):
            raise ValueError("mask shape does not match the (binned) detector")
        return prob, merge


@dataclass
class EmcState:
    model: IntensityVolume
    probabilities: np.ndarray = None
    fluences: np.ndarray = None
    iteration: int = 0
    delta_history: list = field(default_factory=list)
    loglik_history: list = field(default_factory=list)
    converged: bool = False


# ---------------------------------------------------------------------------
# binning


def bin_counts(counts, b):
    """Sum ``b x b`` blocks over the last two axes; trailing partial blocks dropped."""
    counts = np.asarray(counts)
    if b == 1:
        return counts.copy()
    n = counts.shape[-1] // b
    c = counts[..., :n * b, :n * b]
    return c.reshape(c.shape[:-2] + (n, b, n, b)).sum(axis=(-3, -1), dtype=counts.dtype)


def bin_mask(mask, b):
    """A binned pixel is used only if every covered pixel is used."""
    mask = np.asarray(mask, dtype=bool)
    if b == 1:
        return mask.copy()
    n = mask.shape[-1] // b
    m = mask[..., :n * b, :n * b]
    return m.reshape(m.shape[:-2] + (n, b, n, b)).all(axis=(-3, -1))


def bin_pattern(pattern, b):
    """Bin a pattern, a ``PatternSet`` or a bare count array by ``b``."""
    if b < 1:
        raise ValueError("binning factor must be >= 1")
    if isinstance(pattern, PatternSet):
        return PatternSet(bin_counts(pattern.counts, b), pattern.rotations,
                          pattern.fluences, pattern.tags)
    if isinstance(pattern, DiffractionPattern):
        return DiffractionPattern(bin_counts(pattern.counts, b), pattern.true_rotation,
                                  pattern.true_fluence, pattern.dataset_tag)
    return bin_counts(pattern, b)


# ---------------------------------------------------------------------------
# individual steps on explicit arrays


def _center(n_vol):
    return np.full(3, n_vol // 2, dtype=float)


def expand(model, grid, geom):
    """All Ewald slices of ``model``: returns ``(slices (J, n, n), valid)``."""
    mats = grid.matrices if hasattr(grid, "matrices") else np.asarray(grid)
    vals, valid = kernels.slice_volume(model.values, mats, pixel_qvox(geom, model.q_step),
                                       _center(model.n_side))
    shape = (len(mats), geom.n_side, geom.n_side)
    return np.maximum(vals, 0.0).reshape(shape), valid.reshape(shape)


def _flat(a, lead):
    a = np.asarray(a, dtype=float)
    return a.reshape(lead, -1)


def m_step_fluence(slices, patterns, prob_mask, P=None):
    """ML fluence scale ``phi_jk = sum_i K_ik / sum_i W_ij`` over the probability mask.

    Rotations whose masked slice sum is zero get ``phi = nan`` (excluded).
    ``P`` is accepted for interface symmetry; the closed form does not need it.
    """
    K = _flat(_counts(patterns), len(_counts(patterns)))
    W = _flat(slices, len(slices))
    m = np.asarray(prob_mask, dtype=bool).reshape(-1)
    s = W[:, m].sum(axis=1)
    n = K[:, m].sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(s[:, None] > 0, n[None, :] / s[:, None], np.nan)
    return phi


def _counts(patterns):
    if isinstance(patterns, PatternSet):
        return patterns.counts
    return np.asarray(patterns)


def _loglik_block(logW, Wsum, K, Ksum):
    """Profile log-likelihood ``sum_i K log W - N log S + N log N - N`` for a block."""
    ll = logW @ K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        nlogn = np.where(Ksum > 0, Ksum * np.log(np.where(Ksum > 0, Ksum, 1.0)), 0.0)
        ll += nlogn[None, :] - Ksum[None, :]
        ll -= Ksum[None, :] * np.log(Wsum)[:, None]
    return ll


def log_likelihoods(slices, patterns, fluences, prob_mask, floor=None):
    """``sum_{i in mask} [K_ik log(W_ij phi_jk) - W_ij phi_jk]`` for every (j, k)."""
    K = _flat(_counts(patterns), len(_counts(patterns)))
    W = _flat(slices, len(slices))
    m = np.asarray(prob_mask, dtype=bool).reshape(-1)
    K, W = K[:, m], W[:, m]
    if floor is None:
        floor = 1e-10 * max(W.mean(), np.finfo(float).tiny)
    W = np.maximum(W, floor)
    phi = np.asarray(fluences, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        logphi = np.where(phi > 0, np.log(np.where(phi > 0, phi, 1.0)), -np.inf)
        ll = np.log(W) @ K.T + K.sum(axis=1)[None, :] * logphi - phi * W.sum(axis=1)[:, None]
    ll = np.where(K.sum(axis=1)[None, :] == 0, -phi * W.sum(axis=1)[:, None], ll)
    return ll


def normalize_posterior(loglik, log_weights=None):
    """Per-pattern softmax over rotations; returns ``(P, pattern log-evidence)``.

    Patterns with no finite log-likelihood get a uniform row and evidence
    ``nan`` (flagged, excluded from compression by the caller).
    """
    ll = np.array(loglik, dtype=float)
    if log_weights is not None:
        ll = ll + np.asarray(log_weights)[:, None]
    ll[~np.isfinite(ll)] = -np.inf
    ok = np.isfinite(ll).any(axis=0)
    evidence = np.full(ll.shape[1], np.nan)
    P = np.full(ll.shape, 1.0 / ll.shape[0])
    if ok.any():
        evidence[ok] = logsumexp(ll[:, ok], axis=0)
        P[:, ok] = np.exp(ll[:, ok] - evidence[ok][None, :])
        P[:, ok] /= P[:, ok].sum(axis=0, keepdims=True)
    if not ok.all():
        log.warning("%d patterns with nonfinite likelihood excluded", int((~ok).sum()))
    return P, evidence


def e_step(slices, patterns, fluences, prob_mask, log_weights=None, floor=None):
    """Rotation posterior ``P_jk`` (columns sum to one)."""
    ll = log_likelihoods(slices, patterns, fluences, prob_mask, floor)
    return normalize_posterior(ll, log_weights)[0]


def _friedel(a):
    axes = (0, 1, 2)
    return np.roll(np.flip(a, axis=axes), 1, axis=axes)


def _finish(vsum, vwt, q_step, friedel):
    if friedel:
        vsum = vsum + _friedel(vsum)
        vwt = vwt + _friedel(vwt)
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.where(vwt > 0, vsum / np.where(vwt > 0, vwt, 1.0), 0.0)
    return IntensityVolume(values, q_step, vwt)


def _merge_coefficients(P, phi):
    with np.errstate(divide="ignore", invalid="ignore"):
        use = np.isfinite(phi) & (phi > 0)
        coef = np.where(use, P / np.where(use, phi, 1.0), 0.0)
    rows = (P * use).sum(axis=1)
    return coef, rows


def compress(patterns, P, fluences, grid, geom, merge_mask, n_vol, q_step, friedel=False,
             chunk_rotations=512):
    """Tomographic merge of patterns under posterior ``P`` and fluences ``phi``.

    Voxel value = sum_jk P_jk K_ik / phi_jk (trilinear) / sum_jk P_jk (same
    weights). Voxels that receive no weight are left at zero and flagged
    unobserved through ``weights``.
    """
    K = _flat(_counts(patterns), len(_counts(patterns)))
    mats = grid.matrices if hasattr(grid, "matrices") else np.asarray(grid).reshape(-1, 3, 3)
    coef, rows = _merge_coefficients(np.asarray(P, dtype=float), np.asarray(fluences, dtype=float))
    vsum = np.zeros((n_vol,) * 3)
    vwt = np.zeros((n_vol,) * 3)
    qv = pixel_qvox(geom, q_step)
    mask = np.asarray(merge_mask, dtype=bool).reshape(-1)
    active = np.flatnonzero(rows > 0)
    for s in range(0, len(active), chunk_rotations):
        idx = active[s:s + chunk_rotations]
        vals = coef[idx] @ K
        kernels.merge_slices(vsum, vwt, mats[idx], qv, _center(n_vol), vals, rows[idx], mask)
    return _finish(vsum, vwt, q_step, friedel)


def merge_at_rotations(patterns, rotations, fluences, geom, merge_mask, n_vol, q_step,
                       friedel=False):
    """Insert each pattern at one known rotation (quaternions), scaled by 1 / fluence."""
    from .geometry import quat_to_matrix

    K = _flat(_counts(patterns), len(_counts(patterns)))
    mats = quat_to_matrix(np.asarray(rotations, dtype=float).reshape(-1, 4))
    phi = np.asarray(fluences, dtype=float).reshape(-1)
    vsum = np.zeros((n_vol,) * 3)
    vwt = np.zeros((n_vol,) * 3)
    kernels.merge_slices(vsum, vwt, mats, pixel_qvox(geom, q_step), _center(n_vol),
                         K / phi[:, None], np.ones(len(K)), np.asarray(merge_mask).reshape(-1))
    return _finish(vsum, vwt, q_step, friedel)


# ---------------------------------------------------------------------------
# full iteration


@dataclass
class _Problem:
    """Static per-run data: binned counts, masks and the rotation grid."""

    K: np.ndarray
    geom: DetectorGeometry
    grid: object
    prob: np.ndarray
    merge: np.ndarray
    q_step: float
    n_vol: int

    @property
    def qvox(self):
        return pixel_qvox(self.geom, self.q_step)


def _problem(patterns, geom, config, grid=None):
    b = config.binning
    counts = bin_counts(_counts(patterns), b)
    g = geom.binned(b) if b > 1 else geom
    if counts.shape[-1] != g.n_side:
        raise ValueError("pattern grid does not match detector geometry")
    prob, merge = config.masks(g.n_side)
    grid = grid if grid is not None else build_rotation_grid(config.rotation_n)
    q_step = volume_q_step(g, config.n_vol)
    K = counts.reshape(len(counts), -1).astype(float)
    return _Problem(K, g, grid, prob.reshape(-1), merge.reshape(-1), q_step, config.n_vol)


def _e_and_phi(model, pr, config):
    """Chunked expand + fluence + likelihood; returns (loglik, phi) as (J, M)."""
    J, M = len(pr.grid), len(pr.K)
    qv = pr.qvox[pr.prob]
    Kp = pr.K[:, pr.prob]
    Ksum = Kp.sum(axis=1)
    floor = config.floor_frac * model.values[model.observed].mean()
    loglik = np.empty((J, M))
    phi = np.empty((J, M))
    center = _center(model.n_side)
    for s in range(0, J, config.chunk_rotations):
        mats = pr.grid.matrices[s:s + config.chunk_rotations]
        W, valid = kernels.slice_volume(model.values, mats, qv, center)
        if not valid.all():
            raise EmcError("detector q-range exceeds the model volume")
        W = np.maximum(W, floor)
        Wsum = W.sum(axis=1)
        loglik[s:s + len(mats)] = _loglik_block(np.log(W), Wsum, Kp, Ksum)
        phi[s:s + len(mats)] = Ksum[None, :] / Wsum[:, None]
    return loglik, phi


def posterior(model, patterns, geom, config, grid=None):
    """Untempered posterior ``P`` and per-rotation fluences ``phi`` (both rotations x patterns) under a fixed model."""
    pr = _problem(patterns, geom, config, grid)
    loglik, phi = _e_and_phi(model, pr, config)
    return normalize_posterior(loglik, np.log(pr.grid.weights))[0], phi


def mean_fluence(P, phi):
    """Posterior-averaged fluence ``mean_k sum_j P_jk phi_jk`` (nan rotations skipped)."""
    per = np.nansum(np.asarray(P) * np.asarray(phi), axis=0)
    return float(per.mean())


def _sparsify(P, cut):
    if cut <= 0:
        return P
    P = np.where(P >= cut * P.max(axis=0, keepdims=True), P, 0.0)
    return P / P.sum(axis=0, keepdims=True)


def emc_iterate(state, patterns, config, geom, grid=None, _pr=None):
    """One E/M/C cycle; returns a new state with delta and log-likelihood appended."""
    pr = _pr if _pr is not None else _problem(patterns, geom, config, grid)
    loglik, phi = _e_and_phi(state.model, pr, config)
    beta = config.beta(state.iteration)
    logw = np.log(pr.grid.weights)
    P, evidence = normalize_posterior(loglik, logw)
    if beta < 1.0:
        P = normalize_posterior(beta * loglik, logw)[0]
    P = _sparsify(P, config.sparse_cut)
    P[:, ~np.isfinite(evidence)] = 0.0
    new = compress(pr.K, P, phi, pr.grid, pr.geom, pr.merge, pr.n_vol, pr.q_step,
                   friedel=config.friedel, chunk_rotations=config.chunk_rotations)
    # W and phi are only determined up to a common scale; pin mean fluence to 1
    scale = mean_fluence(P, phi)
    if config.fix_scale and np.isfinite(scale) and scale > 0:
        new = IntensityVolume(new.values * scale, new.q_step, new.weights)
        phi = phi / scale
    old = state.model.values
    delta = float(np.abs(new.values - old).sum() / max(np.abs(old).sum(), np.finfo(float).tiny))
    P[:, ~np.isfinite(evidence)] = 1.0 / len(P)
    return EmcState(new, P, phi, state.iteration + 1, state.delta_history + [delta],
                    state.loglik_history + [float(np.nansum(evidence))],
                    beta == 1.0 and delta < config.stop_delta)


def initial_model(patterns, geom, config, seed, grid=None, _pr=None):
    """Rotationally smeared average of a seeded pattern subsample, times 1 +- noise."""
    pr = _pr if _pr is not None else _problem(patterns, geom, config, grid)
    rng = substream(seed, "emc", 0)
    M = len(pr.K)
    sub = np.sort(rng.choice(M, size=min(config.init_subsample, M), replace=False))
    J = len(pr.grid)
    P = np.full((J, len(sub)), 1.0 / J)
    model = compress(pr.K[sub], P, np.ones_like(P), pr.grid, pr.geom, pr.merge, pr.n_vol,
                     pr.q_step, friedel=config.friedel, chunk_rotations=config.chunk_rotations)
    noise = 1.0 + config.init_noise * rng.uniform(-1.0, 1.0, size=model.values.shape)
    return IntensityVolume(model.values * noise, model.q_step, model.weights)


def run_emc(patterns, geom, config, seed=0, init=None, grid=None, callback=None):
    """Iterate EMC to convergence (``delta < stop_delta``) or ``max_iter``.

    With ``beta_start < 1`` the posterior is tempered (log-likelihoods times
    ``beta``, growing by ``beta_factor`` per iteration up to 1), which keeps
    early high-count iterations from locking onto the random start;
    convergence and divergence are only judged at ``beta = 1``.

    Raises ``EmcDivergence`` if, ``divergence_warmup`` iterations after the
    tempering ends, the update delta exceeds ``divergence_factor`` times its
    running minimum.
    """
    pr = _problem(patterns, geom, config, grid)
    model = init if init is not None else initial_model(patterns, geom, config, seed, _pr=pr)
    state = EmcState(model)
    best = np.inf
    settled = 0
    for _ in range(config.max_iter):
        t0 = time.perf_counter()
        state = emc_iterate(state, patterns, config, geom, _pr=pr)
        d = state.delta_history[-1]
        log.info("emc iter %d delta %.3e loglik %.6e (%.1fs)", state.iteration, d,
                 state.loglik_history[-1], time.perf_counter() - t0)
        if callback is not None:
            callback(state)
        if state.converged:
            break
        if config.beta(state.iteration - 1) < 1.0:
            continue
        settled += 1
        if settled > config.divergence_warmup and d > config.divergence_factor * best:
            raise EmcDivergence(
                f"delta {d:.3e} at iteration {state.iteration} exceeds "
                f"{config.divergence_factor}x its minimum {best:.3e}")
        if settled >= config.divergence_warmup:
            best = min(best, d)
    if config.final_binning is not None:
        state.model = refine_final(patterns, geom, state, config, pr.grid)
    return state


def refine_final(patterns, geom, state, config, grid):
    """Rerun compression at ``final_binning`` with ``zero_pad_px`` of zero padding.

    The output volume side grows with the finer pixel grid so the voxel size
    in q matches the finer detector.
    """
    b = config.final_binning
    counts = bin_counts(_counts(patterns), b)
    g = geom.binned(b)
    pad = config.zero_pad_px
    if pad:
        counts = np.pad(counts, ((0, 0), (pad, pad), (pad, pad)))
        g = g.padded(pad)
    _, merge = config.masks(geom.binned(b).n_side)
    if pad:
        merge = np.pad(merge, pad, constant_values=True)
    n_vol = int(round(config.n_vol * config.binning / b)) + 2 * pad
    n_vol += n_vol % 2
    q_step = volume_q_step(g, n_vol)
    return compress(counts, state.probabilities, state.fluences, grid, g, merge, n_vol, q_step,
                    friedel=config.friedel, chunk_rotations=config.chunk_rotations)


# ---------------------------------------------------------------------------
# orientation statistics


def most_likely_stats(P, eps_definite=1e-3):
    """Most likely probability per pattern ``M_k = max_j P_jk`` and summaries."""
    P = np.asarray(P, dtype=float)
    Mk = P.max(axis=0)
    return {
        "M_k": Mk,
        "frac_definite": float(np.mean(Mk > 1.0 - eps_definite)),
        "min_M": float(Mk.min()),
    }


def _mean_quaternion(q):
    """Sign-invariant average: principal eigenvector of ``sum q q^T``."""
    w, v = np.linalg.eigh(q.T @ q)
    return v[:, -1]


def _errors_for_gauge(g, est, st):
    ge = quat_multiply(g[None, :], est)
    dots = np.abs(np.einsum("skd,kd->sk", st, ge))
    best = np.argmax(dots, axis=0)
    d = dots[best, np.arange(len(est))]
    return np.degrees(2.0 * np.arccos(np.clip(d, 0.0, 1.0))), best


def orientation_errors(est_quats, true_quats, symmetry=None, n_ref=25, seed=0,
                       inlier_deg=15.0, refine_iter=5):
    """Per-pattern angular error (deg) after removing the model's global rotation.

    EMC recovers the model only up to a global rotation ``G``, and a
    symmetric particle makes ``R`` and ``S R`` indistinguishable for every
    symmetry ``S``. The error of pattern k is
    ``min_S angle(G R_est_k, S R_true_k)``. ``G`` is seeded from candidates
    implied by ``n_ref`` reference patterns (best median error), then
    refined as the quaternion mean over inlier patterns.
    """
    est = np.asarray(est_quats, dtype=float).reshape(-1, 4)
    true = np.asarray(true_quats, dtype=float).reshape(-1, 4)
    sym = np.array([[1.0, 0, 0, 0]]) if symmetry is None else np.asarray(symmetry)
    st = quat_multiply(sym[:, None, :], true[None, :, :])  # (S, K, 4)
    rng = np.random.default_rng(seed)
    refs = rng.choice(len(est), size=min(n_ref, len(est)), replace=False)
    g_best, best_score = None, np.inf
    for k in refs:
        for s in sym:
            g = quat_multiply(s, quat_multiply(true[k], quat_conj(est[k])))
            score = np.median(_errors_for_gauge(g, est, st)[0])
            if score < best_score:
                best_score, g_best = score, g
    err, which = _errors_for_gauge(g_best, est, st)
    for _ in range(refine_iter):
        inl = np.flatnonzero(err < inlier_deg)
        if inl.size == 0:
            break
        cand = quat_multiply(st[which[inl], inl], quat_conj(est[inl]))
        g = _mean_quaternion(cand)
        e2, w2 = _errors_for_gauge(g, est, st)
        if np.median(e2) > np.median(err):
            break
        err, which = e2, w2
    return err


def argmax_rotations(P, grid):
    return grid.quaternions[np.argmax(P, axis=0)]


def convergence_table(state):
    """Rows ``(iteration, delta, loglik)``."""
    return [(i + 1, d, l) for i, (d, l) in enumerate(zip(state.delta_history,
                                                         state.loglik_history))]


def pmatrix_summary(P):
    """Rows ``(pattern, argmax rotation index, M_k)``."""
    P = np.asarray(P)
    idx = np.argmax(P, axis=0)
    return [(k, int(idx[k]), float(P[idx[k], k])) for k in range(P.shape[1])]
