"""Stage orchestration: simulate -> classify -> emc -> phase -> post.

Each stage reads its inputs from the output directory, writes its artifacts
there and finishes with ``manifest_<stage>.json`` holding the SHA-256 of
every input and output. Artifacts depend only on the configuration (seed
included), so a rerun reproduces them byte for byte.
"""

import json
import logging
import os
import time

import numpy as np

from . import __version__
from . import classify as C
from . import emc as E
from . import io
from . import phase as PH
from . import postproc as PP
from .config import ConfigError
from .geometry import build_rotation_grid
from .volumes import DensityVolume
from .simulate import (BeamConfig, PatternSet, default_background, forward_intensity,
                       make_sphere, pad_density, photon_scale, smoothed_icosahedron)

log = logging.getLogger(__name__)

STAGES = ("simulate", "classify", "emc", "phase", "post")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class StageError(RuntimeError):
    """Stage failure carrying the CLI exit code and the failing stage."""

    def __init__(self, stage, code, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.code = code


class MissingInput(StageError):
    def __init__(self, stage, path):
        super().__init__(stage, EXIT_DATA, f"missing input {path}; run the upstream stage first")


class _Run:
    """Bookkeeping for one stage: input/output hashes and wall time."""

    def __init__(self, cfg, stage, out_dir):
        self.cfg = cfg
        self.stage = stage
        self.dir = out_dir
        self.inputs = {}
        self.outputs = {}
        self.t0 = time.perf_counter()

    def path(self, name):
        return os.path.join(self.dir, name)

    def need(self, name):
        p = self.path(name)
        if not os.path.exists(p):
            raise MissingInput(self.stage, p)
        self.inputs[name] = io.sha256_file(p)
        return p

    def wrote(self, *names):
        for name in names:
            rel = os.path.relpath(name, self.dir) if os.path.isabs(name) else name
            self.outputs[rel] = io.sha256_file(self.path(rel))

    def finish(self):
        manifest = {
            "stage": self.stage,
            "seed": int(self.cfg.seed),
            "config_sha256": self.cfg.digest(),
            "version": __version__,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "wall_time_s": round(time.perf_counter() - self.t0, 3),
        }
        with open(self.path(f"manifest_{self.stage}.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return manifest


# ---------------------------------------------------------------------------
# stages


def _particle(cfg, shape, diameter):
    vox = cfg.voxel_nm()
    s = cfg.simulate
    if shape == "sphere":
        return make_sphere(diameter, vox, s.n_density)
    return smoothed_icosahedron(diameter, vox, s.n_density)


def _stage_simulate(cfg, run):
    from .simulate import generate_dataset

    s = cfg.simulate
    geom = cfg.detector()
    rho = _particle(cfg, s.particle, s.diameter_nm)
    W = forward_intensity(rho, s.oversample)
    scale = photon_scale(W, geom, s.photons_per_pattern)
    W = W.replace(W.values * scale)
    bg = None
    if s.variant in ("Kb", "Ke"):
        r0 = s.background_r0_px if s.background_r0_px > 0 else None
        bg = default_background(geom.n_side, s.background_counts, r0_px=r0)
    beam = BeamConfig((s.fluence_min, s.fluence_max), bg, s.extra_scatter_p)
    # planted subsets get their own seeds so the main set does not depend on them
    sets = [generate_dataset(W, geom, beam, s.n_patterns, s.variant, cfg.seed)]
    if s.n_spheres:
        Ws = forward_intensity(_particle(cfg, "sphere", s.sphere_diameter_nm), s.oversample)
        sets.append(generate_dataset(Ws.replace(Ws.values * scale), geom, beam, s.n_spheres,
                                     s.variant, cfg.seed + 1))
    if s.n_weak:
        weak = BeamConfig((s.weak_fluence, s.weak_fluence), bg, s.extra_scatter_p)
        sets.append(generate_dataset(W, geom, weak, s.n_weak, s.variant, cfg.seed + 2))
    patterns = PatternSet.concatenate(sets) if len(sets) > 1 else sets[0]

    io.write_fxd(run.path("patterns.fxd"), patterns)
    io.write_fxv(run.path("truth_density.fxv"),
                 DensityVolume(pad_density(rho, s.oversample), rho.voxel_size))
    io.write_fxv(run.path("truth_intensity.fxv"), W)
    run.wrote("patterns.fxd", "truth_density.fxv", "truth_intensity.fxv")


def _stage_classify(cfg, run):
    c = cfg.classify
    patterns = io.read_fxd(run.need("patterns.fxd"))
    geom = cfg.detector()
    if c.enabled:
        bank = C.build_template_bank(
            [cfg.simulate.particle], geom, c.n_rotations, c.sizes_nm, cfg.seed,
            cfg.voxel_nm(), n_density=cfg.simulate.n_density,
            photons_per_pattern=c.bank_photon_fraction * cfg.simulate.photons_per_pattern,
            sphere_size_nm=c.sphere_size_nm, oversample=cfg.simulate.oversample,
            reference_size_nm=c.reference_size_nm)
        bank = C.compute_eigenbasis(bank, min(c.eigen_k, len(bank)))
        records = C.classify_patterns(patterns, bank, top=c.top)
        selected = C.select_patterns(records, c.e_c_max, c.fluence_min,
                                     (c.size_min_nm, c.size_max_nm))
        C.write_records_csv(run.path("records.csv"), records)
        hists = C.selection_histograms(records, c.histogram_bins, c.histogram_bins)
        C.write_histograms_csv(run.path("histograms.csv"), hists)
        run.wrote("records.csv", "histograms.csv")
    else:
        selected = list(range(len(patterns)))
    if not selected:
        raise StageError("classify", EXIT_DATA, "no pattern passed the selection cuts")
    io.write_csv(run.path("selected.csv"), ("index",), [(i,) for i in selected])
    io.write_fxd(run.path("selected.fxd"), patterns[np.asarray(selected)])
    run.wrote("selected.csv", "selected.fxd")


def emc_config(cfg):
    e = cfg.emc
    return E.EmcConfig(rotation_n=e.rotation_n, n_vol=cfg.n_vol, stop_delta=e.stop_delta,
                       max_iter=e.max_iter, binning=e.binning, friedel=e.friedel,
                       fix_scale=e.fix_scale, beta_start=e.beta_start,
                       beta_factor=e.beta_factor)


def _stage_emc(cfg, run):
    patterns = io.read_fxd(run.need("selected.fxd"))
    geom = cfg.detector()
    ecfg = emc_config(cfg)
    grid = build_rotation_grid(ecfg.rotation_n)
    state = E.run_emc(patterns, geom, ecfg, seed=cfg.seed, grid=grid)
    io.write_fxv(run.path("model.fxv"), state.model)
    io.write_csv(run.path("convergence.csv"), ("iteration", "delta", "loglik"),
                 [(i, repr(float(d)), repr(float(l))) for i, d, l in E.convergence_table(state)])
    io.write_csv(run.path("orientations.csv"), ("pattern", "rotation_index", "M_k"),
                 [(k, j, repr(m)) for k, j, m in E.pmatrix_summary(state.probabilities)])
    stats = E.most_likely_stats(state.probabilities)
    io.write_csv(run.path("emc_summary.csv"),
                 ("iterations", "converged", "final_delta", "n_rotations", "frac_definite",
                  "min_M"),
                 [(state.iteration, int(state.converged), repr(float(state.delta_history[-1])),
                   len(grid), repr(float(stats["frac_definite"])),
                   repr(float(stats["min_M"])))])
    run.wrote("model.fxv", "convergence.csv", "orientations.csv", "emc_summary.csv")


def _phase_input(cfg, W):
    p = cfg.phase
    if p.background_beta > 0:
        _, W = PP.shell_background(W, beta=p.background_beta)
    if p.hann:
        W = PP.hann_window_3d(W)
    return W


def _stage_phase(cfg, run):
    p = cfg.phase
    W = _phase_input(cfg, io.read_fxv(run.need("model.fxv")))
    diameter_vox = p.support_factor * cfg.simulate.diameter_nm / W.voxel_size
    support = PH.ball_support(W.n_side, diameter_vox)
    res = PH.phase_replicas(W, support, p.n_replicas, p.n_raar, p.n_er, p.beta, seed=cfg.seed)
    io.write_fxv(run.path("density.fxv"), res.density)
    names = ["density.fxv"]
    os.makedirs(run.path("replicas"), exist_ok=True)
    for r, rep in enumerate(res.replicas):
        name = os.path.join("replicas", f"replica_{r:03d}.fxv")
        io.write_fxv(run.path(name), rep)
        names.append(name)
    io.write_csv(run.path("phasing.csv"), ("E_f", "E_r", "resolution_nm", "n_replicas"),
                 [(repr(float(res.E_f)), repr(float(res.E_r)),
                   repr(float(res.resolution_nm)), p.n_replicas)])
    io.write_csv(run.path("prtf.csv"), ("shell", "q_inv_nm", "prtf"),
                 [(u, repr(float(q)), repr(float(v)))
                  for u, (q, v) in enumerate(zip(res.prtf_q, res.prtf_curve))])
    run.wrote(*names, "phasing.csv", "prtf.csv")


def _stage_post(cfg, run):
    p = cfg.post
    geom = cfg.detector()
    W = io.read_fxv(run.need("model.fxv"))
    h = io.read_fxv(run.need("density.fxv"))
    shells = PP.radial_shells(W.n_side)

    B, W_sub = PP.shell_background(W, shells, beta=p.background_beta)
    D = PP.shell_psd(W, shells)
    io.write_csv(run.path("background.csv"), ("shell", "B_u", "D_u"),
                 [(u, repr(float(b)), repr(float(d))) for u, (b, d) in enumerate(zip(B, D))])

    rows = []
    for label, vol in (("model", W), ("background_subtracted", W_sub)):
        c, n = PP.contrast(vol, p.contrast_lines, seed=cfg.seed, return_count=True)
        rows.append((label, repr(float(c)), n))
    io.write_csv(run.path("contrast.csv"), ("volume", "value", "n_pairs_used"), rows)

    rep = PP.shape_report(h, p.shape_threshold_frac, p.shape_pairs, seed=cfg.seed,
                          contrast_value=float(rows[0][1]))
    io.write_csv(run.path("shape.csv"),
                 ("D_r_nm", "D_mean_nm", "D_max_nm", "D_min_nm", "contrast", "threshold_frac",
                  "volume_voxels"),
                 [tuple(repr(float(v)) for v in (rep.D_r, rep.D_mean, rep.D_max, rep.D_min,
                                                 rep.contrast, rep.threshold_frac))
                  + (rep.volume_voxels,)])
    run.wrote("background.csv", "contrast.csv", "shape.csv")

    n_sh = shells.n_shells
    fourier = np.full(n_sh, np.nan)
    if p.bootstrap_runs >= 2:
        patterns = io.read_fxd(run.need("selected.fxd"))
        ens = PP.bootstrap_emc(patterns, geom, emc_config(cfg), p.bootstrap_runs, cfg.seed)
        fourier = PP.fourier_uncertainty(ens, shells)
    rep_dir = run.path("replicas")
    rep_names = sorted(os.listdir(rep_dir)) if os.path.isdir(rep_dir) else []
    replicas = [io.read_fxv(run.need(os.path.join("replicas", n))) for n in rep_names]
    if len(replicas) >= 2:
        curves = PP.real_uncertainty(h, replicas, shells, fourier)
    else:
        nan = np.full(n_sh, np.nan)
        curves = PP.UncertaintyCurves(fourier, nan, nan, nan)
    if p.limits:
        patterns = io.read_fxd(run.need("selected.fxd"))
        if patterns.has_truth:
            truth = io.read_fxv(run.need("truth_intensity.fxv"))
            _, merge = E.default_masks(geom.n_side)
            lim = PP.r_limits(truth, patterns, geom, (0.0, 0.5, 1.0), seed=cfg.seed,
                              merge_mask=merge, friedel=cfg.emc.friedel)
            curves.r50, curves.r100 = lim[0.5], lim[1.0]
    q = np.arange(n_sh) * W.q_step
    io.write_csv(run.path("uncertainty.csv"),
                 ("shell", "q_inv_nm", "fourier", "real_total", "real_bias", "real_std", "r50",
                  "r100"),
                 [(u, repr(float(q[u])), repr(float(curves.fourier[u])),
                   repr(float(curves.real_total[u])), repr(float(curves.real_bias[u])),
                   repr(float(curves.real_std[u])), repr(float(curves.r50)),
                   repr(float(curves.r100))) for u in range(n_sh)])
    run.wrote("uncertainty.csv")

    if p.export_images:
        for stem, obj in (("model_slice", W), ("density_slice", h)):
            run.wrote(*io.export_image(obj, run.path(stem)))


_RUNNERS = {
    "simulate": _stage_simulate,
    "classify": _stage_classify,
    "emc": _stage_emc,
    "phase": _stage_phase,
    "post": _stage_post,
}

_NUMERICAL = (E.EmcError, PH.PhasingError, FloatingPointError, np.linalg.LinAlgError)


def run_stage(cfg, stage, out_dir=None):
    """Run one stage; returns its manifest. Raises ``StageError`` on failure."""
    if stage not in _RUNNERS:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    out_dir = cfg.output_dir if out_dir is None else out_dir
    os.makedirs(out_dir, exist_ok=True)
    run = _Run(cfg, stage, out_dir)
    log.info("stage %s -> %s", stage, out_dir)
    try:
        _RUNNERS[stage](cfg, run)
    except StageError:
        raise
    except _NUMERICAL as exc:
        raise StageError(stage, EXIT_NUMERICAL, f"{type(exc).__name__}: {exc}") from exc
    except (ValueError, io.FormatError, OSError) as exc:
        raise StageError(stage, EXIT_DATA, f"{type(exc).__name__}: {exc}") from exc
    return run.finish()


def run_all(cfg, out_dir=None):
    return [run_stage(cfg, s, out_dir) for s in STAGES]

