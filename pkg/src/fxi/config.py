"""Pipeline configuration.

One TOML file with a section per stage. Physical quantities carry their unit
in the key name (``photon_energy_kev``, ``diameter_nm``) and are converted
once when the geometry is built. Unknown keys are rejected so that typos do
not silently fall back to defaults.
"""

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .geometry import DetectorGeometry, GeometryError, volume_q_step

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class GeometrySection:
    photon_energy_kev: float = 1.6
    detector_distance_mm: float = 581.0
    pixel_pitch_um: float = 75.0
    n_side: int = 1024
    binning: int = 16

    def validate(self):
        if self.binning < 1 or self.n_side // self.binning < 2:
            raise ConfigError("geometry.binning must leave at least 2 pixels per side")
        try:
            self.detector()
        except GeometryError as exc:
            raise ConfigError(f"geometry: {exc}") from exc

    def detector(self):
        """Detector after binning; this is the grid every stage works on."""
        g = DetectorGeometry(self.photon_energy_kev, self.detector_distance_mm,
                             self.pixel_pitch_um, self.n_side)
        return g.binned(self.binning) if self.binning > 1 else g


@dataclass
class SimulateSection:
    particle: str = "icosahedron"
    diameter_nm: float = 70.0
    n_density: int = 32
    oversample: int = 2
    variant: str = "Kf"
    n_patterns: int = 500
    photons_per_pattern: float = 3e5
    fluence_min: float = 0.9
    fluence_max: float = 1.1
    background_counts: float = 0.5
    background_r0_px: float = 0.0
    extra_scatter_p: float = 1e-3
    n_spheres: int = 0
    sphere_diameter_nm: float = 70.0
    n_weak: int = 0
    weak_fluence: float = 0.5

    def validate(self):
        if self.particle not in ("icosahedron", "sphere"):
            raise ConfigError("simulate.particle must be icosahedron or sphere")
        if self.variant not in ("K", "Kf", "Kb", "Ke"):
            raise ConfigError("simulate.variant must be K, Kf, Kb or Ke")
        if self.n_patterns < 1 or self.n_spheres < 0 or self.n_weak < 0:
            raise ConfigError("simulate pattern counts must be nonnegative (n_patterns >= 1)")
        if self.n_density < 4 or self.oversample < 1:
            raise ConfigError("simulate.n_density must be >= 4 and oversample >= 1")
        if not 0 < self.fluence_min <= self.fluence_max:
            raise ConfigError("simulate needs 0 < fluence_min <= fluence_max")
        if self.diameter_nm <= 0 or self.photons_per_pattern <= 0:
            raise ConfigError("simulate.diameter_nm and photons_per_pattern must be > 0")
        if self.background_counts < 0 or self.weak_fluence <= 0:
            raise ConfigError("simulate.background_counts >= 0 and weak_fluence > 0 required")

    @property
    def n_vol(self):
        return self.n_density * self.oversample


@dataclass
class ClassifySection:
    enabled: bool = True
    sizes_nm: list = field(default_factory=lambda: [float(s) for s in range(60, 81)])
    n_rotations: int = 100
    eigen_k: int = 50
    top: int = 5
    sphere_size_nm: float = 70.0
    reference_size_nm: float = 70.0
    bank_photon_fraction: float = 0.7
    e_c_max: float = 0.48
    fluence_min: float = 1.0
    size_min_nm: float = 67.0
    size_max_nm: float = 72.0
    histogram_bins: int = 1000

    def validate(self):
        if not self.sizes_nm:
            raise ConfigError("classify.sizes_nm must be nonempty")
        if self.n_rotations < 1 or self.eigen_k < 1 or self.top < 1:
            raise ConfigError("classify.n_rotations, eigen_k and top must be >= 1")
        if self.size_min_nm > self.size_max_nm:
            raise ConfigError("classify.size_min_nm must not exceed size_max_nm")
        if self.bank_photon_fraction <= 0:
            raise ConfigError("classify.bank_photon_fraction must be > 0")


@dataclass
class EmcSection:
    rotation_n: int = 4
    max_iter: int = 50
    stop_delta: float = 1e-3
    binning: int = 1
    beta_start: float = 1e-4
    beta_factor: float = 2.0
    friedel: bool = True
    fix_scale: bool = True

    def validate(self):
        if self.rotation_n < 1 or self.max_iter < 1 or self.binning < 1:
            raise ConfigError("emc.rotation_n, max_iter and binning must be >= 1")
        if not self.stop_delta > 0:
            raise ConfigError("emc.stop_delta must be > 0")
        if not 0 < self.beta_start <= 1 or self.beta_factor <= 1:
            raise ConfigError("emc needs 0 < beta_start <= 1 and beta_factor > 1")


@dataclass
class PhaseSection:
    n_replicas: int = 20
    n_raar: int = 600
    n_er: int = 120
    beta: float = 0.87
    support_factor: float = 1.2
    background_beta: float = 0.0
    hann: bool = False

    def validate(self):
        if self.n_replicas < 1 or self.n_raar < 0 or self.n_er < 0:
            raise ConfigError("phase.n_replicas >= 1 and iteration counts >= 0 required")
        if not 0 < self.beta < 1:
            raise ConfigError("phase.beta must lie in (0, 1)")
        if not 0 <= self.background_beta <= 1:
            raise ConfigError("phase.background_beta must lie in [0, 1]")
        if self.support_factor <= 0:
            raise ConfigError("phase.support_factor must be > 0")


@dataclass
class PostSection:
    background_beta: float = 0.5
    contrast_lines: int = 100
    shape_threshold_frac: float = 0.1
    shape_pairs: int = 300
    bootstrap_runs: int = 0
    limits: bool = True
    export_images: bool = True

    def validate(self):
        if not 0 <= self.background_beta <= 1:
            raise ConfigError("post.background_beta must lie in [0, 1]")
        if self.contrast_lines < 1 or self.shape_pairs < 1:
            raise ConfigError("post.contrast_lines and shape_pairs must be >= 1")
        if not 0 < self.shape_threshold_frac < 1:
            raise ConfigError("post.shape_threshold_frac must lie in (0, 1)")
        if self.bootstrap_runs == 1 or self.bootstrap_runs < 0:
            raise ConfigError("post.bootstrap_runs must be 0 (off) or >= 2")


_SECTIONS = {
    "geometry": GeometrySection,
    "simulate": SimulateSection,
    "classify": ClassifySection,
    "emc": EmcSection,
    "phase": PhaseSection,
    "post": PostSection,
}


@dataclass
class PipelineConfig:
    seed: int = 0
    output_dir: str = "fxi-out"
    geometry: GeometrySection = field(default_factory=GeometrySection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    classify: ClassifySection = field(default_factory=ClassifySection)
    emc: EmcSection = field(default_factory=EmcSection)
    phase: PhaseSection = field(default_factory=PhaseSection)
    post: PostSection = field(default_factory=PostSection)

    def validate(self):
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        for name in _SECTIONS:
            getattr(self, name).validate()
        n = self.detector().n_side // self.emc.binning
        if n < 2:
            raise ConfigError("emc.binning leaves fewer than 2 pixels per side")
        return self

    def detector(self):
        return self.geometry.detector()

    @property
    def n_vol(self):
        return self.simulate.n_vol

    def q_step(self):
        return volume_q_step(self.detector(), self.n_vol)

    def voxel_nm(self):
        """Real-space voxel of the (padded) density grid."""
        return 1.0 / (self.n_vol * self.q_step())

    def to_dict(self):
        return asdict(self)

    def digest(self):
        """SHA-256 of the canonical JSON form; seed included, output directory not."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _coerce(cls, name, raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in fields(cls)}
    extra = set(raw) - set(known)
    if extra:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(extra))}")
    out = {}
    defaults = cls()
    for k, v in raw.items():
        ref = getattr(defaults, k)
        try:
            if isinstance(ref, bool):
                if not isinstance(v, bool):
                    raise TypeError
                out[k] = v
            elif isinstance(ref, int):
                if isinstance(v, bool) or int(v) != v:
                    raise TypeError
                out[k] = int(v)
            elif isinstance(ref, float):
                out[k] = float(v)
            elif isinstance(ref, list):
                out[k] = [float(x) for x in v]
            else:
                out[k] = str(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}.{k}: cannot use {v!r} as {type(ref).__name__}") from None
    return cls(**out)


def config_from_dict(data):
    data = dict(data)
    top = {k: data.pop(k) for k in ("seed", "output_dir") if k in data}
    extra = set(data) - set(_SECTIONS)
    if extra:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(extra))}")
    sections = {name: _coerce(cls, name, data.get(name, {})) for name, cls in _SECTIONS.items()}
    seed = top.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise ConfigError("seed must be an integer")
    return PipelineConfig(seed=int(seed), output_dir=str(top.get("output_dir", "fxi-out")),
                          **sections).validate()


def load_config(path):
    """Parse and validate a TOML configuration file."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(v)


def dump_config(cfg):
    """TOML text that ``load_config`` reads back to an equal configuration."""
    d = cfg.to_dict()
    lines = [f"seed = {d['seed']}", f"output_dir = {json.dumps(d['output_dir'])}", ""]
    for name in _SECTIONS:
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in d[name].items())
        lines.append("")
    return "\n".join(lines)
