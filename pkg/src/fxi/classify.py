"""Template matching of single-particle patterns.

Every pattern is compared with a bank of noiseless expected-count
templates (icosahedra over a range of sizes and random orientations, plus a
sphere). The pattern distance is the Euclidean distance between the
L2-normalised masked pattern and template, so it does not depend on the
fluence; the fluence is estimated separately as a ratio of masked counts.

The nearest-template search runs in a principal-component subspace of the
normalised templates and re-ranks the best few candidates exactly.
"""

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import circular_mask, random_quaternions, strip_mask
from .rng import substream
from .simulate import (PatternSet, SizeError, forward_intensity, make_sphere, photon_scale,
                       slice_many, smoothed_icosahedron)

log = logging.getLogger(__name__)


class ClassifyError(ValueError):
    pass


def default_mask(n_side, reference_side=256, beamstop_px=36.0, strip_px=5):
    """Central disc and vertical gap strip, scaled from a ``reference_side`` grid."""
    scale = n_side / reference_side
    width = max(1, int(round(strip_px * scale))) if strip_px else 0
    return circular_mask(n_side, beamstop_px * scale) & strip_mask(n_side, width)


@dataclass(frozen=True)
class TemplateLabel:
    shape: str
    size_nm: float
    rotation: tuple


@dataclass
class Eigenbasis:
    components: np.ndarray  # (k, P) over masked pixels, orthonormal rows
    mean: np.ndarray  # (P,)

    @property
    def k(self):
        return len(self.components)


@dataclass
class TemplateBank:
    """Noiseless templates (expected counts at unit fluence), zero outside ``mask``."""

    templates: np.ndarray  # (T, n, n)
    labels: list
    mask: np.ndarray
    eigenbasis: Eigenbasis = None
    _unit: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.templates = np.asarray(self.templates, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.templates.ndim != 3 or self.templates.shape[1:] != self.mask.shape:
            raise ClassifyError("templates must be (T, n, n) matching the mask")
        if len(self.labels) != len(self.templates):
            raise ClassifyError("one label per template")
        if (self.templates < 0).any():
            raise ClassifyError("templates must be nonnegative")
        self.templates[:, ~self.mask] = 0.0

    def __len__(self):
        return len(self.templates)

    @property
    def masked(self):
        """(T, P) template values on the used pixels."""
        return self.templates[:, self.mask]

    @property
    def unit(self):
        """(T, P) L2-normalised masked templates."""
        if self._unit is None:
            t = self.masked
            self._unit = t / np.linalg.norm(t, axis=1, keepdims=True)
        return self._unit

    @property
    def sums(self):
        return self.masked.sum(axis=1)

    @property
    def spherical(self):
        return np.array([lab.shape == "sphere" for lab in self.labels])

    @property
    def sizes(self):
        return np.array([lab.size_nm for lab in self.labels], dtype=float)


@dataclass(frozen=True)
class ClassificationRecord:
    pattern_index: int
    e_c: float
    fluence_est: float
    size_est_nm: float
    best_template: int
    is_spherical: bool


def _shape_density(shape, size_nm, voxel_size, n_side):
    if shape == "icosahedron":
        return smoothed_icosahedron(size_nm, voxel_size, n_side)
    if shape == "sphere":
        return make_sphere(size_nm, voxel_size, n_side)
    raise ClassifyError(f"unknown template shape {shape!r}")


def build_template_bank(shapes, geom, n_rotations, sizes_nm, seed, voxel_size, n_density=32,
                        photons_per_pattern=1e4, mask=None, sphere_size_nm=None,
                        oversample=2, reference_size_nm=None):
    """Noiseless templates for every (shape, size) at ``n_rotations`` random rotations.

    Parameters
    ----------
    shapes : sequence of {"icosahedron", "sphere"}
        Shapes rendered at every size in ``sizes_nm``.
    n_rotations : int
        Random orientations per (shape, size). Spheres get one template.
    voxel_size : float
        Density voxel (nm); ``n_density * oversample`` must match the volume
        implied by ``geom`` for the intensity to cover the detector.
    photons_per_pattern : float
        Rotation-averaged expected photons of a unit-fluence template of the
        first shape at ``reference_size_nm`` (default: first size). All
        templates share that density scale, so larger particles are
        brighter; fluence estimates are relative to this reference.
    sphere_size_nm : float, optional
        Adds one sphere template of this size.
    """
    if n_rotations < 1:
        raise ClassifyError("n_rotations must be >= 1")
    sizes_nm = list(sizes_nm)
    if not sizes_nm:
        raise ClassifyError("sizes_nm must be nonempty")
    mask = default_mask(geom.n_side) if mask is None else np.asarray(mask, dtype=bool)
    rng = substream(seed, "classify", 0)
    jobs = [(s, d) for s in shapes for d in sizes_nm]
    if sphere_size_nm is not None:
        jobs.append(("sphere", float(sphere_size_nm)))
    ref = _shape_density(shapes[0] if shapes else "sphere",
                         sizes_nm[0] if reference_size_nm is None else reference_size_nm,
                         voxel_size, n_density)
    scale = photon_scale(forward_intensity(ref, oversample), geom, photons_per_pattern)
    templates, labels = [], []
    for shape, size in jobs:
        try:
            rho = _shape_density(shape, size, voxel_size, n_density)
        except SizeError as exc:
            raise SizeError(f"{shape} {size} nm does not fit: {exc}") from exc
        W = forward_intensity(rho, oversample)
        n_rot = 1 if shape == "sphere" else n_rotations
        rots = random_quaternions(rng, n_rot)
        vals, valid = slice_many(W, rots, geom)
        if not valid[:, mask].all():
            raise SizeError("intensity volume does not cover the masked detector")
        templates.append(vals * scale)
        labels.extend(TemplateLabel(shape, float(size), tuple(q)) for q in rots)
    return TemplateBank(np.concatenate(templates), labels, mask)


def compute_eigenbasis(bank, k):
    """Top-``k`` principal components of the normalised masked templates."""
    if not 1 <= k <= len(bank):
        raise ClassifyError(f"k must lie in [1, {len(bank)}]")
    U = bank.unit
    mean = U.mean(axis=0)
    _, _, vt = np.linalg.svd(U - mean, full_matrices=False)
    return replace(bank, eigenbasis=Eigenbasis(vt[:k].copy(), mean), _unit=bank._unit)


def _unit_pattern(counts, mask):
    v = np.asarray(counts, dtype=float)[..., mask]
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v, norm


def _check(bank, shape):
    if len(bank) == 0:
        raise ClassifyError("empty template bank")
    if tuple(shape[-2:]) != bank.mask.shape:
        raise ClassifyError("pattern shape does not match the template mask")


def pattern_distances(counts, bank):
    """Exact ``e_c`` to every template: (M, T) for a stack, (T,) for one pattern."""
    _check(bank, np.shape(counts))
    v, norm = _unit_pattern(counts, bank.mask)
    if np.any(norm == 0):
        raise ClassifyError("pattern has no counts on the used pixels")
    u = v / norm
    # |a - b|^2 = 2 - 2 a.b for unit vectors
    return np.sqrt(np.maximum(2.0 - 2.0 * (u @ bank.unit.T), 0.0))


def _records(counts, bank, indices, top):
    counts = np.asarray(counts)
    single = counts.ndim == 2
    stack = counts[None] if single else counts
    _check(bank, stack.shape)
    v, norm = _unit_pattern(stack, bank.mask)
    if np.any(norm == 0):
        raise ClassifyError("pattern has no counts on the used pixels")
    u = v / norm
    eb = bank.eigenbasis
    if eb is None or top >= len(bank):
        cand = np.broadcast_to(np.arange(len(bank)), (len(u), len(bank)))
    else:
        tp = (bank.unit - eb.mean) @ eb.components.T
        pp = (u - eb.mean) @ eb.components.T
        d2 = (pp ** 2).sum(1)[:, None] + (tp ** 2).sum(1)[None, :] - 2.0 * pp @ tp.T
        cand = np.argsort(d2, axis=1, kind="stable")[:, :top]
    sph = bank.spherical
    sums = bank.sums
    out = []
    for r in range(len(u)):
        c = cand[r]
        d = np.sqrt(np.maximum(2.0 - 2.0 * (bank.unit[c] @ u[r]), 0.0))
        dmin = d.min()
        tied = c[d <= dmin]
        # equal distance to a sphere and an icosahedron: reject as spherical
        best = tied[sph[tied]][0] if sph[tied].any() else tied[0]
        fl = v[r].sum() / sums[best]
        out.append(ClassificationRecord(int(indices[r]), float(dmin), float(fl),
                                        float(bank.labels[best].size_nm), int(best),
                                        bool(sph[best])))
    return out


def classify_pattern(pattern, bank, top=5, index=0):
    """Best-matching template, pattern distance, fluence and size for one pattern."""
    counts = getattr(pattern, "counts", pattern)
    return _records(counts, bank, [index], top)[0]


def classify_patterns(patterns, bank, top=5, chunk=256):
    """Records for every pattern of a ``PatternSet`` or (M, n, n) array."""
    counts = patterns.counts if isinstance(patterns, PatternSet) else np.asarray(patterns)
    out = []
    for s in range(0, len(counts), chunk):
        out.extend(_records(counts[s:s + chunk], bank, range(s, min(s + chunk, len(counts))),
                            top))
    return out


def select_patterns(records, e_c_max, fluence_min, size_range_nm):
    """Indices passing the distance, fluence and size cuts, spheres excluded."""
    lo, hi = size_range_nm
    if lo > hi:
        raise ValueError("size range must have lo <= hi")
    return [r.pattern_index for r in records
            if r.e_c < e_c_max and r.fluence_est >= fluence_min
            and lo <= r.size_est_nm <= hi and not r.is_spherical]


def _histogram(values, bins, value_range=None):
    counts, edges = np.histogram(values, bins=bins, range=value_range)
    return {"counts": counts, "edges": edges}


def selection_histograms(records, bins_e_c=1000, bins_fluence=1000, bins_size=12,
                         ranges=None):
    """Equal-width histograms of e_c, fluence estimate and size estimate."""
    if not records:
        raise ClassifyError("no records to histogram")
    ranges = ranges or {}
    cols = {
        "e_c": [r.e_c for r in records],
        "fluence": [r.fluence_est for r in records],
        "size": [r.size_est_nm for r in records],
    }
    bins = {"e_c": bins_e_c, "fluence": bins_fluence, "size": bins_size}
    return {k: _histogram(np.asarray(v), bins[k], ranges.get(k)) for k, v in cols.items()}


RECORD_COLUMNS = ("index", "e_c", "fluence_est", "size_nm", "best_template", "is_spherical")


def write_records_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow([r.pattern_index, repr(r.e_c), repr(r.fluence_est), repr(r.size_est_nm),
                        r.best_template, int(r.is_spherical)])


def read_records_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [ClassificationRecord(int(r["index"]), float(r["e_c"]), float(r["fluence_est"]),
                                 float(r["size_nm"]), int(r["best_template"]),
                                 bool(int(r["is_spherical"]))) for r in rows]


def write_histograms_csv(path, hists):
    """One row per bin: ``quantity, left, right, count``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("quantity", "left", "right", "count"))
        for name, h in hists.items():
            e = h["edges"]
            for i, c in enumerate(h["counts"]):
                w.writerow((name, repr(float(e[i])), repr(float(e[i + 1])), int(c)))
