import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from fxi.geometry import (DetectorGeometry, GeometryError, build_rotation_grid, circular_mask,
                          matrix_to_quat, pixel_to_q, quat_multiply, quat_to_matrix,
                          random_quaternions, rotate_q, rotation_distance, strip_mask)

unit_quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
    lambda v: np.linalg.norm(v) > 0.1).map(lambda v: np.asarray(v) / np.linalg.norm(v))


def test_center_pixel_maps_to_zero():
    g = DetectorGeometry(1.6, 581.0, 75.0, 9)
    assert np.allclose(pixel_to_q(g, (4, 4)), 0.0)


def test_pnccd_resolutions():
    g = DetectorGeometry.pnccd_1024()
    assert g.edge_resolution_nm() == pytest.approx(11.6, rel=0.02)
    assert g.corner_resolution_nm() == pytest.approx(8.3, rel=0.02)
    assert g.edge_resolution_nm() >= g.corner_resolution_nm()


def test_q_matches_scattering_angle_oracle():
    g = DetectorGeometry.pnccd_1024()
    for px in [(0, 0), (0, 511), (100, 900), (1023, 1023), (512, 3)]:
        dy, dx = px[0] - g.center[0], px[1] - g.center[1]
        want = oracles.q_magnitude(1.6, 581.0, 75.0, dy, dx)
        assert np.linalg.norm(pixel_to_q(g, px)) == pytest.approx(want, rel=1e-12)


def test_ewald_bound_and_monotone_radius():
    g = DetectorGeometry(1.6, 50.0, 75.0, 64)
    q = np.linalg.norm(g.pixel_q(), axis=-1)
    assert q.max() <= 2.0 / g.wavelength_nm
    rows, cols = np.indices(q.shape)
    r = np.hypot(rows - g.center[0], cols - g.center[1])
    order = np.argsort(r.ravel(), kind="stable")
    assert np.all(np.diff(q.ravel()[order]) >= -1e-12)


def test_pixel_out_of_range():
    g = DetectorGeometry(1.6, 581.0, 75.0, 8)
    with pytest.raises(IndexError):
        pixel_to_q(g, (8, 0))


@pytest.mark.parametrize("kw", [dict(photon_energy_kev=0), dict(detector_distance_mm=-1),
                                dict(pixel_pitch_um=0), dict(n_side=1)])
def test_invalid_geometry(kw):
    base = dict(photon_energy_kev=1.6, detector_distance_mm=581.0, pixel_pitch_um=75.0,
                n_side=8)
    base.update(kw)
    with pytest.raises(GeometryError):
        DetectorGeometry(**base)


def test_binned_center_and_pitch():
    g = DetectorGeometry.pnccd_1024().binned(16)
    assert g.n_side == 64 and g.pixel_pitch_um == 75.0 * 16
    assert g.center == (31.5, 31.5)


@pytest.mark.parametrize("n,count", [(1, 60), (2, 420), (3, 1380)])
def test_rotation_grid_counts(n, count):
    grid = build_rotation_grid(n)
    assert len(grid) == count == 10 * (5 * n ** 3 + n)
    assert np.allclose(np.linalg.norm(grid.quaternions, axis=1), 1.0, atol=1e-12)
    assert grid.weights.sum() == pytest.approx(1.0, abs=1e-9)


def test_rotation_grid_n10_size():
    assert len(build_rotation_grid(10)) == 50100


def _nn_distances(q):
    d = np.abs(q @ q.T)
    np.fill_diagonal(d, 0.0)
    return 2.0 * np.arccos(np.clip(d.max(axis=1), 0, 1))


def test_rotation_grid_distinct_and_refining():
    d1 = _nn_distances(build_rotation_grid(1).quaternions)
    d2 = _nn_distances(build_rotation_grid(2).quaternions)
    assert d1.min() > 0 and d2.min() > 0
    assert d2.max() < d1.max()


def test_rotation_grid_rejects_zero():
    with pytest.raises(GeometryError):
        build_rotation_grid(0)


def test_circular_mask_counts():
    assert circular_mask(16, 0).all()
    m = circular_mask(256, 36)
    assert (~m).sum() == oracles.count_disc(256, 36)
    assert not circular_mask(16, 16 * math.sqrt(2) * 2).any()
    assert circular_mask(16, 6, keep_inside=True).sum() == oracles.count_disc(16, 6)


def test_strip_mask():
    assert strip_mask(16, 0).all()
    m = strip_mask(256, 5)
    assert (~m).sum() == 5 * 256
    assert not m[:, 126:131].any() and m[:, 125].all() and m[:, 131].all()
    assert not strip_mask(16, 16).any()
    h = strip_mask(10, 4, "horizontal")
    assert not h[3:7].any() and h[2].all() and h[7].all()
    with pytest.raises(GeometryError):
        strip_mask(8, 9)


@given(st.integers(0, 20), st.integers(0, 6))
def test_mask_and_commutative_idempotent(d, w):
    a, b = circular_mask(24, d), strip_mask(24, w)
    assert np.array_equal(a & b, b & a)
    assert np.array_equal((a & b) & b, a & b)


def test_rotate_q_examples():
    assert np.allclose(rotate_q([1, 0, 0, 0], [0.3, -1, 2]), [0.3, -1, 2])
    assert np.allclose(rotate_q([0, 0, 0, 1], [1, 0, 0]), [-1, 0, 0], atol=1e-15)
    with pytest.raises(GeometryError):
        rotate_q([1, 1, 0, 0], [1, 0, 0])


@given(unit_quats, st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_rotate_q_isometry(q, v):
    assert np.linalg.norm(rotate_q(q, v)) == pytest.approx(np.linalg.norm(v), abs=1e-12)


def test_quaternion_matches_rodrigues():
    rng = np.random.default_rng(0)
    for _ in range(20):
        axis = rng.standard_normal(3)
        ang = rng.uniform(0, np.pi)
        q = np.r_[np.cos(ang / 2), np.sin(ang / 2) * axis / np.linalg.norm(axis)]
        assert np.allclose(quat_to_matrix(q), oracles.axis_angle_matrix(axis, ang), atol=1e-12)


def test_composition_matches_matrices():
    rng = np.random.default_rng(1)
    a, b = random_quaternions(rng, 100), random_quaternions(rng, 100)
    lhs = quat_to_matrix(quat_multiply(a, b))
    rhs = quat_to_matrix(a) @ quat_to_matrix(b)
    assert np.abs(lhs - rhs).max() < 1e-10


@given(unit_quats)
def test_matrix_quat_roundtrip(q):
    back = matrix_to_quat(quat_to_matrix(q))
    assert rotation_distance(back, q) < 1e-6
