import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from fxi import postproc as PP
from fxi.emc import EmcConfig
from fxi.geometry import (build_rotation_grid, quat_multiply, quat_to_matrix, random_quaternions,
                          volume_q_step)
from fxi.simulate import (BeamConfig, forward_intensity, generate_dataset, icosahedral_group,
                          photon_scale, smoothed_icosahedron)
from fxi.volumes import DensityVolume, IntensityVolume, radial_index


@pytest.fixture(scope="module")
def ico(small_geom):
    q_step = volume_q_step(small_geom, 32)
    W = forward_intensity(smoothed_icosahedron(40.0, 1.0 / (32 * q_step), 16))
    return W.replace(W.values * photon_scale(W, small_geom, 1.0))


def test_shells_match_oracle():
    rng = np.random.default_rng(0)
    v = rng.random((9, 9, 9))
    mask = rng.random((9, 9, 9)) > 0.3
    sh = PP.radial_shells(9)
    assert sh.n_shells == 4
    table = oracles.shell_table(v, mask)
    mean = PP.shell_mean(v, sh, mask)
    low = PP.shell_min(v, sh, mask)
    for u in range(4):
        assert mean[u] == pytest.approx(np.mean(table[u]), rel=1e-12)
        assert low[u] == min(table[u])
    assert sh.counts(mask).tolist() == [len(table[u]) for u in range(4)]


def test_shell_membership_even_grid():
    sh = PP.radial_shells(8)
    assert sh.membership[4, 4, 4] == 0
    assert sh.membership[4, 4, 7] == 3 and sh.membership[4, 4, 0] == -1
    assert sh.membership[5, 5, 4] == 1  # sqrt(2)


def test_shell_background_example():
    n = 9
    sh = PP.radial_shells(n)
    rng = np.random.default_rng(1)
    u = np.where(sh.membership >= 0, sh.membership, 0)
    W = IntensityVolume(u + 1.0 + rng.random((n,) * 3), 0.1)
    B, sub = PP.shell_background(W, beta=0.5)
    low = PP.shell_min(W.values, sh)
    assert np.allclose(B, 0.5 * low)
    inside = sh.membership >= 0
    assert np.allclose(sub.values[inside], W.values[inside] - B[sh.membership[inside]])
    assert np.array_equal(sub.values[~inside], W.values[~inside])
    B1, s1 = PP.shell_background(W, beta=1.0)
    B2, s2 = PP.shell_background(s1, beta=1.0)
    assert np.allclose(B2, 0.0) and np.array_equal(s1.values, s2.values)
    with pytest.raises(PP.PostprocError):
        PP.shell_background(W, beta=1.5)


def test_shell_background_empty_shell_and_unobserved():
    n = 8
    w = np.ones((n,) * 3)
    w[radial_index(n) >= 3] = 0
    W = IntensityVolume(np.full((n,) * 3, 2.0), 0.1, w)
    B, sub = PP.shell_background(W, beta=1.0)
    assert B[3] == 0.0 and np.allclose(B[:3], 2.0)
    assert np.allclose(sub.values[~W.observed], 2.0)


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_psd_linear(a, b):
    rng = np.random.default_rng(2)
    W = IntensityVolume(rng.random((8, 8, 8)), 0.1)
    V = IntensityVolume(rng.random((8, 8, 8)), 0.1)
    lhs = PP.shell_psd(W.replace(a * W.values + b * V.values))
    assert np.allclose(lhs, a * PP.shell_psd(W) + b * PP.shell_psd(V), atol=1e-12)


def test_shells_mismatch():
    with pytest.raises(PP.PostprocError):
        PP.shell_psd(IntensityVolume(np.ones((6, 6, 6)), 0.1), PP.radial_shells(8))


@pytest.mark.parametrize("n", [1, 2, 7, 8, 33])
def test_hann_closed_form(n):
    h = PP.hann(n)
    if n == 1:
        assert h.tolist() == [1.0]
        return
    assert np.allclose(h, [oracles.hann_1d(n, t) for t in range(n)], atol=1e-12, rtol=0)
    assert h[0] == 0 and h[-1] == pytest.approx(0.0, abs=1e-15)
    half = h[: (n + 1) // 2]
    assert np.all(np.diff(half) >= 0)


def test_hann_3d():
    W = IntensityVolume(np.ones((9, 9, 9)), 0.1)
    out = PP.hann_window_3d(W)
    assert out.values[4, 4, 4] == pytest.approx(1.0)
    assert out.values[0, 0, 0] == 0.0 and out.values[8, 8, 8] == pytest.approx(0.0, abs=1e-30)
    h = PP.hann(9)
    assert out.values[2, 5, 7] == pytest.approx(h[2] * h[5] * h[7], abs=1e-12)
    with pytest.raises(PP.PostprocError):
        PP.hann_window_3d(np.ones((3, 4, 4)))


def test_alternating_profile_contrast():
    prof = np.tile([1.0, 3.0], 10)
    assert np.allclose(PP.profile_contrast(prof), 0.5)
    assert PP.profile_contrast([1.0, 1.0, 1.0]).size == 0
    assert PP.profile_contrast([1.0, 2.0]).size == 0
    assert np.allclose(PP.profile_contrast([0, 2, 2, 2, 0, 4, 1]), [1.0, 1.0])


@given(arrays(float, st.integers(3, 40), elements=st.floats(0.01, 100)))
def test_profile_contrast_matches_oracle(p):
    got = PP.profile_contrast(p)
    ref = oracles.extrema_contrast(list(p))
    assert np.allclose(got, ref)
    assert ((got >= 0) & (got <= 1)).all()


def test_contrast_volume(ico):
    c, n = PP.contrast(ico, n_lines=20, seed=1, return_count=True)
    assert 0 <= c <= 1 and n > 0
    assert PP.contrast(ico, n_lines=20, seed=1) == c
    shifted = ico.replace(ico.values + ico.values.mean())
    assert PP.contrast(shifted, n_lines=20, seed=1) < c
    with pytest.raises(PP.PostprocError):
        PP.contrast(ico.replace(np.ones_like(ico.values)), n_lines=5)
    with pytest.raises(PP.PostprocError):
        PP.contrast(ico, n_lines=0)


def test_line_profile_drops_unobserved():
    w = np.ones((8, 8, 8))
    w[:4] = 0
    W = IntensityVolume(np.ones((8, 8, 8)), 0.1, w)
    full = PP.line_profile(W.replace(W.values), [1, 0, 0])
    assert 0 < len(full) < len(PP.line_profile(IntensityVolume(W.values, 0.1), [1, 0, 0]))


def test_rotate_and_align(ico):
    q0 = random_quaternions(np.random.default_rng(3), 1)[0]
    R = quat_to_matrix(q0)
    rot = PP.rotate_volume(ico, R)
    assert np.allclose(PP.rotate_volume(ico, np.eye(3)), ico.values)
    aligned, q, corr = PP.align_volume(ico, IntensityVolume(rot, ico.q_step), grid_n=2,
                                       n_samples=1500)
    # rot(R_q x) = ico(R R_q x), so R R_q must be an icosahedral symmetry
    err = min(oracles.geodesic_deg(quat_multiply(q0, q), s) for s in icosahedral_group())
    assert err < 3.0
    assert corr > 0.95
    inner = radial_index(32) < 12
    assert np.corrcoef(aligned.values[inner], ico.values[inner])[0, 1] > 0.98


def test_fourier_uncertainty_scalar(ico):
    eps = 0.07
    runs = [ico.replace(ico.values * (1 + eps)), ico.replace(ico.values * (1 - eps))]
    ens = PP.BootstrapEnsemble(runs, PP.ensemble_mean(runs), [0, 1], [], [], [1, 1])
    curve = PP.fourier_uncertainty(ens)
    assert np.allclose(curve[np.isfinite(curve)], eps)
    with pytest.raises(PP.PostprocError):
        PP.fourier_uncertainty(PP.BootstrapEnsemble(runs[:1], runs[0], [0], [], [], [1]))


def test_edge_trend():
    assert PP.edge_trend([0.1, 0.2, np.nan, 0.5, 0.9]) == pytest.approx(1.0)
    assert PP.edge_trend([3, 2, 1]) == pytest.approx(-1.0)


def test_real_uncertainty_identities():
    rng = np.random.default_rng(4)
    Oa = rng.random((10, 10, 10))
    reps = [Oa + 0.1 * rng.random((10, 10, 10)) for _ in range(4)]
    u = PP.real_uncertainty(Oa, reps)
    ok = np.isfinite(u.real_total)
    assert np.allclose(u.real_total[ok] ** 2, u.real_bias[ok] ** 2 + u.real_std[ok] ** 2)
    same = PP.real_uncertainty(Oa, [Oa, Oa])
    assert np.allclose(same.real_total, 0) and np.allclose(same.real_std, 0)
    # a uniformly scaled copy shows up as bias only
    shift = PP.real_uncertainty(Oa, [DensityVolume(2 * Oa, 1.0)] * 3)
    A = np.abs(np.fft.fftshift(np.fft.fftn(np.fft.ifftshift(Oa))))
    sh = PP.radial_shells(10)
    rms_over_mean = np.sqrt(PP.shell_mean(A ** 2, sh)) / PP.shell_mean(A, sh)
    assert np.allclose(shift.real_std, 0) and np.allclose(shift.real_bias, rms_over_mean)
    assert np.isnan(u.fourier).all()
    with pytest.raises(PP.PostprocError):
        PP.real_uncertainty(Oa, [Oa])


def test_relative_shell_difference():
    rng = np.random.default_rng(5)
    T = IntensityVolume(rng.random((8, 8, 8)) + 0.5, 0.1)
    assert PP.relative_shell_difference(T, T) == 0.0
    assert PP.relative_shell_difference(T.replace(1.2 * T.values), T) == pytest.approx(0.2)
    per = PP.shell_relative_difference(T.replace(1.2 * T.values), T)
    assert np.allclose(per, 0.2)
    with pytest.raises(PP.PostprocError):
        PP.relative_shell_difference(T, T.replace(np.zeros_like(T.values)))


def test_r_limits_ordered_and_deterministic(ico, small_geom):
    ico = ico.replace(ico.values * 2e4)
    ps = generate_dataset(ico, small_geom, BeamConfig(), 80, "Kf", 6)
    a = PP.r_limits(ico, ps, small_geom, seed=2)
    b = PP.r_limits(ico, ps, small_geom, seed=2)
    assert a == b
    assert a[0.0] < a[0.5] < a[1.0]
    g = PP.r_limits(ico, ps, small_geom, fractions=(1.0,), seed=2, grid=build_rotation_grid(1))
    assert g[1.0] > a[0.0]
    with pytest.raises(PP.PostprocError):
        PP.r_limits(ico, ps.counts, small_geom)


def test_bootstrap(ico, small_geom):
    ps = generate_dataset(ico, small_geom, BeamConfig(), 30, "Kf", 7, photons_per_pattern=2e4)
    cfg = EmcConfig(rotation_n=1, n_vol=32, max_iter=3, beta_start=1.0,
                    prob_mask=np.ones((32, 32), bool), merge_mask=np.ones((32, 32), bool))
    e1 = PP.bootstrap_emc(ps, small_geom, cfg, 2, seed=3, align_kwargs=dict(grid_n=1,
                                                                            n_samples=500))
    e2 = PP.bootstrap_emc(ps, small_geom, cfg, 2, seed=3, align_kwargs=dict(grid_n=1,
                                                                            n_samples=500))
    assert np.array_equal(e1.mean.values, e2.mean.values)
    assert np.allclose(e1.mean.values, (e1.runs[0].values + e1.runs[1].values) / 2)
    assert not np.array_equal(e1.resamples[0], e1.resamples[1])
    assert e1.seeds[0] != e1.seeds[1]
    assert all(len(r) == 30 for r in e1.resamples)
    with pytest.raises(PP.PostprocError):
        PP.bootstrap_emc(ps, small_geom, cfg, 1, seed=0)


def test_bootstrap_resample():
    a = PP.bootstrap_resample(50, 1, 0)
    assert np.array_equal(a, PP.bootstrap_resample(50, 1, 0))
    assert a.min() >= 0 and a.max() < 50 and len(a) == 50
    assert len(np.unique(a)) < 50


def test_shape_ball():
    n = 40
    R = 8.0
    ball = (radial_index(n) <= R).astype(float)
    rep = PP.shape_report(DensityVolume(ball, 2.0))
    assert rep.volume_voxels == oracles.digital_ball_count(R)
    assert rep.D_r == pytest.approx(PP.sphere_equivalent_diameter(rep.volume_voxels, 2.0))
    assert rep.D_r == pytest.approx(2 * R * 2.0, rel=0.05)
    # trilinear crossing of the 0.1 level sits just under one voxel past the edge
    assert 0.95 * 2 * R * 2.0 <= rep.D_min <= rep.D_max <= 2 * (R + 1) * 2.0 * 1.05
    scaled = PP.shape_report(DensityVolume(5 * ball, 2.0))
    assert scaled == rep
    half = PP.shape_report(ball, voxel_nm=1.0)
    assert half.D_mean == pytest.approx(rep.D_mean / 2)


def test_shape_errors():
    with pytest.raises(PP.PostprocError):
        PP.shape_report(np.zeros((4, 4, 4)))
    with pytest.raises(PP.PostprocError):
        PP.shape_report(np.ones((4, 4, 4)), threshold_frac=1.0)


def test_sphere_equivalent_diameter():
    assert PP.sphere_equivalent_diameter(4.0 / 3.0 * np.pi, 1.0) == pytest.approx(2.0)
    assert PP.sphere_equivalent_diameter(8, 3.0) == pytest.approx(
        3 * PP.sphere_equivalent_diameter(8, 1.0))
