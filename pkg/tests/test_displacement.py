import math

import numpy as np
import pytest

from cortexfit.bone_model import RegionLabel, default_priors
from cortexfit.displacement import (
    DENSITY_FLOOR,
    DisplacementField,
    Profile,
    ProfileGrid,
    ShiftGrid,
    compute_displacements,
    displacements_from_scores,
    optimal_displacement,
    posterior_scores,
    profile_log_likelihood,
    sample_profiles,
)
from cortexfit.measurement_model import combined_psf_cdf, conditional_moments
from cortexfit.mesh import LabeledSurfaceMesh, make_template
from cortexfit.volume import CalibratedVolume

from conftest import SHARP_PARAMS

VC = RegionLabel.VerticalCortex
SHIFTS = ShiftGrid().nodes


def synthetic_profile(params, scanner, s0=0.0, theta=90.0, grid=ProfileGrid()):
    """Blurred model mean at the median width, centered at ``s0``."""
    G = combined_psf_cdf(scanner, theta)
    w = params.half_width.median
    rho, _ = conditional_moments(params, G, grid.offsets - s0, w)
    return Profile(rho, grid.offsets, theta, VC, True)


def point_mesh(points, labels=None):
    """Vertices only; profiles need positions and labels, not connectivity."""
    return LabeledSurfaceMesh(np.asarray(points, float), np.zeros((0, 3), int), labels)


def test_grids():
    g = ProfileGrid()
    assert len(g.offsets) == 41 and g.offsets[20] == 0.0 and g.step == pytest.approx(0.1)
    np.testing.assert_array_equal(g.offsets, -g.offsets[::-1])
    s = ShiftGrid().nodes
    assert len(s) == 81 and s[0] == -2.0 and s[-1] == 2.0 and s[40] == 0.0
    with pytest.raises(ValueError):
        ProfileGrid(0.0, 5)
    with pytest.raises(ValueError):
        ShiftGrid(1.0, 0.0)


def test_sample_profiles_constant_volume():
    vol = CalibratedVolume(np.full((20, 20, 20), 100.0), (1, 1, 1), (-10, -10, -10))
    m = point_mesh([[0, 0, 0], [1, 2, 3]])
    p = sample_profiles(m, vol, normals=np.array([[1.0, 0, 0], [0, 0, 1.0]]))
    np.testing.assert_allclose(p.densities, 100.0)
    assert p.valid.all()
    assert p.theta[0] == pytest.approx(90.0) and p.theta[1] == pytest.approx(0.0)
    np.testing.assert_array_equal(p.directions, [[-1, 0, 0], [0, 0, -1]])


def test_sample_profiles_out_of_bounds_and_excluded():
    vol = CalibratedVolume(np.full((20, 20, 20), 100.0), (1, 1, 1), (-10, -10, -10))
    m = point_mesh([[0, 0, 8.5], [0, 0, 0], [0, 0, 0]], [VC, VC, RegionLabel.CutPedicles])
    p = sample_profiles(m, vol, normals=np.array([[0, 0, -1.0], [0, 0, 1.0], [0, 0, 1.0]]))
    # outermost sample at z = 10.5 lies outside [-10, 9]
    assert not p.valid[0] and np.isnan(p.densities[0, -1])
    assert p.valid[1] and not p.valid[2]
    assert p[0].region is VC and p[2].region is RegionLabel.CutPedicles


def test_theta_folds_to_first_quadrant():
    vol = CalibratedVolume(np.zeros((10, 10, 10)), (1, 1, 1), (-5, -5, -5))
    n = np.array([[0, 0.6, -0.8], [0, -0.6, 0.8]])
    p = sample_profiles(point_mesh(np.zeros((2, 3))), vol, ProfileGrid(1.0, 5), normals=n)
    np.testing.assert_allclose(p.theta, math.degrees(math.acos(0.8)))


def test_synthetic_profile_peaks_at_zero(sharp_table, scanner):
    prof = synthetic_profile(SHARP_PARAMS, scanner)
    ll = profile_log_likelihood(prof, sharp_table, VC, SHIFTS)
    assert SHIFTS[np.argmax(ll)] == 0.0
    s_hat, gamma = optimal_displacement(prof, sharp_table, VC)
    assert s_hat == 0.0 and gamma > 0


@pytest.mark.parametrize("s0", [0.3, -0.7, 1.25])
def test_synthetic_profile_shift_recovered(sharp_table, scanner, s0):
    prof = synthetic_profile(SHARP_PARAMS, scanner, s0)
    s_hat, _ = optimal_displacement(prof, sharp_table, VC)
    assert abs(s_hat - s0) <= ShiftGrid().step + 1e-12


def test_scalar_and_vector_likelihood_agree(sharp_table, scanner):
    prof = synthetic_profile(SHARP_PARAMS, scanner, 0.2)
    vec = profile_log_likelihood(prof, sharp_table, VC, np.array([-0.1, 0.35]))
    assert vec[1] == pytest.approx(profile_log_likelihood(prof, sharp_table, VC, 0.35), rel=1e-14)
    # the model coordinate of sample j is t_j - s
    direct = sum(
        math.log(max(sharp_table.lookup(VC, t - 0.35, prof.theta, z), DENSITY_FLOOR))
        for t, z in zip(prof.offsets, prof.densities)
    )
    assert vec[1] == pytest.approx(direct, rel=1e-12)


def test_extreme_densities_finite(coarse_table):
    g = ProfileGrid()
    prof = Profile(np.full(41, 1e6), g.offsets, 30.0, VC, True)
    ll = profile_log_likelihood(prof, coarse_table, VC, SHIFTS)
    assert np.all(np.isfinite(ll))
    s_hat, gamma = optimal_displacement(prof, coarse_table, VC)
    assert math.isfinite(s_hat) and math.isfinite(gamma)


def test_flat_profile_has_low_confidence(coarse_table, scanner):
    # the candidate range must reach past t0 plus the blurred cortex, otherwise
    # "no cortex in view" is not representable and the mass piles on the last node
    wide = ShiftGrid(6.0).nodes
    params = default_priors()[VC]
    clean = synthetic_profile(params, scanner)
    for level in (params.soft_tissue.mean, params.trabecular.mean, params.cortical.mean):
        flat = Profile(np.full(41, level), clean.offsets, 90.0, VC, True)
        _, g_clean = optimal_displacement(clean, coarse_table, VC, shifts=wide)
        _, g_flat = optimal_displacement(flat, coarse_table, VC, shifts=wide)
        assert g_clean >= 10 * g_flat


def test_flat_soft_tissue_profile_saturates_default_range(coarse_table):
    flat = Profile(np.zeros(41), ProfileGrid().offsets, 90.0, VC, True)
    s_hat, _ = optimal_displacement(flat, coarse_table, VC)
    assert s_hat == ShiftGrid().s_max


def test_invalid_profile_gives_zero(coarse_table):
    prof = Profile(np.full(41, np.nan), ProfileGrid().offsets, 0.0, VC, False)
    assert optimal_displacement(prof, coarse_table, VC) == (0.0, 0.0)


def test_tie_breaks():
    s = np.array([-0.1, -0.05, 0.0, 0.05, 0.1])
    s_hat, _ = displacements_from_scores(np.zeros(5), s)
    assert s_hat[0] == 0.0
    s_hat, _ = displacements_from_scores([[0.0, 1.0, -3.0, 1.0, 0.0]], s)
    assert s_hat[0] == -0.05
    s_hat, _ = displacements_from_scores([[2.0, 1.0, -3.0, 1.0, 2.0]], s)
    assert s_hat[0] == -0.1


def test_gamma_normalization():
    s = ShiftGrid().nodes
    scores = -0.5 * ((s - 0.3) / 0.2) ** 2
    s_hat, gamma = displacements_from_scores(scores[None], s)
    assert s_hat[0] == pytest.approx(0.3)
    # a well-resolved Gaussian posterior: density at the mode is 1 / (sqrt(2 pi) sd)
    assert gamma[0] == pytest.approx(1 / (math.sqrt(2 * math.pi) * 0.2), rel=1e-6)
    uniform = displacements_from_scores(np.zeros((1, len(s))), s)[1][0]
    assert uniform == pytest.approx(1 / (len(s) * 0.05))


def test_gamma_invariant_to_score_offset():
    rng = np.random.default_rng(3)
    s = ShiftGrid().nodes
    scores = rng.normal(0, 5, (6, len(s)))
    a = displacements_from_scores(scores, s)
    b = displacements_from_scores(scores + 1234.5, s)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_allclose(a[1], b[1], rtol=1e-10)


def test_rows_without_scores():
    s = ShiftGrid().nodes
    scores = np.full((2, len(s)), -np.inf)
    scores[1, 10] = 0.0
    s_hat, gamma = displacements_from_scores(scores, s)
    assert (s_hat[0], gamma[0]) == (0.0, 0.0)
    assert s_hat[1] == s[10] and gamma[1] == pytest.approx(1 / 0.05)


def step_volume(center_x, params, scanner):
    """Blurred soft tissue / cortex / trabecular profile along -x, independent of y and z."""
    x = np.arange(-6.0, 6.0 + 1e-9, 0.05)
    G = combined_psf_cdf(scanner, 90.0)
    w = params.half_width.median
    # inward direction is -x, so the profile coordinate is center_x - x
    rho, _ = conditional_moments(params, G, center_x - x, w)
    data = np.broadcast_to(rho, (5, 5, len(x))).copy()
    return CalibratedVolume(data, (0.05, 1.0, 1.0), (-6.0, -2.0, -2.0))


def test_shift_equivariance(coarse_table, scanner):
    params = default_priors()[VC]
    mesh = point_mesh([[0.0, 0.0, 0.0]])
    n = np.array([[1.0, 0.0, 0.0]])
    base = compute_displacements(mesh, step_volume(0.0, params, scanner), coarse_table, normals=n)
    for delta in (0.4, -0.65):
        # moving the cortex by delta along d = -x
        moved = compute_displacements(mesh, step_volume(-delta, params, scanner), coarse_table, normals=n)
        assert abs((moved.shift[0] - base.shift[0]) - delta) <= 0.05 + 1e-12


def test_thread_count_independent(coarse_table):
    m = make_template(8.0, 10.0, 32, rim_margin=1.0)
    rng = np.random.default_rng(0)
    vol = CalibratedVolume(rng.normal(300, 300, (30, 48, 48)), (0.5, 0.5, 1.0), (-12, -12, -15))
    p = sample_profiles(m, vol)
    a = posterior_scores(p, coarse_table, SHIFTS, n_jobs=1, chunk=16)
    b = posterior_scores(p, coarse_table, SHIFTS, n_jobs=4, chunk=16)
    np.testing.assert_array_equal(a, b)
    assert np.all(np.isinf(a[~p.valid]))


def test_field_invariants(coarse_table):
    m = make_template(8.0, 10.0, 32, rim_margin=1.0)
    rng = np.random.default_rng(1)
    vol = CalibratedVolume(rng.normal(300, 300, (30, 48, 48)), (0.5, 0.5, 1.0), (-12, -12, -15))
    f = compute_displacements(m, vol, coarse_table)
    assert isinstance(f, DisplacementField)
    assert np.all(f.gamma >= 0) and np.all(np.abs(f.shift) <= 2.0)
    cut = m.region_mask(RegionLabel.CutPedicles)
    assert np.all(f.gamma[cut] == 0) and np.all(f.shift[cut] == 0)
    assert np.all(f.gamma[~f.valid] == 0)


def test_missing_region_model(sharp_table):
    m = make_template(8.0, 10.0, 32, rim_margin=1.0)
    vol = CalibratedVolume(np.zeros((30, 48, 48)), (0.5, 0.5, 1.0), (-12, -12, -15))
    with pytest.raises(KeyError, match="Endplates"):
        compute_displacements(m, vol, sharp_table)


def test_weighted_rms():
    f = DisplacementField(np.array([1.0, -2.0, 5.0]), np.array([1.0, 3.0, 0.0]), np.ones(3, bool), np.zeros((3, 3)))
    assert f.weighted_rms() == pytest.approx(math.sqrt((1 + 12) / 4))
    empty = DisplacementField(np.zeros(2), np.zeros(2), np.zeros(2, bool), np.zeros((2, 3)))
    assert empty.weighted_rms() == 0.0
