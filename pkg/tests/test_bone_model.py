import math

import numpy as np
import pytest

from cortexfit.bone_model import (
    FITTED_REGIONS,
    BoneModelParams,
    DensityPrior,
    RegionLabel,
    WidthPrior,
    default_priors,
    esp_priors,
    realize_profile,
)


def test_realize_profile_cortex_center():
    assert realize_profile(100, 1000, 100, 0.25, 0.0) == 1000


def test_realize_profile_soft_tissue_side():
    assert realize_profile(100, 1000, 100, 0.25, -1.0) == 100


def test_realize_profile_constant():
    t = np.linspace(-3, 3, 61)
    np.testing.assert_array_equal(realize_profile(7.0, 7.0, 7.0, 0.4, t), 7.0)


def test_heaviside_convention_at_jumps():
    assert realize_profile(0, 1000, 100, 0.5, -0.5) == 1000
    assert realize_profile(0, 1000, 100, 0.5, 0.5) == 100


def test_two_jumps_and_symmetry():
    t = np.linspace(-2, 2, 4001)
    y = realize_profile(0, 1000, 100, 0.3, t)
    assert np.count_nonzero(np.diff(y)) == 2
    ys = realize_profile(50, 1000, 50, 0.3, t)
    off = np.abs(np.abs(t) - 0.3) > 1e-9
    np.testing.assert_array_equal(ys[off], ys[::-1][off])


def test_nonpositive_width_rejected():
    with pytest.raises(ValueError):
        realize_profile(0, 1, 2, 0.0, 0.0)


def test_region_labels():
    assert [r.name for r in RegionLabel] == ["VerticalCortex", "Endplates", "Foramen", "CutPedicles"]
    assert RegionLabel.CutPedicles not in FITTED_REGIONS
    assert RegionLabel.parse("Endplates") is RegionLabel.Endplates
    with pytest.raises(ValueError):
        RegionLabel.parse("Spine")


def test_default_priors_values():
    p = default_priors()[RegionLabel.VerticalCortex]
    assert (p.soft_tissue.mean, p.soft_tissue.sd) == (0.0, 30.0)
    assert (p.cortical.mean, p.cortical.sd) == (1000.0, 150.0)
    assert (p.trabecular.mean, p.trabecular.sd) == (100.0, 50.0)
    assert p.half_width.log_mean == pytest.approx(math.log(0.175))
    assert p.half_width.log_sd == 0.3
    assert set(default_priors()) == set(FITTED_REGIONS)
    assert set(esp_priors()) == set(FITTED_REGIONS)


def test_prior_ordering_enforced():
    d = DensityPrior
    with pytest.raises(ValueError):
        BoneModelParams(d(0, 30), d(100, 50), d(1000, 150), WidthPrior(0.0, 0.3))


@pytest.mark.parametrize("args", [(0.0, 0.0), (float("nan"), 1.0)])
def test_invalid_density_prior(args):
    with pytest.raises(ValueError):
        DensityPrior(*args)


def test_width_prior_pdf_integrates():
    from scipy import integrate

    w = WidthPrior(math.log(0.175), 0.3)
    total, _ = integrate.quad(w.pdf, 0, 5, points=[0.175])
    assert total == pytest.approx(1.0, abs=1e-8)
    assert w.median == pytest.approx(0.175)
    with pytest.raises(ValueError):
        WidthPrior(0.0, 0.0)
