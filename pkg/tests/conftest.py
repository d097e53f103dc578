import pytest

from cortexfit.bone_model import BoneModelParams, DensityPrior, RegionLabel, WidthPrior, default_priors
from cortexfit.measurement_model import ScannerConfig, TableAxis, build_table


@pytest.fixture(scope="session")
def scanner():
    return ScannerConfig(1.0, 0.5)


@pytest.fixture(scope="session")
def coarse_table(scanner):
    """Default priors on a 5 degree angle grid; enough for geometry tests."""
    return build_table(scanner, default_priors(), theta_axis=TableAxis(0.0, 90.0, 19))


SHARP_PARAMS = BoneModelParams(DensityPrior(0, 5), DensityPrior(1000, 5), DensityPrior(100, 5), WidthPrior(-1.0, 0.05))


@pytest.fixture(scope="session")
def sharp_table(scanner):
    """Near-deterministic vertical-cortex model at theta in {0, 45, 90}."""
    return build_table(scanner, {RegionLabel.VerticalCortex: SHARP_PARAMS}, theta_axis=TableAxis(0.0, 90.0, 3))


@pytest.fixture(scope="session")
def esp_coarse_table(scanner):
    from cortexfit.bone_model import esp_priors

    return build_table(scanner, esp_priors(), theta_axis=TableAxis(0.0, 90.0, 19))


@pytest.fixture(scope="session")
def medium_volume(scanner):
    """Noise-free scan of the medium phantom at 0.4 x 0.4 x 1 mm."""
    from cortexfit.phantom import preset, rasterize, simulate_scan

    return simulate_scan(rasterize(preset("medium"), 0.1), scanner, (0.4, 0.4, 1.0))


ACCEPTANCE_LINES = []


def record_criterion(number, name, ok, detail=""):
    """Print and keep one PASS/FAIL line; the terminal summary repeats them."""
    line = f"criterion {number} {'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
