import numpy as np
import pytest

from darkisp.synth_data import NoiseParams, SynthConfig, generate_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Four noiseless 32x32 test-card pairs (gamma 1 so the camera is exactly linear)."""
    out = tmp_path_factory.mktemp("small_ds")
    cfg = SynthConfig(gamma=1.0, count=4, size=(32, 32), seed=5)
    generate_dataset(cfg, None, out)
    return out / "manifest.json"


@pytest.fixture(scope="session")
def noisy_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("noisy_ds")
    cfg = SynthConfig(count=2, size=(32, 32), seed=9, exposure_ratio=0.2,
                      noise=NoiseParams(shot_scale=500, read_sigma=0.01))
    generate_dataset(cfg, None, out)
    return out / "manifest.json"


_acceptance: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        _acceptance[name] = (report.outcome, report.head_line or name)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    import tests.test_acceptance as acc

    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance, key=lambda n: int(n.split("_")[2])):
        outcome, _ = _acceptance[name]
        doc = (getattr(acc, name).__doc__ or name).strip()
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  criterion {doc}")
