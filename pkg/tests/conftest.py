import numpy as np
import pytest
import torch

from cadet.data.shapes import ShapesConfig, generate_shapes
from cadet.detector.anchors import LevelConfig
from cadet.detector.model import DetectorConfig, DetectorModel

# criterion number -> (description, outcome) for the acceptance summary
ACCEPTANCE_RESULTS = {}
# criterion number -> measured values worth showing next to the verdict
ACCEPTANCE_NOTES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, description): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, description = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        # a parametrized criterion passes only if every case passes
        previous = ACCEPTANCE_RESULTS.get(number, (description, "passed"))[1]
        ACCEPTANCE_RESULTS[number] = (description, report.outcome if previous == "passed" else previous)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        description, outcome = ACCEPTANCE_RESULTS[number]
        verdict = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"criterion {number:>2} {verdict}: {description}")
        for note in ACCEPTANCE_NOTES.get(number, ()):
            terminalreporter.write_line(f"    {note}")


def tiny_detector_config(**overrides) -> DetectorConfig:
    """A 64px single-level detector that trains in milliseconds per step."""
    kw = dict(
        image_size=64,
        widths=(8, 8, 16),
        embed_dim=16,
        levels=(LevelConfig(8, (12.0, 24.0), (1.0,)),),
        roi_embed_dim=16,
        train_proposals=32,
        roi_samples=16,
        proposal_cap=50,
    )
    kw.update(overrides)
    return DetectorConfig(**kw)


@pytest.fixture
def acceptance_note(request):
    """Attach a line of measurements to the current test's criterion summary."""
    number = request.node.get_closest_marker("criterion").args[0]
    return lambda text: ACCEPTANCE_NOTES.setdefault(number, []).append(text)


@pytest.fixture
def tiny_config():
    return tiny_detector_config


@pytest.fixture
def tiny_model():
    def make(seed=0, dtype=torch.float32, **overrides):
        torch.manual_seed(seed)
        return DetectorModel(tiny_detector_config(**overrides)).to(dtype)

    return make


@pytest.fixture(scope="session")
def mini_shapes():
    """40 images of 64px with five shape classes."""
    cfg = ShapesConfig(num_images=40, image_size=64, min_size=10, max_size=30, max_objects=3, seed=5)
    return generate_shapes(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
