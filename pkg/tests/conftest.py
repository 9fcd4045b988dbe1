import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mmqlab.pipeline import PipelineSpec, build_model, collect_calibration
from mmqlab.tasks import make_probe_set


@pytest.fixture(scope="session")
def default_spec():
    return PipelineSpec(seed=7)


@pytest.fixture(scope="session")
def default_model(default_spec):
    return build_model(default_spec)


@pytest.fixture(scope="session")
def probe_set():
    return make_probe_set(11, 128)


@pytest.fixture(scope="session")
def calibration(default_model, probe_set):
    return collect_calibration(default_model, probe_set, n=128)


@pytest.fixture(scope="session")
def tiny_spec():
    return PipelineSpec(
        d_model=32,
        vision_blocks=3,
        connector_blocks=3,
        language_blocks=3,
        heads=2,
        patch_count=8,
        vocab=64,
        seed=5,
    )


@pytest.fixture(scope="session")
def tiny_probes(tiny_spec):
    return make_probe_set(3, 8, patch_count=8, d_input=32, vocab=64)
