import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vitptq.checkpoint import load_fixture
from vitptq.synthetic import make_images
from vitptq.vit import ViT, ViTConfig

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

CALIB_SEED = 300
EVAL_SEED = 200


@pytest.fixture(scope="session")
def fixture_model():
    return load_fixture()


@pytest.fixture(scope="session")
def calibration_images():
    return make_images(1024, CALIB_SEED)[0]


@pytest.fixture(scope="session")
def eval_set():
    return make_images(2000, EVAL_SEED)


@pytest.fixture(scope="session")
def fixture_records(fixture_model, calibration_images):
    from vitptq.vit import capture_block_records
    return capture_block_records(fixture_model, [calibration_images[j:j + 256] for j in range(0, 1024, 256)])


@pytest.fixture
def tiny_model():
    cfg = ViTConfig(image_size=8, patch_size=4, embed_dim=16, depth=2, heads=2, mlp_ratio=2, num_classes=4)
    return ViT.init(cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
