import os
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from poseanim import synthdata as sd
from poseanim.core import UvAtlas
from poseanim.losses import PerceptualExtractor
from poseanim.networks import NetConfig, build
from poseanim.training import DeskConfig, ModelSet

ROOT = Path(__file__).resolve().parents[1]
MODEL_CACHE = Path(os.environ.get("POSEANIM_MODEL_CACHE", ROOT / ".cache" / "models"))

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")
torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))

SMALL = 64
SMALL_UV = (128, 192)
TINY = NetConfig(width=4, depth=2, latent=8, disc_depth=2)


@pytest.fixture(scope="session")
def atlas():
    return UvAtlas.grid(*SMALL_UV)


@pytest.fixture(scope="session")
def figure():
    return sd.generate_figure(11)


@pytest.fixture(scope="session")
def scene(figure, atlas):
    pose = sd.sample_pose(np.random.default_rng(3), tpose_prob=0.0)
    return sd.render_scene(figure, pose, "front", SMALL, atlas)


@pytest.fixture(scope="session")
def tiny_models():
    ex = PerceptualExtractor(4).freeze()
    return ModelSet(build("sil", TINY, 0).eval(), build("gar", TINY, 1).eval(), build("render", TINY, 2).eval(),
                    build("disc", TINY, 3).eval(), ex, DeskConfig())


@pytest.fixture(scope="session")
def desk_models():
    """The trained desk-scale model set; trained into the cache on first use (~45 min on one core)."""
    from poseanim.training import train_suite

    return train_suite(DeskConfig(), MODEL_CACHE)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
