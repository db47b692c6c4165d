import numpy as np
import pytest

from occmae import rng as rngs
from occmae.config import RunConfig
from occmae.pretrain import prepare
from occmae.scene import generate_scene, random_scene_spec

SMALL_VALUES = {
    "grid": "16x16x8",
    "voxel_size": "6.4,6.4,1.0",
    "min_corner": "-51.2,-51.2,-3.0",
    "num_rays": "4096",
    "epochs": "2",
}


def small_config(**extra):
    values = dict(SMALL_VALUES)
    values.update({k: str(v) for k, v in extra.items()})
    return RunConfig().with_values(values).validate()


def small_clouds(cfg, n, offset=0):
    return [generate_scene(random_scene_spec(cfg.scene, rngs.derive_seed(cfg.seed, "scene", offset + i),
                                             cfg.num_boxes))
            for i in range(n)]


@pytest.fixture
def small_cfg():
    return small_config()


@pytest.fixture
def small_scenes(small_cfg):
    return [prepare(c, small_cfg.grid) for c in small_clouds(small_cfg, 4)]



def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    import sys

    mod = next((m for n, m in sys.modules.items() if n.split(".")[-1] == "test_acceptance"), None)
    report = getattr(mod, "REPORT", None)
    if report:
        terminalreporter.section("acceptance criteria")
        for n in sorted(report):
            terminalreporter.write_line(report[n])
