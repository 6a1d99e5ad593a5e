import numpy as np
import pytest

from poseprior import stt


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config():
    return stt.STTConfig(dim=8, spatial_layers=1, temporal_layers=1, heads=1, num_poses=3, num_joints=4, mask_ratio=0.25)


def random_pose(rng, k=17, conf=True):
    xy = rng.uniform(0, 640, size=(k, 2))
    c = rng.uniform(0.05, 1.0, size=(k, 1)) if conf else np.ones((k, 1))
    return np.concatenate([xy, c], axis=1)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
