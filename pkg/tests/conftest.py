import numpy as np
import pytest
import torch

from avprompt.core import VideoClip, default_config
from avprompt.datasets import CIRCLE_HZ, render_clip, tone
from avprompt.model import AudioVisualSegmenter


def make_clip(seed=0, B=2, R=64, text=None):
    rng = np.random.default_rng(seed)
    frames, circle, square, sounding = render_clip(rng, B, R)
    mask = circle if sounding == "circle" else square
    wave = tone(rng, CIRCLE_HZ if sounding == "circle" else 2 * CIRCLE_HZ, B)
    return VideoClip(frames / 255.0, wave.astype(np.float32), mask.astype(np.int64), f"clip{seed}", text)


@pytest.fixture
def cfg():
    return default_config(64)


@pytest.fixture
def model(cfg):
    return AudioVisualSegmenter(cfg, seed=0)


@pytest.fixture
def clip():
    return make_clip(0)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    lines = test_acceptance.summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
