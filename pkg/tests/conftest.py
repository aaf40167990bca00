from __future__ import annotations

import numpy as np
import pytest

from apotrack.benchmark import generate_texture
from apotrack.imaging import Image


def textured(size: int = 64, seed: int = 0, scales=(1.0, 2.0, 4.0)) -> np.ndarray:
    return generate_texture(size, size, seed, scales=scales)


def periodic_texture(size: int = 64, seed: int = 0, sigma: float = 1.5) -> np.ndarray:
    """Smooth noise that wraps around, so integer shifts by ``np.roll`` are seamless."""
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    z = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return np.clip(0.5 + 0.2 * z / z.std(), 0, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def texture64():
    return Image(textured(64, 3))


# (number, passed, detail) rows recorded by the acceptance tests
ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
