import numpy as np
import pytest
import torch

from tdaug.data import ImageVolume, LabelVolume, SyntheticPhantomSpec

torch.set_num_threads(1)


def make_volumes(n, shape=(8, 8, 2), groups=None, num_classes=2, seed=0):
    """Cheap random image/label pairs with optional sub-group tags."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        g = None if groups is None else f"g{i % groups}"
        img = ImageVolume(rng.random(shape), (1.0, 1.0, 1.0), f"s{i:03d}", group=g)
        lab = LabelVolume(rng.integers(0, num_classes, shape), num_classes)
        out.append((img, lab))
    return out


@pytest.fixture
def tiny_phantom_spec():
    return SyntheticPhantomSpec(image_size=32, depth=3)


# acceptance criteria report: one line per criterion at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
