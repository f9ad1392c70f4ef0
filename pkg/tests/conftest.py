import sys
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fluxlattice.data_model import CycleDataset, FluxProfile  # noqa: E402


def make_profile(cycle="c1", asm="A1", bank=0.5, t0=datetime(2020, 1, 1), idx=None, counts=None, grid=180):
    if idx is None:
        idx = np.arange(grid)
    if counts is None:
        counts = 100.0 + 10.0 * np.sin(np.asarray(idx) / 10.0)
    return FluxProfile(cycle, asm, bank, t0, idx, counts, axial_grid_size=grid)


@pytest.fixture
def small_dataset():
    t0 = datetime(2020, 1, 1, 8)
    profiles = []
    for c in range(4):
        start = t0 + timedelta(days=28 * c)
        for a, asm in enumerate(("A1", "B2")):
            idx = np.arange(0, 20)
            counts = 50.0 + c + a + idx
            profiles.append(FluxProfile(f"cyc{c}", asm, 0.1 * c, start + timedelta(minutes=15 * a), idx, counts, axial_grid_size=20))
    split = {f"cyc{c}": ("predict" if c == 3 else "train") for c in range(4)}
    return CycleDataset(profiles, split)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acceptance_log.LINES):
            terminalreporter.write_line(acceptance_log.LINES[n])
