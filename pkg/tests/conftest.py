import numpy as np
import pytest

from piano.pdesim import SCENARIO_KINDS, make_scenario, named_rng, synthetic_radar
from piano.training import Dataset

# Desk-scale sizes shared by the slower checks.
GRID = (32, 32)
WIDTHS = [16, 32, 32]

ACCEPTANCE_LINES = []


def record(name, ok, detail=""):
    """Remember one acceptance verdict and echo it (visible with -s)."""
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def scenario_set(split, count, n_frames=24, kinds=SCENARIO_KINDS, size=GRID, **kw):
    seeds = named_rng(1234, f"tests/{split}").integers(0, 2**31, count)
    return [make_scenario(kinds[i % len(kinds)], size, n_frames, int(sd), **kw)
            for i, sd in enumerate(seeds)]


def to_dataset(scenarios):
    radar = [synthetic_radar(sc.frames.frames)[:, 0] for sc in scenarios]
    return Dataset.from_scenarios(scenarios, radar)


@pytest.fixture(scope="session")
def mixed_train():
    return to_dataset(scenario_set("train", 20))


@pytest.fixture(scope="session")
def mixed_eval():
    return to_dataset(scenario_set("eval", 10))


@pytest.fixture
def rng():
    return np.random.default_rng(7)
