from datetime import timedelta

import numpy as np
import pytest

from deeplight.grid import FEATURES, GridSpec, parse_hour, write_dataset
from deeplight.synthetic import StormParams, generate_dataset

START = parse_hour("2022-07-01T00Z")


def make_dataset(root, n_hours=12, n=4, tags=None, gaps=None, seed=0, start=START):
    """Small random dataset with valid feature ranges."""
    rng = np.random.default_rng(seed)
    grid = GridSpec.square(n)
    hours = [start + timedelta(hours=i) for i in range(n_hours)]
    shape = (n_hours, n, n)
    counts = rng.poisson(1.0, shape).astype(np.float32)
    frames = {
        "occurrence": (counts > 0).astype(np.float32),
        "flash_count": counts,
        "flash_energy": counts * rng.uniform(0.5, 2.0, shape).astype(np.float32),
        "reflectivity": rng.uniform(0, 60, shape),
        "cloud_top_height": rng.uniform(0, 12000, shape),
        "cloud_top_pressure": rng.uniform(100, 900, shape),
        "cloud_optical_depth": rng.uniform(0, 60, shape),
    }
    assert set(frames) == set(FEATURES)
    tags = tags or ["train"] * n_hours
    return write_dataset(root, grid, hours, tags, frames, gaps)


@pytest.fixture
def tiny_dataset(tmp_path):
    return make_dataset(tmp_path / "tiny")


@pytest.fixture(scope="session")
def synth_fixture(tmp_path_factory):
    """The seed-7, 32x32, 400-hour synthetic dataset."""
    root = tmp_path_factory.mktemp("synth") / "seed7"
    return generate_dataset(root, GridSpec.square(32), 400, StormParams(seed=7))


SKILL_EPOCHS = 20


class RunCache:
    """Trains each (loss arm, seed) pair at most once per session."""

    def __init__(self, data_root, out_root):
        self.data_root = data_root
        self.out_root = out_root
        self.runs = {}

    def get(self, arm: str, seed: int, epochs: int = SKILL_EPOCHS):
        from deeplight.training import TrainConfig, ablate, train

        key = (arm, seed, epochs)
        if key not in self.runs:
            cfg = TrainConfig(data=str(self.data_root), out=str(self.out_root / f"{arm}_{seed}_{epochs}"),
                              epochs=epochs, seed=seed)
            if arm == "wbce":
                cfg = ablate(cfg, "no_hazy")
            self.runs[key] = train(cfg, force=True)
        return self.runs[key]


@pytest.fixture(scope="session")
def run_cache(synth_fixture, tmp_path_factory):
    return RunCache(synth_fixture.root, tmp_path_factory.mktemp("runs"))


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
