import numpy as np
import pytest

from crystal_surface import config
from crystal_surface.harness import ExperimentConfig


@pytest.fixture(autouse=True)
def isolated_dirs(tmp_path, monkeypatch):
    """Keep logs and run outputs inside the test's temp dir."""
    monkeypatch.setattr(config, "LOG_DIR", tmp_path / "logs")
    monkeypatch.setattr(config, "OUTPUT_DIR", tmp_path / "runs")
    return tmp_path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config(tmp_path):
    """Three small lattices, a handful of replicates, short macroscopic times."""
    return ExperimentConfig(
        name="tiny",
        K=1.0,
        N_values=[16, 24, 32],
        profile_family="sin",
        amplitude=0.003,
        n_samples=4,
        times=[0.0, 1.0e-4, 2.0e-4],
        epsilon_grid=[1.0 / 32, 1.0 / 16, 0.125],
        delta_grid=[0.0, 2.0e-5],
        master_seed=7,
        output_dir=tmp_path / "runs" / "tiny",
        threads=2,
    )
