"""
Data Loader module.
Loads persisted series, sigma curves and PDE trajectories back into memory.
"""
import json
import os

import numpy as np
import pandas as pd

from crystal_surface.current_fit import SigmaCurve
from crystal_surface.observables import MesoSeries
from crystal_surface.pde import FieldKind, PdeTrajectory


class DataLoader:
    @staticmethod
    def _require(path):
        if not os.path.exists(path):
            raise FileNotFoundError(f"No data found at {path}")

    @staticmethod
    def load_frame(path) -> pd.DataFrame:
        DataLoader._require(path)
        return pd.read_csv(path)

    @staticmethod
    def load_meso_series(path, observable: str = "w") -> MesoSeries:
        """Load a MesoSeries CSV (columns x, t, epsilon, delta, mean, variance, n_samples)."""
        return MesoSeries.from_frame(DataLoader.load_frame(path), observable=observable)

    @staticmethod
    def load_sigma_curve(path) -> SigmaCurve:
        DataLoader._require(path)
        with open(path) as f:
            return SigmaCurve.from_text(f.read())

    @staticmethod
    def load_trajectory(path) -> PdeTrajectory:
        """Load a trajectory written by FileHandler.save_trajectory_npz."""
        DataLoader._require(path)
        with np.load(path) as data:
            return PdeTrajectory(times=data["times"], values=data["values"],
                                 kind=FieldKind(str(data["kind"])), K=float(data["K"]))

    @staticmethod
    def load_json(path) -> dict:
        DataLoader._require(path)
        with open(path) as f:
            return json.load(f)
