"""File handling utilities."""

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd

PathLike = Union[str, Path]


class FileHandler:
    """Handles output files: CSV tables, sigma curves, trajectories and manifests."""

    @staticmethod
    def ensure_directories(*dirs: PathLike):
        """Create necessary directories if they don't exist."""
        for d in dirs:
            os.makedirs(d, exist_ok=True)

    @staticmethod
    def atomic_write_text(path: PathLike, text: str):
        """Write through a temp file in the same directory, then rename."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, 'w', newline='') as f:
                f.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.remove(tmp)
            raise

    @staticmethod
    def save_frame(df: pd.DataFrame, path: PathLike):
        """Save a table to CSV atomically."""
        FileHandler.atomic_write_text(path, df.to_csv(index=False, float_format='%.17g'))

    @staticmethod
    def save_meso_series(series, path: PathLike):
        FileHandler.save_frame(series.to_frame(), path)

    @staticmethod
    def save_sigma_curve(curve, path: PathLike):
        FileHandler.atomic_write_text(path, curve.to_text())

    @staticmethod
    def save_trajectory_csv(trajectory, path: PathLike):
        """Tidy (t, x, value) rows, one per grid node and output time."""
        times = np.repeat(trajectory.times, trajectory.values.shape[1])
        xs = np.tile(trajectory.x, trajectory.times.size)
        df = pd.DataFrame({'t': times, 'x': xs, 'value': trajectory.values.ravel()})
        FileHandler.save_frame(df, path)

    @staticmethod
    def save_trajectory_npz(trajectory, path: PathLike):
        """Compact binary snapshot with grid metadata."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.tmp.npz")
        np.savez_compressed(tmp, times=trajectory.times, values=trajectory.values,
                            kind=str(trajectory.kind.value), K=float(trajectory.K),
                            G=trajectory.values.shape[1])
        os.replace(tmp, path)

    @staticmethod
    def write_json(obj, path: PathLike):
        FileHandler.atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")

    @staticmethod
    def sha256(path: PathLike) -> str:
        digest = hashlib.sha256()
        with open(path, 'rb') as f:
            for block in iter(lambda: f.read(1 << 20), b''):
                digest.update(block)
        return digest.hexdigest()
