"""Logging utilities for the simulation audit trail."""

import os
import threading
from datetime import datetime
from crystal_surface import config


class RunLogger:
    """Logs replicate runs, pipeline phases and verdicts for audit."""

    def __init__(self, log_file: str = None, title: str = "Crystal Surface Run Log"):
        os.makedirs(config.LOG_DIR, exist_ok=True)

        if log_file is None:
            timestamp = datetime.now().strftime('%Y%m%d_%H%M%S')
            log_file = os.path.join(config.LOG_DIR, f'run_{timestamp}.log')

        self.log_file = str(log_file)
        self._lock = threading.Lock()
        self._write_header(title)

    def _write_header(self, title: str):
        """Write log file header."""
        with open(self.log_file, 'w') as f:
            f.write(f"{title}\n")
            f.write(f"Timestamp: {datetime.now().isoformat()}\n")
            f.write(f"{'='*60}\n\n")

    def _append(self, level: str, key: str, action: str, details: str):
        timestamp = datetime.now().strftime('%Y-%m-%d %H:%M:%S')
        message = f"[{timestamp}] {level:7s} | {key:12s} | {action:20s} | {details}\n"
        with self._lock:
            with open(self.log_file, 'a') as f:
                f.write(message)

    def log_success(self, key: str, action: str, details: str = ""):
        """Log a completed step."""
        self._append("SUCCESS", key, action, details)

    def log_failure(self, key: str, action: str, reason: str):
        """Log a failed step."""
        self._append("FAILURE", key, action, reason)

    def log_skip(self, key: str, reason: str):
        """Log a skipped step."""
        self._append("SKIP", key, "skip", reason)

    def get_log_path(self) -> str:
        """Return path to log file."""
        return self.log_file
