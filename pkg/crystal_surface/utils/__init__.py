"""Utility modules."""
from .file_handler import FileHandler
from .logger import RunLogger
from .data_loader import DataLoader

__all__ = ['FileHandler', 'RunLogger', 'DataLoader']
