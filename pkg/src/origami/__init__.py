"""Origami hierarchical state channels over a simulated ledger."""

__version__ = "0.1.0"

from .scenario import load_scenario
from .simnet import run_scenario

__all__ = ["load_scenario", "run_scenario", "__version__"]
