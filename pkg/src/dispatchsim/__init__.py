"""Simulation, estimation and control for large fleets of randomized on/off loads."""

from . import analysis, control, filtering, markov, population, scenario

__all__ = ["analysis", "control", "filtering", "markov", "population", "scenario"]
__version__ = "0.1.0"
