"""Markov-chain models of mobile Byzantine failures, with simulation,
exact analytics and a MAPE-K reconfiguration loop."""
from .chain import ChainSpec, SpecError, ThresholdPolicy, Variant, transitions
from .simulator import AggregateStats, OccupancyHistogram, RunTrace, SimBudget, run_batch, run_ctmc, run_dtmc

__all__ = ["ChainSpec", "SpecError", "ThresholdPolicy", "Variant", "transitions",
           "AggregateStats", "OccupancyHistogram", "RunTrace", "SimBudget",
           "run_batch", "run_ctmc", "run_dtmc"]
__version__ = "0.1.0"
