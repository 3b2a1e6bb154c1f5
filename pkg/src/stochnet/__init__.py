"""Simulation, symbolic max/min/+ representations and IPA gradient estimation
for stochastic activity, reliability and queueing networks."""

__version__ = "0.1.0"
