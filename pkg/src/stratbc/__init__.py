"""Stratified behavior cloning for retention-oriented recommendation.

The package trains per-stratum imitation policies from high-retention user
trajectories, regularizes them toward diverse actions, routes users to a
stratum policy at inference time via per-level centroid banks, and ships a
deterministic synthetic retention environment plus a CLI harness for
reproducible experiments.
"""

__version__ = "0.1.0"
