"""Data generators, training drivers and experiment sweeps."""
