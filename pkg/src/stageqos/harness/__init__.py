"""Experiment runner and microbenchmarks."""
