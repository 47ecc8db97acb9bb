"""Workloads, metrics, ablations and the command-line entry point."""
