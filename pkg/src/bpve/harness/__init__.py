"""Experiment configuration, parallel Monte Carlo orchestration, statistics and reports."""

from bpve.harness.config import EXPERIMENT_KINDS, Comparison, ExperimentConfig, StatReport
from bpve.harness.experiments import run_experiment, write_table
from bpve.harness.parallel import chunk_bounds, chunk_rng, run_chunks
from bpve.harness.stats import (
    category_counts,
    chi_square,
    fd_bins,
    histogram_table,
    ks_lattice,
    ks_statistic,
    ks_two_sample,
)

__all__ = [
    "EXPERIMENT_KINDS",
    "Comparison",
    "ExperimentConfig",
    "StatReport",
    "category_counts",
    "chi_square",
    "chunk_bounds",
    "chunk_rng",
    "fd_bins",
    "histogram_table",
    "ks_lattice",
    "ks_statistic",
    "ks_two_sample",
    "run_chunks",
    "run_experiment",
    "write_table",
]
