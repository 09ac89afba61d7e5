"""Singular-value spectra of learned adaptation matrices.

Trains-side code produces full-rank per-layer delta matrices; this module
decomposes each one, bins the singular values into fixed-width histogram
buckets, and reports scale-free rank metrics. CSV output is the artifact;
plotting is left to whatever consumes the CSVs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapters import AdapterBank
from .errors import ConfigError, ShapeError
from .kernel import svd

DEFAULT_BINS = 50
DEFAULT_RANK_THRESHOLD = 0.01


@dataclass
class SpectrumReport:
    """Histogrammed singular values of one adaptation matrix.

    Bins are half-open [lo, hi) except the last, which closes so the top
    singular value is counted and the bin counts sum to the spectrum size.
    """

    layer: int
    group: str
    singular_values: np.ndarray
    bin_edges: np.ndarray
    bin_counts: np.ndarray

    def effective_rank_at(self, tau: float) -> int:
        """Number of singular values exceeding tau * s_max."""
        if self.singular_values.size == 0:
            return 0
        s_max = float(self.singular_values[0])
        return int((self.singular_values > tau * s_max).sum())

    def energy_top_fraction(self, fraction: float = 0.10) -> float:
        """Share of squared-singular-value energy in the top ``fraction``."""
        s = self.singular_values
        total = float((s * s).sum())
        if total == 0.0:
            return 0.0
        k = max(1, math.ceil(fraction * s.size))
        return float((s[:k] * s[:k]).sum()) / total

    @property
    def effective_rank(self) -> int:
        return self.effective_rank_at(DEFAULT_RANK_THRESHOLD)

    @property
    def energy_top10(self) -> float:
        return self.energy_top_fraction(0.10)


def spectrum(delta: np.ndarray, bins: int = DEFAULT_BINS, value_range=None,
             layer: int = 0, group: str = "mha") -> SpectrumReport:
    """Decompose a square delta matrix and histogram its singular values.

    Bins are fixed-width over [0, s_max] unless ``value_range`` overrides;
    a zero matrix gets a unit-width range so conservation still holds.
    """
    if delta.ndim != 2 or delta.shape[0] != delta.shape[1]:
        raise ShapeError(f"spectrum expects a square matrix, got {delta.shape}")
    if bins < 1:
        raise ConfigError(f"bins must be >= 1, got {bins}")
    _, s, _ = svd(delta)
    if value_range is None:
        s_max = float(s[0]) if s.size else 0.0
        value_range = (0.0, s_max if s_max > 0.0 else 1.0)
    counts, edges = np.histogram(s, bins=bins, range=value_range)
    return SpectrumReport(layer=layer, group=group, singular_values=s,
                          bin_edges=edges, bin_counts=counts)


def rank_sweep(bank: AdapterBank, bins: int = DEFAULT_BINS) -> list[SpectrumReport]:
    """Spectrum of every per-layer, per-group delta of a full-rank bank."""
    if bank.config.variant != "full_rank":
        raise ConfigError("rank_sweep needs a bank with variant='full_rank'")
    reports = []
    for layer in bank.layers:
        for group in bank.config.groups:
            delta = bank.tensors[bank.config.delta_key(group, layer)]
            reports.append(spectrum(delta, bins=bins, layer=layer, group=group))
    return reports


def sweep_summary(reports: list[SpectrumReport]) -> dict:
    """Aggregate row: median effective rank at the default threshold."""
    ranks = [r.effective_rank for r in reports]
    return {
        "reports": len(reports),
        "median_effective_rank": float(np.median(ranks)) if ranks else 0.0,
        "max_effective_rank": max(ranks, default=0),
    }


def write_spectrum_csvs(reports: list[SpectrumReport], out_dir) -> list[Path]:
    """One bin_lo,bin_hi,count file per (layer, group) plus a summary file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in reports:
        path = out / f"spectrum_layer{r.layer}_{r.group}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_lo", "bin_hi", "count"])
            for i, count in enumerate(r.bin_counts):
                writer.writerow([f"{r.bin_edges[i]:.17g}", f"{r.bin_edges[i + 1]:.17g}", int(count)])
        paths.append(path)
    summary = out / "spectrum_summary.csv"
    with open(summary, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "group", "effective_rank", "energy_top10"])
        for r in reports:
            writer.writerow([r.layer, r.group, r.effective_rank, f"{r.energy_top10:.12g}"])
    paths.append(summary)
    return paths
