"""Synthetic data generation from a mixture model.

Inputs are drawn uniformly on a box, the branch (shared vs routed) is a fair
coin, the component within the branch follows the shared weights or the gate
weights at the drawn input, and the output is Gaussian around the expert mean.
Streams come from the counter-based Philox generator so a seed pins the
dataset bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import Dataset, MixingMeasurePair, component_means, component_variances, prior_weights

__all__ = ["SamplerConfig", "sample_dataset", "sample_outputs", "save_dataset_csv", "load_dataset_csv"]


@dataclass(frozen=True)
class SamplerConfig:
    n: int
    input_low: float = -3.0
    input_high: float = 3.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not self.input_low < self.input_high:
            raise ValueError("input_low must be below input_high")


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed & ((1 << 64) - 1)))


def sample_dataset(model: MixingMeasurePair, cfg: SamplerConfig) -> Dataset:
    """Draw cfg.n pairs (x, y) from the model's joint law on the input box."""
    rng = _rng(cfg.seed)
    X = rng.uniform(cfg.input_low, cfg.input_high, size=(cfg.n, model.input_dim))
    Y = sample_outputs(model, X, rng)
    return Dataset(X, Y)


def sample_outputs(model: MixingMeasurePair, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one y per row of X from the conditional law f(y | x).

    The component is picked by inverting the per-row cumulative prior weights
    (branch coin folded in, since the priors already carry the 1/2 factors),
    so exactly one uniform and one normal variate are spent per row.
    """
    n = X.shape[0]
    priors = prior_weights(model, X)
    cut = np.cumsum(priors, axis=1)
    cut[:, -1] = 1.0  # guard the float tail
    u = rng.random(n)
    comp = (u[:, None] >= cut).sum(axis=1)
    means = component_means(model, X)[np.arange(n), comp]
    sd = np.sqrt(component_variances(model))[comp]
    return means + sd * rng.standard_normal(n)


def save_dataset_csv(data: Dataset, path: str) -> None:
    """Write the dataset with header x_0,...,x_{d-1},y at full precision."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x_{j}" for j in range(data.d)] + ["y"])
        for xi, yi in zip(data.x, data.y):
            writer.writerow([f"{v:.17g}" for v in xi] + [f"{yi:.17g}"])


def load_dataset_csv(path: str) -> Dataset:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty dataset file")
        expected = [f"x_{j}" for j in range(len(header) - 1)] + ["y"]
        if header != expected:
            raise ValueError(f"{path}: bad header {header!r}, expected {expected!r}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise ValueError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=float)
    return Dataset(arr[:, :-1], arr[:, -1])
