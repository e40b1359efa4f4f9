"""Toy conditional dataset: an isotropic Gaussian mixture with one condition
id per mode, plus the CSV format shared with the CLI."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .numerics import RngStream


@dataclass(frozen=True)
class MixtureSpec:
    modes: np.ndarray = None  # (n_cond, d) component means
    std: float = 0.3

    def __post_init__(self):
        if self.modes is None:
            object.__setattr__(
                self, "modes", np.array([[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]])
            )
        object.__setattr__(self, "modes", np.asarray(self.modes, dtype=np.float64))

    @property
    def n_cond(self) -> int:
        return self.modes.shape[0]

    @property
    def dim(self) -> int:
        return self.modes.shape[1]

    def sample_cond(self, cond: int, n: int, stream: RngStream) -> np.ndarray:
        if not 0 <= cond < self.n_cond:
            raise ValueError(f"condition {cond} outside [0, {self.n_cond})")
        return self.modes[cond] + self.std * stream.gaussian((n, self.dim)).data

    def density(self, pts: np.ndarray, cond: int) -> np.ndarray:
        """Per-condition Gaussian density N(mode_c, std^2 I)."""
        pts = np.atleast_2d(pts)
        d = self.dim
        quad = np.sum((pts - self.modes[cond]) ** 2, axis=-1)
        norm = (2.0 * np.pi * self.std**2) ** (d / 2.0)
        return np.exp(-0.5 * quad / self.std**2) / norm


def sample_dataset(spec: MixtureSpec, n_per_cond: int, stream: RngStream):
    """Balanced draw: (x0, cond) with n_per_cond points per condition."""
    xs, cs = [], []
    for c in range(spec.n_cond):
        xs.append(spec.sample_cond(c, n_per_cond, stream))
        cs.append(np.full(n_per_cond, c, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(cs)


def write_dataset_csv(path, x0: np.ndarray, cond: np.ndarray) -> None:
    d = x0.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i + 1}" for i in range(d)] + ["cond"])
        for row, c in zip(x0, cond):
            writer.writerow([repr(float(v)) for v in row] + [int(c)])


def load_dataset_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "cond" or not all(
            h == f"x{i + 1}" for i, h in enumerate(header[:-1])
        ):
            raise ValueError(f"{path}: expected columns x1..xd,cond, got {header}")
        xs, cs = [], []
        for row in reader:
            xs.append([float(v) for v in row[:-1]])
            cs.append(int(row[-1]))
    return np.asarray(xs, dtype=np.float64), np.asarray(cs, dtype=np.int64)
