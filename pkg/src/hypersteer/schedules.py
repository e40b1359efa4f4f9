"""Noise schedules for the two sampling paradigms.

The variance-preserving schedule is discrete with steps t = 1..T and a
linearly increasing per-step rate; the flow schedule is a uniform grid on
[0, 1] for the straight-line interpolation with alpha(t) = 1 - t,
beta(t) = t.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class DiffusionSchedule:
    """Discrete VP schedule: beta, cumulative alpha_bar, marginal sigma.

    Arrays are indexed by step-1; use the accessors with 1-based steps in [1, T].
    """

    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def beta_t(self, t):
        return self.beta[np.asarray(t) - 1]

    def alpha_bar_t(self, t):
        return self.alpha_bar[np.asarray(t) - 1]

    def sigma_t(self, t):
        return self.sigma[np.asarray(t) - 1]


def make_vp_schedule(T: int, beta_min: float, beta_max: float) -> DiffusionSchedule:
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    if not (0.0 < beta_min < beta_max < 1.0):
        raise ValueError(
            f"need 0 < beta_min < beta_max < 1, got ({beta_min}, {beta_max})"
        )
    beta = np.linspace(beta_min, beta_max, T)
    alpha_bar = np.cumprod(1.0 - beta)
    sigma = np.sqrt(1.0 - alpha_bar)
    return DiffusionSchedule(T=T, beta=beta, alpha_bar=alpha_bar, sigma=sigma)


@dataclass(frozen=True)
class FlowSchedule:
    """Uniform integration grid on [0, 1] for the rectified-flow sampler.

    t is the noise fraction: t = 1 is pure noise, t = 0 is data. Sampling
    integrates from t = 1 - dt down to t = dt and finishes with a one-step
    prediction, avoiding the singular endpoints.
    """

    N: int
    grid: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.N < 2:
            raise ValueError(f"flow schedule needs N >= 2, got {self.N}")
        if self.grid is None:
            object.__setattr__(self, "grid", np.linspace(0.0, 1.0, self.N + 1))

    @property
    def dt(self) -> float:
        return 1.0 / self.N

    @staticmethod
    def alpha(t):
        return 1.0 - np.asarray(t, dtype=np.float64)

    @staticmethod
    def beta(t):
        return np.asarray(t, dtype=np.float64)
