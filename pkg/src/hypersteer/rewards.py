"""Analytic differentiable rewards, the exact tilted-target grid, and
rejection-sampled preference data.

Reward families are chosen so gradients are closed-form and the tilted
distribution has a conjugate form for a Gaussian base, which gives grid
oracles the image-domain rewards the full-scale system uses cannot provide.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, Tensor, ops

FAMILIES = ("mode_pull", "annulus", "composite")


@dataclass(frozen=True)
class RewardSpec:
    family: str
    mu_star: np.ndarray  # (n_cond, d) per-condition target points
    radius: float = 1.0
    weights: tuple = (1.0, 1.0)  # composite: (mode-pull weight, annulus weight)
    gamma: float = 0.5

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown reward family {self.family!r}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        object.__setattr__(self, "mu_star", np.asarray(self.mu_star, dtype=np.float64))

    def targets(self, cond_ids) -> np.ndarray:
        ids = np.asarray(cond_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.mu_star.shape[0]):
            raise ValueError(f"unknown condition id in {np.unique(ids)}")
        return self.mu_star[ids]

    def max_reward(self) -> float:
        # Every family is bounded above by 0 (quadratic penalties).
        return 0.0


def reward_eval(x, cond_ids, spec: RewardSpec) -> np.ndarray:
    """Per-sample reward; x is (n, d) or (d,)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ids = np.broadcast_to(np.asarray(cond_ids, dtype=np.int64), (x.shape[0],))
    mu = spec.targets(ids)
    pull = -np.sum((x - mu) ** 2, axis=-1)
    if spec.family == "mode_pull":
        return pull
    ring = -((np.linalg.norm(x, axis=-1) - spec.radius) ** 2)
    if spec.family == "annulus":
        return ring
    w0, w1 = spec.weights
    return w0 * pull + w1 * ring


def reward_grad(x, cond_ids, spec: RewardSpec) -> np.ndarray:
    """Closed-form gradient of `reward_eval` w.r.t. x."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ids = np.broadcast_to(np.asarray(cond_ids, dtype=np.int64), (x.shape[0],))
    mu = spec.targets(ids)
    g_pull = -2.0 * (x - mu)
    if spec.family == "mode_pull":
        return g_pull
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    g_ring = -2.0 * (norm - spec.radius) * x / norm
    if spec.family == "annulus":
        return g_ring
    w0, w1 = spec.weights
    return w0 * g_pull + w1 * g_ring


def reward_eval_ops(x: Tensor, cond_ids, spec: RewardSpec) -> Tensor:
    """Reward built from recorded primitives, for gradient paths."""
    ids = np.broadcast_to(np.asarray(cond_ids, dtype=np.int64), (x.shape[0],))
    mu = Tensor(spec.targets(ids))
    pull = ops.neg(ops.sum(ops.square(ops.sub(x, mu)), axis=-1))
    if spec.family == "mode_pull":
        return pull
    norm = ops.sqrt(ops.sum(ops.square(x), axis=-1))
    ring = ops.neg(ops.square(ops.sub(norm, Tensor(spec.radius))))
    if spec.family == "annulus":
        return ring
    w0, w1 = spec.weights
    return ops.add(ops.scale(pull, w0), ops.scale(ring, w1))


# ---------------------------------------------------------------------------
# Grid machinery


@dataclass(frozen=True)
class GridSpec:
    lo: float = -5.0
    hi: float = 5.0
    res: int = 256

    def centers(self) -> np.ndarray:
        edges = np.linspace(self.lo, self.hi, self.res + 1)
        return 0.5 * (edges[:-1] + edges[1:])

    @property
    def cell_area(self) -> float:
        h = (self.hi - self.lo) / self.res
        return h * h

    def points(self) -> np.ndarray:
        """Cell centers as (res*res, 2); index [i, j] maps to (x_i, y_j)."""
        c = self.centers()
        xx, yy = np.meshgrid(c, c, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=1)

    def cell_indices(self, pts: np.ndarray):
        """(i, j) cell indices and an in-bounds mask for points (n, 2)."""
        h = (self.hi - self.lo) / self.res
        ij = np.floor((pts - self.lo) / h).astype(np.int64)
        inside = np.all((pts >= self.lo) & (pts < self.hi), axis=-1)
        return np.clip(ij, 0, self.res - 1), inside


class TiltedTargetGrid:
    """Per-condition normalized cell masses of base * exp(R / gamma)."""

    def __init__(self, grid: GridSpec, masses: dict, normalizers: dict):
        self.grid = grid
        self.masses = masses  # cond -> (res, res), sums to 1
        self.normalizers = normalizers  # cond -> Z of the tilt integral
        for c, m in masses.items():
            if abs(m.sum() - 1.0) > 1e-9 or (m < 0).any():
                raise ValueError(f"grid masses for condition {c} are not a distribution")

    @property
    def conditions(self) -> list:
        return sorted(self.masses)

    def density(self, cond: int) -> np.ndarray:
        return self.masses[cond] / self.grid.cell_area

    def mean_reward(self, spec: RewardSpec, cond: int) -> float:
        r = reward_eval(self.grid.points(), cond, spec)
        return float(np.sum(self.masses[cond].ravel() * r))

    def mean_point(self, cond: int) -> np.ndarray:
        return self.masses[cond].ravel() @ self.grid.points()

    def sample(self, cond: int, n: int, stream: RngStream) -> np.ndarray:
        """Inverse-CDF draw of cells, uniform jitter within each cell."""
        cdf = np.cumsum(self.masses[cond].ravel())
        cdf[-1] = 1.0
        cells = np.searchsorted(cdf, stream.uniform((n,)))
        pts = self.grid.points()[cells]
        h = (self.grid.hi - self.grid.lo) / self.grid.res
        return pts + (stream.uniform((n, 2)) - 0.5) * h


def tilted_target(base_density, spec: RewardSpec, grid: GridSpec, cond_ids) -> TiltedTargetGrid:
    """Exact grid tilt: density proportional to base * exp(R / gamma).

    `base_density(points, cond)` returns nonnegative densities. The exponent
    is shifted by the reward supremum for stability; the recorded normalizer
    Z is the unshifted integral of base * exp(R / gamma).
    """
    pts = grid.points()
    masses, normalizers = {}, {}
    for c in np.unique(np.asarray(cond_ids, dtype=np.int64)):
        base = np.asarray(base_density(pts, int(c)), dtype=np.float64)
        if (base < 0).any():
            raise ValueError("base density must be nonnegative")
        covered = base.sum() * grid.cell_area
        if covered < 0.999:
            raise ValueError(
                f"grid covers only {covered:.4f} of base mass for condition {c}"
            )
        r = reward_eval(pts, int(c), spec)
        shift = spec.max_reward()
        tilt = np.exp((r - shift) / spec.gamma)
        raw = base * tilt
        z_shifted = raw.sum() * grid.cell_area
        if not np.isfinite(z_shifted) or z_shifted <= 0.0:
            raise ValueError(
                f"tilt normalizer degenerate (max R/gamma = {r.max() / spec.gamma:.3g}); "
                "rescale gamma"
            )
        mass = raw / raw.sum()
        masses[int(c)] = mass.reshape(grid.res, grid.res)
        normalizers[int(c)] = z_shifted * np.exp(shift / spec.gamma)
    return TiltedTargetGrid(grid, masses, normalizers)


def base_grid(base_density, grid: GridSpec, cond_ids) -> TiltedTargetGrid:
    """Untilted reference grid (R identically zero)."""
    pts = grid.points()
    masses, normalizers = {}, {}
    for c in np.unique(np.asarray(cond_ids, dtype=np.int64)):
        base = np.asarray(base_density(pts, int(c)), dtype=np.float64)
        masses[int(c)] = (base / base.sum()).reshape(grid.res, grid.res)
        normalizers[int(c)] = base.sum() * grid.cell_area
    return TiltedTargetGrid(grid, masses, normalizers)


# ---------------------------------------------------------------------------
# Preference data


@dataclass
class PreferenceSet:
    samples: dict  # cond -> (n, d) draws from the preferred distribution
    eta: np.ndarray | None = None  # per-timestep regularization weights

    def __post_init__(self):
        for c, s in self.samples.items():
            if len(s) == 0:
                raise ValueError(f"preference set for condition {c} is empty")
        if self.eta is not None:
            self.eta = np.asarray(self.eta, dtype=np.float64)
            if (self.eta < 0).any():
                raise ValueError("eta weights must be nonnegative")

    def eta_at(self, t) -> np.ndarray:
        """eta_t for 1-based steps t; unit weight when no schedule given."""
        if self.eta is None:
            return np.ones_like(np.asarray(t, dtype=np.float64))
        return self.eta[np.asarray(t) - 1]


class LowAcceptanceError(RuntimeError):
    pass


def gen_preference_set(
    base_sampler,
    spec: RewardSpec,
    grid: GridSpec,
    cond_ids,
    n_per_cond: int,
    budget: int,
    stream: RngStream,
    eta=None,
) -> PreferenceSet:
    """Rejection-sample the tilted target per condition.

    Proposals come from `base_sampler(cond, n, stream)` and are accepted with
    probability exp((R - R_max) / gamma); proposals outside the grid are
    discarded so the result matches the grid-tilted density's support.
    `budget` bounds the number of proposals per condition.
    """
    if budget < n_per_cond:
        raise ValueError(f"budget {budget} below requested count {n_per_cond}")
    r_max = spec.max_reward()
    samples = {}
    for c in np.asarray(cond_ids, dtype=np.int64):
        c = int(c)
        kept = []
        got = 0
        proposed = 0
        while got < n_per_cond:
            if proposed >= budget:
                raise LowAcceptanceError(
                    f"proposal budget {budget} exhausted for condition {c} "
                    f"({got}/{n_per_cond} accepted); increase gamma or budget"
                )
            chunk = min(8192, budget - proposed)
            pts = np.asarray(base_sampler(c, chunk, stream), dtype=np.float64)
            proposed += chunk
            accept_p = np.exp((reward_eval(pts, c, spec) - r_max) / spec.gamma)
            u = stream.uniform((chunk,))
            _, inside = grid.cell_indices(pts)
            take = (u < accept_p) & inside
            kept.append(pts[take])
            got += int(take.sum())
            if proposed >= 16384 and got / proposed < 1e-3:
                raise LowAcceptanceError(
                    f"acceptance rate {got / proposed:.2e} below 1e-3 for condition {c}; "
                    "increase gamma"
                )
        samples[c] = np.concatenate(kept)[:n_per_cond]
    return PreferenceSet(samples=samples, eta=eta)
