"""Metrics, adapter-dynamics analyses, and the experiment runner.

Grid KL is taken as KL(empirical || target): it blows up when samples land
where the target carries no mass, which is the direction that exposes
reward hacking. All metric functions are pure and deterministic given their
seeds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, fields

import numpy as np
from scipy.spatial.distance import pdist

from .hypernet import DeltaLog
from .numerics import RngStream
from .rewards import TiltedTargetGrid, reward_eval

KL_SMOOTHING = 1e-6


def grid_kl(samples: np.ndarray, target: TiltedTargetGrid, cond: int) -> float:
    """KL(empirical histogram || smoothed target masses) on the target grid."""
    samples = np.atleast_2d(samples)
    if len(samples) < 1000:
        raise ValueError(f"grid KL needs >= 1000 samples, got {len(samples)}")
    ij, inside = target.grid.cell_indices(samples)
    outside = 1.0 - inside.mean()
    if outside > 0.05:
        raise ValueError(
            f"{outside:.1%} of samples fall outside the grid; grid misconfigured"
        )
    res = target.grid.res
    counts = np.zeros((res, res))
    np.add.at(counts, (ij[inside, 0], ij[inside, 1]), 1.0)
    p = counts / counts.sum()
    q = target.masses[cond] + KL_SMOOTHING
    q = q / q.sum()
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def sliced_w2(samples_a: np.ndarray, samples_b: np.ndarray, n_projections: int = 128, seed: int = 0) -> float:
    """Monte-Carlo sliced 2-Wasserstein distance between point clouds."""
    a = np.atleast_2d(samples_a)
    b = np.atleast_2d(samples_b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("sliced W2 needs nonempty sample sets")
    if n_projections < 32:
        raise ValueError(f"need >= 32 projections, got {n_projections}")
    d = a.shape[1]
    dirs = RngStream(seed, stream=0x51).gaussian((n_projections, d)).data
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    if len(a) != len(b):
        k = max(len(a), len(b))
        levels = (np.arange(k) + 0.5) / k
        pa = np.quantile(pa, levels, axis=0)
        pb = np.quantile(pb, levels, axis=0)
    w2_sq = np.mean((pa - pb) ** 2, axis=0)
    return float(np.sqrt(np.mean(w2_sq)))


def diversity(samples: np.ndarray) -> float:
    """Mean pairwise Euclidean distance."""
    samples = np.atleast_2d(samples)
    if len(samples) < 2:
        raise ValueError("diversity needs at least 2 samples")
    return float(pdist(samples).mean())


# ---------------------------------------------------------------------------
# Adapter dynamics


@dataclass
class LoraDriftReport:
    steps: list  # sampling order, first entry is the starting step
    cosine: np.ndarray  # mean cosine similarity to the starting-step delta
    l1_change: np.ndarray  # mean relative L1 change


def lora_drift(log: DeltaLog) -> LoraDriftReport:
    """Per-step drift of emitted adapters relative to the starting step."""
    ref = log.vectors[0]  # (n_traj, dim)
    ref_norm = np.linalg.norm(ref, axis=1)
    ref_l1 = np.abs(ref).sum(axis=1)
    if not ref_norm.all():
        raise ValueError("starting-step delta has zero norm (untrained hypernetwork?)")
    cos, l1 = [], []
    for vec in log.vectors:
        dots = np.sum(vec * ref, axis=1)
        norms = np.linalg.norm(vec, axis=1)
        sims = np.clip(dots / (norms * ref_norm), -1.0, 1.0)
        cos.append(np.mean(sims))
        l1.append(np.mean(np.abs(vec - ref).sum(axis=1) / ref_l1))
    return LoraDriftReport(steps=list(log.steps), cosine=np.array(cos), l1_change=np.array(l1))


def lora_pca(vectors_by_step: dict) -> dict:
    """Top-2 principal coordinates and explained-variance shares per step."""
    out = {}
    for step, vecs in vectors_by_step.items():
        vecs = np.atleast_2d(vecs)
        if len(vecs) < 3:
            raise ValueError(f"PCA at step {step} needs >= 3 deltas, got {len(vecs)}")
        centered = vecs - vecs.mean(axis=0)
        if not np.abs(centered).any():
            raise ValueError(f"PCA at step {step}: all deltas identical")
        _, svals, vt = np.linalg.svd(centered, full_matrices=False)
        var = svals**2
        shares = var / var.sum()
        out[step] = {
            "coords": centered @ vt[:2].T,
            "explained": shares[:2],
        }
    return out


# ---------------------------------------------------------------------------
# Experiment runner


@dataclass
class MetricsRecord:
    method: str
    condition: str
    mean_reward: float
    stderr_reward: float
    kl_tilted: float
    kl_base: float
    sw2_data: float
    diversity: float
    wall_clock_ms: float
    n_samples: int
    seed: int
    config_hash: str
    checkpoint_hash: str


def metrics_header() -> list:
    return [f.name for f in fields(MetricsRecord)]


def record_row(rec: MetricsRecord) -> list:
    vals = []
    for f in fields(MetricsRecord):
        v = getattr(rec, f.name)
        vals.append(repr(float(v)) if isinstance(v, float) else str(v))
    return vals


def evaluate_method(
    method: str,
    sampler,
    cond_set,
    n_per_cond: int,
    spec,
    tilted: TiltedTargetGrid,
    base: TiltedTargetGrid,
    data_sampler,
    stream: RngStream,
    seed: int,
    config_hash: str,
    checkpoint_hash: str,
    sw2_projections: int = 128,
    timing_reps: int = 0,
) -> tuple[MetricsRecord, dict]:
    """Generate samples for one method and compute every metric.

    `sampler(cond_ids, stream)` returns (n, d) samples; `data_sampler(c, n,
    stream)` draws held-out data. Timing, when enabled, is the median over
    single-trajectory calls so the per-sample cost is honest about per-step
    overheads.
    """
    per_cond_samples = {}
    rewards = []
    kls_t, kls_b, sw2s, divs = [], [], [], []
    for i, c in enumerate(cond_set):
        xs = sampler(np.full(n_per_cond, c, dtype=np.int64), stream.child(i))
        per_cond_samples[int(c)] = xs
        rewards.append(reward_eval(xs, c, spec))
        kls_t.append(grid_kl(xs, tilted, int(c)))
        kls_b.append(grid_kl(xs, base, int(c)))
        held_out = data_sampler(int(c), n_per_cond, stream.child(1000 + i))
        sw2s.append(sliced_w2(xs, held_out, sw2_projections, seed=seed))
        divs.append(diversity(xs))
    rewards = np.concatenate(rewards)
    wall_ms = 0.0
    if timing_reps > 0:
        times = []
        for rep in range(timing_reps):
            c = cond_set[rep % len(cond_set)]
            t0 = time.perf_counter()
            sampler(np.array([c], dtype=np.int64), stream.child(2000 + rep))
            times.append((time.perf_counter() - t0) * 1000.0)
        wall_ms = float(np.median(times))
    rec = MetricsRecord(
        method=method,
        condition="all",
        mean_reward=float(rewards.mean()),
        stderr_reward=float(rewards.std(ddof=1) / np.sqrt(len(rewards))),
        kl_tilted=float(np.mean(kls_t)),
        kl_base=float(np.mean(kls_b)),
        sw2_data=float(np.mean(sw2s)),
        diversity=float(np.mean(divs)),
        wall_clock_ms=wall_ms,
        n_samples=len(rewards),
        seed=seed,
        config_hash=config_hash,
        checkpoint_hash=checkpoint_hash,
    )
    return rec, per_cond_samples
