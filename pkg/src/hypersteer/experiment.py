"""Experiment runner: builds every configured method's sampler, computes the
metric records, and writes the delimited output plus figures.

Methods run sequentially for timing fairness; all randomness is derived
from the experiment seed, so a rerun with the same config and checkpoints
reproduces metrics.csv byte for byte (timing measurement is the one
intentionally non-deterministic column and can be disabled in the config).
"""

from __future__ import annotations

import csv
import os

import numpy as np

from .baselines import best_of_n, eps_greedy, guided_sample
from .bench import MetricsRecord, evaluate_method, metrics_header, record_row
from .config import ExperimentConfig
from .hypernet import HyperNet, StrategySpec, aligned_sample, select_keysteps
from .numerics import RngStream
from .plots import render_samples_overlay
from .rewards import TiltedTargetGrid, base_grid, tilted_target


class MissingArtifactError(RuntimeError):
    pass


def build_targets(exp: ExperimentConfig) -> tuple[TiltedTargetGrid, TiltedTargetGrid]:
    tilted = tilted_target(exp.data.density, exp.reward, exp.grid, exp.cond_set)
    base = base_grid(exp.data.density, exp.grid, exp.cond_set)
    return tilted, base


def method_sampler(method: str, exp: ExperimentConfig, net, hnet: HyperNet | None, keysteps=None):
    """Sampler closure (cond_ids, stream) -> (n, d) for one bench method."""
    sched = exp.schedule
    if method == "base":
        from .diffusion import sample_flow, sample_vp

        run = sample_vp if exp.paradigm == "vp" else sample_flow
        return lambda conds, stream: run(net, conds, sched, stream).x
    if method == "guided":
        return lambda conds, stream: guided_sample(
            net, conds, sched, exp.guidance, exp.reward, stream
        ).x
    if method == "bon":
        return lambda conds, stream: best_of_n(
            net, conds, sched, exp.reward, exp.search, stream
        ).x
    if method == "eps_greedy":
        return lambda conds, stream: eps_greedy(
            net, conds, sched, exp.reward, exp.search, stream
        ).x
    if method.startswith("hyper_"):
        if hnet is None:
            raise MissingArtifactError(f"method '{method}' needs a hypernet checkpoint")
        variant = method.split("_", 1)[1]
        strategy = StrategySpec(variant, keysteps if variant == "P" else None)
        return lambda conds, stream: aligned_sample(
            net, hnet, conds, sched, strategy, stream
        )[0].x
    raise MissingArtifactError(f"unknown method '{method}'")


def run_experiment(
    exp: ExperimentConfig,
    net,
    hnet: HyperNet | None,
    out_dir: str,
    checkpoint_hash: str = "",
    keysteps=None,
) -> list[MetricsRecord]:
    """Generate, score, and persist every configured method.

    Writes metrics.csv and one sample-overlay figure per method under
    `out_dir`; returns the records in method order.
    """
    os.makedirs(out_dir, exist_ok=True)
    plot_dir = os.path.join(out_dir, "plots")
    os.makedirs(plot_dir, exist_ok=True)
    tilted, base = build_targets(exp)
    needs_p = "hyper_P" in exp.bench.methods
    if needs_p and keysteps is None:
        if hnet is None:
            raise MissingArtifactError("method 'hyper_P' needs a hypernet checkpoint")
        probe_stream = RngStream(exp.seed, stream=0x5E1)
        probes = np.repeat(exp.cond_set, max(1, exp.bench.probe_count // len(exp.cond_set)))
        keysteps = select_keysteps(net, exp.sched, probes, exp.keysteps_m, probe_stream)

    records = []
    master = RngStream(exp.seed, stream=0xBE)
    for mi, method in enumerate(exp.bench.methods):
        sampler = method_sampler(method, exp, net, hnet, keysteps)
        rec, per_cond = evaluate_method(
            method=method,
            sampler=sampler,
            cond_set=exp.cond_set,
            n_per_cond=exp.bench.n_per_cond,
            spec=exp.reward,
            tilted=tilted,
            base=base,
            data_sampler=exp.data.sample_cond,
            stream=master.child(mi),
            seed=exp.seed,
            config_hash=exp.config_hash,
            checkpoint_hash=checkpoint_hash,
            sw2_projections=exp.bench.n_projections,
            timing_reps=exp.bench.timing_reps if exp.bench.measure_time else 0,
        )
        records.append(rec)
        render_samples_overlay(
            os.path.join(plot_dir, f"samples_{method}.svg"),
            per_cond,
            tilted,
            f"{method} vs tilted target",
        )
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), records)
    return records


def write_metrics_csv(path, records: list[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(metrics_header())
        for rec in records:
            writer.writerow(record_row(rec))


def format_records_table(records: list[MetricsRecord]) -> str:
    cols = ["method", "mean_reward", "kl_tilted", "kl_base", "sw2_data", "diversity", "wall_clock_ms"]
    lines = ["  ".join(f"{c:>14}" for c in cols)]
    for rec in records:
        vals = []
        for c in cols:
            v = getattr(rec, c)
            vals.append(f"{v:>14.4f}" if isinstance(v, float) else f"{v:>14}")
        lines.append("  ".join(vals))
    return "\n".join(lines)
