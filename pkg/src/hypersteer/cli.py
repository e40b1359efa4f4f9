"""Command-line surface: train-base, align, sample, bench, analyze,
select-keysteps. Configs and checkpoints are the only state; every command
is deterministic given (config, seed) and never mutates an input file.

Failures print a single `error: ...` line to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .aligntrain import train_hyper
from .baselines import best_of_n, eps_greedy, guided_sample
from .bench import lora_drift, lora_pca
from .checkpoint import CheckpointError, file_hash, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .data import load_dataset_csv, sample_dataset
from .diffusion import TrainingDiverged, TrajectoryDiverged, sample_flow, sample_vp, train_base
from .experiment import MissingArtifactError, format_records_table, run_experiment
from .hypernet import (
    DeltaLog,
    HyperNet,
    KeystepSchedule,
    StrategySpec,
    aligned_sample,
    build_hypernet,
    one_step_change_profile,
    select_keysteps,
)
from .nets import DenoiserNet, build_denoiser
from .numerics import RngStream
from .rewards import LowAcceptanceError, gen_preference_set, reward_eval

STRATEGIES = ("base", "guided", "bon", "eps_greedy", "S", "I", "P")


class CliError(RuntimeError):
    pass


def _add_common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output file or directory")
    p.add_argument(
        "--threads",
        type=int,
        default=1,
        help="upper bound on worker threads (the implementation is single-threaded)",
    )


def _load_exp(args) -> ExperimentConfig:
    exp = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        raw = dict(exp.raw)
        raw["seed"] = args.seed
        exp = parse_config(raw)
    if args.threads < 1:
        raise CliError("--threads must be >= 1")
    return exp


def _load_base(path) -> tuple[DenoiserNet, ExperimentConfig, str]:
    header, params = load_checkpoint(path, expect_kind="denoiser")
    exp = parse_config(header["config"])
    net = DenoiserNet(exp.net, params)
    return net, exp, file_hash(path)


def _load_hypernet(path, net: DenoiserNet) -> tuple[HyperNet, str]:
    header, params = load_checkpoint(path, expect_kind="hypernet")
    exp = parse_config(header["config"])
    hnet = HyperNet(exp.hypernet, net, params)
    return hnet, file_hash(path)


def _build_prefs(exp: ExperimentConfig, stream: RngStream):
    return gen_preference_set(
        exp.data.sample_cond,
        exp.reward,
        exp.grid,
        exp.cond_set,
        exp.pref_n_per_cond,
        exp.pref_budget,
        stream,
        eta=exp.pref_eta,
    )


# ---------------------------------------------------------------------------
# Commands


def cmd_train_base(args) -> int:
    exp = _load_exp(args)
    out_dir = args.out or exp.out_dir
    os.makedirs(out_dir, exist_ok=True)
    if args.dataset:
        x0, cond = load_dataset_csv(args.dataset)
    else:
        x0, cond = sample_dataset(exp.data, exp.data_n_per_cond, RngStream(exp.seed, stream=0xDA))
    net = build_denoiser(exp.net, exp.seed)
    net, curve = train_base(net, (x0, cond), exp.schedule, exp.train_base)
    ckpt = os.path.join(out_dir, "denoiser.ckpt")
    save_checkpoint(ckpt, "denoiser", exp.raw, net.params, net.param_order())
    loss_csv = os.path.join(out_dir, "train_base_loss.csv")
    with open(loss_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "loss"])
        for i, v in enumerate(curve):
            writer.writerow([i, repr(v)])
    print(f"wrote {ckpt} (hash {file_hash(ckpt)})")
    print(f"wrote {loss_csv}")
    return 0


def cmd_align(args) -> int:
    exp = _load_exp(args)
    if exp.paradigm != "vp":
        raise CliError("alignment training is implemented for the vp paradigm only")
    out_dir = args.out or exp.out_dir
    os.makedirs(out_dir, exist_ok=True)
    net, _, _ = _load_base(args.base)
    align = exp.align
    if args.loss:
        align.use_reward = args.loss in ("both", "reward")
        align.use_reg = args.loss in ("both", "reg")
    hnet = build_hypernet(net, exp.hypernet, exp.seed)
    prefs = None
    if align.use_reg:
        prefs = _build_prefs(exp, RngStream(exp.seed, stream=0xFD))
    hnet, curve = train_hyper(hnet, net, exp.cond_set, exp.reward, prefs, align, exp.sched)
    ckpt = os.path.join(out_dir, "hypernet.ckpt")
    save_checkpoint(ckpt, "hypernet", exp.raw, hnet.params, hnet.param_order())
    loss_csv = os.path.join(out_dir, "align_loss.csv")
    with open(loss_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        cols = ["iter"]
        cols += ["loss_reward"] if align.use_reward else []
        cols += ["loss_reg"] if align.use_reg else []
        cols += ["mean_reward"]
        writer.writerow(cols)
        for i in curve.iters:
            row = [i]
            row += [repr(curve.loss_reward[i])] if align.use_reward else []
            row += [repr(curve.loss_reg[i])] if align.use_reg else []
            row += [repr(curve.mean_reward[i])]
            writer.writerow(row)
    if args.dump_deltas:
        _dump_deltas(args.dump_deltas, net, hnet, exp)
    print(f"wrote {ckpt} (hash {file_hash(ckpt)})")
    print(f"wrote {loss_csv}")
    return 0


def _dump_deltas(path, net: DenoiserNet, hnet: HyperNet, exp: ExperimentConfig) -> None:
    """Probe the hypernetwork and record per-layer factor magnitudes."""
    stream = RngStream(exp.seed, stream=0xDD)
    x = stream.gaussian((len(exp.cond_set), net.data_dim)).data
    delta = hnet.predict(x, 1.0, exp.cond_set)
    report = {}
    for layer, (a, b) in delta.factors.items():
        eff = delta.scale * (b.data @ a.data)
        report[layer] = {
            "max_abs_A": float(np.abs(a.data).max()),
            "max_abs_B": float(np.abs(b.data).max()),
            "max_abs_effective": float(np.abs(eff).max()),
        }
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)


def _write_samples_csv(path, xs: np.ndarray, conds: np.ndarray, rewards: np.ndarray, d: int) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i + 1}" for i in range(d)] + ["cond", "reward"])
        for row, c, r in zip(xs, conds, rewards):
            writer.writerow([repr(float(v)) for v in row] + [int(c), repr(float(r))])


def cmd_sample(args) -> int:
    exp = _load_exp(args)
    net, _, _ = _load_base(args.base)
    out = args.out or "samples.csv"
    if args.strategy not in STRATEGIES:
        raise CliError(f"unknown strategy '{args.strategy}' (choose from {STRATEGIES})")
    conds = (
        np.full(args.count, args.cond, dtype=np.int64)
        if args.cond is not None
        else np.arange(args.count, dtype=np.int64) % exp.data.n_cond
    )
    stream = RngStream(exp.seed, stream=0x5A)
    sched = exp.schedule
    if args.count == 0:
        _write_samples_csv(out, np.empty((0, net.data_dim)), conds, np.empty(0), net.data_dim)
        print(f"wrote {out}")
        return 0
    candidates_csv = None
    delta_log = None
    if args.strategy == "base":
        run = sample_vp if exp.paradigm == "vp" else sample_flow
        xs = run(net, conds, sched, stream).x
    elif args.strategy == "guided":
        xs = guided_sample(net, conds, sched, exp.guidance, exp.reward, stream).x
    elif args.strategy == "bon":
        budget = exp.search
        if args.n is not None:
            budget.n_candidates = args.n
        res = best_of_n(net, conds, sched, exp.reward, budget, stream)
        xs = res.x
        candidates_csv = os.path.splitext(out)[0] + "_candidates.csv"
        with open(candidates_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample", "candidate", "reward"])
            for s in range(res.rewards.shape[1]):
                for c in range(res.rewards.shape[0]):
                    writer.writerow([s, c, repr(float(res.rewards[c, s]))])
    elif args.strategy == "eps_greedy":
        res = eps_greedy(net, conds, sched, exp.reward, exp.search, stream)
        xs = res.x
        candidates_csv = os.path.splitext(out)[0] + "_candidates.csv"
        with open(candidates_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample", "iteration", "incumbent_reward"])
            for s in range(res.reward_history.shape[1]):
                for i in range(res.reward_history.shape[0]):
                    writer.writerow([s, i, repr(float(res.reward_history[i, s]))])
    else:  # hypernet strategies
        if not args.hypernet:
            raise CliError(f"strategy '{args.strategy}' needs --hypernet")
        hnet, _ = _load_hypernet(args.hypernet, net)
        keysteps = None
        if args.strategy == "P":
            if args.keysteps:
                keysteps = _read_keysteps(args.keysteps)
            elif args.select_keysteps:
                probes = np.repeat(exp.cond_set, 16)
                keysteps = select_keysteps(
                    net, exp.sched, probes, exp.keysteps_m, RngStream(exp.seed, stream=0x5E1)
                )
            else:
                raise CliError("strategy P needs --keysteps FILE or --select-keysteps")
        strategy = StrategySpec(args.strategy, keysteps)
        result, delta_log = aligned_sample(
            net, hnet, conds, sched, strategy, stream, record_deltas=bool(args.delta_log)
        )
        xs = result.x
    rewards = reward_eval(xs, conds, exp.reward)
    _write_samples_csv(out, xs, conds, rewards, net.data_dim)
    print(f"wrote {out}")
    if candidates_csv:
        print(f"wrote {candidates_csv}")
    if args.delta_log:
        if delta_log is None:
            raise CliError("--delta-log requires a hypernet strategy (S, I, or P)")
        _write_delta_log(args.delta_log, delta_log)
        print(f"wrote {args.delta_log}")
    return 0


def _write_delta_log(path, log: DeltaLog) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "traj", "values"])
        for si, step in enumerate(log.steps):
            for ti in range(log.vectors.shape[1]):
                vals = " ".join(repr(float(v)) for v in log.vectors[si, ti])
                writer.writerow([step, ti, vals])


def _read_delta_log(path) -> DeltaLog:
    steps, by_step = [], {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["step", "traj", "values"]:
            raise CliError(f"{path}:1: expected header step,traj,values")
        for lineno, row in enumerate(reader, start=2):
            try:
                step = int(row[0])
                traj = int(row[1])
                vals = np.array(row[2].split(), dtype=np.float64)
                if vals.size == 0:
                    raise ValueError("empty values field")
            except (ValueError, IndexError) as e:
                raise CliError(f"{path}:{lineno}: malformed delta log row ({e})")
            if step not in by_step:
                by_step[step] = {}
                steps.append(step)
            by_step[step][traj] = vals
    if not steps:
        raise CliError(f"{path}:2: delta log has no rows")
    n_traj = len(by_step[steps[0]])
    vectors = np.stack(
        [np.stack([by_step[s][t] for t in range(n_traj)]) for s in steps]
    )
    return DeltaLog(steps=steps, vectors=vectors, layer_order=())


def _read_keysteps(path) -> KeystepSchedule:
    with open(path) as fh:
        data = json.load(fh)
    return KeystepSchedule(T=int(data["T"]), steps=tuple(int(s) for s in data["steps"]))


def cmd_bench(args) -> int:
    exp = _load_exp(args)
    out_dir = args.out or os.path.join(exp.out_dir, "bench")
    net, _, base_hash = _load_base(args.base)
    hnet = None
    ckpt_hash = base_hash
    if any(m.startswith("hyper_") for m in exp.bench.methods):
        if not args.hypernet:
            raise CliError(
                "bench methods include hypernet variants but --hypernet is missing"
            )
        hnet, hyp_hash = _load_hypernet(args.hypernet, net)
        ckpt_hash = f"{base_hash}+{hyp_hash}"
    keysteps = _read_keysteps(args.keysteps) if args.keysteps else None
    records = run_experiment(exp, net, hnet, out_dir, ckpt_hash, keysteps)
    print(format_records_table(records))
    print(f"wrote {os.path.join(out_dir, 'metrics.csv')}")
    return 0


def cmd_analyze(args) -> int:
    out_dir = args.out or "analysis"
    os.makedirs(out_dir, exist_ok=True)
    from . import plots

    if args.mode == "drift":
        if not args.log:
            raise CliError("analyze --mode drift needs --log FILE")
        report = lora_drift(_read_delta_log(args.log))
        path = os.path.join(out_dir, "drift.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "cosine", "l1_change"])
            for s, c, l in zip(report.steps, report.cosine, report.l1_change):
                writer.writerow([s, repr(float(c)), repr(float(l))])
        plots.render_drift(os.path.join(out_dir, "drift.svg"), report)
        print(f"wrote {path}")
        return 0
    if args.mode == "pca":
        if not args.log:
            raise CliError("analyze --mode pca needs --log FILE")
        log = _read_delta_log(args.log)
        wanted = (
            [int(s) for s in args.steps.split(",")] if args.steps else list(log.steps)
        )
        vectors_by_step = {
            s: log.vectors[log.steps.index(s)] for s in wanted if s in log.steps
        }
        result = lora_pca(vectors_by_step)
        coords_path = os.path.join(out_dir, "pca.csv")
        with open(coords_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "traj", "pc1", "pc2", "explained1", "explained2"])
            for s, info in sorted(result.items(), reverse=True):
                ev = info["explained"]
                for ti, (p1, p2) in enumerate(info["coords"]):
                    writer.writerow(
                        [s, ti, repr(float(p1)), repr(float(p2)), repr(float(ev[0])), repr(float(ev[1]))]
                    )
        plots.render_pca(os.path.join(out_dir, "pca.svg"), result)
        print(f"wrote {coords_path}")
        return 0
    if args.mode == "keysteps":
        if not (args.config and args.base):
            raise CliError("analyze --mode keysteps needs --config and --base")
        exp = _load_exp(args)
        net, _, _ = _load_base(args.base)
        stream = RngStream(exp.seed, stream=0x5E1)
        probes = np.repeat(exp.cond_set, 16)
        profile = one_step_change_profile(net, exp.sched, probes, stream)
        from .hypernet import keysteps_from_profile

        ks = keysteps_from_profile(profile, args.m or exp.keysteps_m)
        path = os.path.join(out_dir, "keysteps.json")
        with open(path, "w") as fh:
            json.dump({"T": ks.T, "steps": list(ks.steps)}, fh)
        prof_path = os.path.join(out_dir, "change_profile.csv")
        with open(prof_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "d"])
            for t, v in enumerate(profile, start=1):
                writer.writerow([t, repr(float(v))])
        print(f"keysteps: {list(ks.steps)}")
        print(f"wrote {path}")
        return 0
    raise CliError(f"unknown analyze mode '{args.mode}'")


def cmd_select_keysteps(args) -> int:
    exp = _load_exp(args)
    net, _, _ = _load_base(args.base)
    stream = RngStream(exp.seed, stream=0x5E1)
    probes = np.repeat(exp.cond_set, 16)
    ks = select_keysteps(net, exp.sched, probes, args.m or exp.keysteps_m, stream)
    out = args.out or "keysteps.json"
    with open(out, "w") as fh:
        json.dump({"T": ks.T, "steps": list(ks.steps)}, fh)
    print(f"keysteps: {list(ks.steps)}")
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hypersteer",
        description="Toy lab for hypernetwork-steered sampler alignment",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-base", help="train the base denoiser")
    _add_common(p)
    p.add_argument("--dataset", default=None, help="dataset CSV (default: generate from config)")
    p.set_defaults(fn=cmd_train_base)

    p = sub.add_parser("align", help="train the hypernetwork against a frozen base")
    _add_common(p)
    p.add_argument("--base", required=True, help="denoiser checkpoint")
    p.add_argument("--loss", choices=("both", "reward", "reg"), default=None)
    p.add_argument("--dump-deltas", default=None, help="write a probe-delta magnitude report")
    p.set_defaults(fn=cmd_align)

    p = sub.add_parser("sample", help="draw samples under a strategy")
    _add_common(p)
    p.add_argument("--base", required=True)
    p.add_argument("--hypernet", default=None)
    p.add_argument("--strategy", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--cond", type=int, default=None, help="fix one condition id")
    p.add_argument("--n", type=int, default=None, help="best-of-N candidate count")
    p.add_argument("--keysteps", default=None, help="keysteps JSON for strategy P")
    p.add_argument("--select-keysteps", action="store_true")
    p.add_argument("--delta-log", default=None, help="write the per-step adapter log CSV")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("bench", help="run the metric suite over configured methods")
    _add_common(p)
    p.add_argument("--base", required=True)
    p.add_argument("--hypernet", default=None)
    p.add_argument("--keysteps", default=None)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("analyze", help="adapter drift / PCA / keystep reports")
    _add_common(p, config_required=False)
    p.add_argument("--mode", required=True, choices=("drift", "pca", "keysteps"))
    p.add_argument("--log", default=None, help="delta log CSV")
    p.add_argument("--steps", default=None, help="comma-separated step subset for PCA")
    p.add_argument("--base", default=None)
    p.add_argument("--m", type=int, default=None)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("select-keysteps", help="probe the sampler and persist keysteps")
    _add_common(p)
    p.add_argument("--base", required=True)
    p.add_argument("--m", type=int, default=None)
    p.set_defaults(fn=cmd_select_keysteps)

    return parser


_KNOWN_ERRORS = (
    CliError,
    ConfigError,
    CheckpointError,
    MissingArtifactError,
    LowAcceptanceError,
    TrainingDiverged,
    TrajectoryDiverged,
    ValueError,
    OSError,
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _KNOWN_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
