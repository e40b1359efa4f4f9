"""Experiment configuration: strict JSON with unknown keys rejected.

Every tunable lives here; the seed is mandatory. `load_config` resolves the
raw dict into the concrete parameter objects used by the library and records a
canonical hash for provenance.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .aligntrain import AlignTrainConfig
from .baselines import GuidanceConfig, SearchBudget
from .data import MixtureSpec
from .diffusion import TrainBaseConfig
from .hypernet import HyperNetConfig
from .nets import DenoiserConfig
from .rewards import GridSpec, RewardSpec
from .schedules import DiffusionSchedule, FlowSchedule, make_vp_schedule

METHODS = ("base", "guided", "bon", "eps_greedy", "hyper_S", "hyper_I", "hyper_P")


class ConfigError(ValueError):
    pass


def _section(raw: dict, name: str, known: tuple) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"section '{name}' must be an object")
    unknown = sorted(set(sec) - set(known))
    if unknown:
        raise ConfigError(f"unknown key '{name}.{unknown[0]}'")
    return sec


@dataclass
class BenchSpec:
    methods: tuple = METHODS
    n_per_cond: int = 2000
    n_projections: int = 128
    measure_time: bool = True
    timing_reps: int = 50
    probe_count: int = 64

    def __post_init__(self):
        bad = sorted(set(self.methods) - set(METHODS))
        if bad:
            raise ConfigError(f"unknown bench method '{bad[0]}'")


@dataclass
class ExperimentConfig:
    seed: int
    paradigm: str
    out_dir: str
    data: MixtureSpec
    sched: DiffusionSchedule | None
    fsched: FlowSchedule | None
    net: DenoiserConfig
    hypernet: HyperNetConfig
    reward: RewardSpec
    grid: GridSpec
    pref_n_per_cond: int
    pref_budget: int
    pref_eta: np.ndarray | None
    train_base: TrainBaseConfig
    align: AlignTrainConfig
    strategy_variant: str
    keysteps_m: int
    guidance: GuidanceConfig
    search: SearchBudget
    bench: BenchSpec
    data_n_per_cond: int
    raw: dict = field(repr=False, default=None)
    config_hash: str = ""

    @property
    def schedule(self):
        return self.sched if self.paradigm == "vp" else self.fsched

    @property
    def cond_set(self) -> np.ndarray:
        return np.arange(self.data.n_cond, dtype=np.int64)


def config_hash_of(raw: dict) -> str:
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


_TOP_KEYS = (
    "seed",
    "paradigm",
    "out_dir",
    "data",
    "schedule",
    "flow",
    "net",
    "hypernet",
    "reward",
    "preference",
    "train_base",
    "align",
    "strategy",
    "guidance",
    "search",
    "grid",
    "bench",
)


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    unknown = sorted(set(raw) - set(_TOP_KEYS))
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}'")
    if "seed" not in raw:
        raise ConfigError("missing mandatory key 'seed'")
    seed = int(raw["seed"])
    paradigm = raw.get("paradigm", "vp")
    if paradigm not in ("vp", "flow"):
        raise ConfigError(f"paradigm must be 'vp' or 'flow', got '{paradigm}'")
    out_dir = raw.get("out_dir", "runs")

    d = _section(raw, "data", ("modes", "std", "n_per_cond"))
    data = MixtureSpec(
        modes=np.asarray(d["modes"], dtype=np.float64) if "modes" in d else None,
        std=float(d.get("std", 0.3)),
    )
    data_n_per_cond = int(d.get("n_per_cond", 1024))

    s = _section(raw, "schedule", ("T", "beta_min", "beta_max"))
    sched = make_vp_schedule(
        int(s.get("T", 50)), float(s.get("beta_min", 1e-3)), float(s.get("beta_max", 0.35))
    )
    f = _section(raw, "flow", ("N",))
    fsched = FlowSchedule(N=int(f.get("N", 100)))

    n = _section(raw, "net", ("hidden", "time_width", "cond_width", "adapt_layers"))
    net = DenoiserConfig(
        data_dim=data.dim,
        n_cond=data.n_cond,
        hidden=tuple(n.get("hidden", (128, 128, 128))),
        time_width=int(n.get("time_width", 16)),
        cond_width=int(n.get("cond_width", 8)),
        parameterization="epsilon" if paradigm == "vp" else "velocity",
        adapt_layers=tuple(n["adapt_layers"]) if "adapt_layers" in n else None,
    )

    h = _section(
        raw,
        "hypernet",
        ("rank", "n_query", "n_kv", "d_model", "encoder_hidden", "ff_hidden", "scale", "target_layers"),
    )
    hypernet = HyperNetConfig(
        rank=int(h.get("rank", 4)),
        n_query=int(h.get("n_query", 4)),
        n_kv=int(h.get("n_kv", 4)),
        d_model=int(h.get("d_model", 32)),
        encoder_hidden=tuple(h.get("encoder_hidden", (64, 64))),
        ff_hidden=int(h.get("ff_hidden", 64)),
        scale=float(h.get("scale", 1.0)),
        target_layers=tuple(h["target_layers"]) if "target_layers" in h else None,
    )

    r = _section(raw, "reward", ("family", "mu_star", "radius", "weights", "gamma"))
    mu_star = r.get("mu_star")
    reward = RewardSpec(
        family=r.get("family", "mode_pull"),
        mu_star=np.asarray(mu_star, dtype=np.float64) if mu_star is not None else 0.5 * data.modes,
        radius=float(r.get("radius", 1.0)),
        weights=tuple(r.get("weights", (1.0, 1.0))),
        gamma=float(r.get("gamma", 0.5)),
    )

    g = _section(raw, "grid", ("lo", "hi", "res"))
    grid = GridSpec(lo=float(g.get("lo", -5.0)), hi=float(g.get("hi", 5.0)), res=int(g.get("res", 256)))

    p = _section(raw, "preference", ("n_per_cond", "budget", "eta"))
    pref_eta = p.get("eta")
    if pref_eta is not None:
        # Scalars mean a constant per-timestep schedule over the VP steps.
        pref_eta = np.asarray(pref_eta, dtype=np.float64)
        if pref_eta.ndim == 0:
            pref_eta = np.full(sched.T, float(pref_eta))
        elif pref_eta.shape != (sched.T,):
            raise ConfigError(
                f"preference.eta must be a scalar or a list of length T={sched.T}"
            )

    tb = _section(raw, "train_base", ("step_size", "batch_size", "iters", "target_loss"))
    train_base = TrainBaseConfig(
        step_size=float(tb.get("step_size", 1e-3)),
        batch_size=int(tb.get("batch_size", 128)),
        iters=int(tb.get("iters", 3000)),
        seed=seed,
        target_loss=tb.get("target_loss"),
    )

    a = _section(
        raw,
        "align",
        ("step_size", "batch_size", "iters", "reward_t_range", "reg_t_range", "loss", "pool_per_cond"),
    )
    loss_mode = a.get("loss", "both")
    if loss_mode not in ("both", "reward", "reg"):
        raise ConfigError(f"align.loss must be both/reward/reg, got '{loss_mode}'")
    align = AlignTrainConfig(
        step_size=float(a.get("step_size", 1e-3)),
        batch_size=int(a.get("batch_size", 32)),
        iters=int(a.get("iters", 2000)),
        reward_t_range=tuple(a.get("reward_t_range", (0.1, 0.9))),
        reg_t_range=tuple(a.get("reg_t_range", (0.05, 1.0))),
        use_reward=loss_mode in ("both", "reward"),
        use_reg=loss_mode in ("both", "reg"),
        pool_per_cond=int(a.get("pool_per_cond", 512)),
        seed=seed,
    )

    st = _section(raw, "strategy", ("variant", "keysteps_m"))
    variant = st.get("variant", "S")
    if variant not in ("S", "I", "P"):
        raise ConfigError(f"strategy.variant must be S/I/P, got '{variant}'")

    gd = _section(raw, "guidance", ("scale", "jacobian_mode", "max_step_shift"))
    shift = gd.get("max_step_shift", 0.5)
    guidance = GuidanceConfig(
        scale=float(gd.get("scale", 1.0)),
        jacobian_mode=gd.get("jacobian_mode", "full"),
        paradigm=paradigm,
        max_step_shift=float(shift) if shift is not None else None,
    )

    se = _section(raw, "search", ("n_candidates", "iterations", "k", "perturb_std"))
    search = SearchBudget(
        n_candidates=int(se.get("n_candidates", 20)),
        iterations=int(se.get("iterations", 20)),
        k=int(se.get("k", 4)),
        perturb_std=float(se.get("perturb_std", 0.5)),
    )

    b = _section(
        raw,
        "bench",
        ("methods", "n_per_cond", "n_projections", "measure_time", "timing_reps", "probe_count"),
    )
    bench = BenchSpec(
        methods=tuple(b.get("methods", METHODS)),
        n_per_cond=int(b.get("n_per_cond", 2000)),
        n_projections=int(b.get("n_projections", 128)),
        measure_time=bool(b.get("measure_time", True)),
        timing_reps=int(b.get("timing_reps", 50)),
        probe_count=int(b.get("probe_count", 64)),
    )

    return ExperimentConfig(
        seed=seed,
        paradigm=paradigm,
        out_dir=out_dir,
        data=data,
        sched=sched,
        fsched=fsched,
        net=net,
        hypernet=hypernet,
        reward=reward,
        grid=grid,
        pref_n_per_cond=int(p.get("n_per_cond", 2048)),
        pref_budget=int(p.get("budget", 4_000_000)),
        pref_eta=pref_eta,
        train_base=train_base,
        align=align,
        strategy_variant=variant,
        keysteps_m=int(st.get("keysteps_m", 5)),
        guidance=guidance,
        search=search,
        bench=bench,
        data_n_per_cond=data_n_per_cond,
        raw=raw,
        config_hash=config_hash_of(raw),
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}")
    return parse_config(raw)
