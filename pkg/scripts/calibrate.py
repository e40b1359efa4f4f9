"""Calibration harness: trains/caches artifacts and prints the numbers the
acceptance thresholds are pinned from. Not part of the package."""

import argparse
import dataclasses
import os
import pickle
import time

import numpy as np

from hypersteer.aligntrain import train_hyper
from hypersteer.bench import diversity, grid_kl
from hypersteer.config import parse_config
from hypersteer.data import sample_dataset
from hypersteer.diffusion import sample_vp, train_base
from hypersteer.experiment import build_targets
from hypersteer.hypernet import StrategySpec, aligned_sample, build_hypernet, select_keysteps
from hypersteer.nets import build_denoiser
from hypersteer.numerics import RngStream
from hypersteer.rewards import gen_preference_set, reward_eval

CACHE = "/tmp/hypersteer_cal"
os.makedirs(CACHE, exist_ok=True)


def cached(name, builder):
    path = os.path.join(CACHE, name + ".pkl")
    if os.path.exists(path):
        with open(path, "rb") as fh:
            return pickle.load(fh)
    obj = builder()
    with open(path, "wb") as fh:
        pickle.dump(obj, fh)
    return obj


def base_raw(seed):
    return {
        "seed": seed,
        "schedule": {"T": 50, "beta_min": 1e-3, "beta_max": 0.35},
        "train_base": {"iters": 3000},
    }


def get_base(seed):
    exp = parse_config(base_raw(seed))

    def build():
        x0, cond = sample_dataset(exp.data, exp.data_n_per_cond, RngStream(exp.seed, stream=0xDA))
        net = build_denoiser(exp.net, exp.seed)
        net, _ = train_base(net, (x0, cond), exp.sched, exp.train_base)
        return net.params

    params = cached(f"base_{seed}", build)
    net = build_denoiser(exp.net, exp.seed)
    net.params = params
    return exp, net


def get_hnet(exp, net, seed, iters, t_hi, mode):
    cfg = dataclasses.replace(
        exp.align,
        iters=iters,
        reward_t_range=(0.2, t_hi),
        use_reg=(mode == "full"),
        seed=seed,
    )
    prefs = None
    if cfg.use_reg:
        prefs = gen_preference_set(
            exp.data.sample_cond, exp.reward, exp.grid, exp.cond_set,
            exp.pref_n_per_cond, exp.pref_budget, RngStream(seed, stream=0xFD),
        )

    def build():
        hnet = build_hypernet(net, exp.hypernet, seed)
        t0 = time.perf_counter()
        hnet, curve = train_hyper(hnet, net, exp.cond_set, exp.reward, prefs, cfg, exp.sched)
        return hnet.params, time.perf_counter() - t0, curve.mean_reward[-50:]

    params, wall, tail = cached(f"hnet_{seed}_{iters}_{t_hi}_{mode}", build)
    hnet = build_hypernet(net, exp.hypernet, seed)
    hnet.params = params
    return hnet, wall, tail


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", default="101")
    ap.add_argument("--iters", type=int, default=1200)
    ap.add_argument("--t-hi", type=float, default=0.9)
    args = ap.parse_args()

    for seed in [int(s) for s in args.seeds.split(",")]:
        exp, net = get_base(seed)
        tilted, basegrid = build_targets(exp)
        opt = np.mean([tilted.mean_reward(exp.reward, c) for c in range(4)])
        conds = np.arange(4000, dtype=np.int64) % 4

        def metrics(x):
            r = reward_eval(x, conds, exp.reward).mean()
            kl = np.mean([grid_kl(x[conds == c], tilted, c) for c in range(4)])
            klb = np.mean([grid_kl(x[conds == c], basegrid, c) for c in range(4)])
            dv = np.mean([diversity(x[conds == c][:500]) for c in range(4)])
            return r, kl, klb, dv

        bres = sample_vp(net, conds, exp.sched, RngStream(7, stream=1))
        rb, klb, _, dvb = metrics(bres.x)
        gap_target = rb + 0.5 * (opt - rb)
        print(f"\nseed {seed}: base reward {rb:.4f}, oracle {opt:.4f}, 8a target {gap_target:.4f}, base KL {klb:.4f}")
        ks = select_keysteps(net, exp.sched, np.repeat(exp.cond_set, 16), 5, RngStream(seed, stream=0x5E1))
        print(f"  keysteps: {ks.steps}")

        hnet_full, wall_f, _ = get_hnet(exp, net, seed, args.iters, args.t_hi, "full")
        hnet_ro, wall_r, _ = get_hnet(exp, net, seed, args.iters, args.t_hi, "ronly")
        print(f"  train walls: full {wall_f:.0f}s  r-only {wall_r:.0f}s")
        rows = {}
        for name, hnet, strat in [
            ("full-S", hnet_full, StrategySpec("S")),
            ("full-P", hnet_full, StrategySpec("P", ks)),
            ("full-I", hnet_full, StrategySpec("I")),
            ("Ronly-S", hnet_ro, StrategySpec("S")),
        ]:
            res, _ = aligned_sample(net, hnet, conds, exp.sched, strat, RngStream(7, stream=1))
            rows[name] = metrics(res.x)
            r, kl, _, dv = rows[name]
            print(f"  {name:8s} reward {r:8.4f}  KL {kl:7.4f}  div {dv:.4f}")
        full, ro = rows["full-S"], rows["Ronly-S"]
        s, p, i_ = rows["full-S"][0], rows["full-P"][0], rows["full-I"][0]
        delta = 0.1 * (s - rb)
        print(f"  crit8: reward ok {full[0] >= gap_target}, KL below base {full[1] < klb}")
        print(f"  crit9: S>=P {s >= p}, P>=I-delta {p >= i_ - delta}")
        print(f"  crit10: r_ro>=r_full {ro[0] >= full[0]}, KLratio {ro[1] / full[1]:.2f}, div_ro<div_full {ro[3] < full[3]}")


if __name__ == "__main__":
    main()
