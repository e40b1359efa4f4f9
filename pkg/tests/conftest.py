"""Shared fixtures: the calibrated acceptance configuration and lazily
trained session artifacts (base denoisers and hypernetworks per seed)."""

import dataclasses
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hypersteer.aligntrain import train_hyper
from hypersteer.config import parse_config
from hypersteer.data import sample_dataset
from hypersteer.diffusion import train_base
from hypersteer.hypernet import build_hypernet
from hypersteer.nets import build_denoiser
from hypersteer.numerics import RngStream
from hypersteer.rewards import gen_preference_set

ACCEPT_SEEDS = (101, 102, 103)


def acceptance_raw(seed: int) -> dict:
    """The experiment configuration the acceptance thresholds are pinned to."""
    return {
        "seed": seed,
        "paradigm": "vp",
        "schedule": {"T": 50, "beta_min": 1e-3, "beta_max": 0.35},
        "train_base": {"iters": 3000},
        "align": {
            "iters": 2000,
            "reward_t_range": [0.1, 0.9],
            "reg_t_range": [0.05, 1.0],
        },
        "preference": {"eta": 8.0, "n_per_cond": 2048},
    }


class ArtifactCache:
    """Builds and memoizes trained artifacts for the session."""

    def __init__(self):
        self._exp = {}
        self._base = {}
        self._prefs = {}
        self._hnets = {}
        self.align_walls = {}

    def exp(self, seed: int):
        if seed not in self._exp:
            self._exp[seed] = parse_config(acceptance_raw(seed))
        return self._exp[seed]

    def base_net(self, seed: int):
        if seed not in self._base:
            exp = self.exp(seed)
            x0, cond = sample_dataset(
                exp.data, exp.data_n_per_cond, RngStream(exp.seed, stream=0xDA)
            )
            net = build_denoiser(exp.net, exp.seed)
            net, curve = train_base(net, (x0, cond), exp.sched, exp.train_base)
            self._base[seed] = (net, curve)
        return self._base[seed][0]

    def prefs(self, seed: int):
        if seed not in self._prefs:
            exp = self.exp(seed)
            self._prefs[seed] = gen_preference_set(
                exp.data.sample_cond,
                exp.reward,
                exp.grid,
                exp.cond_set,
                exp.pref_n_per_cond,
                exp.pref_budget,
                RngStream(seed, stream=0xFD),
                eta=exp.pref_eta,
            )
        return self._prefs[seed]

    def hnet(self, seed: int, mode: str = "full"):
        """mode 'full' trains both losses; 'ronly' the reward loss alone."""
        key = (seed, mode)
        if key not in self._hnets:
            import time

            exp = self.exp(seed)
            net = self.base_net(seed)
            cfg = exp.align
            prefs = None
            if mode == "ronly":
                cfg = dataclasses.replace(cfg, use_reg=False)
            else:
                prefs = self.prefs(seed)
            hnet = build_hypernet(net, exp.hypernet, seed)
            t0 = time.perf_counter()
            hnet, curve = train_hyper(
                hnet, net, exp.cond_set, exp.reward, prefs, cfg, exp.sched
            )
            self.align_walls[key] = time.perf_counter() - t0
            self._hnets[key] = (hnet, curve)
        return self._hnets[key]


@pytest.fixture(scope="session")
def artifacts() -> ArtifactCache:
    return ArtifactCache()


@pytest.fixture(scope="session")
def accept_exp(artifacts):
    return artifacts.exp(ACCEPT_SEEDS[0])


@pytest.fixture(scope="session")
def base_net(artifacts):
    return artifacts.base_net(ACCEPT_SEEDS[0])


@pytest.fixture(scope="session")
def trained_hnet(artifacts):
    return artifacts.hnet(ACCEPT_SEEDS[0], "full")[0]
