"""Reward families, the tilted-target grid oracle, and preference data."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypersteer.numerics import GradTape, RngStream, Tensor, ops
from hypersteer.rewards import (
    GridSpec,
    LowAcceptanceError,
    RewardSpec,
    base_grid,
    gen_preference_set,
    reward_eval,
    reward_eval_ops,
    reward_grad,
    tilted_target,
)
from oracles import fd_grad, rel_err

MU = np.array([[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]])


def spec_of(family, **kw):
    return RewardSpec(family=family, mu_star=MU, **kw)


class TestRewardEval:
    def test_mode_pull_maximum_at_target(self):
        spec = spec_of("mode_pull")
        assert reward_eval(MU[1], 1, spec)[0] == 0.0
        rng = np.random.default_rng(0)
        others = rng.normal(size=(100, 2))
        assert np.all(reward_eval(others, 1, spec) <= 0.0)

    def test_annulus_zero_on_ring(self):
        spec = spec_of("annulus", radius=1.5)
        x = np.array([1.5 * np.cos(0.3), 1.5 * np.sin(0.3)])
        assert reward_eval(x, 0, spec)[0] == pytest.approx(0.0, abs=1e-14)

    def test_composite_plugin_value(self):
        spec = RewardSpec(family="composite", mu_star=np.array([[2.0, 2.0]]), radius=1.0, weights=(1.0, 1.0))
        got = reward_eval(np.array([0.0, 0.0]), 0, spec)[0]
        assert got == pytest.approx(-9.0, abs=1e-12)

    def test_unknown_condition_rejected(self):
        with pytest.raises(ValueError, match="condition"):
            reward_eval(np.zeros(2), 7, spec_of("mode_pull"))

    def test_gamma_must_be_positive(self):
        with pytest.raises(ValueError, match="gamma"):
            RewardSpec(family="mode_pull", mu_star=MU, gamma=0.0)


class TestRewardGrad:
    def test_stationary_at_mode(self):
        g = reward_grad(MU[2], 2, spec_of("mode_pull"))
        assert np.array_equal(g, np.zeros((1, 2)))

    def test_mode_pull_closed_form(self):
        x = np.array([[0.5, -1.0]])
        g = reward_grad(x, 0, spec_of("mode_pull"))
        assert np.allclose(g, -2.0 * (x - MU[0]), atol=1e-15)

    @pytest.mark.parametrize("family", ["mode_pull", "annulus", "composite"])
    def test_matches_finite_differences(self, family):
        spec = spec_of(family)
        rng = np.random.default_rng(21)
        for _ in range(25):
            x = rng.uniform(-4, 4, size=2)
            c = int(rng.integers(0, 4))
            g = reward_grad(x, c, spec)[0]
            g_fd = fd_grad(lambda v: reward_eval(v, c, spec)[0], x, h=1e-6)
            assert rel_err(g, g_fd) <= 1e-7

    @pytest.mark.parametrize("family", ["mode_pull", "annulus", "composite"])
    def test_matches_autodiff_of_eval(self, family):
        spec = spec_of(family)
        rng = np.random.default_rng(22)
        xs = rng.uniform(-4, 4, size=(1000, 2))
        conds = rng.integers(0, 4, size=1000)
        with GradTape() as tape:
            leaf = Tensor(xs)
            total = ops.sum(reward_eval_ops(leaf, conds, spec))
        g_auto = tape.backward(total, [leaf])[leaf].data
        assert np.max(np.abs(g_auto - reward_grad(xs, conds, spec))) <= 1e-10


class TestTiltedTarget:
    GRID = GridSpec(lo=-5, hi=5, res=128)

    @staticmethod
    def gauss_density(center, tau):
        def fn(pts, cond):
            q = np.sum((pts - center) ** 2, axis=-1)
            return np.exp(-0.5 * q / tau**2) / (2 * np.pi * tau**2)

        return fn

    def test_zero_reward_reproduces_base(self):
        spec = RewardSpec(family="mode_pull", mu_star=np.zeros((1, 2)), gamma=1e9)
        # gamma huge makes exp(R/gamma) ~= 1 but use weights 0 for exact zero tilt
        spec0 = RewardSpec(family="composite", mu_star=np.zeros((1, 2)), weights=(0.0, 0.0))
        base_fn = self.gauss_density(np.zeros(2), 0.8)
        tg = tilted_target(base_fn, spec0, self.GRID, [0])
        bg = base_grid(base_fn, self.GRID, [0])
        assert np.max(np.abs(tg.density(0) - bg.density(0))) <= 1e-12

    def test_huge_gamma_limit_matches_base(self):
        spec = RewardSpec(family="mode_pull", mu_star=np.array([[1.0, 1.0]]), gamma=1e6)
        base_fn = self.gauss_density(np.zeros(2), 0.8)
        tg = tilted_target(base_fn, spec, self.GRID, [0])
        bg = base_grid(base_fn, self.GRID, [0])
        assert np.max(np.abs(tg.density(0) - bg.density(0))) <= 1e-4

    def test_conjugate_gaussian_closed_form(self):
        tau, gamma = 0.5, 0.5
        mu_star = np.array([[1.0, -0.5]])
        spec = RewardSpec(family="mode_pull", mu_star=mu_star, gamma=gamma)
        tg = tilted_target(self.gauss_density(np.zeros(2), tau), spec, GridSpec(-5, 5, 256), [0])
        shrink = (2 * tau**2 / gamma) / (1 + 2 * tau**2 / gamma)
        mean = mu_star[0] * shrink
        var = tau**2 / (1 + 2 * tau**2 / gamma)
        pts = GridSpec(-5, 5, 256).points()
        want = np.exp(-0.5 * np.sum((pts - mean) ** 2, axis=-1) / var) / (2 * np.pi * var)
        assert np.max(np.abs(tg.density(0).ravel() - want)) <= 1e-6

    def test_masses_normalized_and_support_preserved(self):
        spec = spec_of("mode_pull")
        tg = tilted_target(self.gauss_density(np.array([2.0, 2.0]), 0.4), spec, self.GRID, [0, 1])
        for c in (0, 1):
            assert abs(tg.masses[c].sum() - 1.0) <= 1e-9
            assert np.all(tg.masses[c] >= 0)
        # cells where the base is (numerically) zero stay zero
        base = self.gauss_density(np.array([2.0, 2.0]), 0.4)(self.GRID.points(), 0)
        zero_cells = base.reshape(128, 128) == 0.0
        assert np.all(tg.masses[0][zero_cells] == 0.0)

    def test_tilt_monotone_in_reward(self):
        # Uniform base: higher reward must give at least the tilted density.
        spec = spec_of("mode_pull")
        grid = GridSpec(-5, 5, 64)
        tg = tilted_target(lambda pts, c: np.full(len(pts), 1.0 / 100.0), spec, grid, [0])
        r = reward_eval(grid.points(), 0, spec)
        m = tg.masses[0].ravel()
        order = np.argsort(r)
        assert np.all(np.diff(m[order]) >= -1e-18)

    def test_poor_grid_coverage_rejected(self):
        base_fn = self.gauss_density(np.array([20.0, 20.0]), 0.5)
        with pytest.raises(ValueError, match="covers"):
            tilted_target(base_fn, spec_of("mode_pull"), self.GRID, [0])

    def test_degenerate_normalizer_names_max_exponent(self):
        # A tilt so sharp every cell underflows to zero mass.
        spec = RewardSpec(family="mode_pull", mu_star=np.array([[30.0, 30.0]]), gamma=1e-4)
        with pytest.raises(ValueError, match="R/gamma"):
            tilted_target(self.gauss_density(np.zeros(2), 0.8), spec, self.GRID, [0])


class TestPreferenceSet:
    GRID = GridSpec(-5, 5, 128)

    @staticmethod
    def sampler(tau=0.3):
        def fn(cond, n, stream):
            return MU[cond] + tau * stream.gaussian((n, 2)).data

        return fn

    def test_zero_reward_accepts_everything(self):
        spec = RewardSpec(family="composite", mu_star=MU, weights=(0.0, 0.0))
        stream = RngStream(1)
        prefs = gen_preference_set(self.sampler(), spec, self.GRID, [0], 500, 10_000, stream)
        # with acceptance probability 1 the first chunk is taken verbatim
        probe = RngStream(1)
        want = self.sampler()(0, 500, probe)
        assert np.array_equal(prefs.samples[0], want)

    def test_moments_match_tilted_grid(self):
        spec = spec_of("mode_pull", gamma=0.5)
        tau = 0.3

        def density(pts, cond):
            q = np.sum((pts - MU[cond]) ** 2, axis=-1)
            return np.exp(-0.5 * q / tau**2) / (2 * np.pi * tau**2)

        tg = tilted_target(density, spec, GridSpec(-5, 5, 256), [0])
        prefs = gen_preference_set(
            spec_sampler := self.sampler(tau), spec, self.GRID, [0], 10_000, 10_000_000, RngStream(3)
        )
        want_mean = tg.mean_point(0)
        got = prefs.samples[0]
        band = 4 * got.std(axis=0) / np.sqrt(len(got))
        assert np.all(np.abs(got.mean(axis=0) - want_mean) <= band)

    def test_samples_inside_grid_and_finite(self):
        spec = spec_of("mode_pull")
        prefs = gen_preference_set(self.sampler(1.0), spec, self.GRID, [0, 1, 2, 3], 256, 1_000_000, RngStream(5))
        for c, xs in prefs.samples.items():
            assert np.all(np.isfinite(xs))
            assert np.all((xs >= -5) & (xs < 5))

    def test_low_acceptance_aborts(self):
        spec = spec_of("mode_pull", gamma=0.01)
        with pytest.raises(LowAcceptanceError, match="gamma"):
            gen_preference_set(self.sampler(3.0), spec, self.GRID, [0], 1000, 10_000_000, RngStream(7))

    def test_budget_below_count_rejected(self):
        with pytest.raises(ValueError, match="budget"):
            gen_preference_set(self.sampler(), spec_of("mode_pull"), self.GRID, [0], 100, 50, RngStream(1))

    def test_negative_eta_rejected(self):
        from hypersteer.rewards import PreferenceSet

        with pytest.raises(ValueError, match="eta"):
            PreferenceSet(samples={0: np.zeros((3, 2))}, eta=np.array([-1.0]))

    @given(st.integers(min_value=0, max_value=3))
    @settings(max_examples=8, deadline=None)
    def test_eta_defaults_to_unit(self, t_off):
        from hypersteer.rewards import PreferenceSet

        prefs = PreferenceSet(samples={0: np.zeros((3, 2))})
        assert np.all(prefs.eta_at(np.array([1 + t_off])) == 1.0)
