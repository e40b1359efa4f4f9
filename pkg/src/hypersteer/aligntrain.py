"""Hypernetwork optimization: reward loss, preference regularization, and
the joint objective. Only psi is updated; the base denoiser stays frozen.

The reward loss forward-noises base-model samples to a mid-range step and
scores the adapter-injected one-step prediction; very low steps are skipped
because predictions barely move there, very high ones because they are too
blurry to carry a useful signal. The regularization matches the injected
model's denoising score to the forward-kernel score on preferred data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import TrainingDiverged, forward_noise, predict_x0, sample_vp
from .hypernet import HyperNet
from .numerics import GradTape, RngStream, Tensor, ops
from .optim import Adam
from .rewards import PreferenceSet, RewardSpec, reward_eval_ops
from .schedules import DiffusionSchedule


@dataclass
class AlignTrainConfig:
    step_size: float = 1e-3
    batch_size: int = 32
    iters: int = 2000
    reward_t_range: tuple = (0.1, 0.9)  # noise-fraction band for the reward loss
    reg_t_range: tuple = (0.05, 1.0)  # band for the regularization loss
    use_reward: bool = True
    use_reg: bool = True
    strategy: str = "S"  # training rollouts always use per-step prediction
    pool_per_cond: int = 512
    clip_norm: float | None = 10.0
    seed: int = 0

    def __post_init__(self):
        if not (self.use_reward or self.use_reg):
            raise ValueError("at least one loss must be enabled")
        if self.strategy != "S":
            raise ValueError("training uses per-step (S) adapter prediction")
        for lo, hi in (self.reward_t_range, self.reg_t_range):
            if not (0.0 <= lo < hi <= 1.0):
                raise ValueError(f"invalid t range ({lo}, {hi})")
        if self.iters < 0:
            raise ValueError("iteration budget must be >= 0")


def _step_band(t_range, T) -> tuple[int, int]:
    lo = max(1, int(round(t_range[0] * T)))
    hi = min(T, int(round(t_range[1] * T)))
    return lo, max(lo, hi)


def _rows_for(samples_by_cond: dict, cond_ids: np.ndarray, stream: RngStream) -> np.ndarray:
    out = np.empty((cond_ids.shape[0], next(iter(samples_by_cond.values())).shape[1]))
    for c in np.unique(cond_ids):
        mask = cond_ids == c
        pool = samples_by_cond[int(c)]
        idx = stream.integers(0, len(pool), (int(mask.sum()),))
        out[mask] = pool[idx]
    return out


def loss_reward(
    hnet: HyperNet,
    net,
    cond_ids,
    sched: DiffusionSchedule,
    spec: RewardSpec,
    stream: RngStream,
    x0_pool: dict,
    t_range: tuple = (0.1, 0.9),
) -> Tensor:
    """Negative mean reward of the injected model's one-step predictions.

    x0 comes from the base model's sample pool, is forward-noised to a step
    drawn from the configured band, and the adapter for that (x_t, c, t) is
    emitted by the hypernetwork; gradients reach psi through the emission
    and injection.
    """
    cond_ids = np.asarray(cond_ids, dtype=np.int64)
    n = cond_ids.shape[0]
    lo, hi = _step_band(t_range, sched.T)
    x0 = _rows_for(x0_pool, cond_ids, stream)
    t = stream.integers(lo, hi + 1, (n,))
    eps = stream.gaussian(x0.shape)
    x_t = forward_noise(x0, t, sched, eps)
    delta = hnet.predict(x_t.data, np.asarray(t, dtype=np.float64) / sched.T, cond_ids)
    x0_hat = predict_x0(net, x_t, t, cond_ids, sched, delta)
    r = reward_eval_ops(x0_hat, cond_ids, spec)
    return ops.neg(ops.mean(r))


def loss_reg(
    hnet: HyperNet,
    net,
    prefs: PreferenceSet,
    sched: DiffusionSchedule,
    stream: RngStream,
    cond_ids,
    t_range: tuple = (0.05, 1.0),
) -> Tensor:
    """Score matching of the injected model against preferred data.

    Draws x0 from the preferred distribution, forward-noises it, and
    penalizes eta_t / sigma_t^2 * ||eps_hat - eps||^2, i.e. the squared score
    difference to the forward-kernel transition score.
    """
    conds = sorted(prefs.samples)
    cond_ids = np.asarray(cond_ids, dtype=np.int64)
    unknown = set(np.unique(cond_ids)) - set(conds)
    if unknown:
        raise ValueError(f"no preference data for conditions {sorted(unknown)}")
    n = cond_ids.shape[0]
    lo, hi = _step_band(t_range, sched.T)
    x0 = _rows_for(prefs.samples, cond_ids, stream)
    t = stream.integers(lo, hi + 1, (n,))
    eps = stream.gaussian(x0.shape)
    x_t = forward_noise(x0, t, sched, eps)
    delta = hnet.predict(x_t.data, np.asarray(t, dtype=np.float64) / sched.T, cond_ids)
    eps_hat = net.eps(x_t, t, cond_ids, sched, delta)
    resid = ops.sum(ops.square(ops.sub(eps_hat, eps)), axis=-1)
    weights = prefs.eta_at(t) / sched.sigma_t(t) ** 2
    return ops.mean(ops.mul(resid, Tensor(weights)))


@dataclass
class AlignCurve:
    iters: list = field(default_factory=list)
    loss_reward: list = field(default_factory=list)
    loss_reg: list = field(default_factory=list)
    mean_reward: list = field(default_factory=list)


def build_x0_pool(net, cond_set, sched, stream: RngStream, per_cond: int) -> dict:
    """Base-model samples used as the data proxy for the reward loss."""
    pool = {}
    for i, c in enumerate(cond_set):
        res = sample_vp(net, np.full(per_cond, c), sched, stream.child(i))
        pool[int(c)] = res.x
    return pool


def train_hyper(
    hnet: HyperNet,
    net,
    cond_set,
    spec: RewardSpec,
    prefs: PreferenceSet | None,
    config: AlignTrainConfig,
    sched: DiffusionSchedule,
) -> tuple[HyperNet, AlignCurve]:
    """Optimize psi on the summed objective; theta is never touched.

    Deterministic given the seed. The per-iteration curve records whichever
    losses are enabled plus the mean reward of the reward-loss batch (or of
    a gradient-free probe batch when the reward loss is disabled).
    """
    if config.use_reg and prefs is None:
        raise ValueError("regularization enabled but no preference set given")
    cond_set = np.asarray(cond_set, dtype=np.int64)
    stream = RngStream(config.seed, stream=0xA1)
    pool = None
    if config.iters > 0:
        pool = build_x0_pool(net, cond_set, sched, stream.child(0xFACE), config.pool_per_cond)
    adam = Adam(lr=config.step_size)
    names = hnet.param_order()
    curve = AlignCurve()
    initial = None
    bad_streak = 0
    for it in range(config.iters):
        cond_ids = cond_set[stream.integers(0, len(cond_set), (config.batch_size,))]
        with GradTape() as tape:
            terms = []
            lr_val = lg_val = None
            if config.use_reward:
                lr_t = loss_reward(
                    hnet, net, cond_ids, sched, spec, stream, pool, config.reward_t_range
                )
                lr_val = lr_t.item()
                terms.append(lr_t)
            if config.use_reg:
                lg_t = loss_reg(
                    hnet, net, prefs, sched, stream, cond_ids, config.reg_t_range
                )
                lg_val = lg_t.item()
                terms.append(lg_t)
            total = terms[0] if len(terms) == 1 else ops.add(terms[0], terms[1])
        grad_map = tape.backward(total, [hnet.params[n] for n in names])
        grads = {n: grad_map[hnet.params[n]].data for n in names}
        if config.clip_norm is not None:
            gnorm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if gnorm > config.clip_norm:
                factor = config.clip_norm / gnorm
                grads = {n: g * factor for n, g in grads.items()}
        adam.step(hnet.params, grads)
        if config.use_reward:
            mean_r = -lr_val
        else:
            probe = loss_reward(
                hnet, net, cond_ids, sched, spec, stream, pool, config.reward_t_range
            )
            mean_r = -probe.item()
        curve.iters.append(it)
        curve.loss_reward.append(lr_val)
        curve.loss_reg.append(lg_val)
        curve.mean_reward.append(mean_r)
        val = total.item()
        initial = val if initial is None else initial
        blown = not np.isfinite(val) or val > 10.0 * max(abs(initial), 1.0)
        bad_streak = bad_streak + 1 if blown else 0
        if bad_streak >= 100:
            raise TrainingDiverged(
                f"objective {val:.3g} above 10x initial {initial:.3g} for 100 iterations"
            )
    return hnet, curve
