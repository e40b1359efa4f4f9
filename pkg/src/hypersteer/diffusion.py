"""Forward noising, score-matching losses, and the two reverse samplers.

The VP sampler applies the discrete transition

    x_{t-1} = (1 + beta_t/2) x_t + beta_t * score + sqrt(beta_t) * eps,

with score = -eps_hat / sigma_t and the final step taken without noise. The
rectified-flow sampler integrates the velocity field from the noise end
(t = 1 - dt) down to t = dt and finishes with a one-step prediction; see
`flow_update` for the literal discretized update rule it is equivalent to.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import GradTape, RngStream, Tensor, ops
from .optim import Adam
from .schedules import DiffusionSchedule, FlowSchedule


class TrajectoryDiverged(RuntimeError):
    def __init__(self, step):
        super().__init__(f"non-finite state at sampler step {step}")
        self.step = step


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ConditionedBatch:
    x0: np.ndarray  # (batch, d)
    cond: np.ndarray  # (batch,) int condition ids

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.cond = np.asarray(self.cond, dtype=np.int64)
        if self.x0.shape[0] != self.cond.shape[0]:
            raise ValueError(
                f"batch sizes disagree: {self.x0.shape[0]} points, {self.cond.shape[0]} conditions"
            )


def _check_step(t: int, T: int) -> None:
    if not 1 <= t <= T:
        raise ValueError(f"step {t} outside [1, {T}]")


def forward_noise(x0, t, sched: DiffusionSchedule, eps) -> Tensor:
    """x_t = sqrt(alpha_bar_t) x0 + sigma_t eps; t may be scalar or per-row."""
    x0 = x0.data if isinstance(x0, Tensor) else np.asarray(x0, dtype=np.float64)
    eps = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    t_arr = np.asarray(t)
    if t_arr.min() < 1 or t_arr.max() > sched.T:
        raise ValueError(f"step(s) outside [1, {sched.T}]")
    root_abar = np.sqrt(sched.alpha_bar_t(t_arr))
    sigma = sched.sigma_t(t_arr)
    if t_arr.ndim > 0 and x0.ndim == 2:
        root_abar = root_abar[:, None]
        sigma = sigma[:, None]
    return Tensor(root_abar * x0 + sigma * eps)


# ---------------------------------------------------------------------------
# One-step clean-data prediction


def predict_x0(net, x_t, t, cond_ids, sched, delta=None) -> Tensor:
    """Differentiable x_{0|t} under either paradigm.

    VP: (x_t - sigma_t * eps_hat) / sqrt(alpha_bar_t); flow: x_t - t * v_hat.
    """
    x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    n = x.shape[0]
    if isinstance(sched, DiffusionSchedule):
        t_arr = np.broadcast_to(np.asarray(t), (n,))
        eps_hat = net.eps(x, t_arr, cond_ids, sched, delta)
        sig = Tensor(sched.sigma_t(t_arr)[:, None])
        inv_root = Tensor(1.0 / np.sqrt(sched.alpha_bar_t(t_arr))[:, None])
        return ops.mul(ops.sub(x, ops.mul(eps_hat, sig)), inv_root)
    if isinstance(sched, FlowSchedule):
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        if t_arr.max() >= 1.0:
            raise ValueError("flow prediction undefined at t = 1")
        v_hat = net.velocity(x, t_arr, cond_ids, delta)
        return ops.sub(x, ops.mul(v_hat, Tensor(t_arr[:, None])))
    raise TypeError(f"unknown schedule type {type(sched).__name__}")


# ---------------------------------------------------------------------------
# Velocity / score conversions and the flow update rule


def velocity_score_convert(x_t, t, score):
    """Velocity from the marginal score on the straight-line path.

    v = (alpha'/alpha) x - (beta beta' - alpha' beta^2 / alpha) score with
    alpha = 1 - t, beta = t, alpha' = -1, beta' = 1. Rejected at t = 1.
    """
    x = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t, dtype=np.float64)
    s = score.data if isinstance(score, Tensor) else np.asarray(score, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t >= 1.0) or np.any(t < 0.0):
        raise ValueError("velocity-score identity holds for t in [0, 1)")
    return -(x + t * s) / (1.0 - t)


def score_from_velocity(x_t, t, v):
    """Inverse of `velocity_score_convert`; singular at t = 0."""
    x = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t, dtype=np.float64)
    v = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0.0) or np.any(t >= 1.0):
        raise ValueError("score recovery needs t in (0, 1)")
    return -(x + (1.0 - t) * v) / t


def flow_update(x_t, t, dt, score):
    """Literal discretized flow transition evaluated at a signed increment dt.

    Equals x + dt * v with v from `velocity_score_convert`; generation steps
    toward data use dt < 0 (t is the noise fraction and decreases along the
    trajectory).
    """
    x = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t, dtype=np.float64)
    s = score.data if isinstance(score, Tensor) else np.asarray(score, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t >= 1.0) or np.any(t < 0.0):
        raise ValueError("flow update undefined at t = 1")
    shrink = 1.0 - dt / (1.0 - t)
    return shrink * x - (t * dt / (1.0 - t)) * s


# ---------------------------------------------------------------------------
# Single transitions


def vp_sample_step(net, x_t, t, cond_ids, sched, stream, delta=None, score_offset=None) -> Tensor:
    """One reverse VP transition x_t -> x_{t-1}; noise dropped at t = 1."""
    _check_step(t, sched.T)
    x = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t, dtype=np.float64)
    eps_hat = net.eps(x, t, cond_ids, sched, delta).data
    b = float(sched.beta_t(t))
    score = -eps_hat / float(sched.sigma_t(t))
    if score_offset is not None:
        score = score + score_offset
    x_next = (1.0 + 0.5 * b) * x + b * score
    if t > 1:
        x_next = x_next + np.sqrt(b) * stream.gaussian(x.shape).data
    if not np.all(np.isfinite(x_next)):
        raise TrajectoryDiverged(t)
    return Tensor(x_next)


def flow_sample_step(net, x_t, t, dt, cond_ids, delta=None, score_offset=None) -> Tensor:
    """One generation step x_t -> x_{t - dt} of the rectified-flow sampler."""
    if not 0.0 <= t < 1.0:
        raise ValueError(f"flow step at singular or invalid t = {t}")
    if dt <= 0.0 or t + dt > 1.0 + 1e-12 or t - dt < -1e-12:
        raise ValueError(f"flow step size dt = {dt} invalid at t = {t}")
    x = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t, dtype=np.float64)
    v_hat = net.velocity(x, t, cond_ids, delta).data
    x_next = x - dt * v_hat
    if score_offset is not None:
        # Substituting score + offset into the update adds t*dt/(1-t) * offset.
        x_next = x_next + (t * dt / (1.0 - t)) * score_offset
    if not np.all(np.isfinite(x_next)):
        raise TrajectoryDiverged(t)
    return Tensor(x_next)


# ---------------------------------------------------------------------------
# Full trajectories


@dataclass
class SampleResult:
    x: np.ndarray  # terminal samples (n, d)
    x0_path: list | None = None  # per-step one-step predictions (noise -> data order)
    steps: list | None = None  # step labels matching x0_path


def sample_vp(
    net,
    cond_ids,
    sched: DiffusionSchedule,
    stream: RngStream,
    delta_fn=None,
    guidance_fn=None,
    record_x0: bool = False,
    init: np.ndarray | None = None,
) -> SampleResult:
    """Reverse chain from x_T ~ N(0, I) to x_0.

    `delta_fn(x, t)` may supply an adapter delta per step; `guidance_fn(x, t)`
    may supply an additive score offset. Both default to the base sampler.
    `init` replaces the initial noise draw (used by noise-search baselines).
    """
    cond_ids = np.asarray(cond_ids, dtype=np.int64)
    if init is not None:
        x = np.array(init, dtype=np.float64)
    else:
        x = stream.gaussian((cond_ids.shape[0], net.data_dim)).data
    x0s, steps = ([], []) if record_x0 else (None, None)
    delta = None
    for t in range(sched.T, 0, -1):
        if delta_fn is not None:
            delta = delta_fn(x, t)
        if record_x0:
            x0s.append(predict_x0(net, x, t, cond_ids, sched, delta).data)
            steps.append(t)
        offset = guidance_fn(x, t) if guidance_fn is not None else None
        x = vp_sample_step(net, x, t, cond_ids, sched, stream, delta, offset).data
    return SampleResult(x=x, x0_path=x0s, steps=steps)


def flow_step_grid(fsched: FlowSchedule) -> np.ndarray:
    """Noise fractions visited by the sampler, from 1 - dt down to dt."""
    return fsched.grid[fsched.N - 1 : 0 : -1]


def sample_flow(
    net,
    cond_ids,
    fsched: FlowSchedule,
    stream: RngStream,
    delta_fn=None,
    guidance_fn=None,
    record_x0: bool = False,
    init: np.ndarray | None = None,
) -> SampleResult:
    """Integrate from noise at t = 1 - dt to t = dt, then jump to x_0.

    The initial state is drawn from N(0, I); the singular endpoints t = 1 and
    t = 0 are never evaluated.
    """
    cond_ids = np.asarray(cond_ids, dtype=np.int64)
    if init is not None:
        x = np.array(init, dtype=np.float64)
    else:
        x = stream.gaussian((cond_ids.shape[0], net.data_dim)).data
    ts = flow_step_grid(fsched)
    x0s, steps = ([], []) if record_x0 else (None, None)
    delta = None
    for k, t in enumerate(ts):
        if delta_fn is not None:
            delta = delta_fn(x, float(t))
        if record_x0:
            x0s.append(predict_x0(net, x, float(t), cond_ids, fsched, delta).data)
            steps.append(float(t))
        if k < len(ts) - 1:
            dt = float(t - ts[k + 1])
            offset = guidance_fn(x, float(t)) if guidance_fn is not None else None
            x = flow_sample_step(net, x, float(t), dt, cond_ids, delta, offset).data
        else:
            x = predict_x0(net, x, float(t), cond_ids, fsched, delta).data
    if not np.all(np.isfinite(x)):
        raise TrajectoryDiverged(float(ts[-1]))
    return SampleResult(x=x, x0_path=x0s, steps=steps)


# ---------------------------------------------------------------------------
# Base-model training


def dsm_loss(net, batch: ConditionedBatch, sched: DiffusionSchedule, stream: RngStream) -> Tensor:
    """Simplified denoising score matching in epsilon space (unit weight)."""
    n = batch.x0.shape[0]
    t = stream.integers(1, sched.T + 1, (n,))
    eps = stream.gaussian(batch.x0.shape)
    x_t = forward_noise(batch.x0, t, sched, eps)
    eps_hat = net.eps(x_t, t, batch.cond, sched)
    per_sample = ops.sum(ops.square(ops.sub(eps_hat, eps)), axis=-1)
    return ops.mean(per_sample)


def fm_loss(net, batch: ConditionedBatch, stream: RngStream) -> Tensor:
    """Velocity matching on the straight-line interpolation path."""
    n = batch.x0.shape[0]
    t = stream.uniform((n,))
    x1 = stream.gaussian(batch.x0.shape).data
    x_t = (1.0 - t)[:, None] * batch.x0 + t[:, None] * x1
    v_hat = net.velocity(Tensor(x_t), t, batch.cond)
    target = Tensor(x1 - batch.x0)
    per_sample = ops.sum(ops.square(ops.sub(v_hat, target)), axis=-1)
    return ops.mean(per_sample)


@dataclass
class TrainBaseConfig:
    step_size: float = 1e-3
    batch_size: int = 128
    iters: int = 3000
    seed: int = 0
    ema_decay: float = 0.99
    target_loss: float | None = None


def train_base(net, dataset, sched, config: TrainBaseConfig):
    """Train the denoiser on (x0, cond) pairs; returns the net and loss curve.

    Deterministic given the seed. Aborts when the loss exceeds 10x its
    initial value for 100 consecutive iterations.
    """
    x0, cond = dataset
    if len(x0) == 0:
        raise ValueError("dataset is empty")
    stream = RngStream(config.seed, stream=0xB0)
    adam = Adam(lr=config.step_size)
    names = net.param_order()
    curve = []
    ema = None
    initial = None
    bad_streak = 0
    for _ in range(config.iters):
        idx = stream.integers(0, len(x0), (config.batch_size,))
        batch = ConditionedBatch(x0[idx], cond[idx])
        with GradTape() as tape:
            if net.parameterization == "epsilon":
                loss = dsm_loss(net, batch, sched, stream)
            else:
                loss = fm_loss(net, batch, stream)
        grad_map = tape.backward(loss, [net.params[n] for n in names])
        grads = {n: grad_map[net.params[n]].data for n in names}
        adam.step(net.params, grads)
        val = loss.item()
        curve.append(val)
        initial = val if initial is None else initial
        ema = val if ema is None else config.ema_decay * ema + (1 - config.ema_decay) * val
        bad_streak = bad_streak + 1 if val > 10.0 * initial else 0
        if bad_streak >= 100:
            raise TrainingDiverged(
                f"loss {val:.3g} above 10x initial {initial:.3g} for 100 iterations"
            )
        if config.target_loss is not None and ema <= config.target_loss:
            break
    return net, curve
