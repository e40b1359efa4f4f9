"""Hypernetwork emitting per-step low-rank adapter deltas, their injection
into the denoiser, keystep selection, and the three scheduling strategies.

Architecture: a perception encoder (MLP over the denoiser's input
featurization, reusing its frozen condition embedding) produces key/value
tokens; zero-initialized query tokens attend over them in a single
cross-attention block; per-layer linear heads map the decoded features to
the down (A) and up (B) factors. The B heads start at exactly zero, so a
fresh hypernetwork is the identity adapter on every input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import SampleResult, sample_flow, sample_vp
from .nets import DenoiserNet, one_hot, sinusoidal_features
from .numerics import RngStream, Tensor, ops
from .schedules import DiffusionSchedule, FlowSchedule


@dataclass
class LoraDelta:
    """Per-layer rank-r factor pairs; effective delta is scale * B @ A.

    Factor arrays are (r, n) / (m, r), optionally with a leading batch axis
    when emitted for a whole batch of inputs.
    """

    factors: dict  # layer -> (A, B) Tensors
    scale: float = 1.0

    def is_zero(self) -> bool:
        return not any(_data(b).any() for _, b in self.factors.values())

    def row(self, i: int) -> "LoraDelta":
        """Single-sample view of batched factors."""
        out = {}
        for name, (a, b) in self.factors.items():
            a, b = _data(a), _data(b)
            out[name] = (Tensor(a[i] if a.ndim == 3 else a), Tensor(b[i] if b.ndim == 3 else b))
        return LoraDelta(factors=out, scale=self.scale)

    def flatten_rows(self, layer_order) -> np.ndarray:
        """(batch, total) concatenation of all factor entries per sample."""
        parts = []
        for name in layer_order:
            a, b = (_data(x) for x in self.factors[name])
            if a.ndim == 2:
                a, b = a[None], b[None]
            parts += [a.reshape(a.shape[0], -1), b.reshape(b.shape[0], -1)]
        return np.concatenate(parts, axis=1)

    def effective(self, layer: str) -> np.ndarray:
        a, b = (_data(x) for x in self.factors[layer])
        return self.scale * (b @ a)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def zero_delta(net: DenoiserNet, rank: int, scale: float = 1.0) -> LoraDelta:
    factors = {}
    for name in net.adapt_layers:
        out_w, in_w = net.layer_shapes[name]
        factors[name] = (Tensor(np.zeros((rank, in_w))), Tensor(np.zeros((out_w, rank))))
    return LoraDelta(factors=factors, scale=scale)


# ---------------------------------------------------------------------------
# HyperNet


@dataclass
class HyperNetConfig:
    rank: int = 4
    n_query: int = 4
    n_kv: int = 4
    d_model: int = 32
    encoder_hidden: tuple = (64, 64)
    ff_hidden: int = 64
    scale: float = 1.0
    target_layers: tuple | None = None  # default: the denoiser's adaptation points


class HyperNet:
    """LoRA predictor h(x_t, c, t) with parameters psi."""

    def __init__(self, config: HyperNetConfig, net: DenoiserNet, params: dict):
        self.config = config
        self.params = params
        self.target_layers = tuple(
            config.target_layers if config.target_layers is not None else net.adapt_layers
        )
        missing = set(self.target_layers) - set(net.layer_names)
        if missing:
            raise ValueError(f"target layers absent from denoiser: {sorted(missing)}")
        self.layer_shapes = {name: net.layer_shapes[name] for name in self.target_layers}
        # Frozen copies of the base featurization constants.
        self._cond_embed = net.params["cond_embed"].data.copy()
        self._time_width = net.config.time_width
        self._n_cond = net.config.n_cond
        enc_in = net.config.data_dim + self._time_width + net.config.cond_width
        self._enc_widths = [enc_in, *config.encoder_hidden, config.n_kv * config.d_model]

    def param_order(self) -> list:
        names = []
        for i in range(len(self._enc_widths) - 1):
            names += [f"enc{i}.w", f"enc{i}.b"]
        names += ["queries", "dec.wq", "dec.wk", "dec.wv"]
        names += ["ff0.w", "ff0.b", "ff1.w", "ff1.b"]
        for layer in self.target_layers:
            names += [f"head_a.{layer}.w", f"head_a.{layer}.b"]
            names += [f"head_b.{layer}.w", f"head_b.{layer}.b"]
        return names

    def param_count(self) -> int:
        return sum(self.params[n].size for n in self.param_order())

    def predict(self, x, t_norm, cond_ids) -> LoraDelta:
        """Emit batched LoRA factors for inputs (x_t, c, t)."""
        cfg = self.config
        xt = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
        n = xt.shape[0]
        t_arr = np.broadcast_to(np.asarray(t_norm, dtype=np.float64), (n,))
        feats = [
            xt,
            Tensor(sinusoidal_features(t_arr, self._time_width)),
            Tensor(one_hot(cond_ids, self._n_cond) @ self._cond_embed),
        ]
        h = ops.concat(feats, axis=-1)
        for i in range(len(self._enc_widths) - 1):
            h = ops.add(ops.matmul(h, ops.swap_last2(self.params[f"enc{i}.w"])), self.params[f"enc{i}.b"])
            if i < len(self._enc_widths) - 2:
                h = ops.gelu(h)
        kv = ops.reshape(h, (n, cfg.n_kv, cfg.d_model))
        q = ops.matmul(self.params["queries"], self.params["dec.wq"])  # (n_query, d_model)
        k = ops.matmul(kv, self.params["dec.wk"])
        v = ops.matmul(kv, self.params["dec.wv"])
        attn = ops.softmax(ops.scale(ops.matmul(q, ops.swap_last2(k)), 1.0 / np.sqrt(cfg.d_model)))
        ctx = ops.matmul(attn, v)  # (n, n_query, d_model)
        ff = ops.gelu(ops.add(ops.matmul(ctx, self.params["ff0.w"]), self.params["ff0.b"]))
        dec = ops.add(ctx, ops.add(ops.matmul(ff, self.params["ff1.w"]), self.params["ff1.b"]))
        z = ops.reshape(dec, (n, cfg.n_query * cfg.d_model))
        factors = {}
        for layer in self.target_layers:
            out_w, in_w = self.layer_shapes[layer]
            a = ops.add(ops.matmul(z, ops.swap_last2(self.params[f"head_a.{layer}.w"])), self.params[f"head_a.{layer}.b"])
            b = ops.add(ops.matmul(z, ops.swap_last2(self.params[f"head_b.{layer}.w"])), self.params[f"head_b.{layer}.b"])
            factors[layer] = (
                ops.reshape(a, (n, cfg.rank, in_w)),
                ops.reshape(b, (n, out_w, cfg.rank)),
            )
        return LoraDelta(factors=factors, scale=cfg.scale)


def predict_lora(hnet: HyperNet, x_t, t_norm, cond_ids) -> LoraDelta:
    return hnet.predict(x_t, t_norm, cond_ids)


def build_hypernet(net: DenoiserNet, config: HyperNetConfig, seed: int) -> HyperNet:
    """Initialize psi; every emitted B factor is exactly zero at start."""
    stream = RngStream(seed, stream=0xAE)
    params = {}
    hnet = HyperNet(config, net, params)
    widths = hnet._enc_widths
    for i in range(len(widths) - 1):
        std = np.sqrt(2.0 / widths[i])
        params[f"enc{i}.w"] = Tensor(stream.gaussian((widths[i + 1], widths[i])).data * std)
        params[f"enc{i}.b"] = Tensor(np.zeros(widths[i + 1]))
    dm = config.d_model
    params["queries"] = Tensor(np.zeros((config.n_query, dm)))
    for name in ("dec.wq", "dec.wk", "dec.wv"):
        params[name] = Tensor(stream.gaussian((dm, dm)).data / np.sqrt(dm))
    params["ff0.w"] = Tensor(stream.gaussian((dm, config.ff_hidden)).data * np.sqrt(2.0 / dm))
    params["ff0.b"] = Tensor(np.zeros(config.ff_hidden))
    params["ff1.w"] = Tensor(stream.gaussian((config.ff_hidden, dm)).data * np.sqrt(2.0 / config.ff_hidden))
    params["ff1.b"] = Tensor(np.zeros(dm))
    z_dim = config.n_query * dm
    for layer in hnet.target_layers:
        out_w, in_w = hnet.layer_shapes[layer]
        params[f"head_a.{layer}.w"] = Tensor(
            stream.gaussian((config.rank * in_w, z_dim)).data / np.sqrt(z_dim)
        )
        params[f"head_a.{layer}.b"] = Tensor(np.zeros(config.rank * in_w))
        params[f"head_b.{layer}.w"] = Tensor(np.zeros((out_w * config.rank, z_dim)))
        params[f"head_b.{layer}.b"] = Tensor(np.zeros(out_w * config.rank))
    return hnet


def expected_param_count(net: DenoiserNet, config: HyperNetConfig) -> int:
    """Closed-form parameter count for a given configuration."""
    enc_in = net.config.data_dim + net.config.time_width + net.config.cond_width
    widths = [enc_in, *config.encoder_hidden, config.n_kv * config.d_model]
    total = sum(widths[i + 1] * widths[i] + widths[i + 1] for i in range(len(widths) - 1))
    dm = config.d_model
    total += config.n_query * dm + 3 * dm * dm
    total += dm * config.ff_hidden + config.ff_hidden + config.ff_hidden * dm + dm
    z_dim = config.n_query * dm
    layers = config.target_layers if config.target_layers is not None else net.adapt_layers
    for layer in layers:
        out_w, in_w = net.layer_shapes[layer]
        total += config.rank * in_w * (z_dim + 1) + out_w * config.rank * (z_dim + 1)
    return total


# ---------------------------------------------------------------------------
# Injection


class InjectedModel:
    """Denoiser view with an adapter applied at forward time; theta untouched."""

    def __init__(self, net: DenoiserNet, delta: LoraDelta):
        unknown = set(delta.factors) - set(net.layer_names)
        if unknown:
            raise ValueError(f"delta targets layers absent from denoiser: {sorted(unknown)}")
        for name, (a, b) in delta.factors.items():
            out_w, in_w = net.layer_shapes[name]
            a_shape, b_shape = _data(a).shape[-2:], _data(b).shape[-2:]
            if a_shape[1] != in_w or b_shape[0] != out_w or a_shape[0] != b_shape[1]:
                raise ValueError(
                    f"delta factor shapes {a_shape} x {b_shape} do not fit layer "
                    f"{name} of shape ({out_w}, {in_w})"
                )
        self.net = net
        self.delta = delta

    @property
    def parameterization(self) -> str:
        return self.net.parameterization

    @property
    def data_dim(self) -> int:
        return self.net.data_dim

    def forward(self, x, t_norm, cond_ids, delta=None):
        assert delta is None
        return self.net.forward(x, t_norm, cond_ids, self.delta)

    def eps(self, x, t, cond_ids, sched, delta=None):
        assert delta is None
        return self.net.eps(x, t, cond_ids, sched, self.delta)

    def velocity(self, x, t, cond_ids, delta=None):
        assert delta is None
        return self.net.velocity(x, t, cond_ids, self.delta)


def inject(net: DenoiserNet, delta: LoraDelta) -> InjectedModel:
    return InjectedModel(net, delta)


# ---------------------------------------------------------------------------
# Keystep selection


@dataclass(frozen=True)
class KeystepSchedule:
    """Sorted-descending keysteps; every step maps to the nearest keystep >= it."""

    T: int
    steps: tuple

    def __post_init__(self):
        if not self.steps or self.steps[0] != self.T:
            raise ValueError(f"keysteps must start at T={self.T}, got {self.steps}")
        if any(a <= b for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError(f"keysteps must be strictly descending: {self.steps}")
        if self.steps[-1] < 1:
            raise ValueError(f"keysteps must lie in [1, T]: {self.steps}")

    @property
    def M(self) -> int:
        return len(self.steps)

    def segment_of(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside [1, {self.T}]")
        candidates = [k for k in self.steps if k >= t]
        return min(candidates)


def keysteps_from_profile(d_profile: np.ndarray, M: int) -> KeystepSchedule:
    """Top-curvature keysteps from a one-step-change profile d_t, t = 1..T-1.

    Curvature is the absolute second difference |d_{t-1} - 2 d_t + d_{t+1}|,
    defined for t in [2, T-2] and taken as 0 at the boundary steps 1 and T-1
    so saturation (M = T) selects every step. T itself is always a keystep;
    ties prefer larger t.
    """
    d = np.asarray(d_profile, dtype=np.float64)
    T = len(d) + 1
    if M < 1 or M > T:
        raise ValueError(f"need 1 <= M <= T={T}, got {M}")
    kappa = np.zeros(T - 1)  # index i -> step t = i + 1
    for t in range(2, T - 1):
        kappa[t - 1] = abs(d[t - 2] - 2.0 * d[t - 1] + d[t])
    order = sorted(range(1, T), key=lambda t: (-kappa[t - 1], -t))
    chosen = sorted([T] + order[: M - 1], reverse=True)
    return KeystepSchedule(T=T, steps=tuple(chosen))


def one_step_change_profile(net, sched: DiffusionSchedule, probe_conds, stream: RngStream) -> np.ndarray:
    """Average relative L1 change of one-step predictions, d_t for t = 1..T-1."""
    res = sample_vp(net, probe_conds, sched, stream, record_x0=True)
    # x0_path[i] holds x_{0|t} for t = T - i.
    eps0 = 1e-8
    d = np.zeros(sched.T - 1)
    for t in range(1, sched.T):
        cur = res.x0_path[sched.T - t]
        nxt = res.x0_path[sched.T - t - 1]  # x_{0|t+1}
        num = np.abs(cur - nxt).sum(axis=-1)
        den = np.abs(nxt).sum(axis=-1) + eps0
        d[t - 1] = float(np.mean(num / den))
    return d


def select_keysteps(net, sched: DiffusionSchedule, probe_conds, M: int, stream: RngStream) -> KeystepSchedule:
    """Probe the base sampler and pick the M highest-curvature steps (plus T)."""
    if M < 2:
        raise ValueError(f"keystep selection needs M >= 2, got {M}")
    if len(np.atleast_1d(probe_conds)) == 0:
        raise ValueError("probe condition set is empty")
    d = one_step_change_profile(net, sched, probe_conds, stream)
    return keysteps_from_profile(d, M)


# ---------------------------------------------------------------------------
# Aligned sampling


@dataclass
class StrategySpec:
    variant: str  # 'S', 'I', or 'P'
    keysteps: KeystepSchedule | None = None

    def __post_init__(self):
        if self.variant not in ("S", "I", "P"):
            raise ValueError(f"unknown strategy variant {self.variant!r}")
        if self.variant == "P" and self.keysteps is None:
            raise ValueError("piecewise strategy needs a keystep schedule")


@dataclass
class DeltaLog:
    """Per-step flattened adapter vectors for the dynamics analyses."""

    steps: list  # step labels in sampling order (noise -> data)
    vectors: np.ndarray  # (n_steps, n_traj, dim)
    layer_order: tuple


def aligned_sample(
    net: DenoiserNet,
    hnet: HyperNet,
    cond_ids,
    sched,
    strategy: StrategySpec,
    stream: RngStream,
    record_deltas: bool = False,
    record_steps=None,
) -> tuple[SampleResult, DeltaLog | None]:
    """Sample with hypernetwork-adapted transitions under a strategy.

    S regenerates the adapter at every step, I once at the start, P at the
    keysteps (reusing it within each segment, regenerated from the
    pre-transition latent). Stream consumption matches the base sampler
    exactly, so an untrained hypernetwork reproduces it bit for bit.
    """
    cond_ids = np.asarray(cond_ids, dtype=np.int64)
    vp = isinstance(sched, DiffusionSchedule)
    if vp:
        first_step = sched.T
        label_of = dict()
    else:
        if not isinstance(sched, FlowSchedule):
            raise TypeError(f"unknown schedule type {type(sched).__name__}")
        # Flow step labels count grid positions from the noise end: the first
        # visited state (t = 1 - dt) is labeled N - 1, the last (t = dt) is 1.
        from .diffusion import flow_step_grid

        grid = flow_step_grid(sched)
        first_step = sched.N - 1
        label_of = {float(t): sched.N - 1 - i for i, t in enumerate(grid)}

    logged_steps, logged_vecs = [], []
    state = {"delta": None}

    def delta_fn(x, t):
        label = t if vp else label_of[float(t)]
        t_norm = t / sched.T if vp else t
        if strategy.variant == "S":
            regen = True
        elif strategy.variant == "I":
            regen = label == first_step
        else:
            regen = label in strategy.keysteps.steps
        if regen:
            state["delta"] = hnet.predict(x, t_norm, cond_ids)
        if record_deltas and (record_steps is None or label in record_steps):
            logged_steps.append(label)
            logged_vecs.append(state["delta"].flatten_rows(hnet.target_layers))
        return state["delta"]

    sampler = sample_vp if vp else sample_flow
    result = sampler(net, cond_ids, sched, stream, delta_fn=delta_fn)
    log = None
    if record_deltas:
        log = DeltaLog(
            steps=logged_steps,
            vectors=np.stack(logged_vecs),
            layer_order=hnet.target_layers,
        )
    return result, log
