"""Conditional denoiser: an MLP over (x_t, time features, condition embedding).

The same featurization (sinusoidal time features, learned condition
embedding) is reused by the hypernetwork's perception encoder. Low-rank
adapter deltas are applied additively at forward time; the stored weights
are never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import GradTape, RngStream, Tensor, ops


def sinusoidal_features(t_norm: np.ndarray, width: int) -> np.ndarray:
    """Sin/cos features of a normalized time in [0, 1]; width must be even."""
    t = np.asarray(t_norm, dtype=np.float64).reshape(-1, 1)
    k = np.arange(width // 2)
    ang = t * (np.pi * 2.0**k)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def one_hot(cond_ids: np.ndarray, n_cond: int) -> np.ndarray:
    ids = np.asarray(cond_ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= n_cond):
        raise ValueError(f"condition id out of range [0, {n_cond}): {ids}")
    out = np.zeros((ids.size, n_cond))
    out[np.arange(ids.size), ids] = 1.0
    return out


@dataclass
class DenoiserConfig:
    data_dim: int = 2
    n_cond: int = 4
    hidden: tuple = (128, 128, 128)
    time_width: int = 16
    cond_width: int = 8
    parameterization: str = "epsilon"  # or "velocity"
    adapt_layers: tuple | None = None  # default: every hidden linear layer

    def __post_init__(self):
        if self.parameterization not in ("epsilon", "velocity"):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        if self.time_width % 2:
            raise ValueError("time_width must be even")


class DenoiserNet:
    """MLP denoiser with per-layer adaptation points.

    ``params`` maps names to Tensors; ``layer_names`` orders the linear
    layers, the last one being the output head. Forward evaluation goes
    through the recorded primitives, so it is differentiable whenever a
    GradTape is active and a plain numpy pass otherwise.
    """

    def __init__(self, config: DenoiserConfig, params: dict):
        self.config = config
        self.params = params
        widths = [config.data_dim + config.time_width + config.cond_width]
        widths += list(config.hidden) + [config.data_dim]
        self.layer_names = [f"layer{i}" for i in range(len(widths) - 1)]
        self.layer_shapes = {
            name: (widths[i + 1], widths[i]) for i, name in enumerate(self.layer_names)
        }
        if config.adapt_layers is None:
            self.adapt_layers = tuple(self.layer_names[:-1])
        else:
            unknown = set(config.adapt_layers) - set(self.layer_names)
            if unknown:
                raise ValueError(f"adaptation layers not in denoiser: {sorted(unknown)}")
            self.adapt_layers = tuple(config.adapt_layers)

    @property
    def parameterization(self) -> str:
        return self.config.parameterization

    @property
    def data_dim(self) -> int:
        return self.config.data_dim

    def param_order(self) -> list:
        names = ["cond_embed"]
        for name in self.layer_names:
            names += [f"{name}.w", f"{name}.b"]
        return names

    def features(self, x, t_norm, cond_ids) -> Tensor:
        """Shared input featurization: (x, sin/cos time, condition embedding)."""
        xt = x if isinstance(x, Tensor) else Tensor(x)
        tf = Tensor(sinusoidal_features(t_norm, self.config.time_width))
        hot = Tensor(one_hot(cond_ids, self.config.n_cond))
        emb = ops.matmul(hot, self.params["cond_embed"])
        return ops.concat([xt, tf, emb], axis=-1)

    def forward(self, x, t_norm, cond_ids, delta=None) -> Tensor:
        h = self.features(x, t_norm, cond_ids)
        last = len(self.layer_names) - 1
        for i, name in enumerate(self.layer_names):
            h = self._linear(h, name, delta)
            if i < last:
                h = ops.tanh(h)
        return h

    def _linear(self, h: Tensor, name: str, delta) -> Tensor:
        w = self.params[f"{name}.w"]
        b = self.params[f"{name}.b"]
        out = ops.add(ops.matmul(h, ops.swap_last2(w)), b)
        if delta is None or name not in delta.factors:
            return out
        a_fac, b_fac = delta.factors[name]
        a_fac = a_fac if isinstance(a_fac, Tensor) else Tensor(a_fac)
        b_fac = b_fac if isinstance(b_fac, Tensor) else Tensor(b_fac)
        # Exact zero adapters short-circuit on the gradient-free path so the
        # base trajectory is reproduced bit for bit; under a tape the term is
        # kept, otherwise zero-initialized factors would never receive grads.
        if GradTape.active() is None and not b_fac.data.any():
            return out
        if a_fac.ndim == 2:
            low = ops.matmul(ops.matmul(h, ops.swap_last2(a_fac)), ops.swap_last2(b_fac))
        else:
            rows = ops.reshape(h, (h.shape[0], 1, h.shape[1]))
            low = ops.matmul(ops.matmul(rows, ops.swap_last2(a_fac)), ops.swap_last2(b_fac))
            low = ops.reshape(low, (h.shape[0], low.shape[-1]))
        return ops.add(out, ops.scale(low, delta.scale))

    # Sampler-facing heads -------------------------------------------------

    def eps(self, x, t, cond_ids, sched, delta=None) -> Tensor:
        """Noise prediction at discrete VP steps t in [1, T]."""
        if self.parameterization != "epsilon":
            raise ValueError("eps() requires an epsilon-parameterized net")
        t_norm = np.asarray(t, dtype=np.float64) / sched.T
        return self.forward(x, _per_row(t_norm, _nrows(x)), cond_ids, delta)

    def velocity(self, x, t, cond_ids, delta=None) -> Tensor:
        """Velocity prediction at continuous noise fractions t in [0, 1)."""
        if self.parameterization != "velocity":
            raise ValueError("velocity() requires a velocity-parameterized net")
        return self.forward(x, _per_row(t, _nrows(x)), cond_ids, delta)


def _nrows(x) -> int:
    shape = x.shape if hasattr(x, "shape") else np.asarray(x).shape
    return shape[0]


def _per_row(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.full(n, float(t)) if t.ndim == 0 else t


def build_denoiser(config: DenoiserConfig, seed: int) -> DenoiserNet:
    """Initialize a denoiser deterministically from a seed."""
    stream = RngStream(seed, stream=0xD0)
    params = {}
    params["cond_embed"] = Tensor(
        stream.gaussian((config.n_cond, config.cond_width)).data * 0.5
    )
    net = DenoiserNet(config, params)
    for name in net.layer_names:
        out_w, in_w = net.layer_shapes[name]
        std = 1.0 / np.sqrt(in_w)
        if name == net.layer_names[-1]:
            std = 1.0 / np.sqrt(in_w)
        params[f"{name}.w"] = Tensor(stream.gaussian((out_w, in_w)).data * std)
        params[f"{name}.b"] = Tensor(np.zeros(out_w))
    return net
