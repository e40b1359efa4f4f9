"""Independent oracles shared by the test suite: closed-form Gaussian score
models, finite differences, and a random-graph builder for the gradient
engine checks. Everything here stays deliberately separate from the library
code paths it is used to verify."""

import numpy as np

from hypersteer.numerics import Tensor, ops


class AnalyticGaussianVP:
    """Stand-in denoiser for 1-D Gaussian data under the VP forward process.

    Uses the closed-form marginal score of N(mu0, s0^2) data; the noise
    prediction is -sigma_t * score.
    """

    parameterization = "epsilon"
    data_dim = 1

    def __init__(self, mu0: float, s0: float):
        self.mu0 = mu0
        self.s0 = s0

    def score(self, x, t, sched):
        abar = sched.alpha_bar_t(t)
        var = abar * self.s0**2 + sched.sigma_t(t) ** 2
        return -(x - np.sqrt(abar) * self.mu0) / var

    def eps(self, x, t, cond_ids, sched, delta=None):
        x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        t = np.asarray(t)
        sig = sched.sigma_t(t)
        score = self.score(x, t, sched)
        if t.ndim > 0 and x.ndim == 2:
            sig = sig[:, None]
        return Tensor(-sig * score)


class AnalyticGaussianFlow:
    """Velocity model for 1-D Gaussian data on the straight-line path."""

    parameterization = "velocity"
    data_dim = 1

    def __init__(self, mu0: float, s0: float):
        self.mu0 = mu0
        self.s0 = s0

    def marginal(self, t):
        mean = (1.0 - t) * self.mu0
        var = (1.0 - t) ** 2 * self.s0**2 + t**2
        return mean, var

    def score(self, x, t):
        mean, var = self.marginal(t)
        return -(x - mean) / var

    def velocity(self, x, t, cond_ids, delta=None):
        from hypersteer.diffusion import velocity_score_convert

        x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        t_arr = np.asarray(t, dtype=np.float64)
        s = self.score(x, t_arr[:, None] if t_arr.ndim and x.ndim == 2 else t_arr)
        tt = t_arr[:, None] if t_arr.ndim and x.ndim == 2 else t_arr
        return Tensor(velocity_score_convert(x, tt, s))


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, element by element."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def fd_grad_probe(f, x: np.ndarray, indices, h: float = 1e-5) -> np.ndarray:
    """Central differences at a probe subset of flat indices."""
    flat = x.reshape(-1)
    out = np.zeros(len(indices))
    for k, i in enumerate(indices):
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        out[k] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2.0 * h)
    return out


def rel_err(got: np.ndarray, want: np.ndarray) -> float:
    """Max elementwise error relative to max(1, |want|)."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    return float(np.max(np.abs(got - want) / np.maximum(1.0, np.abs(want))))


# ---------------------------------------------------------------------------
# Random composite graphs over the primitive set


def random_graph(seed: int):
    """Build (forward fn over numpy leaves, leaf shapes) for a seeded graph.

    The function composes recorded primitives and reduces to a scalar; all
    operations stay smooth on the sampled domain (|x| <= 10, sqrt fed
    positive arguments).
    """
    rng = np.random.default_rng(seed)
    n_leaves = int(rng.integers(2, 4))
    dim = int(rng.integers(2, 5))
    shapes = [(dim, dim) for _ in range(n_leaves)]

    steps = []
    n_ops = int(rng.integers(3, 8))
    unary = ["tanh", "gelu", "exp_scaled", "sqrt_pos", "square", "softmax", "neg"]
    binary = ["add", "sub", "mul", "matmul"]
    for _ in range(n_ops):
        if rng.random() < 0.5:
            steps.append(("u", rng.choice(unary), int(rng.integers(0, n_leaves))))
        else:
            steps.append(
                ("b", rng.choice(binary), int(rng.integers(0, n_leaves)), int(rng.integers(0, n_leaves)))
            )

    def forward(leaves):
        vals = [x if isinstance(x, Tensor) else Tensor(x) for x in leaves]
        acc = vals[0]
        for step in steps:
            if step[0] == "u":
                _, name, i = step
                operand = ops.add(acc, vals[i])
                if name == "tanh":
                    acc = ops.tanh(operand)
                elif name == "gelu":
                    acc = ops.gelu(operand)
                elif name == "exp_scaled":
                    acc = ops.exp(ops.scale(operand, 0.05))
                elif name == "sqrt_pos":
                    acc = ops.sqrt(ops.add(ops.square(operand), Tensor(np.full(operand.shape, 0.5))))
                elif name == "square":
                    acc = ops.scale(ops.square(operand), 0.1)
                elif name == "softmax":
                    acc = ops.softmax(operand)
                else:
                    acc = ops.neg(operand)
            else:
                _, name, i, j = step
                if name == "add":
                    acc = ops.add(acc, vals[i])
                elif name == "sub":
                    acc = ops.sub(acc, vals[j])
                elif name == "mul":
                    acc = ops.mul(acc, ops.tanh(vals[i]))
                else:
                    acc = ops.scale(ops.matmul(acc, vals[i]), 0.2)
        joined = ops.concat([acc, vals[0]], axis=-1)
        return ops.sum(ops.tanh(joined))

    return forward, shapes


def brute_force_keysteps(d_profile: np.ndarray, M: int):
    """Independent reimplementation of top-curvature selection for the oracle.

    Curvature is |d_{t-1} - 2 d_t + d_{t+1}| on interior steps, zero at the
    boundary; candidates are every step below T, ties prefer larger t.
    """
    d = np.asarray(d_profile, dtype=np.float64)
    T = len(d) + 1
    scored = []
    for t in range(1, T):
        if 2 <= t <= T - 2:
            kappa = abs(d[t - 2] - 2 * d[t - 1] + d[t])
        else:
            kappa = 0.0
        scored.append((kappa, t))
    scored.sort(key=lambda pair: (-pair[0], -pair[1]))
    return tuple(sorted([T] + [t for _, t in scored[: M - 1]], reverse=True))
