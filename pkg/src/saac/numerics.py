"""Small deterministic function-approximation core.

Fully connected tanh networks with hand-written backprop, an Adam optimizer
and a central-difference gradient checker. Everything is float64.
"""
from dataclasses import dataclass, field

import numpy as np

from saac import kernels


class ConfigurationError(ValueError):
    """Invalid shapes, sizes or configuration values."""


class TrainingDivergence(FloatingPointError):
    """A loss or gradient went non-finite."""

    def __init__(self, loss_name, detail=""):
        self.loss_name = loss_name
        msg = f"non-finite values in {loss_name}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


def make_rng(seed):
    """Counter-based generator (Philox) so streams are reproducible across platforms."""
    return np.random.Generator(np.random.Philox(int(seed)))


def spawn_rngs(seed, n):
    seq = np.random.SeedSequence(int(seed))
    return [np.random.Generator(np.random.Philox(s)) for s in seq.spawn(n)]


class Mlp:
    """Dense network, tanh on hidden layers and identity on the output.

    Parameters live in one flat buffer ``params``; ``weights[l]`` (in x out)
    and ``biases[l]`` are views into it, so optimizer and Polyak updates touch
    a single array.
    """

    def __init__(self, layer_sizes, rng=None, out_scale=1.0):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ConfigurationError(f"bad layer sizes {layer_sizes!r}")
        self.layer_sizes = sizes
        n = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
        self.params = np.zeros(n)
        self.weights, self.biases = self._views(self.params)
        if rng is not None:
            for l, W in enumerate(self.weights):
                bound = 1.0 / np.sqrt(W.shape[0])
                if l == len(self.weights) - 1:
                    bound *= out_scale
                W[...] = rng.uniform(-bound, bound, size=W.shape)
                self.biases[l][...] = rng.uniform(-bound, bound, size=W.shape[1])

    def _views(self, flat):
        weights, biases = [], []
        off = 0
        for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            weights.append(flat[off:off + a * b].reshape(a, b))
            off += a * b
            biases.append(flat[off:off + b])
            off += b
        return weights, biases

    @property
    def n_params(self):
        return self.params.size

    @property
    def in_dim(self):
        return self.layer_sizes[0]

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    def copy(self):
        other = Mlp(self.layer_sizes)
        other.params[...] = self.params
        return other

    def _as_batch(self, x):
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ConfigurationError(
                f"input has shape {x.shape}, network expects width {self.in_dim}")
        return x

    def forward_cached(self, x):
        """Batched forward pass; returns (output, activations) for ``backward``."""
        h = self._as_batch(x)
        acts = [h]
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            out = np.empty((h.shape[0], W.shape[1]))
            kernels.dense_forward(h, W, b, out, l != last)
            acts.append(out)
            h = out
        return h, acts

    def forward(self, x):
        squeeze = np.ndim(x) == 1
        y, _ = self.forward_cached(x)
        return y[0] if squeeze else y

    __call__ = forward

    def backward(self, acts, out_grad, need_input_grad=True):
        """Gradients of ``sum(out_grad * output)``.

        Returns (flat parameter gradient, input gradient or None).
        """
        dy = np.ascontiguousarray(out_grad, dtype=np.float64)
        if dy.ndim == 1:
            dy = dy[None, :]
        if len(acts) != len(self.weights) + 1 or dy.shape != acts[-1].shape:
            raise ConfigurationError(
                f"output gradient shape {dy.shape} does not match stored activations")
        grad = np.empty_like(self.params)
        dWs, dbs = self._views(grad)
        last = len(self.weights) - 1
        for l in range(last, -1, -1):
            x = acts[l]
            want_dx = l > 0 or need_input_grad
            dx = np.empty_like(x) if want_dx else None
            kernels.dense_backward(x, self.weights[l], acts[l + 1], dy,
                                   dWs[l], dbs[l], dx, l != last)
            dy = dx
        return grad, dy


@dataclass
class Adam:
    """Adam state for one flat parameter buffer."""

    size: int
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)
    t: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)

    def step(self, params, grads, name="loss"):
        grads = np.ascontiguousarray(grads, dtype=np.float64)
        if grads.shape != params.shape or params.shape != self.m.shape:
            raise ConfigurationError(
                f"{name}: gradient shape {grads.shape} vs parameters {params.shape}")
        if not np.all(np.isfinite(grads)):
            raise TrainingDivergence(name, "gradient")
        self.t += 1
        kernels.adam_update(params, grads, self.m, self.v, self.lr,
                            self.beta1, self.beta2, self.eps, self.t)
        return params


def adam_step(state, params, grads, name="loss"):
    return state.step(params, grads, name)


class ScalarParam:
    """A learned scalar (e.g. a log-temperature) with its own Adam state."""

    def __init__(self, value, lr):
        self.value = np.array([float(value)])
        self.opt = Adam(1, lr=lr)

    def __float__(self):
        return float(self.value[0])

    def step(self, grad, name):
        self.opt.step(self.value, np.array([float(grad)]), name)


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)

    @property
    def passed(self):
        return bool(self.max_rel_error < self.tolerance)


def numeric_grad(fn, params, step=1e-5):
    params = np.array(params, dtype=np.float64)
    out = np.empty_like(params)
    for i in range(params.size):
        old = params[i]
        params[i] = old + step
        hi = fn(params)
        params[i] = old - step
        lo = fn(params)
        params[i] = old
        out[i] = (hi - lo) / (2.0 * step)
    return out


def grad_check(loss, params, tolerance=1e-4, step=1e-5, floor=1e-6):
    """Compare an analytic gradient with central differences.

    ``loss(p)`` must return ``(value, grad)`` and be deterministic in ``p``
    (freeze any sampling noise outside the closure). The relative error of
    each entry is ``|a - n| / max(|a| + |n|, floor)``.
    """
    p0 = np.array(params, dtype=np.float64)
    _, analytic = loss(p0.copy())
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = numeric_grad(lambda p: float(loss(p)[0]), p0, step)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    err = float(np.max(np.abs(analytic - numeric) / denom)) if p0.size else 0.0
    return GradCheckReport(err, tolerance, analytic, numeric)
