"""Small numpy MLP engine: values, input derivatives, parameter gradients, Adam.

Parameter layout is layer-major: for every affine layer the weight matrix of
shape ``(fan_in, fan_out)`` in row-major order, followed by its bias of length
``fan_out``. Hidden layers apply the activation, the output layer is affine.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("tanh", "relu")


class DimensionError(ValueError):
    """Input array does not match the network's declared dimensions."""


class DivergenceError(RuntimeError):
    """Non-finite value met during training."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _act_d1(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    # a is the cached activation output
    if name == "tanh":
        return 1.0 - a * a
    return (z > 0.0).astype(z.dtype)


def _act_d2(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return -2.0 * a * (1.0 - a * a)
    return np.zeros_like(z)


def layer_shapes(input_dim: int, output_dim: int, hidden_widths: Sequence[int]) -> list[tuple[int, int]]:
    dims = [input_dim, *hidden_widths, output_dim]
    return [(dims[k], dims[k + 1]) for k in range(len(dims) - 1)]


def n_parameters(input_dim: int, output_dim: int, hidden_widths: Sequence[int]) -> int:
    return sum((fi + 1) * fo for fi, fo in layer_shapes(input_dim, output_dim, hidden_widths))


class FeedforwardNet:
    """Fully connected network R^input_dim -> R^output_dim.

    ``params`` is the single source of truth; ``weights`` and ``biases`` are
    views into it, so in-place updates of ``params`` are seen by evaluation.
    """

    def __init__(
        self,
        input_dim: int,
        output_dim: int,
        hidden_widths: Sequence[int] | None = None,
        activation: str = "tanh",
        params: np.ndarray | None = None,
    ):
        if input_dim < 1 or output_dim < 1:
            raise ValueError("dimensions must be positive")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if hidden_widths is None:
            hidden_widths = (input_dim + 10, input_dim + 10)
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim)
        self.hidden_widths = tuple(int(w) for w in hidden_widths)
        self.activation = activation
        size = n_parameters(self.input_dim, self.output_dim, self.hidden_widths)
        if params is None:
            params = np.zeros(size)
        params = np.array(params, dtype=np.float64)
        if params.shape != (size,):
            raise DimensionError(f"expected {size} parameters, got shape {params.shape}")
        self.params = params
        self._bind_views()

    def _bind_views(self) -> None:
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        offset = 0
        for fi, fo in layer_shapes(self.input_dim, self.output_dim, self.hidden_widths):
            self.weights.append(self.params[offset : offset + fi * fo].reshape(fi, fo))
            offset += fi * fo
            self.biases.append(self.params[offset : offset + fo])
            offset += fo

    @classmethod
    def glorot(
        cls,
        input_dim: int,
        output_dim: int,
        rng: np.random.Generator,
        hidden_widths: Sequence[int] | None = None,
        activation: str = "tanh",
    ) -> "FeedforwardNet":
        """Uniform Glorot weights, zero biases."""
        net = cls(input_dim, output_dim, hidden_widths, activation)
        for w in net.weights:
            fi, fo = w.shape
            limit = np.sqrt(6.0 / (fi + fo))
            w[...] = rng.uniform(-limit, limit, size=w.shape)
        return net

    @property
    def n_params(self) -> int:
        return self.params.size

    def copy(self) -> "FeedforwardNet":
        return FeedforwardNet(
            self.input_dim, self.output_dim, self.hidden_widths, self.activation, self.params.copy()
        )

    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"expected input of width {self.input_dim}, got shape {x.shape}")
        return x, single

    # -- evaluation -----------------------------------------------------

    def _forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
        pre, post = [], [x]
        a = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = a @ w + b
            a = _act(self.activation, z)
            pre.append(z)
            post.append(a)
        out = a @ self.weights[-1] + self.biases[-1]
        return out, pre, post

    def __call__(self, x) -> np.ndarray:
        xb, single = self._as_batch(x)
        out = self._forward(xb)[0]
        return out[0] if single else out

    def input_jacobian(self, x) -> np.ndarray:
        """Jacobian d out / d x, shape ``(B, output_dim, input_dim)``."""
        xb, single = self._as_batch(x)
        _, pre, post = self._forward(xb)
        # forward-mode tangent propagation, one tangent per input coordinate
        tangent = np.broadcast_to(np.eye(self.input_dim), (xb.shape[0], self.input_dim, self.input_dim))
        for w, z, a in zip(self.weights[:-1], pre, post[1:]):
            tangent = (tangent @ w) * _act_d1(self.activation, z, a)[:, None, :]
        jac = np.swapaxes(tangent @ self.weights[-1], 1, 2)
        return jac[0] if single else jac

    def forward(self, x) -> tuple[np.ndarray, tuple]:
        """Batched output plus the cache consumed by :meth:`backward`."""
        xb, _ = self._as_batch(x)
        out, pre, post = self._forward(xb)
        return out, (pre, post)

    def backward(self, cache, out_grad) -> np.ndarray:
        pre, post = cache
        g = np.asarray(out_grad, dtype=np.float64)
        if g.shape != (post[0].shape[0], self.output_dim):
            raise DimensionError(f"output gradient shape {g.shape} does not match batch")
        return self._backward(pre, post, g)

    def param_grad(self, x, out_grad) -> np.ndarray:
        """Gradient w.r.t. ``params`` of sum_b <out_grad[b], net(x[b])>."""
        xb, single = self._as_batch(x)
        g = np.asarray(out_grad, dtype=np.float64)
        if single:
            g = g[None, :]
        return self.backward(self.forward(xb)[1], g)

    def _backward(self, pre, post, out_grad, z_extra=None, grad=None) -> np.ndarray:
        if grad is None:
            grad = np.zeros_like(self.params)
        gw, gb = self._grad_views(grad)
        gw[-1] += post[-1].T @ out_grad
        gb[-1] += out_grad.sum(axis=0)
        abar = out_grad @ self.weights[-1].T
        for k in range(len(pre) - 1, -1, -1):
            zbar = abar * _act_d1(self.activation, pre[k], post[k + 1])
            if z_extra is not None:
                zbar += z_extra[k]
            gw[k] += post[k].T @ zbar
            gb[k] += zbar.sum(axis=0)
            if k > 0:
                abar = zbar @ self.weights[k].T
        return grad

    def _grad_views(self, grad: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        gw, gb = [], []
        offset = 0
        for w in self.weights:
            fi, fo = w.shape
            gw.append(grad[offset : offset + fi * fo].reshape(fi, fo))
            offset += fi * fo
            gb.append(grad[offset : offset + fo])
            offset += fo
        return gw, gb

    # -- scalar networks whose input gradient enters a loss ---------------

    def value_and_gradient(self, x) -> tuple[np.ndarray, np.ndarray, tuple]:
        """Scalar net value ``(B,)``, input gradient ``(B, input_dim)`` and a cache.

        The cache feeds :meth:`param_grad_value_and_gradient`.
        """
        if self.output_dim != 1:
            raise DimensionError("value_and_gradient needs a scalar-output network")
        xb, _ = self._as_batch(x)
        out, pre, post = self._forward(xb)
        g = np.broadcast_to(self.weights[-1][:, 0], (xb.shape[0], self.weights[-1].shape[0]))
        g_hidden = [g]
        dz = []
        for k in range(len(pre) - 1, -1, -1):
            d = g * _act_d1(self.activation, pre[k], post[k + 1])
            dz.append(d)
            g = d @ self.weights[k].T
            g_hidden.append(g)
        dz.reverse()
        g_hidden.reverse()  # g_hidden[k] is d out / d post[k]
        return out[:, 0], g, (pre, post, dz, g_hidden)

    def param_grad_value_and_gradient(self, cache, value_bar, gradient_bar) -> np.ndarray:
        """Parameter gradient of a loss depending on the value and the input gradient.

        ``value_bar`` is dL/d value ``(B,)``, ``gradient_bar`` is dL/d(input gradient) ``(B, input_dim)``.
        """
        pre, post, dz, g_hidden = cache
        grad = np.zeros_like(self.params)
        gw, _ = self._grad_views(grad)
        n_hidden = len(pre)
        gbar = np.asarray(gradient_bar, dtype=np.float64)
        z_extra = []
        for k in range(n_hidden):
            # g_hidden[k] = dz[k] @ W_k^T
            gw[k] += gbar.T @ dz[k]
            dzbar = gbar @ self.weights[k]
            a = post[k + 1]
            z_extra.append(dzbar * g_hidden[k + 1] * _act_d2(self.activation, pre[k], a))
            gbar = dzbar * _act_d1(self.activation, pre[k], a)
        gw[-1][:, 0] += gbar.sum(axis=0)
        vb = np.asarray(value_bar, dtype=np.float64)[:, None]
        return self._backward(pre, post, vb, z_extra=z_extra, grad=grad)

    # -- serialization --------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden_widths": list(self.hidden_widths),
            "activation": self.activation,
            "params": [float(p) for p in self.params],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FeedforwardNet":
        if data.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data.get('version')!r}")
        return cls(
            data["input_dim"],
            data["output_dim"],
            data["hidden_widths"],
            data["activation"],
            np.array(data["params"], dtype=np.float64),
        )

    def save(self, path: str | Path) -> None:
        # repr of a float64 round-trips exactly through json
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "FeedforwardNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def net_eval(net: FeedforwardNet, x) -> np.ndarray:
    return net(x)


def net_input_gradient(net: FeedforwardNet, x) -> np.ndarray:
    return net.input_jacobian(x)


def net_param_gradient(net: FeedforwardNet, loss_grad_at_output, x) -> np.ndarray:
    return net.param_grad(x, loss_grad_at_output)


# -- symmetric matrix outputs --------------------------------------------


def sym_size(d: int) -> int:
    return d * (d + 1) // 2


def unpack_symmetric(packed: np.ndarray, d: int) -> np.ndarray:
    """Map ``(..., d(d+1)/2)`` upper-triangular entries to ``(..., d, d)`` symmetric matrices."""
    iu = np.triu_indices(d)
    out = np.zeros(packed.shape[:-1] + (d, d))
    out[..., iu[0], iu[1]] = packed
    out[..., iu[1], iu[0]] = packed
    return out


def pack_symmetric_grad(mat_grad: np.ndarray, d: int) -> np.ndarray:
    """Pull a gradient w.r.t. a symmetric matrix back onto its packed entries."""
    iu = np.triu_indices(d)
    sym = mat_grad + np.swapaxes(mat_grad, -1, -2)
    packed = sym[..., iu[0], iu[1]]
    diag = iu[0] == iu[1]
    packed[..., diag] *= 0.5
    return packed


# -- optimizer ------------------------------------------------------------


@dataclass
class PiecewiseConstantSchedule:
    """Learning rate ``values[k]`` for steps in ``(boundaries[k-1], boundaries[k]]``."""

    boundaries: list[int]
    values: list[float]

    def __post_init__(self):
        if len(self.values) != len(self.boundaries) + 1:
            raise ValueError("need one more value than boundaries")

    def __call__(self, step: int) -> float:
        for bound, value in zip(self.boundaries, self.values):
            if step <= bound:
                return value
        return self.values[-1]


def decay_schedule(total_steps: int, lr_start: float = 1e-3, lr_end: float = 1e-5, pieces: int = 6) -> PiecewiseConstantSchedule:
    """Geometric piecewise-constant decay from ``lr_start`` to ``lr_end`` over ``pieces`` equal chunks."""
    if pieces == 1:
        return PiecewiseConstantSchedule([], [lr_start])
    ratio = (lr_end / lr_start) ** (1.0 / (pieces - 1))
    values = [lr_start * ratio**k for k in range(pieces)]
    bounds = [int(round(total_steps * (k + 1) / pieces)) for k in range(pieces - 1)]
    return PiecewiseConstantSchedule(bounds, values)


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    schedule: Callable[[int], float] = field(default=lambda step: 1e-3)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, size: int, schedule: Callable[[int], float] | None = None, **kw) -> "AdamState":
        if schedule is None:
            schedule = PiecewiseConstantSchedule([], [1e-3])
        return cls(np.zeros(size), np.zeros(size), schedule, **kw)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Mutates and returns ``state``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise DimensionError(f"gradient shape {grad.shape} != parameter shape {params.shape}")
    step = state.step_count + 1
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite gradient", step)
    b1, b2 = state.beta1, state.beta2
    state.first_moment *= b1
    state.first_moment += (1.0 - b1) * grad
    state.second_moment *= b2
    state.second_moment += (1.0 - b2) * grad * grad
    state.step_count = step
    m_hat = state.first_moment / (1.0 - b1**step)
    v_hat = state.second_moment / (1.0 - b2**step)
    lr = state.schedule(step)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.epsilon), state
