"""Neural policy learning for finite-horizon discrete-time control problems.

Both algorithms run backward in time. ``train_nncontpi`` learns each policy
by minimizing the simulated cost-to-go under the later learned policies
(performance iteration). ``train_hybrid_now`` learns each policy against a
one-step lookahead on the next value network, then regresses the value at
the current step (value iteration). Gradients flow through the simulated
transitions using the problem's dynamics and cost Jacobians.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .nn import DivergenceError, FeedforwardNet
from .problems import ControlProblem
from .training import TrainConfig, minimize

DEFAULT_ACTIVATION = "tanh"


class Policy:
    """Feedback control a = squash(net(x)); box bounds use a coordinatewise tanh rescaling."""

    def __init__(self, net: FeedforwardNet, bounds: tuple[np.ndarray, np.ndarray] | None = None):
        self.net = net
        self.bounds = None
        if bounds is not None:
            lo, hi = (np.atleast_1d(np.asarray(b, dtype=np.float64)) for b in bounds)
            if np.any(hi <= lo):
                raise ValueError("control bounds need lower < upper")
            self.bounds = (lo, hi)

    def squash(self, raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Control and its elementwise derivative with respect to the raw network output."""
        if self.bounds is None:
            return raw, np.ones_like(raw)
        lo, hi = self.bounds
        th = np.tanh(raw)
        half = 0.5 * (hi - lo)
        return lo + half * (th + 1.0), half * (1.0 - th * th)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.squash(self.net(x))[0]

    def forward(self, x):
        raw, cache = self.net.forward(x)
        a, da = self.squash(raw)
        return a, (cache, da)

    def backward(self, cache, a_bar):
        net_cache, da = cache
        return self.net.backward(net_cache, a_bar * da)

    def input_jacobian(self, x: np.ndarray) -> np.ndarray:
        """d a / d x, shape (B, q, d)."""
        raw = self.net(x)
        da = self.squash(raw)[1]
        return da[:, :, None] * self.net.input_jacobian(x)

    def copy(self) -> "Policy":
        return Policy(self.net.copy(), self.bounds)


@dataclass
class PolicyValuePair:
    """Learned policies for t = 0..T-1, value networks (Hybrid-Now only) and the cost estimate at x0."""

    scheme: str
    policies: list[Policy]
    value_nets: list[FeedforwardNet] = field(default_factory=list)
    estimate: float = float("nan")
    standard_error: float = float("nan")
    seed: int | None = None
    runtime_s: float = 0.0
    policy_losses: dict[int, float] = field(default_factory=dict)
    value_losses: dict[int, float] = field(default_factory=dict)

    @property
    def estimate_y0(self) -> float:
        return self.estimate

    def value(self, t: int, x: np.ndarray, problem: ControlProblem) -> np.ndarray:
        """V_t(x); at the horizon this is the terminal cost itself."""
        if t == problem.horizon:
            return problem.terminal_cost(x)
        return self.value_nets[t](x)[:, 0]

    def to_dict(self, with_networks: bool = False) -> dict:
        out = {
            "scheme": self.scheme,
            "estimate_y0": self.estimate,
            "standard_error": self.standard_error,
            "seed": self.seed,
            "runtime_s": self.runtime_s,
            "step_losses": {str(k): v for k, v in sorted(self.policy_losses.items())},
            "value_losses": {str(k): v for k, v in sorted(self.value_losses.items())},
        }
        if with_networks:
            out["policies"] = [p.net.to_dict() for p in self.policies]
            out["value_nets"] = [v.to_dict() for v in self.value_nets]
        return out

    def save(self, path: str | Path, with_networks: bool = False) -> None:
        Path(path).write_text(json.dumps(self.to_dict(with_networks), indent=1))


def _new_net(problem: ControlProblem, out_dim: int, cfg: TrainConfig, rng) -> FeedforwardNet:
    return FeedforwardNet.glorot(
        problem.state_dim, out_dim, rng, hidden_widths=cfg.hidden_widths, activation=cfg.activation or DEFAULT_ACTIVATION
    )


def _new_policy(problem, cfg, rng, later: Policy | None) -> Policy:
    if later is not None and cfg.warm_start:
        return later.copy()
    return Policy(_new_net(problem, problem.control_dim, cfg, rng), problem.control_bounds)


def _budget(t: int, problem: ControlProblem, cfg: TrainConfig) -> int:
    return cfg.iters_first_step if t == problem.horizon - 1 else cfg.iters_per_step


def _check_finite(cost: np.ndarray, label: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(cost)):
        bad = int(np.argmax(~np.isfinite(cost)))
        raise DivergenceError(f"{label}: non-finite cost sample (state {x[bad].tolist()})")


def cost_to_go_loss(problem: ControlProblem, t: int, policy: Policy, later: dict[int, Policy], batch: dict):
    """Mean of f(X_t, a) + sum_{s>t} f(X_s, pi_s(X_s)) + g(X_T), backpropagated to the policy at t."""
    x = batch["x"]
    noise = batch["eps"]
    n = x.shape[0]
    a, cache = policy.forward(x)
    states, controls = [x], [a]
    total = problem.cost(x, a)
    for s in range(t, problem.horizon):
        x_next = problem.dynamics(states[-1], controls[-1], noise[s - t])
        states.append(x_next)
        if s + 1 < problem.horizon:
            a_next = later[s + 1](x_next)
            controls.append(a_next)
            total = total + problem.cost(x_next, a_next)
    total = total + problem.terminal_cost(states[-1])
    _check_finite(total, f"nncontpi[{t}]", x)
    lam = problem.terminal_cost_grad(states[-1]) / n
    for s in range(problem.horizon - 1, t - 1, -1):
        k = s - t
        xs, as_ = states[k], controls[k]
        jx, ja = problem.dynamics_jac(xs, as_, noise[k])
        gx, ga = problem.cost_grad(xs, as_)
        a_bar = np.einsum("bij,bi->bj", ja, lam) + ga / n
        x_bar = np.einsum("bij,bi->bj", jx, lam) + gx / n
        if s > t:
            x_bar = x_bar + np.einsum("bqd,bq->bd", later[s].input_jacobian(xs), a_bar)
            lam = x_bar
    return float(total.mean()), [policy.backward(cache, a_bar)]


def lookahead_loss(problem: ControlProblem, t: int, policy: Policy, next_value, next_value_grad, batch: dict):
    """Mean of f(X_t, a) + V_{t+1}(F(X_t, a, eps)) backpropagated to the policy."""
    x, eps = batch["x"], batch["eps"][0]
    n = x.shape[0]
    a, cache = policy.forward(x)
    x_next = problem.dynamics(x, a, eps)
    total = problem.cost(x, a) + next_value(x_next)
    _check_finite(total, f"hybrid_now[{t}]", x)
    _, ja = problem.dynamics_jac(x, a, eps)
    _, ga = problem.cost_grad(x, a)
    a_bar = (np.einsum("bij,bi->bj", ja, next_value_grad(x_next)) + ga) / n
    return float(total.mean()), [policy.backward(cache, a_bar)]


def value_regression_loss(value_net: FeedforwardNet, batch: dict):
    x, y = batch["x"], batch["target"]
    v, cache = value_net.forward(x)
    r = v[:, 0] - y
    return float(np.mean(r * r)), [value_net.backward(cache, (2.0 * r / x.shape[0])[:, None])]


def _noise_stack(problem, rng, steps: int, n: int) -> np.ndarray:
    return np.stack([problem.noise(rng, n) for _ in range(steps)])


def _minimize_control(nets, make_data, loss, n_iters, cfg, label):
    # stacked noise has the batch on axis 1; move it to axis 0 for slicing and back
    def data(n):
        d = make_data(n)
        d["eps"] = np.moveaxis(d["eps"], 1, 0)
        return d

    def wrapped(batch):
        batch = dict(batch, eps=np.moveaxis(batch["eps"], 0, 1))
        return loss(batch)

    return minimize(nets, data, wrapped, n_iters, cfg, label)


def train_nncontpi(problem: ControlProblem, cfg: TrainConfig, rng: np.random.Generator, seed=None, eval_batch: int | None = None) -> PolicyValuePair:
    t0 = time.perf_counter()
    T = problem.horizon
    policies: dict[int, Policy] = {}
    losses = {}
    for t in range(T - 1, -1, -1):
        policy = _new_policy(problem, cfg, rng, policies.get(t + 1))

        def data(n, t=t):
            return {"x": problem.sample_states(t, rng, n), "eps": _noise_stack(problem, rng, T - t, n)}

        losses[t] = _minimize_control(
            [policy.net], data, lambda b, t=t, policy=policy: cost_to_go_loss(problem, t, policy, policies, b), _budget(t, problem, cfg), cfg, f"nncontpi[{t}]"
        )
        policies[t] = policy
    result = PolicyValuePair("nncontpi", [policies[t] for t in range(T)], seed=seed, policy_losses=losses)
    return _finalize(problem, result, rng, eval_batch or cfg.eval_batch, t0)


def train_hybrid_now(problem: ControlProblem, cfg: TrainConfig, rng: np.random.Generator, seed=None, eval_batch: int | None = None) -> PolicyValuePair:
    t0 = time.perf_counter()
    T = problem.horizon
    policies: dict[int, Policy] = {}
    values: dict[int, FeedforwardNet] = {}
    p_losses, v_losses = {}, {}
    for t in range(T - 1, -1, -1):
        if t == T - 1:
            next_value, next_grad = problem.terminal_cost, problem.terminal_cost_grad
        else:
            vnet = values[t + 1]
            next_value = lambda x, vnet=vnet: vnet(x)[:, 0]
            next_grad = lambda x, vnet=vnet: vnet.value_and_gradient(x)[1]
        policy = _new_policy(problem, cfg, rng, policies.get(t + 1))

        def pdata(n, t=t):
            return {"x": problem.sample_states(t, rng, n), "eps": _noise_stack(problem, rng, 1, n)}

        p_losses[t] = _minimize_control(
            [policy.net],
            pdata,
            lambda b, t=t, policy=policy, nv=next_value, ng=next_grad: lookahead_loss(problem, t, policy, nv, ng, b),
            _budget(t, problem, cfg),
            cfg,
            f"hybrid_now_policy[{t}]",
        )
        policies[t] = policy
        vnet = values[t + 1].copy() if (t + 1 in values and cfg.warm_start) else _new_net(problem, 1, cfg, rng)

        def vdata(n, t=t, policy=policy, nv=next_value):
            x = problem.sample_states(t, rng, n)
            a = policy(x)
            x_next = problem.dynamics(x, a, problem.noise(rng, n))
            return {"x": x, "target": problem.cost(x, a) + nv(x_next)}

        v_losses[t] = minimize([vnet], vdata, lambda b, vnet=vnet: value_regression_loss(vnet, b), _budget(t, problem, cfg), cfg, f"hybrid_now_value[{t}]")
        values[t] = vnet
    result = PolicyValuePair(
        "hybrid_now",
        [policies[t] for t in range(T)],
        value_nets=[values[t] for t in range(T)],
        seed=seed,
        policy_losses=p_losses,
        value_losses=v_losses,
    )
    return _finalize(problem, result, rng, eval_batch or cfg.eval_batch, t0)


def _finalize(problem, result: PolicyValuePair, rng, eval_batch: int, t0: float) -> PolicyValuePair:
    result.estimate, result.standard_error = evaluate_policy(problem, result.policies, eval_batch, rng)
    result.runtime_s = time.perf_counter() - t0
    if not np.isfinite(result.estimate):
        raise DivergenceError(f"{result.scheme}: non-finite cost estimate")
    return result


def evaluate_policy(
    problem: ControlProblem,
    policies: list[Callable[[np.ndarray], np.ndarray]],
    n_rollouts: int,
    rng: np.random.Generator,
    include_penalty: bool = False,
) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of sum_t f(X_t, pi_t(X_t)) + g(X_T) from x0."""
    if len(policies) != problem.horizon:
        raise ValueError(f"need {problem.horizon} policies, got {len(policies)}")
    x = np.broadcast_to(problem.x0, (n_rollouts, problem.state_dim)).copy()
    total = np.zeros(n_rollouts)
    for t in range(problem.horizon):
        a = policies[t](x)
        total += problem.cost(x, a) if include_penalty else problem.running_cost(x, a)
        x = problem.dynamics(x, a, problem.noise(rng, n_rollouts))
    total += problem.terminal_cost(x)
    se = float(total.std(ddof=1) / np.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0
    return float(total.mean()), se


CONTROL_SCHEMES: dict[str, Callable[..., PolicyValuePair]] = {
    "nncontpi": train_nncontpi,
    "hybrid_now": train_hybrid_now,
}
