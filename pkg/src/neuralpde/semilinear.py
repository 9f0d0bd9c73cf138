"""Neural schemes for semilinear parabolic PDEs along simulated forward paths.

All local schemes run a backward loop over the time grid, fitting networks at
step i against frozen networks of later steps; Deep BSDE instead fits the
initial value and every Z network jointly through one global terminal loss.
Here ``z`` always means sigma^T D u.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .nn import FeedforwardNet
from .problems import PdeProblem
from .sim import ConfigurationError, TimeGrid, simulate_paths
from .training import SchemeResult, TrainConfig, minimize, new_net, warm


def _require_semilinear(problem: PdeProblem) -> None:
    if not problem.semilinear:
        raise ConfigurationError(f"{problem.name}: semilinear schemes need a driver f(t, x, y, z)")


def sigma_t(problem: PdeProblem, t: float, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """sigma(t, x)^T v, batched."""
    sig = np.asarray(problem.diffusion(t, x))
    if sig.ndim == 2:
        return v @ sig
    return np.einsum("bji,bj->bi", sig, v)


def sigma_apply(problem: PdeProblem, t: float, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """sigma(t, x) v, batched."""
    sig = np.asarray(problem.diffusion(t, x))
    if sig.ndim == 2:
        return v @ sig.T
    return np.einsum("bij,bj->bi", sig, v)


def _paths(problem, grid, rng, n, n_steps=None):
    return simulate_paths(grid, problem.x0, problem.drift, problem.diffusion, n, rng, n_steps=n_steps)


def _budget(i: int, grid: TimeGrid, cfg: TrainConfig) -> int:
    return cfg.iters_first_step if i == grid.n_steps - 1 else cfg.iters_per_step


def _is_warm(i: int, grid: TimeGrid, cfg: TrainConfig) -> bool:
    return cfg.warm_start and i < grid.n_steps - 1


def _value(net_or_g, x: np.ndarray) -> np.ndarray:
    if isinstance(net_or_g, FeedforwardNet):
        return net_or_g(x)[:, 0]
    return net_or_g(x)


# -- per-step losses --------------------------------------------------------


def dbdp1_loss(problem, t, dt, u_net, z_net, batch):
    """J^(B1) residual y_next - U - f(U, Z) dt - Z.dW and gradients for (U, Z)."""
    x, dw, target = batch["x"], batch["dw"], batch["target"]
    u, u_cache = u_net.forward(x)
    u = u[:, 0]
    z, z_cache = z_net.forward(x)
    fv, fy, fz = problem.f(t, x, u, z)
    r = target - u - fv * dt - np.einsum("bi,bi->b", z, dw)
    n = x.shape[0]
    rbar = 2.0 * r / n
    ubar = -rbar * (1.0 + fy * dt)
    zbar = -rbar[:, None] * (fz * dt + dw)
    return float(r @ r / n), [u_net.backward(u_cache, ubar[:, None]), z_net.backward(z_cache, zbar)]


def dbdp2_loss(problem, t, dt, u_net, batch):
    """J^(B2): Z replaced by sigma^T D U."""
    x, dw, target = batch["x"], batch["dw"], batch["target"]
    u, du, cache = u_net.value_and_gradient(x)
    z = sigma_t(problem, t, x, du)
    fv, fy, fz = problem.f(t, x, u, z)
    r = target - u - fv * dt - (z * dw).sum(axis=1)
    rbar = 2.0 * r / x.shape[0]
    ubar = -rbar * (1.0 + fy * dt)
    zbar = -rbar[:, None] * (fz * dt + dw)
    return float(np.mean(r * r)), [u_net.param_grad_value_and_gradient(cache, ubar, sigma_apply(problem, t, x, zbar))]


def regression_z_loss(z_net, batch):
    x, target = batch["x"], batch["target_z"]
    z, cache = z_net.forward(x)
    r = z - target
    return float(np.mean((r * r).sum(axis=1))), [z_net.backward(cache, 2.0 * r / x.shape[0])]


def regression_y_loss(problem, t, dt, u_net, batch):
    """J^{r,Y}: y_next - U - f(U, Z_frozen) dt."""
    x, target, z = batch["x"], batch["target"], batch["z"]
    u, cache = u_net.forward(x)
    u = u[:, 0]
    fv, fy, _ = problem.f(t, x, u, z)
    r = target - u - fv * dt
    rbar = 2.0 * r / x.shape[0]
    return float(np.mean(r * r)), [u_net.backward(cache, (-rbar * (1.0 + fy * dt))[:, None])]


def multistep_tail(problem, grid, X, dW, start, u_nets, z_nets) -> np.ndarray:
    """g(X_N) - sum_{j >= start} [f(t_j, X_j, U_j, Z_j) dt + Z_j . dW_j] with frozen networks."""
    dt = grid.dt
    s = problem.g(X[:, -1])
    for j in range(start, grid.n_steps):
        xj = X[:, j]
        u = u_nets[j](xj)[:, 0]
        z = z_nets[j](xj)
        s = s - problem.f(grid.t(j), xj, u, z)[0] * dt - (z * dW[:, j]).sum(axis=1)
    return s


def mdbdp_loss(problem, t, dt, u_net, z_net, batch):
    """J^{MB}: the tail target already holds the frozen later-step terms."""
    return dbdp1_loss(problem, t, dt, u_net, z_net, batch)


# -- schemes ------------------------------------------------------------------


def _finish(scheme, problem, t0, seed, losses, u_nets, z_nets, estimate, **extra) -> SchemeResult:
    return SchemeResult(
        scheme=scheme,
        estimate_y0=float(estimate),
        seed=seed,
        runtime_s=time.perf_counter() - t0,
        step_losses=losses,
        u_nets=u_nets,
        z_nets=z_nets,
        extra=extra,
    )


def train_dbdp1(problem: PdeProblem, grid: TimeGrid, cfg: TrainConfig, rng: np.random.Generator, seed=None) -> SchemeResult:
    _require_semilinear(problem)
    t0 = time.perf_counter()
    d, dt = problem.dim, grid.dt
    u_nets: dict[int, FeedforwardNet] = {}
    z_nets: dict[int, FeedforwardNet] = {}
    losses = {}
    for i in range(grid.n_steps - 1, -1, -1):
        u_net = warm(u_nets.get(i + 1), lambda: new_net(d, 1, cfg, problem.activation, rng), cfg)
        z_net = warm(z_nets.get(i + 1), lambda: new_net(d, d, cfg, problem.activation, rng), cfg)
        nxt = u_nets.get(i + 1, problem.g)

        def data(n, i=i, nxt=nxt):
            p = _paths(problem, grid, rng, n, n_steps=i + 1)
            return {"x": p.X[:, i], "dw": p.dW[:, i], "target": _value(nxt, p.X[:, i + 1])}

        t = grid.t(i)
        losses[i] = minimize(
            [u_net, z_net], data, lambda b: dbdp1_loss(problem, t, dt, u_net, z_net, b), _budget(i, grid, cfg), cfg, f"dbdp1[{i}]", _is_warm(i, grid, cfg)
        )
        u_nets[i], z_nets[i] = u_net, z_net
    return _finish("dbdp1", problem, t0, seed, losses, u_nets, z_nets, u_nets[0](problem.x0)[0])


def train_dbdp2(problem: PdeProblem, grid: TimeGrid, cfg: TrainConfig, rng: np.random.Generator, seed=None) -> SchemeResult:
    _require_semilinear(problem)
    t0 = time.perf_counter()
    d, dt = problem.dim, grid.dt
    u_nets: dict[int, FeedforwardNet] = {}
    losses = {}
    for i in range(grid.n_steps - 1, -1, -1):
        u_net = warm(u_nets.get(i + 1), lambda: new_net(d, 1, cfg, problem.activation, rng), cfg)
        nxt = u_nets.get(i + 1, problem.g)

        def data(n, i=i, nxt=nxt):
            p = _paths(problem, grid, rng, n, n_steps=i + 1)
            return {"x": p.X[:, i], "dw": p.dW[:, i], "target": _value(nxt, p.X[:, i + 1])}

        t = grid.t(i)
        losses[i] = minimize([u_net], data, lambda b: dbdp2_loss(problem, t, dt, u_net, b), _budget(i, grid, cfg), cfg, f"dbdp2[{i}]", _is_warm(i, grid, cfg))
        u_nets[i] = u_net
    return _finish("dbdp2", problem, t0, seed, losses, u_nets, {}, u_nets[0](problem.x0)[0])


def train_regression_scheme(
    problem: PdeProblem, grid: TimeGrid, cfg: TrainConfig, rng: np.random.Generator, seed=None
) -> SchemeResult:
    _require_semilinear(problem)
    t0 = time.perf_counter()
    d, dt = problem.dim, grid.dt
    u_nets: dict[int, FeedforwardNet] = {}
    z_nets: dict[int, FeedforwardNet] = {}
    losses, z_losses = {}, {}
    for i in range(grid.n_steps - 1, -1, -1):
        nxt = u_nets.get(i + 1, problem.g)
        t = grid.t(i)
        z_net = warm(z_nets.get(i + 1), lambda: new_net(d, d, cfg, problem.activation, rng), cfg)

        def zdata(n, i=i, nxt=nxt):
            p = _paths(problem, grid, rng, n, n_steps=i + 1)
            y = _value(nxt, p.X[:, i + 1])
            return {"x": p.X[:, i], "target_z": p.dW[:, i] / dt * y[:, None]}

        z_losses[i] = minimize([z_net], zdata, lambda b: regression_z_loss(z_net, b), _budget(i, grid, cfg), cfg, f"regZ[{i}]", _is_warm(i, grid, cfg))
        u_net = warm(u_nets.get(i + 1), lambda: new_net(d, 1, cfg, problem.activation, rng), cfg)

        def ydata(n, i=i, nxt=nxt, z_net=z_net):
            p = _paths(problem, grid, rng, n, n_steps=i + 1)
            x = p.X[:, i]
            return {"x": x, "target": _value(nxt, p.X[:, i + 1]), "z": z_net(x)}

        losses[i] = minimize([u_net], ydata, lambda b: regression_y_loss(problem, t, dt, u_net, b), _budget(i, grid, cfg), cfg, f"regY[{i}]", _is_warm(i, grid, cfg))
        u_nets[i], z_nets[i] = u_net, z_net
    return _finish("regression", problem, t0, seed, losses, u_nets, z_nets, u_nets[0](problem.x0)[0], z_losses=z_losses)


def train_deep_splitting(
    problem: PdeProblem, grid: TimeGrid, cfg: TrainConfig, rng: np.random.Generator, seed=None
) -> SchemeResult:
    """Z at step i is sigma^T D U_{i+1} (D g at the last step), evaluated at X_i and frozen."""
    _require_semilinear(problem)
    if problem.dg is None:
        raise ConfigurationError(f"{problem.name}: deep splitting needs Dg for the last step")
    t0 = time.perf_counter()
    d, dt = problem.dim, grid.dt
    u_nets: dict[int, FeedforwardNet] = {}
    losses = {}
    for i in range(grid.n_steps - 1, -1, -1):
        nxt = u_nets.get(i + 1)
        t = grid.t(i)
        u_net = warm(nxt, lambda: new_net(d, 1, cfg, problem.activation, rng), cfg)

        def data(n, i=i, nxt=nxt, t=t):
            p = _paths(problem, grid, rng, n, n_steps=i + 1)
            x = p.X[:, i]
            if nxt is None:
                grad, y = problem.dg(x), problem.g(p.X[:, i + 1])
            else:
                grad, y = nxt.value_and_gradient(x)[1], nxt(p.X[:, i + 1])[:, 0]
            return {"x": x, "target": y, "z": sigma_t(problem, t, x, grad)}

        losses[i] = minimize([u_net], data, lambda b: regression_y_loss(problem, t, dt, u_net, b), _budget(i, grid, cfg), cfg, f"ds[{i}]", _is_warm(i, grid, cfg))
        u_nets[i] = u_net
    return _finish("deep_splitting", problem, t0, seed, losses, u_nets, {}, u_nets[0](problem.x0)[0])


def train_mdbdp(problem: PdeProblem, grid: TimeGrid, cfg: TrainConfig, rng: np.random.Generator, seed=None) -> SchemeResult:
    _require_semilinear(problem)
    t0 = time.perf_counter()
    d, dt = problem.dim, grid.dt
    u_nets: dict[int, FeedforwardNet] = {}
    z_nets: dict[int, FeedforwardNet] = {}
    losses = {}
    for i in range(grid.n_steps - 1, -1, -1):
        u_net = warm(u_nets.get(i + 1), lambda: new_net(d, 1, cfg, problem.activation, rng), cfg)
        z_net = warm(z_nets.get(i + 1), lambda: new_net(d, d, cfg, problem.activation, rng), cfg)

        def data(n, i=i):
            p = _paths(problem, grid, rng, n)
            tail = multistep_tail(problem, grid, p.X, p.dW, i + 1, u_nets, z_nets)
            return {"x": p.X[:, i], "dw": p.dW[:, i], "target": tail}

        t = grid.t(i)
        losses[i] = minimize(
            [u_net, z_net], data, lambda b: mdbdp_loss(problem, t, dt, u_net, z_net, b), _budget(i, grid, cfg), cfg, f"mdbdp[{i}]", _is_warm(i, grid, cfg)
        )
        u_nets[i], z_nets[i] = u_net, z_net
    return _finish("mdbdp", problem, t0, seed, losses, u_nets, z_nets, u_nets[0](problem.x0)[0])


def deep_bsde_loss(problem, grid, y0, z0, z_nets, batch):
    """Global loss E|Y_N - g(X_N)|^2 with Y propagated forward, and its gradients."""
    X, dW = batch["X"], batch["dW"]
    n = X.shape[0]
    dt = grid.dt
    y = np.full(n, y0[0])
    fys, fzs, zs = [], [], []
    for i in range(grid.n_steps):
        x = X[:, i]
        z = np.broadcast_to(z0, (n, z0.size)) if i == 0 else z_nets[i](x)
        fv, fy, fz = problem.f(grid.t(i), x, y, z)
        y = y + fv * dt + (z * dW[:, i]).sum(axis=1)
        fys.append(fy)
        fzs.append(fz)
        zs.append(z)
    r = y - problem.g(X[:, -1])
    ybar = 2.0 * r / n
    grads_nets = {}
    z0_grad = None
    for i in range(grid.n_steps - 1, -1, -1):
        zbar = ybar[:, None] * (fzs[i] * dt + dW[:, i])
        if i == 0:
            z0_grad = zbar.sum(axis=0)
        else:
            grads_nets[i] = z_nets[i].param_grad(X[:, i], zbar)
        ybar = ybar * (1.0 + fys[i] * dt)
    grads = [np.array([ybar.sum()]), z0_grad] + [grads_nets[i] for i in range(1, grid.n_steps)]
    return float(np.mean(r * r)), grads


def train_deep_bsde(problem: PdeProblem, grid: TimeGrid, cfg: TrainConfig, rng: np.random.Generator, seed=None) -> SchemeResult:
    """X_0 is deterministic, so the initial value and initial Z are trainable vectors."""
    _require_semilinear(problem)
    t0 = time.perf_counter()
    d = problem.dim
    pilot = _paths(problem, grid, rng, cfg.batch_size)
    y0 = np.array([np.mean(problem.g(pilot.X[:, -1]))])
    z0 = np.zeros(d)
    z_nets = {i: new_net(d, d, cfg, problem.activation, rng) for i in range(1, grid.n_steps)}
    n_iters = cfg.global_iters or cfg.iters_first_step + (grid.n_steps - 1) * cfg.iters_per_step

    def data(n):
        p = _paths(problem, grid, rng, n)
        return {"X": p.X, "dW": p.dW}

    loss = minimize(
        [y0, z0, *[z_nets[i] for i in range(1, grid.n_steps)]],
        data,
        lambda b: deep_bsde_loss(problem, grid, y0, z0, z_nets, b),
        n_iters,
        cfg,
        "deep_bsde",
    )
    return _finish("deep_bsde", problem, t0, seed, {0: loss}, {}, z_nets, y0[0], z0=z0.tolist())


SEMILINEAR_SCHEMES: dict[str, Callable[..., SchemeResult]] = {
    "deep_bsde": train_deep_bsde,
    "dbdp1": train_dbdp1,
    "dbdp2": train_dbdp2,
    "regression": train_regression_scheme,
    "deep_splitting": train_deep_splitting,
    "mdbdp": train_mdbdp,
}
