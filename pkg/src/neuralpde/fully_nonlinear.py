"""Second-order multistep schemes for fully nonlinear PDEs.

The value network U and gradient network Z (here ``z = D u``) are fitted
backward in time with a multistep loss, while the Hessian plugged into the
driver F comes from one of three estimators:

* differentiating the next Z network (``train_2emdbdp``),
* a Malliavin-weight regression with one antithetic pair on a coarse
  subgrid (``train_gamma_v2``, used by ``train_2mdbdp``),
* a multistep Malliavin-weight regression with antithetic pairs at every
  later coarse point (``train_gamma_v3``, used by ``train_2m2dbdp``).

Coarse point ``ell`` sits at fine index ``ell * kappa_hat``. Hessian network
``ell`` is trained before the fine steps ``(ell - 1) * kappa_hat ...
ell * kappa_hat - 1`` and is the Hessian used at those steps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nn import FeedforwardNet, pack_symmetric_grad, sym_size, unpack_symmetric
from .problems import PdeProblem
from .semilinear import sigma_apply
from .sim import ConfigurationError, PathBatch, TimeGrid, antithetic_states, malliavin_h1, malliavin_h2, simulate_paths
from .training import SchemeResult, TrainConfig, minimize, new_net, warm

GammaFn = Callable[[np.ndarray], np.ndarray]


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def sym_outer(v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Batched (v w^T + w v^T) / 2."""
    return symmetrize(v[:, :, None] * w[:, None, :])


def z_jacobian_hessian(z_net: FeedforwardNet) -> GammaFn:
    """Hessian proxy D_x Z, symmetrized."""
    return lambda x: symmetrize(z_net.input_jacobian(x))


@dataclass
class HessianEstimate:
    """Hessian estimate at coarse point ``coarse_index``: a symmetric-output network, or D^2 g at the terminal point."""

    coarse_index: int
    dim: int
    net: FeedforwardNet | None = None
    terminal: GammaFn | None = None
    loss: float = 0.0

    def __post_init__(self):
        if (self.net is None) == (self.terminal is None):
            raise ConfigurationError("a Hessian estimate needs exactly one of a network or a terminal Hessian")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.net is None:
            return self.terminal(x)
        return unpack_symmetric(self.net(x), self.dim)


def _require_fully_nonlinear(problem: PdeProblem) -> None:
    if problem.semilinear:
        raise ConfigurationError(f"{problem.name}: second-order schemes need a driver F(t, x, y, z, gamma)")


def _require_constant_coefficients(problem: PdeProblem) -> tuple[np.ndarray, np.ndarray]:
    if problem.sigma_const is None or problem.mu_const is None:
        raise ConfigurationError(f"{problem.name}: Malliavin-weight Hessians need constant drift and diffusion")
    mu = np.atleast_1d(np.asarray(problem.mu_const, dtype=np.float64))
    sig = np.atleast_2d(np.asarray(problem.sigma_const, dtype=np.float64))
    return mu, sig


def _paths(problem, grid, rng, n, n_steps=None) -> PathBatch:
    return simulate_paths(grid, problem.x0, problem.drift, problem.diffusion, n, rng, n_steps=n_steps)


def _value(net_or_fn, x):
    if isinstance(net_or_fn, FeedforwardNet):
        return net_or_fn(x)[:, 0]
    return net_or_fn(x)


# -- multistep loss -----------------------------------------------------------


def second_order_tail(problem, grid, X, dW, start, u_nets, z_nets, gamma_at: Callable[[int, np.ndarray], np.ndarray]) -> np.ndarray:
    """g(X_N) - sum_{j >= start} [F(t_j, X_j, U_j, Z_j, Gamma_j) dt + Z_j . sigma dW_j] with frozen networks.

    ``gamma_at(j, x)`` returns the Hessian used at fine step j.
    """
    dt = grid.dt
    s = problem.g(X[:, -1])
    for j in range(start, grid.n_steps):
        xj = X[:, j]
        t = grid.t(j)
        z = z_nets[j](xj)
        fv = problem.F(t, xj, u_nets[j](xj)[:, 0], z, gamma_at(j, xj))[0]
        s = s - fv * dt - (z * sigma_apply(problem, t, xj, dW[:, j])).sum(axis=1)
    return s


def second_order_loss(problem, t, dt, u_net, z_net, batch):
    """Residual target - U - F(U, Z, Gamma) dt - Z . sigma dW with the Hessian frozen in ``batch``."""
    x, sdw, gamma, target = batch["x"], batch["sdw"], batch["gamma"], batch["target"]
    u, u_cache = u_net.forward(x)
    u = u[:, 0]
    z, z_cache = z_net.forward(x)
    fv, fy, fz = problem.F(t, x, u, z, gamma)
    r = target - u - fv * dt - np.einsum("bi,bi->b", z, sdw)
    n = x.shape[0]
    rbar = 2.0 * r / n
    ubar = -rbar * (1.0 + fy * dt)
    zbar = -rbar[:, None] * (fz * dt + sdw)
    return float(r @ r / n), [u_net.backward(u_cache, ubar[:, None]), z_net.backward(z_cache, zbar)]


def gamma_regression_loss(gamma_net: FeedforwardNet, d: int, batch):
    """Mean squared Frobenius distance between the symmetric network output and the target."""
    x, target = batch["x"], batch["target"]
    packed, cache = gamma_net.forward(x)
    r = unpack_symmetric(packed, d) - target
    n = x.shape[0]
    return float((r * r).sum() / n), [gamma_net.backward(cache, pack_symmetric_grad(2.0 * r / n, d))]


def _fit_step(problem, grid, cfg, rng, i, u_nets, z_nets, make_batch, n_iters, label):
    d = problem.dim
    u_net = warm(u_nets.get(i + 1), lambda: new_net(d, 1, cfg, problem.activation, rng), cfg)
    z_net = warm(z_nets.get(i + 1), lambda: new_net(d, d, cfg, problem.activation, rng), cfg)
    t, dt = grid.t(i), grid.dt
    warm_started = cfg.warm_start and (i + 1) in u_nets
    loss = minimize(
        [u_net, z_net], make_batch, lambda b: second_order_loss(problem, t, dt, u_net, z_net, b), n_iters, cfg, label, warm_started
    )
    u_nets[i], z_nets[i] = u_net, z_net
    return loss


def _budget(i, grid, cfg):
    return cfg.iters_first_step if i == grid.n_steps - 1 else cfg.iters_per_step


def _finish(scheme, t0, seed, losses, u_nets, z_nets, gammas, gamma_losses, problem, **extra) -> SchemeResult:
    return SchemeResult(
        scheme=scheme,
        estimate_y0=float(u_nets[0](problem.x0)[0]),
        seed=seed,
        runtime_s=time.perf_counter() - t0,
        step_losses=losses,
        u_nets=u_nets,
        z_nets=z_nets,
        gamma_nets={k: h.net for k, h in gammas.items() if h.net is not None},
        gamma_losses=gamma_losses,
        extra=extra,
    )


# -- 2EMDBDP ------------------------------------------------------------------


def emdbdp_batch(problem, grid, p: PathBatch, i, u_nets, z_nets) -> dict:
    """Mini-batch for step i: Hessian of the current step is D_x Z_{i+1} at X_{i+1} (D^2 g at the last step)."""
    X, dW = p.X, p.dW
    if i == grid.n_steps - 1:
        gamma = problem.d2g(X[:, -1])
    else:
        gamma = symmetrize(z_nets[i + 1].input_jacobian(X[:, i + 1]))
    tail = second_order_tail(problem, grid, X, dW, i + 1, u_nets, z_nets, lambda j, x: symmetrize(z_nets[j].input_jacobian(x)))
    t = grid.t(i)
    return {"x": X[:, i], "sdw": sigma_apply(problem, t, X[:, i], dW[:, i]), "gamma": gamma, "target": tail}


def train_2emdbdp(problem: PdeProblem, grid: TimeGrid, cfg: TrainConfig, rng: np.random.Generator, seed=None) -> SchemeResult:
    _require_fully_nonlinear(problem)
    if problem.d2g is None:
        raise ConfigurationError(f"{problem.name}: the explicit scheme needs D^2 g for the last step")
    t0 = time.perf_counter()
    u_nets: dict[int, FeedforwardNet] = {}
    z_nets: dict[int, FeedforwardNet] = {}
    losses = {}
    for i in range(grid.n_steps - 1, -1, -1):
        def data(n, i=i):
            return emdbdp_batch(problem, grid, _paths(problem, grid, rng, n), i, u_nets, z_nets)

        losses[i] = _fit_step(problem, grid, cfg, rng, i, u_nets, z_nets, data, _budget(i, grid, cfg), f"2emdbdp[{i}]")
    return _finish("2emdbdp", t0, seed, losses, u_nets, z_nets, {}, {}, problem)


# -- Hessian estimators ----------------------------------------------------------


def gamma_v2_target(problem: PdeProblem, grid: TimeGrid, p: PathBatch, ell: int, z_next) -> np.ndarray:
    """Antithetic one-step target (Z(X_+) - Z(X^_+)) / 2 outer H^1, symmetrized.

    ``z_next`` is the Z network at fine index ``(ell + 1) * kappa_hat`` or Dg.
    """
    mu, sig = _require_constant_coefficients(problem)
    k, dt_hat = grid.kappa_hat, grid.coarse_dt
    x_anchor = p.X[:, k * ell]
    dw_hat = p.coarse_increment(ell, ell + 1)
    x_plus = p.X[:, k * (ell + 1)]
    x_anti = antithetic_states(x_anchor, mu, sig, dw_hat, dt_hat)
    v = 0.5 * (z_next(x_plus) - z_next(x_anti))
    return sym_outer(v, malliavin_h1(sig, dw_hat, dt_hat))


def _terminal_hessian_term(problem, mu, sig, x_anchor, x_end, dw, span, dt_hat, antithetic):
    """Terminal part of the multistep target, using the smoothest terminal data available."""
    span_dt = span * dt_hat
    x_anti = antithetic_states(x_anchor, mu, sig, dw, span_dt)
    if problem.d2g is not None:
        if not antithetic:
            return problem.d2g(x_end)
        return 0.5 * (problem.d2g(x_end) + problem.d2g(x_anti))
    if problem.dg is not None:
        h1 = malliavin_h1(sig, dw, span_dt)
        if not antithetic:
            return sym_outer(problem.dg(x_end), h1)
        return sym_outer(0.5 * (problem.dg(x_end) - problem.dg(x_anti)), h1)
    h2 = malliavin_h2(sig, dw, span, dt_hat)
    weight = problem.g(x_end) if not antithetic else 0.5 * (problem.g(x_end) + problem.g(x_anti))
    return weight[:, None, None] * h2


def gamma_v3_target(
    problem: PdeProblem,
    grid: TimeGrid,
    p: PathBatch,
    ell: int,
    u_nets: dict,
    z_nets: dict,
    gammas: dict,
    antithetic: bool = True,
) -> np.ndarray:
    """Multistep Malliavin target for the Hessian at coarse point ``ell``.

    With ``antithetic`` the F terms are averaged over the pair (X_m, X^_m)
    and the zero-mean control variate F at the anchor is subtracted; the
    anchor Hessian, not yet trained, is replaced by the next coarse one.
    Without it, the plain estimator D^2 g(X_N) - dt_hat sum F(X_m) H^2 is
    returned (used for variance comparisons).
    """
    mu, sig = _require_constant_coefficients(problem)
    k, n_hat, dt_hat = grid.kappa_hat, grid.n_coarse, grid.coarse_dt
    anchor_i = k * ell
    x_anchor = p.X[:, anchor_i]
    dw_end = p.coarse_increment(ell, n_hat)
    target = _terminal_hessian_term(problem, mu, sig, x_anchor, p.X[:, -1], dw_end, n_hat - ell, dt_hat, antithetic)
    if ell + 1 > n_hat - 1:
        return target

    def F_at(m, x):
        i = k * m
        return problem.F(grid.t(i), x, u_nets[i](x)[:, 0], z_nets[i](x), gammas[m](x))[0]

    if antithetic:
        i0 = anchor_i
        f_anchor = problem.F(grid.t(i0), x_anchor, u_nets[i0](x_anchor)[:, 0], z_nets[i0](x_anchor), gammas[ell + 1](x_anchor))[0]
    for m in range(ell + 1, n_hat):
        dw = p.coarse_increment(ell, m)
        h2 = malliavin_h2(sig, dw, m - ell, dt_hat)
        x_m = p.X[:, k * m]
        if antithetic:
            x_anti = antithetic_states(x_anchor, mu, sig, dw, (m - ell) * dt_hat)
            weight = 0.5 * dt_hat * (F_at(m, x_m) + F_at(m, x_anti) - 2.0 * f_anchor)
        else:
            weight = dt_hat * F_at(m, x_m)
        target = target - weight[:, None, None] * h2
    return target


def _fit_gamma(problem, grid, cfg, rng, ell, init: FeedforwardNet | None, make_target, n_steps, n_iters, label) -> HessianEstimate:
    d = problem.dim
    net = warm(init, lambda: new_net(d, sym_size(d), cfg, problem.activation, rng), cfg)
    anchor = grid.kappa_hat * ell

    def data(n):
        p = _paths(problem, grid, rng, n, n_steps=n_steps)
        return {"x": p.X[:, anchor], "target": make_target(p)}

    warm_started = cfg.warm_start and init is not None
    loss = minimize([net], data, lambda b: gamma_regression_loss(net, d, b), n_iters, cfg, label, warm_started)
    return HessianEstimate(ell, d, net=net, loss=loss)


def train_gamma_v2(
    problem: PdeProblem,
    grid: TimeGrid,
    ell: int,
    z_next,
    cfg: TrainConfig,
    rng: np.random.Generator,
    init: FeedforwardNet | None = None,
    n_iters: int | None = None,
) -> HessianEstimate:
    """Fit the Hessian network at coarse point ``ell`` to the antithetic one-step target."""
    _require_constant_coefficients(problem)
    if ell == grid.n_coarse:
        return _terminal_estimate(problem, grid)
    if not 0 <= ell < grid.n_coarse:
        raise ConfigurationError(f"coarse index {ell} outside 0..{grid.n_coarse}")
    z_fn = z_next if not isinstance(z_next, FeedforwardNet) else z_next.__call__
    return _fit_gamma(
        problem,
        grid,
        cfg,
        rng,
        ell,
        init,
        lambda p: gamma_v2_target(problem, grid, p, ell, z_fn),
        grid.kappa_hat * (ell + 1),
        n_iters or cfg.iters_per_step,
        f"gammaV2[{ell}]",
    )


def train_gamma_v3(
    problem: PdeProblem,
    grid: TimeGrid,
    ell: int,
    u_nets: dict,
    z_nets: dict,
    gammas: dict,
    cfg: TrainConfig,
    rng: np.random.Generator,
    init: FeedforwardNet | None = None,
    n_iters: int | None = None,
) -> HessianEstimate:
    """Fit the Hessian network at coarse point ``ell`` to the antithetic multistep target."""
    _require_constant_coefficients(problem)
    if ell == grid.n_coarse:
        return _terminal_estimate(problem, grid)
    if not 0 <= ell < grid.n_coarse:
        raise ConfigurationError(f"coarse index {ell} outside 0..{grid.n_coarse}")
    k = grid.kappa_hat
    needed = [k * m for m in range(ell, grid.n_coarse)] if ell + 1 < grid.n_coarse else []
    missing = [i for i in needed if i not in u_nets or i not in z_nets]
    missing += [m for m in range(ell + 1, grid.n_coarse) if m not in gammas]
    if missing:
        raise ConfigurationError(f"Hessian at coarse point {ell} needs later networks; missing {missing}")
    return _fit_gamma(
        problem,
        grid,
        cfg,
        rng,
        ell,
        init,
        lambda p: gamma_v3_target(problem, grid, p, ell, u_nets, z_nets, gammas),
        grid.n_steps,
        n_iters or cfg.iters_per_step,
        f"gammaV3[{ell}]",
    )


def _terminal_estimate(problem, grid) -> HessianEstimate:
    if problem.d2g is None:
        raise ConfigurationError(f"{problem.name}: the terminal Hessian needs D^2 g")
    return HessianEstimate(grid.n_coarse, problem.dim, terminal=problem.d2g)


# -- 2MDBDP and 2M2DBDP ------------------------------------------------------------


def _coarse_multistep(problem, grid, cfg, rng, seed, scheme, fit_gamma) -> SchemeResult:
    _require_fully_nonlinear(problem)
    _require_constant_coefficients(problem)
    t0 = time.perf_counter()
    k, n_hat = grid.kappa_hat, grid.n_coarse
    u_nets: dict[int, FeedforwardNet] = {}
    z_nets: dict[int, FeedforwardNet] = {}
    gammas: dict[int, HessianEstimate] = {}
    losses, gamma_losses = {}, {}

    def gamma_at(j, x):
        # fine step j lies in the block of coarse point j // k + 1
        return gammas[j // k + 1](x)

    for ell in range(n_hat, -1, -1):
        if ell == n_hat:
            gammas[ell] = _terminal_estimate(problem, grid)
        else:
            prev = gammas[ell + 1].net
            budget = cfg.iters_first_step if prev is None else cfg.iters_per_step
            gammas[ell] = fit_gamma(ell, u_nets, z_nets, gammas, prev, budget)
            gamma_losses[ell] = gammas[ell].loss
        if ell == 0:
            break
        for kk in range(k - 1, -1, -1):
            i = (ell - 1) * k + kk

            def data(n, i=i, ell=ell):
                p = _paths(problem, grid, rng, n)
                x = p.X[:, i]
                return {
                    "x": x,
                    "sdw": sigma_apply(problem, grid.t(i), x, p.dW[:, i]),
                    "gamma": gammas[ell](x),
                    "target": second_order_tail(problem, grid, p.X, p.dW, i + 1, u_nets, z_nets, gamma_at),
                }

            losses[i] = _fit_step(problem, grid, cfg, rng, i, u_nets, z_nets, data, _budget(i, grid, cfg), f"{scheme}[{i}]")
    return _finish(scheme, t0, seed, losses, u_nets, z_nets, gammas, gamma_losses, problem, kappa_hat=k)


def train_2mdbdp(problem: PdeProblem, grid: TimeGrid, cfg: TrainConfig, rng: np.random.Generator, seed=None) -> SchemeResult:
    k = grid.kappa_hat

    def fit(ell, u_nets, z_nets, gammas, init, n_iters):
        nxt = k * (ell + 1)
        z_next = problem.dg if nxt == grid.n_steps else z_nets[nxt]
        if z_next is None:
            raise ConfigurationError(f"{problem.name}: the last Hessian regression needs Dg")
        return train_gamma_v2(problem, grid, ell, z_next, cfg, rng, init=init, n_iters=n_iters)

    return _coarse_multistep(problem, grid, cfg, rng, seed, "2mdbdp", fit)


def train_2m2dbdp(problem: PdeProblem, grid: TimeGrid, cfg: TrainConfig, rng: np.random.Generator, seed=None) -> SchemeResult:
    if problem.d2g is None:
        raise ConfigurationError(f"{problem.name}: the Malliavin multistep scheme needs D^2 g")

    def fit(ell, u_nets, z_nets, gammas, init, n_iters):
        return train_gamma_v3(problem, grid, ell, u_nets, z_nets, gammas, cfg, rng, init=init, n_iters=n_iters)

    return _coarse_multistep(problem, grid, cfg, rng, seed, "2m2dbdp", fit)


FULLY_NONLINEAR_SCHEMES: dict[str, Callable[..., SchemeResult]] = {
    "2emdbdp": train_2emdbdp,
    "2mdbdp": train_2mdbdp,
    "2m2dbdp": train_2m2dbdp,
}
