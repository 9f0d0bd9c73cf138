"""PDE and control problem definitions with closed-form references where known.

PDEs are written in the form

    d_t u + mu . D u + 1/2 Tr(sigma sigma^T D^2 u) = F(t, x, u, z, gamma),   u(T) = g,

where ``mu``/``sigma`` are the coefficients of the process used to simulate
training paths. Semilinear drivers take ``z = sigma^T D u``; fully nonlinear
drivers take ``z = D u`` and ``gamma = D^2 u``. Every driver returns
``(value, d value / d y, d value / d z)`` so that losses can be backpropagated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .sim import ConfigurationError

Array = np.ndarray
DriverOut = tuple[Array, Array, Array]

# Table values (u(0, x0)) used as acceptance constants.
CVA_REFERENCE_DBDP = {1: 0.05950, 3: 0.17797, 5: 0.25956, 10: 0.40930, 15: 0.52353, 30: 0.78239}
CVA_REFERENCE_DBSDE = {1: 0.05949, 3: 0.17807, 5: 0.25984, 10: 0.40886, 15: 0.52389, 30: 0.78231}
MERTON_REFERENCE = -0.50662
SCOTT_REFERENCE = -0.53609477
NO_LEVERAGE_REFERENCE = {1: -0.501566, 4: -0.44176462, 9: -0.27509173}

GAMMA_FLOOR = 1e-6


@dataclass
class PdeProblem:
    name: str
    dim: int
    x0: Array
    maturity: float
    drift: Callable[[float, Array], Array]
    diffusion: Callable[[float, Array], Array]
    g: Callable[[Array], Array]
    f: Callable[..., DriverOut] | None = None
    F: Callable[..., DriverOut] | None = None
    dg: Callable[[Array], Array] | None = None
    d2g: Callable[[Array], Array] | None = None
    # constant training coefficients, required by the second-order schemes
    mu_const: Array | None = None
    sigma_const: Array | None = None
    reference_value: float | None = None
    reference_solution: Callable[[float, Array], Array] | None = None
    # (t, x) -> (u, d_t u, D u, D^2 u), used to check problem wiring
    reference_derivatives: Callable[[float, Array], tuple[Array, Array, Array, Array]] | None = None
    activation: str = "tanh"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.f is None) == (self.F is None):
            raise ConfigurationError("exactly one of the semilinear driver f or the nonlinear driver F is required")
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=np.float64))
        if self.x0.size != self.dim:
            raise ConfigurationError("x0 does not match dimension")
        if self.reference_value is not None and not np.isfinite(self.reference_value):
            raise ConfigurationError("reference value must be finite")

    @property
    def semilinear(self) -> bool:
        return self.f is not None

    def pde_residual(self, t: float, x: Array) -> Array:
        """Residual of the PDE on the reference solution (needs ``reference_derivatives``)."""
        u, ut, du, d2u = self.reference_derivatives(t, x)
        mu = self.drift(t, x)
        sig = np.asarray(self.diffusion(t, x))
        if sig.ndim == 2:
            sig = np.broadcast_to(sig, (x.shape[0],) + sig.shape)
        a = np.einsum("bij,bkj->bik", sig, sig)
        lhs = ut + np.einsum("bi,bi->b", mu, du) + 0.5 * np.einsum("bij,bij->b", a, d2u)
        if self.semilinear:
            z = np.einsum("bji,bj->bi", sig, du)
            rhs = self.f(t, x, u, z)[0]
        else:
            rhs = self.F(t, x, u, du, d2u)[0]
        return lhs - rhs


# -- CVA ------------------------------------------------------------------


def make_cva_problem(d: int = 1, sigma_bs: float = 0.2, beta: float = 0.03, T: float = 1.0) -> PdeProblem:
    """Nonlinear CVA pricing in a d-dimensional Black-Scholes model with a straddle payoff."""
    if d < 1:
        raise ConfigurationError("dimension must be >= 1")

    def drift(t, x):
        return np.zeros_like(x)

    def diffusion(t, x):
        out = np.zeros(x.shape + (x.shape[1],))
        idx = np.arange(x.shape[1])
        out[:, idx, idx] = sigma_bs * x
        return out

    def f(t, x, y, z):
        neg = y < 0.0
        return -beta * np.where(neg, -y, 0.0), beta * neg.astype(np.float64), np.zeros_like(z)

    def g(x):
        return np.abs(x.sum(axis=1) - d) - 0.1

    def dg(x):
        s = np.sign(x.sum(axis=1) - d)
        return np.repeat(s[:, None], x.shape[1], axis=1)

    def d2g(x):
        return np.zeros((x.shape[0], d, d))

    return PdeProblem(
        name="cva",
        dim=d,
        x0=np.ones(d),
        maturity=T,
        drift=drift,
        diffusion=diffusion,
        g=g,
        f=f,
        dg=dg,
        d2g=d2g,
        reference_value=CVA_REFERENCE_DBDP.get(d) if (sigma_bs, beta, T) == (0.2, 0.03, 1.0) else None,
        activation="relu",
        params=dict(d=d, sigma_bs=sigma_bs, beta=beta, T=T),
    )


# -- test PDEs with known solutions ----------------------------------------


def make_linear_problem(a, b: float = 0.0, sigma=None, T: float = 1.0, x0=None) -> PdeProblem:
    """f = 0, g(x) = a.x + b, driftless constant-sigma dynamics; u(t, x) = a.x + b."""
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    d = a.size
    sig = np.eye(d) if sigma is None else np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    x0 = np.ones(d) if x0 is None else x0

    def derivs(t, x):
        n = x.shape[0]
        return x @ a + b, np.zeros(n), np.tile(a, (n, 1)), np.zeros((n, d, d))

    return PdeProblem(
        name="linear",
        dim=d,
        x0=x0,
        maturity=T,
        drift=lambda t, x: np.zeros_like(x),
        diffusion=lambda t, x: sig,
        g=lambda x: x @ a + b,
        f=zero_driver,
        dg=lambda x: np.tile(a, (x.shape[0], 1)),
        d2g=lambda x: np.zeros((x.shape[0], d, d)),
        mu_const=np.zeros(d),
        sigma_const=sig,
        reference_value=float(np.asarray(x0) @ a + b),
        reference_solution=lambda t, x: x @ a + b,
        reference_derivatives=derivs,
        params=dict(a=a.tolist(), b=b),
    )


def make_heat_problem(d: int = 1, T: float = 1.0, x0=None) -> PdeProblem:
    """f = 0, g(x) = |x|^2, Brownian dynamics; u(t, x) = |x|^2 + d (T - t)."""
    x0 = np.full(d, 0.5) if x0 is None else np.asarray(x0, dtype=np.float64)

    def derivs(t, x):
        n = x.shape[0]
        u = (x * x).sum(axis=1) + d * (T - t)
        return u, np.full(n, -float(d)), 2.0 * x, np.broadcast_to(2.0 * np.eye(d), (n, d, d)).copy()

    return PdeProblem(
        name="heat",
        dim=d,
        x0=x0,
        maturity=T,
        drift=lambda t, x: np.zeros_like(x),
        diffusion=lambda t, x: np.eye(d),
        g=lambda x: (x * x).sum(axis=1),
        f=zero_driver,
        dg=lambda x: 2.0 * x,
        d2g=lambda x: np.broadcast_to(2.0 * np.eye(d), (x.shape[0], d, d)).copy(),
        mu_const=np.zeros(d),
        sigma_const=np.eye(d),
        reference_value=float(x0 @ x0 + d * T),
        reference_solution=lambda t, x: (x * x).sum(axis=1) + d * (T - t),
        reference_derivatives=derivs,
    )


def zero_driver(t, x, y, z, gamma=None) -> DriverOut:
    return np.zeros_like(y), np.zeros_like(y), np.zeros_like(z)


def as_fully_nonlinear(problem: PdeProblem) -> PdeProblem:
    """Wrap a semilinear problem with identity diffusion as a gamma-independent nonlinear one."""
    if not problem.semilinear:
        raise ConfigurationError("problem is already fully nonlinear")
    f = problem.f

    def F(t, x, y, z, gamma):
        return f(t, x, y, z)

    return PdeProblem(
        name=problem.name + "_fnl",
        dim=problem.dim,
        x0=problem.x0,
        maturity=problem.maturity,
        drift=problem.drift,
        diffusion=problem.diffusion,
        g=problem.g,
        F=F,
        dg=problem.dg,
        d2g=problem.d2g,
        mu_const=problem.mu_const,
        sigma_const=problem.sigma_const,
        reference_value=problem.reference_value,
        reference_solution=problem.reference_solution,
        activation=problem.activation,
        params=dict(problem.params),
    )


# -- portfolio allocation HJB ----------------------------------------------


def clamp_away_from_zero(x: Array, floor: float = GAMMA_FLOOR) -> Array:
    """Push |x| up to ``floor`` keeping the sign (zero maps to -floor: concave side)."""
    return np.where(x > 0.0, 1.0, -1.0) * np.maximum(np.abs(x), floor)


@dataclass(frozen=True)
class PortfolioHJB:
    """Exponential-utility HJB for wealth x and OU volatility factors v_1..v_n.

    ``factor_premium`` selects lambda_i(v) = lambda_i v_i (stochastic factors);
    with ``n_factors == 0`` the premium is the constant vector ``lam`` (Merton).
    The driver is shifted by the mismatch between the PDE's own linear part and
    the training process (drift ``train_drift``, diffusion diag(1, nu)).
    """

    eta: float
    lam: tuple
    theta: tuple = ()
    nu: tuple = ()
    kappa: tuple = ()
    rho: tuple = ()
    train_drift_x: float = 0.0

    @property
    def n_factors(self) -> int:
        return len(self.theta)

    @property
    def dim(self) -> int:
        return 1 + self.n_factors

    def premium(self, v: Array) -> Array:
        """lambda_i(v_i), shape (B, n)."""
        return np.asarray(self.lam) * v

    def sharpe(self, v: Array | None) -> Array:
        if self.n_factors == 0:
            return np.asarray(float(np.dot(self.lam, self.lam)))
        return (self.premium(v) ** 2).sum(axis=1)

    def train_mu(self) -> Array:
        return np.array([self.train_drift_x] + [0.0] * self.n_factors)

    def train_sigma(self) -> Array:
        return np.diag([1.0, *self.nu])

    def pde_mu(self, x: Array) -> Array:
        mu = np.zeros_like(x)
        if self.n_factors:
            mu[:, 1:] = np.asarray(self.kappa) * (np.asarray(self.theta) - x[:, 1:])
        return mu

    def pde_cov(self) -> Array:
        return np.diag([0.0, *(np.asarray(self.nu) ** 2)])

    def hamiltonian(self, x: Array, z: Array, gamma: Array) -> DriverOut:
        """Right-hand side of the HJB and its derivative w.r.t. z."""
        zx = z[:, 0]
        gxx = clamp_away_from_zero(gamma[:, 0, 0])
        v = x[:, 1:]
        R = self.sharpe(v if self.n_factors else None)
        h = 0.5 * R * zx * zx / gxx
        dz = np.zeros_like(z)
        dz[:, 0] = R * zx / gxx
        if self.n_factors:
            rho = np.asarray(self.rho)
            nu = np.asarray(self.nu)
            gxv = gamma[:, 0, 1:]
            lam_v = self.premium(v)
            h = h + ((rho * lam_v * nu) * gxv).sum(axis=1) * zx / gxx
            h = h + 0.5 * ((rho * nu) ** 2 * gxv * gxv).sum(axis=1) / gxx
            dz[:, 0] += ((rho * lam_v * nu) * gxv).sum(axis=1) / gxx
        return h, dz

    def driver(self, t, x, y, z, gamma) -> DriverOut:
        h, dz = self.hamiltonian(x, z, gamma)
        dmu = self.train_mu()[None, :] - self.pde_mu(x)
        dcov = self.train_sigma() @ self.train_sigma().T - self.pde_cov()
        val = h + (dmu * z).sum(axis=1) + 0.5 * np.einsum("ij,bij->b", dcov, gamma)
        return val, np.zeros_like(y), dz + dmu

    # closed form: u = -exp(-eta x) prod_i exp((A_i + B_i v_i + C_i v_i^2) / (1 - rho_i^2))
    def _riccati(self, tau: float) -> list[tuple[float, float, float]]:
        out = []
        for lam, th, nu, ka, rho in zip(self.lam, self.theta, self.nu, self.kappa, self.rho):
            a, b, c = ka * th, ka + rho * nu * lam, 0.5 * (1.0 - rho * rho) * lam * lam

            def rhs(_, y, a=a, b=b, c=c, nu=nu):
                A, B, C = y
                return [
                    a * B + nu * nu * C + 0.5 * nu * nu * B * B,
                    2 * a * C - b * B + 2 * nu * nu * B * C,
                    -2 * b * C + 2 * nu * nu * C * C - c,
                ]

            if tau == 0.0:
                out.append((0.0, 0.0, 0.0))
                continue
            sol = solve_ivp(rhs, (0.0, tau), [0.0, 0.0, 0.0], rtol=1e-11, atol=1e-13)
            out.append(tuple(sol.y[:, -1]))
        return out

    def closed_form_derivatives(self, t: float, x: Array, T: float) -> tuple[Array, Array, Array, Array]:
        """u, d_t u, D u, D^2 u of the exact value function."""
        x = np.atleast_2d(x)
        n = x.shape[0]
        tau = T - t
        wealth = x[:, 0]
        if self.n_factors == 0:
            R = float(np.dot(self.lam, self.lam))
            log_phi = -0.5 * R * tau * np.ones(n)
            dlog_dtau = -0.5 * R * np.ones(n)
            dlog_dv = np.zeros((n, 0))
            d2log_dv = np.zeros((n, 0))
        else:
            coeffs = self._riccati(tau)
            v = x[:, 1:]
            log_phi = np.zeros(n)
            dlog_dtau = np.zeros(n)
            dlog_dv = np.zeros_like(v)
            d2log_dv = np.zeros_like(v)
            for k, (A, B, C) in enumerate(coeffs):
                lam, th, nu, ka, rho = self.lam[k], self.theta[k], self.nu[k], self.kappa[k], self.rho[k]
                q = 1.0 / (1.0 - rho * rho)
                a, b, c = ka * th, ka + rho * nu * lam, 0.5 * (1.0 - rho * rho) * lam * lam
                dA = a * B + nu * nu * C + 0.5 * nu * nu * B * B
                dB = 2 * a * C - b * B + 2 * nu * nu * B * C
                dC = -2 * b * C + 2 * nu * nu * C * C - c
                vk = v[:, k]
                log_phi += q * (A + B * vk + C * vk * vk)
                dlog_dtau += q * (dA + dB * vk + dC * vk * vk)
                dlog_dv[:, k] = q * (B + 2 * C * vk)
                d2log_dv[:, k] = q * 2 * C
        u = -np.exp(-self.eta * wealth + log_phi)
        ut = -u * dlog_dtau
        d = self.dim
        du = np.empty((n, d))
        du[:, 0] = -self.eta * u
        du[:, 1:] = u[:, None] * dlog_dv
        d2u = np.empty((n, d, d))
        d2u[:, 0, 0] = self.eta**2 * u
        d2u[:, 0, 1:] = -self.eta * du[:, 1:]
        d2u[:, 1:, 0] = d2u[:, 0, 1:]
        if self.n_factors:
            d2u[:, 1:, 1:] = u[:, None, None] * dlog_dv[:, :, None] * dlog_dv[:, None, :]
            idx = np.arange(1, d)
            d2u[:, idx, idx] += u[:, None] * d2log_dv
        return u, ut, du, d2u


def _portfolio_problem(name: str, hjb: PortfolioHJB, x0: Array, T: float, reference: float | None, params: dict) -> PdeProblem:
    d = hjb.dim
    mu = hjb.train_mu()
    sig = hjb.train_sigma()
    eta = hjb.eta

    def g(x):
        return -np.exp(-eta * x[:, 0])

    def dg(x):
        out = np.zeros_like(x)
        out[:, 0] = eta * np.exp(-eta * x[:, 0])
        return out

    def d2g(x):
        out = np.zeros((x.shape[0], d, d))
        out[:, 0, 0] = -eta * eta * np.exp(-eta * x[:, 0])
        return out

    def derivs(t, x):
        return hjb.closed_form_derivatives(t, x, T)

    return PdeProblem(
        name=name,
        dim=d,
        x0=x0,
        maturity=T,
        drift=lambda t, x: np.broadcast_to(mu, x.shape),
        diffusion=lambda t, x: sig,
        g=g,
        F=hjb.driver,
        dg=dg,
        d2g=d2g,
        mu_const=mu,
        sigma_const=sig,
        reference_value=reference,
        reference_solution=lambda t, x: derivs(t, x)[0],
        reference_derivatives=derivs,
        activation="tanh",
        params=dict(params, hjb=hjb),
    )


def make_merton_problem(eta: float = 0.5, lam=(0.6,), T: float = 1.0, x0: float = 1.0) -> PdeProblem:
    """Merton problem: constant premium, wealth-only state, training drift |lambda|."""
    lam = tuple(float(v) for v in np.atleast_1d(lam))
    norm = float(np.sqrt(np.dot(lam, lam)))
    hjb = PortfolioHJB(eta=eta, lam=lam, train_drift_x=norm)
    ref = -np.exp(-eta * x0 - 0.5 * norm**2 * T)
    return _portfolio_problem("merton", hjb, np.array([x0]), T, float(ref), dict(eta=eta, lam=list(lam), T=T, x0=x0))


def make_scott_one_asset(
    eta: float = 0.5,
    lam: float = 1.5,
    theta: float = 0.4,
    nu: float = 0.4,
    kappa: float = 1.0,
    rho: float = -0.7,
    T: float = 1.0,
    x0: float = 1.0,
) -> PdeProblem:
    """One asset in the Scott model with leverage rho; state (wealth, factor)."""
    hjb = PortfolioHJB(eta=eta, lam=(lam,), theta=(theta,), nu=(nu,), kappa=(kappa,), rho=(rho,), train_drift_x=lam * theta)
    defaults = (eta, lam, theta, nu, kappa, rho, T, x0) == (0.5, 1.5, 0.4, 0.4, 1.0, -0.7, 1.0, 1.0)
    return _portfolio_problem(
        "scott1",
        hjb,
        np.array([x0, theta]),
        T,
        SCOTT_REFERENCE if defaults else None,
        dict(eta=eta, lam=lam, theta=theta, nu=nu, kappa=kappa, rho=rho, T=T, x0=x0),
    )


NO_LEVERAGE_DEFAULTS = {
    1: dict(lam=(1.5,), theta=(0.4,), nu=(0.2,), kappa=(1.0,)),
    4: dict(lam=(1.5, 1.1, 2.0, 0.8), theta=(0.1, 0.2, 0.3, 0.4), nu=(0.2, 0.15, 0.25, 0.31), kappa=(1.0, 0.8, 1.1, 1.3)),
    9: dict(
        lam=(1.5, 1.1, 2.0, 0.8, 0.5, 1.7, 0.9, 1.0, 0.9),
        theta=(0.1, 0.2, 0.3, 0.4, 0.25, 0.15, 0.18, 0.08, 0.91),
        nu=(0.2, 0.15, 0.25, 0.31, 0.4, 0.35, 0.22, 0.4, 0.15),
        kappa=(1.0, 0.8, 1.1, 1.3, 0.95, 0.99, 1.02, 1.06, 1.6),
    ),
}


def make_no_leverage(
    n: int = 1,
    eta: float = 0.5,
    lam: Sequence[float] | None = None,
    theta: Sequence[float] | None = None,
    nu: Sequence[float] | None = None,
    kappa: Sequence[float] | None = None,
    T: float = 1.0,
    x0: float = 1.0,
) -> PdeProblem:
    """n uncorrelated assets, Scott volatility factors, no leverage (rho = 0); d = n + 1."""
    base = NO_LEVERAGE_DEFAULTS.get(n, {})
    given = dict(lam=lam, theta=theta, nu=nu, kappa=kappa)
    vals = {}
    for key, value in given.items():
        if value is None:
            if key not in base:
                raise ConfigurationError(f"no default {key} for n={n}")
            value = base[key]
        value = tuple(float(v) for v in value)
        if len(value) != n:
            raise ConfigurationError(f"{key} must have length {n}")
        vals[key] = value
    hjb = PortfolioHJB(
        eta=eta,
        lam=vals["lam"],
        theta=vals["theta"],
        nu=vals["nu"],
        kappa=vals["kappa"],
        rho=(0.0,) * n,
        train_drift_x=float(np.dot(vals["lam"], vals["theta"])),
    )
    is_default = n in NO_LEVERAGE_DEFAULTS and all(vals[k] == base[k] for k in vals) and (eta, T, x0) == (0.5, 1.0, 1.0)
    return _portfolio_problem(
        f"noleverage{n}",
        hjb,
        np.array([x0, *vals["theta"]]),
        T,
        NO_LEVERAGE_REFERENCE[n] if is_default else None,
        dict(n=n, eta=eta, T=T, x0=x0, **{k: list(v) for k, v in vals.items()}),
    )


# -- discrete-time control ---------------------------------------------------


@dataclass
class Constraint:
    """h(x, a) = 0 (``kind='eq'``) or h(x, a) >= 0 (``kind='ineq'``) with its gradients."""

    fn: Callable[[Array, Array], Array]
    grad: Callable[[Array, Array], tuple[Array, Array]]
    kind: str = "eq"
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in ("eq", "ineq"):
            raise ValueError("kind must be 'eq' or 'ineq'")
        if self.weight < 0:
            raise ValueError("penalty weights must be nonnegative")


class Penalty:
    """L(x, a) = sum_eq mu_k |h_k|^2 + sum_ineq mu_k max(0, -h_k)."""

    def __init__(self, constraints: Sequence[Constraint]):
        self.constraints = list(constraints)

    def __call__(self, x: Array, a: Array) -> Array:
        total = 0.0
        for c in self.constraints:
            h = c.fn(x, a)
            if c.kind == "eq":
                total = total + c.weight * h * h
            else:
                total = total + c.weight * np.maximum(0.0, -h)
        return total * np.ones(x.shape[0])

    def grad(self, x: Array, a: Array) -> tuple[Array, Array]:
        gx = np.zeros_like(x)
        ga = np.zeros_like(a)
        for c in self.constraints:
            h = c.fn(x, a)
            hx, ha = c.grad(x, a)
            if c.kind == "eq":
                w = 2.0 * c.weight * h
            else:
                w = -c.weight * (h < 0.0)
            gx += w[:, None] * hx
            ga += w[:, None] * ha
        return gx, ga


def penalty(constraints: Sequence[Constraint]) -> Penalty:
    return Penalty(constraints)


@dataclass
class ControlProblem:
    """Finite-horizon Markov decision problem X_{t+1} = F(X_t, a_t, eps_{t+1}), minimizing
    E[sum_t f(X_t, a_t) + g(X_T)].

    Every cost and transition also exposes its derivatives, used to backpropagate
    the simulated cost-to-go into the policy networks.
    """

    name: str
    horizon: int
    state_dim: int
    control_dim: int
    x0: Array
    dynamics: Callable[[Array, Array, Array], Array]
    dynamics_jac: Callable[[Array, Array, Array], tuple[Array, Array]]
    running_cost: Callable[[Array, Array], Array]
    running_cost_grad: Callable[[Array, Array], tuple[Array, Array]]
    terminal_cost: Callable[[Array], Array]
    terminal_cost_grad: Callable[[Array], Array]
    noise: Callable[[np.random.Generator, int], Array]
    train_sampler: Callable[[int, np.random.Generator, int], Array] | None = None
    control_bounds: tuple[Array, Array] | None = None
    penalty: Penalty | None = None
    optimal_value: float | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=np.float64))

    def cost(self, x: Array, a: Array) -> Array:
        c = self.running_cost(x, a)
        if self.penalty is not None:
            c = c + self.penalty(x, a)
        return c

    def cost_grad(self, x: Array, a: Array) -> tuple[Array, Array]:
        gx, ga = self.running_cost_grad(x, a)
        if self.penalty is not None:
            px, pa = self.penalty.grad(x, a)
            gx, ga = gx + px, ga + pa
        return gx, ga

    def sample_states(self, t: int, rng: np.random.Generator, n: int) -> Array:
        if self.train_sampler is not None:
            return self.train_sampler(t, rng, n)
        raise ConfigurationError("problem has no training distribution")


def lq_optimal_value(T: int, c_a: float, c_g: float, noise_std: float, x0: float) -> tuple[float, list[float]]:
    """Exact optimum of the scalar LQ problem and the feedback gains a_t = -k_t x.

    With V_{t+1}(x) = p x^2 + r, the one-step minimization gives p' = c_a p / (c_a + p),
    r' = r + p noise_var and gain k = p / (c_a + p).
    """
    p, r = c_g, 0.0
    gains = []
    var = noise_std**2
    for _ in range(T):
        k = p / (c_a + p)
        r = r + p * var
        p = c_a * p / (c_a + p)
        gains.append(k)
    gains.reverse()
    return p * x0 * x0 + r, gains


def make_lq_control(
    T: int = 1,
    c_a: float = 1.0,
    c_g: float = 1.0,
    noise_std: float = 0.5,
    x0: float = 1.0,
    train_std: float = 1.0,
    constraints: Sequence[Constraint] | None = None,
) -> ControlProblem:
    """Scalar X_{t+1} = X_t + a_t + eps_{t+1}, f = c_a a^2, g = c_g x^2, eps ~ N(0, noise_std^2).

    Training states at time t are drawn from N(x0, train_std^2 + t noise_std^2).
    """

    def dynamics(x, a, eps):
        return x + a + eps

    def dynamics_jac(x, a, eps):
        n = x.shape[0]
        eye = np.ones((n, 1, 1))
        return eye, eye.copy()

    def train_sampler(t, rng, n):
        std = np.sqrt(train_std**2 + t * noise_std**2)
        return x0 + std * rng.standard_normal((n, 1))

    opt = None if constraints else lq_optimal_value(T, c_a, c_g, noise_std, x0)[0]
    return ControlProblem(
        name="lq",
        horizon=T,
        state_dim=1,
        control_dim=1,
        x0=np.array([x0]),
        dynamics=dynamics,
        dynamics_jac=dynamics_jac,
        running_cost=lambda x, a: c_a * (a * a).sum(axis=1),
        running_cost_grad=lambda x, a: (np.zeros_like(x), 2.0 * c_a * a),
        terminal_cost=lambda x: c_g * (x * x).sum(axis=1),
        terminal_cost_grad=lambda x: 2.0 * c_g * x,
        noise=lambda rng, n: noise_std * rng.standard_normal((n, 1)),
        train_sampler=train_sampler,
        penalty=Penalty(constraints) if constraints else None,
        optimal_value=opt,
        params=dict(T=T, c_a=c_a, c_g=c_g, noise_std=noise_std, x0=x0, train_std=train_std),
    )


# -- catalog -------------------------------------------------------------------

PDE_CATALOG: dict[str, Callable[..., PdeProblem]] = {
    "cva": make_cva_problem,
    "merton": make_merton_problem,
    "scott1": make_scott_one_asset,
    "noleverage1": lambda **kw: make_no_leverage(n=1, **kw),
    "noleverage4": lambda **kw: make_no_leverage(n=4, **kw),
    "noleverage9": lambda **kw: make_no_leverage(n=9, **kw),
    "heat": make_heat_problem,
}
CONTROL_CATALOG: dict[str, Callable[..., ControlProblem]] = {"lq": make_lq_control}


def problem_ids() -> list[str]:
    return [*PDE_CATALOG, *CONTROL_CATALOG]


def make_problem(problem_id: str, **overrides):
    catalog = PDE_CATALOG if problem_id in PDE_CATALOG else CONTROL_CATALOG if problem_id in CONTROL_CATALOG else None
    if catalog is not None:
        try:
            return catalog[problem_id](**overrides)
        except TypeError as exc:
            raise ConfigurationError(f"bad parameters for problem {problem_id!r}: {exc}") from exc
    raise ConfigurationError(f"unknown problem id {problem_id!r}; known: {', '.join(problem_ids())}")
