"""Time grids, Euler-Maruyama paths, antithetic states and Malliavin weights."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

DriftFn = Callable[[float, np.ndarray], np.ndarray]
DiffusionFn = Callable[[float, np.ndarray], np.ndarray]


class ConfigurationError(ValueError):
    pass


class SimulationError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (time step {step})")
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of ``n_steps`` steps on [0, maturity] with a coarse subgrid every ``kappa_hat`` points."""

    maturity: float
    n_steps: int
    kappa_hat: int = 1

    def __post_init__(self):
        if self.maturity <= 0:
            raise ConfigurationError("maturity must be positive")
        if self.n_steps < 1 or self.kappa_hat < 1:
            raise ConfigurationError("n_steps and kappa_hat must be positive integers")
        if self.n_steps % self.kappa_hat:
            raise ConfigurationError(f"kappa_hat={self.kappa_hat} does not divide N={self.n_steps}")

    @property
    def dt(self) -> float:
        return self.maturity / self.n_steps

    @property
    def n_coarse(self) -> int:
        return self.n_steps // self.kappa_hat

    @property
    def coarse_dt(self) -> float:
        return self.kappa_hat * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def t(self, i: int) -> float:
        return i * self.dt

    @property
    def coarse_indices(self) -> np.ndarray:
        """Fine-grid indices of the coarse points."""
        return np.arange(self.n_coarse + 1) * self.kappa_hat


@dataclass(frozen=True)
class PathBatch:
    """Simulated states ``X`` of shape (B, N+1, d) and increments ``dW`` of shape (B, N, d)."""

    grid: TimeGrid
    X: np.ndarray
    dW: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[2]

    def coarse_increment(self, ell: int, m: int) -> np.ndarray:
        """W at coarse index m minus W at coarse index ell."""
        k = self.grid.kappa_hat
        return self.dW[:, k * ell : k * m, :].sum(axis=1)

    def to_csv(self, path: str | Path) -> None:
        d = self.dim
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "step", *[f"x_{k + 1}" for k in range(d)], *[f"dW_{k + 1}" for k in range(d)]])
            n = self.grid.n_steps
            for b in range(self.batch_size):
                for i in range(n + 1):
                    dw = self.dW[b, i] if i < n else np.full(d, np.nan)
                    w.writerow([b, i, *map(repr, self.X[b, i].tolist()), *map(repr, dw.tolist())])


def apply_diffusion(sig: np.ndarray, dw: np.ndarray) -> np.ndarray:
    """sigma @ dw for a constant (d, d) or batched (B, d, d) diffusion."""
    if sig.ndim == 2:
        return dw @ sig.T
    return np.einsum("bij,bj->bi", sig, dw)


def simulate_paths(
    grid: TimeGrid,
    x0,
    drift: DriftFn,
    diffusion: DiffusionFn,
    batch_size: int,
    rng: np.random.Generator,
    n_steps: int | None = None,
) -> PathBatch:
    """Euler-Maruyama paths X_{i+1} = X_i + mu(t_i, X_i) dt + sigma(t_i, X_i) dW_i started at ``x0``.

    ``n_steps`` truncates the simulation (defaults to the full grid).
    """
    if batch_size < 1:
        raise ConfigurationError("batch size must be >= 1")
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
    d = x0.size
    n = grid.n_steps if n_steps is None else n_steps
    dt = grid.dt
    # time-major storage keeps every X[:, i] slice contiguous
    dW = rng.standard_normal((n, batch_size, d))
    dW *= np.sqrt(dt)
    X = np.empty((n + 1, batch_size, d))
    X[0] = x0
    for i in range(n):
        t = grid.t(i)
        x = X[i]
        mu = drift(t, x)
        sig = np.asarray(diffusion(t, x))
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sig))):
            raise SimulationError("non-finite drift or diffusion", i)
        np.add(x, mu * dt, out=X[i + 1])
        X[i + 1] += apply_diffusion(sig, dW[i])
    return PathBatch(grid, X.transpose(1, 0, 2), dW.transpose(1, 0, 2))


def antithetic_states(x_anchor, mu_const, sigma_const, dw_hat, span_dt: float) -> np.ndarray:
    """Reflected state X + mu*span_dt - sigma dW, mirror of X + mu*span_dt + sigma dW."""
    x_anchor = np.asarray(x_anchor, dtype=np.float64)
    sig = np.atleast_2d(np.asarray(sigma_const, dtype=np.float64))
    return x_anchor + np.asarray(mu_const, dtype=np.float64) * span_dt - np.asarray(dw_hat) @ sig.T


def _inverse(sigma) -> np.ndarray:
    sig = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    if sig.shape[0] != sig.shape[1]:
        raise ConfigurationError("diffusion matrix must be square")
    if np.linalg.cond(sig) > 1e12:
        raise ConfigurationError("diffusion matrix is singular")
    return np.linalg.inv(sig)


def malliavin_h1(sigma, dw_hat, dt_hat: float) -> np.ndarray:
    """First-order weight (sigma^T)^{-1} dW / dt; ``dw_hat`` may be batched (..., d)."""
    sig_inv = _inverse(sigma)
    # (sigma^T)^{-1} v == v @ sigma^{-1}
    return (np.asarray(dw_hat, dtype=np.float64) @ sig_inv) / dt_hat


def malliavin_h2(sigma, dw_span, span: int, dt_hat: float) -> np.ndarray:
    """Second-order weight (sigma^T)^{-1} [dW dW^T - span*dt I] sigma^{-1} / (span dt)^2, shape (..., d, d)."""
    if span < 1:
        raise ConfigurationError("span must be >= 1")
    sig_inv = _inverse(sigma)
    dw = np.asarray(dw_span, dtype=np.float64)
    if dw.ndim == 0:
        dw = dw[None]
    d = sig_inv.shape[0]
    h = dw[..., :, None] * dw[..., None, :] - span * dt_hat * np.eye(d)
    h = sig_inv.T @ h @ sig_inv
    return h / (span * dt_hat) ** 2
