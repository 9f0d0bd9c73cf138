"""Shared SGD loop, training configuration and scheme results."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .nn import AdamState, DivergenceError, FeedforwardNet, adam_step, decay_schedule

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 1000
    iters_per_step: int = 400
    iters_first_step: int = 4000
    # Deep BSDE trains every network at once; None means first + (N-1) * per_step
    global_iters: int | None = None
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    lr_pieces: int = 6
    # multiplies the schedule for steps warm-started from a trained network
    warm_lr_scale: float = 1.0
    # cap on the Euclidean norm of each network's gradient; None disables clipping
    grad_clip: float | None = None
    activation: str | None = None
    hidden_widths: tuple[int, ...] | None = None
    # paths simulated per refill = chunk_iters * batch_size
    chunk_iters: int = 50
    warm_start: bool = True
    # number of trailing iterations averaged into the reported step loss
    loss_window: int = 20
    eval_batch: int = 10000

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iters_per_step < 1 or self.iters_first_step < 1:
            raise ValueError("iteration budgets must be positive")
        if self.warm_lr_scale <= 0:
            raise ValueError("warm_lr_scale must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")


@dataclass
class SchemeResult:
    scheme: str
    estimate_y0: float
    seed: int | None
    runtime_s: float
    step_losses: dict[int, float]
    u_nets: dict[int, FeedforwardNet] = field(default_factory=dict)
    z_nets: dict[int, FeedforwardNet] = field(default_factory=dict)
    gamma_nets: dict[int, FeedforwardNet] = field(default_factory=dict)
    gamma_losses: dict[int, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.estimate_y0):
            raise DivergenceError(f"{self.scheme}: non-finite estimate")

    def to_dict(self, with_networks: bool = False) -> dict:
        out = {
            "scheme": self.scheme,
            "estimate_y0": self.estimate_y0,
            "seed": self.seed,
            "runtime_s": self.runtime_s,
            "step_losses": {str(k): v for k, v in sorted(self.step_losses.items())},
            "gamma_losses": {str(k): v for k, v in sorted(self.gamma_losses.items())},
            "extra": self.extra,
        }
        if with_networks:
            for key in ("u_nets", "z_nets", "gamma_nets"):
                out[key] = {str(k): n.to_dict() for k, n in sorted(getattr(self, key).items())}
        return out

    def save(self, path: str | Path, with_networks: bool = False) -> None:
        Path(path).write_text(json.dumps(self.to_dict(with_networks), indent=1))


def new_net(input_dim: int, output_dim: int, cfg: TrainConfig, default_activation: str, rng: np.random.Generator) -> FeedforwardNet:
    return FeedforwardNet.glorot(
        input_dim, output_dim, rng, hidden_widths=cfg.hidden_widths, activation=cfg.activation or default_activation
    )


def warm(prev: FeedforwardNet | None, make: Callable[[], FeedforwardNet], cfg: TrainConfig) -> FeedforwardNet:
    if prev is not None and cfg.warm_start:
        return prev.copy()
    return make()


LossFn = Callable[[dict], tuple[float, list[np.ndarray]]]


def minimize(
    nets: Sequence[FeedforwardNet | np.ndarray],
    make_data: Callable[[int], dict],
    loss_and_grads: LossFn,
    n_iters: int,
    cfg: TrainConfig,
    label: str = "",
    warm_started: bool = False,
) -> float:
    """Adam on ``nets`` using mini-batches sliced from freshly simulated chunks.

    ``nets`` may hold bare parameter arrays (updated in place). ``make_data(n)``
    returns a dict of arrays with leading axis ``n``; ``loss_and_grads`` maps a
    mini-batch to ``(loss, [grad per net])``. Returns the mean loss over the
    last ``cfg.loss_window`` iterations. ``warm_started`` scales the learning
    rate by ``cfg.warm_lr_scale``.
    """
    scale = cfg.warm_lr_scale if warm_started else 1.0
    schedule = decay_schedule(n_iters, scale * cfg.lr_start, scale * cfg.lr_end, cfg.lr_pieces)
    params = [n.params if isinstance(n, FeedforwardNet) else n for n in nets]
    states = [AdamState.zeros(p.size, schedule) for p in params]
    B = cfg.batch_size
    chunk = None
    recent: list[float] = []
    for it in range(n_iters):
        pos = it % cfg.chunk_iters
        if pos == 0:
            chunk = make_data(min(cfg.chunk_iters, n_iters - it) * B)
        batch = {k: v[pos * B : (pos + 1) * B] for k, v in chunk.items()}
        loss, grads = loss_and_grads(batch)
        if not np.isfinite(loss):
            raise DivergenceError(f"{label}: non-finite loss", it)
        for p, gr, st in zip(params, grads, states):
            if cfg.grad_clip is not None:
                norm = float(np.linalg.norm(gr))
                if np.isfinite(norm) and norm > cfg.grad_clip:
                    gr = gr * (cfg.grad_clip / norm)
            try:
                p[...] = adam_step(p, gr, st)[0]
            except DivergenceError as exc:
                raise DivergenceError(f"{label}: non-finite gradient", it) from exc
        recent.append(loss)
        if len(recent) > cfg.loss_window:
            recent.pop(0)
    final = float(np.mean(recent))
    log.debug("%s: final loss %.3e after %d iterations", label, final, n_iters)
    return final
