"""Experiment configs, multi-seed runs, aggregation and output files."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .control import CONTROL_SCHEMES
from .fully_nonlinear import FULLY_NONLINEAR_SCHEMES
from .nn import DivergenceError
from .problems import CONTROL_CATALOG, CVA_REFERENCE_DBDP, CVA_REFERENCE_DBSDE, PDE_CATALOG, make_problem, problem_ids
from .semilinear import SEMILINEAR_SCHEMES
from .sim import ConfigurationError, SimulationError, TimeGrid
from .training import TrainConfig

log = logging.getLogger(__name__)

RECORD_COLUMNS = ["config_hash", "problem", "scheme", "dim", "N", "kappa_hat", "seed", "estimate", "runtime_s", "status"]
SUMMARY_COLUMNS = ["problem", "scheme", "mean", "sd", "rel_err_pct", "n_runs"]
DIMENSIONED_PROBLEMS = ("cva", "heat")

PDE_SCHEMES = {**SEMILINEAR_SCHEMES, **FULLY_NONLINEAR_SCHEMES}


class EmptySummaryError(ValueError):
    pass


def scheme_ids() -> list[str]:
    return [*SEMILINEAR_SCHEMES, *FULLY_NONLINEAR_SCHEMES, *CONTROL_SCHEMES]


@dataclass
class GridConfig:
    N: int = 20
    kappa_hat: int = 4


@dataclass
class ExperimentConfig:
    problem: str
    scheme: str
    problem_params: dict = field(default_factory=dict)
    grid: GridConfig = field(default_factory=GridConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: str | None = None

    def __post_init__(self):
        if self.problem not in problem_ids():
            raise ConfigurationError(f"unknown problem id {self.problem!r}; known: {', '.join(problem_ids())}")
        if self.scheme not in scheme_ids():
            raise ConfigurationError(f"unknown scheme id {self.scheme!r}; known: {', '.join(scheme_ids())}")
        is_control = self.problem in CONTROL_CATALOG
        if is_control != (self.scheme in CONTROL_SCHEMES):
            raise ConfigurationError(f"scheme {self.scheme!r} cannot solve problem {self.problem!r}")
        if not self.seeds:
            raise ConfigurationError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError("seeds must be distinct")
        if self.training.batch_size < 1:
            raise ConfigurationError("batch size must be >= 1")
        if not is_control:
            TimeGrid(1.0, self.grid.N, self.grid.kappa_hat)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        _reject_unknown(data, {f.name for f in dataclasses.fields(cls)}, "config")
        for key in ("problem", "scheme"):
            if key not in data:
                raise ConfigurationError(f"config is missing {key!r}")
        grid = data.pop("grid", {}) or {}
        _reject_unknown(grid, {f.name for f in dataclasses.fields(GridConfig)}, "grid")
        training = dict(data.pop("training", {}) or {})
        _reject_unknown(training, {f.name for f in dataclasses.fields(TrainConfig)}, "training")
        if training.get("hidden_widths") is not None:
            training["hidden_widths"] = tuple(training["hidden_widths"])
        try:
            train_cfg = TrainConfig(**training)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"training: {exc}") from exc
        seeds = data.pop("seeds", [0])
        if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
            raise ConfigurationError("seeds must be a list of integers")
        return cls(grid=GridConfig(**grid), training=train_cfg, seeds=seeds, **data)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError("config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Hash of everything that defines a run except the seed list and output location."""
        body = self.to_dict()
        body.pop("seeds")
        body.pop("out_dir")
        canonical = json.dumps(body, sort_keys=True, separators=(",", ":"), default=list)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _reject_unknown(data: dict, allowed: set[str], where: str) -> None:
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where} must be a JSON object")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where}: {', '.join(unknown)}")


@dataclass
class RunRecord:
    config_hash: str
    problem: str
    scheme: str
    dim: int
    N: int
    kappa_hat: int
    seed: int
    estimate: float
    runtime_s: float
    status: str
    reference: float | None = None
    step_losses: dict = field(default_factory=dict)
    message: str = ""

    def row(self) -> dict:
        return {k: getattr(self, k) for k in RECORD_COLUMNS}


def problem_label(problem_id: str, dim: int) -> str:
    return f"{problem_id}_d{dim}" if problem_id in DIMENSIONED_PROBLEMS else problem_id


def reference_for(problem_id: str, scheme: str, dim: int, problem=None) -> float | None:
    """Reference value of the problem; CVA uses the table column matching the scheme family."""
    if problem_id == "cva":
        if problem is not None and problem.reference_value is None:
            return None
        table = CVA_REFERENCE_DBSDE if scheme == "deep_bsde" else CVA_REFERENCE_DBDP
        return table.get(dim)
    if problem is None:
        try:
            problem = make_problem(problem_id)
        except ConfigurationError:
            return None
    ref = getattr(problem, "reference_value", None)
    if ref is None:
        ref = getattr(problem, "optimal_value", None)
    return None if ref is None else float(ref)


def _run_one(config: ExperimentConfig, seed: int):
    """Fresh problem, generator and networks for one seed."""
    problem = make_problem(config.problem, **config.problem_params)
    rng = np.random.default_rng(seed)
    if config.problem in CONTROL_CATALOG:
        return CONTROL_SCHEMES[config.scheme](problem, config.training, rng, seed)
    grid = TimeGrid(problem.maturity, config.grid.N, config.grid.kappa_hat)
    return PDE_SCHEMES[config.scheme](problem, grid, config.training, rng, seed)


def run_experiment(config: ExperimentConfig, write_runs: bool = True) -> list[RunRecord]:
    """Run the scheme once per seed; a diverging seed yields a ``diverged`` record instead of aborting."""
    chash = config.config_hash()
    probe = make_problem(config.problem, **config.problem_params)
    if config.problem in PDE_CATALOG:
        if config.scheme in SEMILINEAR_SCHEMES and not probe.semilinear:
            raise ConfigurationError(f"{config.scheme} needs a semilinear problem; {config.problem} is fully nonlinear")
        if config.scheme in FULLY_NONLINEAR_SCHEMES and probe.semilinear:
            raise ConfigurationError(f"{config.scheme} needs a fully nonlinear problem; {config.problem} is semilinear")
        dim, n_steps, kappa = probe.dim, config.grid.N, config.grid.kappa_hat
        TimeGrid(probe.maturity, n_steps, kappa)
    else:
        dim, n_steps, kappa = probe.state_dim, probe.horizon, 1
    label = problem_label(config.problem, dim)
    reference = reference_for(config.problem, config.scheme, dim, probe)
    records = []
    for seed in config.seeds:
        try:
            result = _run_one(config, seed)
        except (DivergenceError, SimulationError, FloatingPointError) as exc:
            log.warning("seed %d diverged: %s", seed, exc)
            records.append(RunRecord(chash, label, config.scheme, dim, n_steps, kappa, seed, math.nan, 0.0, "diverged", reference, {}, str(exc)))
            continue
        losses = {str(k): v for k, v in sorted(getattr(result, "step_losses", getattr(result, "policy_losses", {})).items())}
        records.append(
            RunRecord(chash, label, config.scheme, dim, n_steps, kappa, seed, float(result.estimate_y0), float(result.runtime_s), "ok", reference, losses)
        )
        if write_runs and config.out_dir:
            run_dir = Path(config.out_dir) / "runs"
            run_dir.mkdir(parents=True, exist_ok=True)
            result.save(run_dir / f"{chash}_seed{seed}.json")
        log.info("%s/%s seed %d: %.6f (%.1fs)", label, config.scheme, seed, result.estimate_y0, result.runtime_s)
    return records


def aggregate(records: list[RunRecord], references: dict[str, float | None] | None = None) -> list[dict]:
    """Mean, sample standard deviation and relative error (percent) per (problem, scheme)."""
    ok = [r for r in records if r.status == "ok"]
    if not ok:
        raise EmptySummaryError("no successful records to aggregate")
    groups: dict[tuple[str, str], list[RunRecord]] = {}
    for r in ok:
        groups.setdefault((r.problem, r.scheme), []).append(r)
    out = []
    for (prob, scheme), recs in groups.items():
        values = np.array([r.estimate for r in recs])
        mean = float(values.mean())
        sd = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        ref = recs[0].reference
        if references is not None and ref is None:
            ref = references.get(prob)
        rel = 100.0 * abs(mean - ref) / abs(ref) if ref not in (None, 0.0) else math.nan
        out.append({"problem": prob, "scheme": scheme, "mean": mean, "sd": sd, "rel_err_pct": rel, "n_runs": len(recs)})
    return out


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _json_safe(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def emit_outputs(summaries: list[dict], records: list[RunRecord], out_dir: str | Path) -> dict[str, Path]:
    """Write records.csv, summary.csv and summary.json into ``out_dir``."""
    out = Path(out_dir)
    paths = {"records": out / "records.csv", "summary": out / "summary.csv", "summary_json": out / "summary.json"}
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(paths["records"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RECORD_COLUMNS)
            for r in records:
                w.writerow([_fmt(v) for v in r.row().values()])
        with open(paths["summary"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SUMMARY_COLUMNS)
            for s in summaries:
                w.writerow([_fmt(s[k]) for k in SUMMARY_COLUMNS])
        paths["summary_json"].write_text(json.dumps([{k: _json_safe(s[k]) for k in SUMMARY_COLUMNS} for s in summaries], indent=1))
    except OSError as exc:
        raise OSError(f"cannot write outputs to {out}: {exc}") from exc
    return paths


def read_records(path: str | Path) -> list[RunRecord]:
    """Parse a records.csv back into records; references come from the default problem definitions."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RECORD_COLUMNS:
            raise ConfigurationError(f"{path}: expected columns {RECORD_COLUMNS}, got {reader.fieldnames}")
        for row in reader:
            label, dim = row["problem"], int(row["dim"])
            base = label.rsplit("_d", 1)[0] if any(label.startswith(p + "_d") for p in DIMENSIONED_PROBLEMS) else label
            records.append(
                RunRecord(
                    config_hash=row["config_hash"],
                    problem=label,
                    scheme=row["scheme"],
                    dim=dim,
                    N=int(row["N"]),
                    kappa_hat=int(row["kappa_hat"]),
                    seed=int(row["seed"]),
                    estimate=float(row["estimate"]),
                    runtime_s=float(row["runtime_s"]),
                    status=row["status"],
                    reference=reference_for(base, row["scheme"], dim) if base in problem_ids() else None,
                )
            )
    return records


def format_table(summaries: list[dict]) -> str:
    lines = [f"{'problem':<14} {'scheme':<15} {'mean':>12} {'sd':>11} {'rel.err %':>10} {'runs':>5}"]
    for s in summaries:
        lines.append(f"{s['problem']:<14} {s['scheme']:<15} {s['mean']:>12.6f} {s['sd']:>11.6f} {s['rel_err_pct']:>10.3f} {s['n_runs']:>5d}")
    return "\n".join(lines)
