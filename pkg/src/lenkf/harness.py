"""Twin-experiment driver: truth, observations, cycling, RMSE, sweeps, CSV.

A twin experiment integrates a known truth trajectory, observes it with
synthetic noise, and measures how well an ensemble filter tracks it. The
driver is deterministic for a fixed seed: truth, initial ensemble,
observation noise, and the perturbed-observation draws come from four
independent streams spawned from the master seed, so changing the filter
variant or the (delta, r0) cell never changes truth or observations.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .ensemble import Ensemble
from .errors import (
    DivergenceError,
    IntegrationError,
    LinearSolveError,
    ValidationError,
)
from .filters import VARIANTS, AnalysisConfig, run_analysis
from .localization import RingDistance, TaperFunction, TaperMatrices, build_tapers
from .models import IntegratorConfig, propagate
from .observation import LinearObservation, ObsError, synthesize

SWEEP_HEADER = ("filter", "delta", "r0", "seed", "cycles", "rmse", "diverged")
CYCLE_HEADER = (
    "cycle",
    "forecast_rmse",
    "analysis_rmse",
    "potential_start",
    "potential_end",
    "warnings",
)

# Mean RMSE above this marks a cell as having no filter skill; its table
# entry becomes inf.
DIVERGENCE_RMSE = 2.0

TRUTH_SPINUP_STEPS = 10_000


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a single twin experiment needs.

    ``cycles`` counts the scored analysis steps J; ``spin_up_cycles`` are
    run first and discarded. ``taper`` is the localization recipe; the
    taper matrices themselves are built per experiment from the
    observation layout.
    """

    model: object
    integrator: IntegratorConfig
    members: int
    obs_op: LinearObservation
    obs_err: ObsError
    obs_interval: float
    cycles: int
    filter_variant: str
    seed: int
    spin_up_cycles: int = 100
    inflation: float = 1.0
    steps: int = 4
    taper: Optional[TaperFunction] = None
    initial_spread: float = 1.0

    def __post_init__(self):
        if self.members < 2:
            raise ValidationError(f"need at least 2 members, got {self.members}")
        if self.cycles < 0 or self.spin_up_cycles < 0:
            raise ValidationError("cycle counts must be nonnegative")
        if self.filter_variant not in VARIANTS:
            raise ValidationError(
                f"unknown filter {self.filter_variant!r}; pick from {VARIANTS}"
            )
        if self.inflation < 1.0:
            raise ValidationError(f"inflation must be >= 1, got {self.inflation}")
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if self.initial_spread <= 0:
            raise ValidationError("initial_spread must be positive")
        if not (0 <= int(self.seed) < 2**64):
            raise ValidationError("seed must fit in 64 bits")
        if self.obs_op.n != self.model.dimension:
            raise ValidationError(
                f"observation operator has n={self.obs_op.n}, model has {self.model.dimension}"
            )
        if self.obs_err.k != self.obs_op.k:
            raise ValidationError(
                f"R has k={self.obs_err.k}, observation operator has {self.obs_op.k}"
            )
        ratio = self.obs_interval / self.integrator.dt
        if self.obs_interval <= 0 or abs(ratio - round(ratio)) > 1e-9 * max(1.0, abs(ratio)):
            raise ValidationError(
                f"obs_interval {self.obs_interval} is not a positive integer "
                f"multiple of dt={self.integrator.dt}"
            )
        if self._tapered and not self.obs_op.is_selection:
            raise ValidationError(
                "ring localization needs a selection observation operator"
            )

    @property
    def _tapered(self) -> bool:
        return self.taper is not None and self.taper.family != "none"

    @property
    def loc_radius(self) -> float:
        return self.taper.radius if self._tapered else 0.0

    def analysis_config(self) -> AnalysisConfig:
        tapers: Optional[TaperMatrices] = None
        if self._tapered:
            metric = RingDistance(self.model.dimension)
            tapers = build_tapers(
                metric, self.taper, self.obs_op.indices, self.model.dimension
            )
        return AnalysisConfig(
            variant=self.filter_variant,
            inflation=self.inflation,
            steps=self.steps,
            localization=tapers,
        )


@dataclass(frozen=True)
class CycleRecord:
    """Per-cycle diagnostics for scored (post-spin-up) cycles."""

    cycle: int
    forecast_rmse: float
    analysis_rmse: float
    potential_start: Optional[float] = None
    potential_end: Optional[float] = None
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class SweepCell:
    """One (filter, delta, r0, seed) result with the inf-above-2 convention."""

    filter: str
    delta: float
    r0: float
    seed: int
    cycles: int
    rmse: float
    diverged: bool


@dataclass(frozen=True)
class SweepResult:
    cells: tuple[SweepCell, ...]


@dataclass(frozen=True)
class TwinInputs:
    """Seed-derived inputs shared by every cell of a sweep.

    truth[j] is the truth state at analysis time j (truth[0] = t0); obs[j]
    is the observation drawn at time j+1. perturb_seed feeds the
    perturbed-observation stream of enkf_perturbed.
    """

    truth: np.ndarray
    obs: np.ndarray
    initial: np.ndarray
    perturb_seed: np.random.SeedSequence


def prepare_inputs(config: ExperimentConfig) -> TwinInputs:
    """Generate truth, observations, and the initial ensemble for a seed."""
    # four named streams; the truth stream is reserved (the truth start is
    # the fixed documented state, so truth is seed-independent for now)
    _truth_ss, init_ss, obs_ss, perturb_ss = np.random.SeedSequence(config.seed).spawn(4)
    n = config.model.dimension
    start = np.full(n, 8.0)
    start[0] += 0.01
    state = propagate(
        config.model,
        config.integrator,
        start,
        TRUTH_SPINUP_STEPS * config.integrator.dt,
    )
    total = config.spin_up_cycles + config.cycles
    truth = np.empty((total + 1, n))
    truth[0] = state
    for j in range(total):
        state = propagate(config.model, config.integrator, state, config.obs_interval)
        truth[j + 1] = state
    obs_rng = np.random.default_rng(obs_ss)
    obs = np.empty((total, config.obs_op.k))
    for j in range(total):
        obs[j] = synthesize(config.obs_op, config.obs_err, truth[j + 1], obs_rng, j).y
    init_rng = np.random.default_rng(init_ss)
    initial = truth[0][:, None] + config.initial_spread * init_rng.standard_normal(
        (n, config.members)
    )
    return TwinInputs(truth=truth, obs=obs, initial=initial, perturb_seed=perturb_ss)


def _cycle_rmse(mean: np.ndarray, truth: np.ndarray) -> float:
    return float(np.linalg.norm(mean - truth) / math.sqrt(len(truth)))


def run_twin(
    config: ExperimentConfig, inputs: Optional[TwinInputs] = None
) -> tuple[SweepCell, list[CycleRecord]]:
    """Run one twin experiment; never raises on filter divergence.

    A run that blows up (non-finite states, failed implicit solve or
    innovation solve) stops early with rmse = inf; a run whose mean
    analysis RMSE exceeds 2.0 is likewise assigned inf. Both set the
    diverged flag.
    """
    if inputs is None:
        inputs = prepare_inputs(config)
    acfg = config.analysis_config()
    perturb_rng = np.random.default_rng(inputs.perturb_seed)
    ens = Ensemble(inputs.initial)
    records: list[CycleRecord] = []
    spin = config.spin_up_cycles
    sq_sum = 0.0
    blown_up = False
    try:
        for j in range(spin + config.cycles):
            states_f = propagate(
                config.model, config.integrator, ens.states, config.obs_interval
            )
            if not np.all(np.isfinite(states_f)):
                raise DivergenceError(f"non-finite forecast at cycle {j}", step=j)
            forecast = Ensemble(states_f)
            report = run_analysis(
                acfg, forecast, config.obs_op, config.obs_err, inputs.obs[j], rng=perturb_rng
            )
            ens = report.analysis
            if j >= spin:
                truth_j = inputs.truth[j + 1]
                a_rmse = _cycle_rmse(ens.states.mean(axis=1), truth_j)
                trace = report.potential_trace
                records.append(
                    CycleRecord(
                        cycle=j - spin,
                        forecast_rmse=_cycle_rmse(states_f.mean(axis=1), truth_j),
                        analysis_rmse=a_rmse,
                        potential_start=trace[0] if trace else None,
                        potential_end=trace[-1] if trace else None,
                        warnings=report.warnings,
                    )
                )
                sq_sum += a_rmse**2
    except (DivergenceError, IntegrationError, LinearSolveError, ValidationError):
        # mid-run validation errors come from non-finite ensembles, i.e.
        # divergence; config errors surface at construction time instead
        blown_up = True
    if blown_up:
        rmse = math.inf
    elif config.cycles == 0 or not records:
        rmse = 0.0
    else:
        rmse = math.sqrt(sq_sum / len(records))
    if not math.isfinite(rmse) or rmse > DIVERGENCE_RMSE:
        rmse = math.inf
    cell = SweepCell(
        filter=config.filter_variant,
        delta=config.inflation,
        r0=config.loc_radius,
        seed=config.seed,
        cycles=config.cycles,
        rmse=float(f"{rmse:.6g}"),
        diverged=not math.isfinite(rmse),
    )
    return cell, records


def _cell_config(base: ExperimentConfig, delta: float, r0: float) -> ExperimentConfig:
    taper = base.taper
    if taper is not None and taper.family != "none":
        taper = dataclasses.replace(taper, radius=float(r0))
    return dataclasses.replace(base, inflation=float(delta), taper=taper)


def _sweep_job(args: tuple[ExperimentConfig, TwinInputs]) -> SweepCell:
    return run_twin(args[0], args[1])[0]


def run_sweep(
    base: ExperimentConfig,
    deltas: Sequence[float],
    radii: Sequence[float],
    parallel: bool = False,
    inputs: Optional[TwinInputs] = None,
) -> SweepResult:
    """Run the (delta, r0) grid; all cells share one set of twin inputs.

    Cell order is row-major over (deltas, radii) and independent of the
    execution schedule. Divergent cells are recorded, never raised.
    """
    if not len(deltas) or not len(radii):
        raise ValidationError("sweep grids must be non-empty")
    if inputs is None:
        inputs = prepare_inputs(base)
    configs = [_cell_config(base, d, r) for d in deltas for r in radii]
    jobs = [(cfg, inputs) for cfg in configs]
    if parallel:
        with ProcessPoolExecutor() as pool:
            cells = list(pool.map(_sweep_job, jobs))
    else:
        cells = [_sweep_job(job) for job in jobs]
    return SweepResult(cells=tuple(cells))


def rmse_of(means: Sequence[np.ndarray], truths: Sequence[np.ndarray]) -> float:
    """Time-mean RMSE sqrt( sum_j |means_j - truths_j|^2 / (n J) )."""
    means = np.asarray(means, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if means.ndim != 2 or means.shape != truths.shape or means.shape[0] < 1:
        raise ValidationError(
            f"need matching nonempty (J, n) arrays, got {means.shape} and {truths.shape}"
        )
    j, n = means.shape
    return float(np.sqrt(np.sum((means - truths) ** 2) / (n * j)))


def _fmt(x: float, digits: int = 10) -> str:
    return f"{x:.{digits}g}"


def write_sweep_csv(result: SweepResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for c in result.cells:
            writer.writerow(
                [
                    c.filter,
                    _fmt(c.delta, 6),
                    _fmt(c.r0, 6),
                    str(c.seed),
                    str(c.cycles),
                    _fmt(c.rmse, 6),
                    "1" if c.diverged else "0",
                ]
            )


def read_sweep_csv(path) -> SweepResult:
    """Parse a sweep CSV back into a SweepResult; exact for emitted files."""
    cells = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != SWEEP_HEADER:
            raise ValidationError(f"unexpected sweep header {header}")
        for row in reader:
            if len(row) != len(SWEEP_HEADER):
                raise ValidationError(f"malformed sweep row {row}")
            cells.append(
                SweepCell(
                    filter=row[0],
                    delta=float(row[1]),
                    r0=float(row[2]),
                    seed=int(row[3]),
                    cycles=int(row[4]),
                    rmse=float(row[5]),
                    diverged=bool(int(row[6])),
                )
            )
    return SweepResult(cells=tuple(cells))


def write_cycle_csv(records: Sequence[CycleRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CYCLE_HEADER)
        for r in records:
            writer.writerow(
                [
                    str(r.cycle),
                    _fmt(r.forecast_rmse),
                    _fmt(r.analysis_rmse),
                    "" if r.potential_start is None else _fmt(r.potential_start),
                    "" if r.potential_end is None else _fmt(r.potential_end),
                    "; ".join(r.warnings),
                ]
            )
