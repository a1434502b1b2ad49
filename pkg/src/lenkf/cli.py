"""Command-line entry points: run, sweep, selftest.

Exit codes: 0 on success, 1 on any validation problem (bad flags, bad
config file, inconsistent dimensions), 2 when a single `run` diverges.
Sweeps always exit 0 and encode divergence in the output table.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

import numpy as np

from .ensemble import Ensemble
from .errors import ValidationError
from .filters import VARIANTS, cenkf1, cenkf2, denkf, esrf_sequential, kalman_oracle
from .harness import (
    ExperimentConfig,
    rmse_of,
    run_sweep,
    run_twin,
    write_cycle_csv,
    write_sweep_csv,
)
from .localization import FULL_SUPPORT, HALF_SUPPORT, TaperFunction, taper_value
from .models import IntegratorConfig, Lorenz96
from .observation import LinearObservation, ObsError

FILTER_ALIASES = {
    "enkf": "enkf_perturbed",
    "esrf": "esrf_sequential",
    "denkf": "denkf",
    "cenkf1": "cenkf1",
    "cenkf2": "cenkf2",
}

DEFAULTS = {
    "model": "lorenz96",
    "n": 40,
    "members": 10,
    "filter": "cenkf1",
    "inflation": 1.05,
    "radius": 15.0,
    "taper": "gc",
    "radius_convention": "half",
    "steps": 4,
    "dt": 0.005,
    "obs_interval": 0.05,
    "obs_stride": 2,
    "obs_var": 1.0,
    "spread": 1.0,
    "scheme": "midpoint",
    "cycles": 2000,
    "spinup": 100,
    "seed": 42,
    "out": None,
    "deltas": "1.01,1.02,1.05,1.08",
    "radii": "2,4,6,10,15,20,30",
    "parallel": False,
}


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; the CLI contract
    # reserves 2 for divergence
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file whose keys mirror the flags; flags win")
    p.add_argument("--model", choices=["lorenz96"])
    p.add_argument("--n", type=int, help="state dimension")
    p.add_argument("--members", type=int, help="ensemble size m")
    p.add_argument("--filter", choices=sorted(FILTER_ALIASES))
    p.add_argument("--inflation", type=float, help="multiplicative inflation delta >= 1")
    p.add_argument("--radius", type=float, help="localization radius r0")
    p.add_argument("--taper", choices=["gc", "gaussian", "none"])
    p.add_argument("--radius-convention", choices=["half", "full"], dest="radius_convention")
    p.add_argument("--steps", type=int, help="pseudo-time steps L for cenkf variants")
    p.add_argument("--dt", type=float, help="integration step")
    p.add_argument("--obs-interval", type=float, dest="obs_interval")
    p.add_argument("--obs-stride", type=int, dest="obs_stride", help="observe every s-th component")
    p.add_argument("--obs-var", type=float, dest="obs_var", help="observation error variance")
    p.add_argument("--spread", type=float, help="initial ensemble spread sigma0")
    p.add_argument("--scheme", choices=["midpoint", "rk4"])
    p.add_argument("--cycles", type=int, help="scored analysis cycles J")
    p.add_argument("--spinup", type=int, help="discarded leading cycles")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output CSV path")


def _merge(args: argparse.Namespace, keys: Sequence[str]) -> dict:
    opts = dict(DEFAULTS)
    if args.config is not None:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config file {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ValidationError("config file must hold a JSON object")
        for key, value in loaded.items():
            if key not in DEFAULTS:
                raise ValidationError(f"unknown config key {key!r}")
            opts[key] = value
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    return opts


def _grid(raw) -> list[float]:
    if isinstance(raw, (list, tuple)):
        return [float(v) for v in raw]
    values = [part for part in str(raw).split(",") if part.strip()]
    if not values:
        raise ValidationError(f"empty grid specification {raw!r}")
    return [float(v) for v in values]


def build_config(opts: dict) -> ExperimentConfig:
    if opts["model"] != "lorenz96":
        raise ValidationError(f"unknown model {opts['model']!r}")
    model = Lorenz96(n=int(opts["n"]))
    scheme = "implicit_midpoint" if opts["scheme"] == "midpoint" else "rk4"
    integrator = IntegratorConfig(dt=float(opts["dt"]), scheme=scheme)
    stride = int(opts["obs_stride"])
    if stride < 1:
        raise ValidationError(f"obs stride must be >= 1, got {stride}")
    indices = np.arange(0, model.n, stride)
    obs_op = LinearObservation.selection(indices, model.n)
    obs_err = ObsError.diagonal(np.full(obs_op.k, float(opts["obs_var"])))
    name = opts["filter"]
    variant = FILTER_ALIASES.get(name, name)
    if variant not in VARIANTS:
        raise ValidationError(f"unknown filter {name!r}")
    convention = HALF_SUPPORT if opts["radius_convention"] == "half" else FULL_SUPPORT
    if opts["taper"] == "gc":
        taper = TaperFunction.gaspari_cohn(float(opts["radius"]), convention)
    elif opts["taper"] == "gaussian":
        taper = TaperFunction.gaussian(float(opts["radius"]))
    elif opts["taper"] == "none":
        taper = None
    else:
        raise ValidationError(f"unknown taper {opts['taper']!r}")
    return ExperimentConfig(
        model=model,
        integrator=integrator,
        members=int(opts["members"]),
        obs_op=obs_op,
        obs_err=obs_err,
        obs_interval=float(opts["obs_interval"]),
        cycles=int(opts["cycles"]),
        filter_variant=variant,
        seed=int(opts["seed"]),
        spin_up_cycles=int(opts["spinup"]),
        inflation=float(opts["inflation"]),
        steps=int(opts["steps"]),
        taper=taper,
        initial_spread=float(opts["spread"]),
    )


_RUN_KEYS = [k for k in DEFAULTS if k not in ("deltas", "radii", "parallel")]


def _cmd_run(args: argparse.Namespace) -> int:
    opts = _merge(args, _RUN_KEYS)
    config = build_config(opts)
    cell, records = run_twin(config)
    if opts["out"]:
        write_cycle_csv(records, opts["out"])
    print(
        f"filter={cell.filter} delta={cell.delta:g} r0={cell.r0:g} seed={cell.seed} "
        f"cycles={cell.cycles} rmse={cell.rmse:.6g} diverged={int(cell.diverged)}"
    )
    return 2 if cell.diverged else 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    opts = _merge(args, list(DEFAULTS))
    base = build_config(opts)
    deltas = _grid(opts["deltas"])
    radii = _grid(opts["radii"])
    result = run_sweep(base, deltas, radii, parallel=bool(opts["parallel"]))
    if opts["out"]:
        write_sweep_csv(result, opts["out"])
        print(f"wrote {opts['out']} ({len(result.cells)} cells)")
    else:
        for c in result.cells:
            print(
                f"{c.filter},{c.delta:g},{c.r0:g},{c.seed},{c.cycles},"
                f"{c.rmse:.6g},{int(c.diverged)}"
            )
    return 0


def _selftest_checks():
    rng = np.random.default_rng(7)

    def taper_shape():
        gc = TaperFunction.gaspari_cohn(2.0)
        assert abs(taper_value(gc, 2.0) - 5.0 / 24.0) < 1e-14
        assert abs(taper_value(gc, 4.0)) < 1e-14  # support edge, rounding only
        assert taper_value(gc, 5.0) == 0.0
        assert taper_value(TaperFunction.gaussian(3.0), 0.0) == 1.0

    def rmse_cases():
        assert abs(rmse_of([np.ones(4)], [np.zeros(4)]) - 1.0) < 1e-14
        got = rmse_of([[3.0], [0.0]], [[0.0], [4.0]])
        assert abs(got - np.sqrt(25.0 / 2.0)) < 1e-14

    def esrf_matches_oracle():
        ens = Ensemble(rng.standard_normal((3, 6)))
        obs_op = LinearObservation.selection([0, 2], 3)
        obs_err = ObsError.diagonal([0.5, 0.8])
        y = np.array([0.3, -0.2])
        a = esrf_sequential(ens, obs_op, obs_err, y)
        b = kalman_oracle(ens, obs_op, obs_err, y)
        cov_a = np.cov(a.analysis.states, bias=False)
        assert np.allclose(cov_a, b.covariance, atol=1e-10)

    def single_step_coincidence():
        ens = Ensemble(rng.standard_normal((4, 5)))
        obs_op = LinearObservation.selection([1, 3], 4)
        obs_err = ObsError.diagonal([1.0, 2.0])
        y = np.array([0.5, 0.1])
        a = cenkf1(ens, obs_op, obs_err, y, steps=1)
        b = cenkf2(ens, obs_op, obs_err, y, steps=1)
        assert np.allclose(a.analysis.states, b.analysis.states, rtol=1e-12, atol=1e-13)

    def mean_preserved():
        ens = Ensemble(rng.standard_normal((5, 7)))
        obs_op = LinearObservation.selection([0, 2, 4], 5)
        obs_err = ObsError.diagonal([1.0, 1.0, 1.0])
        y = np.zeros(3)
        for fn in (esrf_sequential, denkf, cenkf1, cenkf2):
            rep = fn(ens, obs_op, obs_err, y)
            dev = rep.analysis.states - rep.analysis.states.mean(axis=1, keepdims=True)
            assert np.abs(dev.sum(axis=1)).max() < 1e-10

    def twin_determinism():
        cfg = build_config(
            {
                **DEFAULTS,
                "n": 12,
                "members": 5,
                "obs_stride": 2,
                "cycles": 5,
                "spinup": 2,
                "radius": 4.0,
                "filter": "denkf",
            }
        )
        first = run_twin(cfg)
        second = run_twin(cfg)
        assert first == second

    return [
        ("taper values", taper_shape),
        ("rmse normalization", rmse_cases),
        ("serial square root vs oracle", esrf_matches_oracle),
        ("single-step coincidence", single_step_coincidence),
        ("mean preservation", mean_preserved),
        ("twin determinism", twin_determinism),
    ]


def _cmd_selftest(_args: argparse.Namespace) -> int:
    failures = 0
    for name, check in _selftest_checks():
        try:
            check()
        except Exception as exc:  # report every failure, keep going
            failures += 1
            print(f"[selftest] {name}: FAIL ({exc})")
        else:
            print(f"[selftest] {name}: ok")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lenkf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="single twin experiment, per-cycle CSV")
    _add_common(run_p)
    run_p.set_defaults(func=_cmd_run)
    sweep_p = sub.add_parser("sweep", help="(delta, r0) grid, results CSV")
    _add_common(sweep_p)
    sweep_p.add_argument("--deltas", help="comma-separated inflation grid")
    sweep_p.add_argument("--radii", help="comma-separated radius grid")
    sweep_p.add_argument("--parallel", action=argparse.BooleanOptionalAction)
    sweep_p.set_defaults(func=_cmd_sweep)
    self_p = sub.add_parser("selftest", help="fast invariant checks")
    self_p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
