"""Forecast dynamics: the Lorenz-96 model and its time integrators.

The integrators are model-generic (any object with ``dimension`` and
``rhs``); for Lorenz-96 they dispatch to jit-compiled kernels because the
twin-experiment harness spends most of its time stepping the model. States
may be single vectors (n,) or batches (n, q) whose columns are independent
states; the implicit solve iterates a batch until every column converges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import IntegrationError, ValidationError

SCHEMES = ("implicit_midpoint", "rk4")


@dataclass(frozen=True)
class Lorenz96:
    """Cyclic Lorenz-96 model dx_j/dt = (x_{j+1} - x_{j-2}) x_{j-1} - x_j + forcing."""

    n: int = 40
    forcing: float = 8.0

    def __post_init__(self):
        if self.n < 4:
            raise ValidationError(f"Lorenz-96 needs n >= 4, got {self.n}")

    @property
    def dimension(self) -> int:
        return self.n

    def rhs(self, x: np.ndarray) -> np.ndarray:
        """Tendency for a state vector (n,) or a batch (n, q), columnwise."""
        x = np.asarray(x, dtype=float)
        return (np.roll(x, -1, axis=0) - np.roll(x, 2, axis=0)) * np.roll(x, 1, axis=0) - x + self.forcing


@dataclass(frozen=True)
class IntegratorConfig:
    """Time-stepping scheme and step size.

    ``implicit_midpoint`` solves the stage equation by fixed-point
    iteration from the explicit-Euler predictor; ``rk4`` is the classical
    four-stage explicit step.
    """

    dt: float
    scheme: str = "implicit_midpoint"
    tol: float = 1e-12
    max_iters: int = 50

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValidationError(f"unknown scheme {self.scheme!r}; pick from {SCHEMES}")
        if self.dt == 0:
            raise ValidationError("step size must be nonzero")
        if self.tol <= 0 or self.max_iters < 1:
            raise ValidationError("tol must be positive and max_iters >= 1")


@njit(cache=True)
def _l96_rhs(x, out, forcing):
    n, q = x.shape
    for c in range(q):
        for j in range(n):
            jp1 = j + 1 if j + 1 < n else 0
            jm1 = j - 1 if j >= 1 else n - 1
            jm2 = j - 2 if j >= 2 else j - 2 + n
            out[j, c] = (x[jp1, c] - x[jm2, c]) * x[jm1, c] - x[j, c] + forcing


@njit(cache=True)
def _l96_midpoint(x, nsteps, dt, forcing, tol, max_iters):
    """Implicit-midpoint steps on a column batch.

    Returns (state, ok); on a fixed-point failure ok is False and state
    holds the last iterate of the failed step.
    """
    n, q = x.shape
    cur = x.copy()
    f = np.empty((n, q))
    mid = np.empty((n, q))
    nxt = np.empty((n, q))
    for _ in range(nsteps):
        _l96_rhs(cur, f, forcing)
        for j in range(n):
            for c in range(q):
                nxt[j, c] = cur[j, c] + dt * f[j, c]
        converged = False
        for _ in range(max_iters):
            for j in range(n):
                for c in range(q):
                    mid[j, c] = 0.5 * (cur[j, c] + nxt[j, c])
            _l96_rhs(mid, f, forcing)
            delta = 0.0
            bad = False
            for j in range(n):
                for c in range(q):
                    v = cur[j, c] + dt * f[j, c]
                    d = abs(v - nxt[j, c])
                    if d != d:  # NaN
                        bad = True
                    elif d > delta:
                        delta = d
                    nxt[j, c] = v
            if bad:
                return nxt, False
            if delta < tol:
                converged = True
                break
        if not converged:
            return nxt, False
        tmp = cur
        cur = nxt
        nxt = tmp
    return cur, True


@njit(cache=True)
def _l96_rk4(x, nsteps, dt, forcing):
    n, q = x.shape
    cur = x.copy()
    k1 = np.empty((n, q))
    k2 = np.empty((n, q))
    k3 = np.empty((n, q))
    k4 = np.empty((n, q))
    stage = np.empty((n, q))
    for _ in range(nsteps):
        _l96_rhs(cur, k1, forcing)
        for j in range(n):
            for c in range(q):
                stage[j, c] = cur[j, c] + 0.5 * dt * k1[j, c]
        _l96_rhs(stage, k2, forcing)
        for j in range(n):
            for c in range(q):
                stage[j, c] = cur[j, c] + 0.5 * dt * k2[j, c]
        _l96_rhs(stage, k3, forcing)
        for j in range(n):
            for c in range(q):
                stage[j, c] = cur[j, c] + dt * k3[j, c]
        _l96_rhs(stage, k4, forcing)
        for j in range(n):
            for c in range(q):
                cur[j, c] = cur[j, c] + (dt / 6.0) * (
                    k1[j, c] + 2.0 * k2[j, c] + 2.0 * k3[j, c] + k4[j, c]
                )
    return cur


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[:, None], True
    if x.ndim == 2:
        return x, False
    raise ValidationError(f"state must be 1-d or 2-d, got shape {x.shape}")


def _generic_midpoint(model, cfg: IntegratorConfig, x: np.ndarray) -> np.ndarray:
    nxt = x + cfg.dt * model.rhs(x)
    for _ in range(cfg.max_iters):
        new = x + cfg.dt * model.rhs(0.5 * (x + nxt))
        delta = np.max(np.abs(new - nxt))
        nxt = new
        if delta < cfg.tol:
            return nxt
    raise IntegrationError(
        f"implicit midpoint did not converge in {cfg.max_iters} iterations",
        iterate=nxt,
    )


def _generic_rk4(model, cfg: IntegratorConfig, x: np.ndarray) -> np.ndarray:
    dt = cfg.dt
    k1 = model.rhs(x)
    k2 = model.rhs(x + 0.5 * dt * k1)
    k3 = model.rhs(x + 0.5 * dt * k2)
    k4 = model.rhs(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _run_steps(model, cfg: IntegratorConfig, x: np.ndarray, nsteps: int) -> np.ndarray:
    batch, squeeze = _as_batch(x)
    if isinstance(model, Lorenz96):
        if cfg.scheme == "rk4":
            out = _l96_rk4(batch, nsteps, cfg.dt, model.forcing)
        else:
            out, ok = _l96_midpoint(
                batch, nsteps, cfg.dt, model.forcing, cfg.tol, cfg.max_iters
            )
            if not ok:
                raise IntegrationError(
                    f"implicit midpoint did not converge in {cfg.max_iters} iterations",
                    iterate=out[:, 0] if squeeze else out,
                )
    else:
        out = batch
        stepper = _generic_rk4 if cfg.scheme == "rk4" else _generic_midpoint
        for _ in range(nsteps):
            out = stepper(model, cfg, out)
    return out[:, 0] if squeeze else out


def step(model, cfg: IntegratorConfig, x: np.ndarray) -> np.ndarray:
    """Advance a state (or column batch) by one time step."""
    return _run_steps(model, cfg, x, 1)


def propagate(model, cfg: IntegratorConfig, x: np.ndarray, duration: float) -> np.ndarray:
    """Advance by ``duration``, which must be an integer multiple of cfg.dt."""
    if duration == 0:
        return np.array(x, dtype=float)
    ratio = duration / cfg.dt
    nsteps = round(ratio)
    if nsteps < 1 or abs(ratio - nsteps) > 1e-9 * max(1.0, abs(ratio)):
        raise ValidationError(
            f"duration {duration} is not a positive integer multiple of dt={cfg.dt}"
        )
    return _run_steps(model, cfg, x, nsteps)
