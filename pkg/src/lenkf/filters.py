"""Analysis schemes: EnKF variants, their continuous reformulations, and oracles.

All filters map a forecast ensemble and one observation batch to an
analysis ensemble. They share the localized cross products HP and HPH^T
and an SPD innovation solve; none of them forms the n x n covariance
except ``kalman_oracle`` (a test-scale reference) and the nonlinear
gradient-flow path (guarded to small n).

The continuous variants integrate the ensemble Kalman-Bucy gradient flow
in a pseudo-time s over [0, 1] with forward Euler, monitoring the
quadratic observation-misfit potential V. cenkf1 refreshes the ensemble
cross products every step; cenkf2 freezes them at s = 0 and runs the
whole recursion in observation space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .ensemble import Ensemble, covariance, cross_products, from_stats, inflate, stats
from .errors import DivergenceError, LinearSolveError, ValidationError
from .localization import TaperMatrices, localize_hp, localize_hpht
from .models import IntegratorConfig, step as integrate_step
from .observation import LinearObservation, NonlinearObservation, ObsError

VARIANTS = (
    "enkf_perturbed",
    "esrf_sequential",
    "denkf",
    "cenkf1",
    "cenkf2",
    "kalman_oracle",
)

# slack for the potential monitor; increases below this are rounding noise
_POTENTIAL_RTOL = 1e-12


@dataclass(frozen=True)
class AnalysisConfig:
    """Which analysis to run and with what knobs.

    ``steps`` is the pseudo-time step count L (step size 1/L), used by the
    cenkf variants only. ``inflation`` is applied by ``run_analysis``
    before the update.
    """

    variant: str
    inflation: float = 1.0
    steps: int = 4
    localization: Optional[TaperMatrices] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}; pick from {VARIANTS}")
        if self.inflation < 1.0:
            raise ValidationError(f"inflation must be >= 1, got {self.inflation}")
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")


@dataclass(frozen=True)
class AnalysisReport:
    """Analysis ensemble plus diagnostics.

    ``potential_trace`` has L+1 entries for the cenkf variants and is None
    otherwise. ``covariance`` is filled only by kalman_oracle, which is
    compared at mean/covariance level rather than member level.
    """

    analysis: Ensemble
    increments_norm: float
    potential_trace: Optional[tuple[float, ...]] = None
    warnings: tuple[str, ...] = ()
    covariance: Optional[np.ndarray] = None


def potential(states, obs_op: LinearObservation, obs_err: ObsError, y: np.ndarray) -> float:
    """Misfit potential V(X) = (m/2) { S(mean) + (1/m) sum_i S(x_i) }.

    S(x) = (1/2) (Hx - y)^T R^{-1} (Hx - y). Accepts an Ensemble or a raw
    (n, m) array with m >= 1.
    """
    if isinstance(states, Ensemble):
        states = states.states
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or states.shape[1] < 1:
        raise ValidationError(f"states must be (n, m) with m >= 1, got shape {states.shape}")
    y = np.asarray(y, dtype=float)
    m = states.shape[1]
    resid = obs_op.apply_ensemble(states) - y[:, None]
    member_cost = 0.5 * np.sum(resid * obs_err.precision_apply(resid), axis=0)
    mean_resid = resid.mean(axis=1)
    mean_cost = 0.5 * float(mean_resid @ obs_err.precision_apply(mean_resid))
    return (m / 2.0) * (mean_cost + member_cost.mean())


def _localized_products(st, obs_op, tapers):
    hp, hpht = cross_products(st, obs_op)
    if tapers is not None:
        hp = localize_hp(tapers, hp)
        hpht = localize_hpht(tapers, hpht)
    return hp, hpht


def _innovation_factor(hpht: np.ndarray, obs_err: ObsError):
    # ValueError covers non-finite entries, which cho_factor rejects
    try:
        return cho_factor(hpht + obs_err.as_matrix(), lower=True)
    except (LinAlgError, ValueError) as exc:
        raise LinearSolveError(f"innovation matrix HPH^T + R is not solvable: {exc}") from exc


def _frob(a: np.ndarray) -> float:
    return float(np.linalg.norm(a))


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def _inv_sym_sqrt(mat: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    # cut at the numerical rank of the covariance itself; a plain pinv of
    # the square root would keep noise directions (eigenvalue 1e-16 turns
    # into singular value 1e-8) and leak them into the transform
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    keep = w > rtol * max(w.max(), 0.0)
    if not np.any(keep):
        return np.zeros_like(mat)
    vk = v[:, keep]
    return (vk / np.sqrt(w[keep])) @ vk.T


def kalman_oracle(
    ens: Ensemble,
    obs_op: LinearObservation,
    obs_err: ObsError,
    y: np.ndarray,
    tapers: Optional[TaperMatrices] = None,
) -> AnalysisReport:
    """Reference analysis through the explicit covariance formulas.

    Forms P_f densely, so test scale only. The report's ``covariance`` is
    the exact (I - KH) P_f; the returned ensemble realizes it through a
    symmetric square-root transform of the forecast deviations.
    """
    st = stats(ens)
    y = np.asarray(y, dtype=float)
    pf = covariance(st)
    hp_raw = obs_op.apply_ensemble(pf)  # H P, (k, n)
    hpht_raw = obs_op.apply_ensemble(hp_raw.T)
    hp = localize_hp(tapers, hp_raw) if tapers is not None else hp_raw
    hpht = localize_hpht(tapers, hpht_raw) if tapers is not None else hpht_raw
    factor = _innovation_factor(hpht, obs_err)
    gain = cho_solve(factor, hp).T  # (n, k)
    mean_a = st.mean + gain @ (y - obs_op.apply(st.mean))
    pa = pf - gain @ hp_raw  # (I - KH) P_f
    pa = 0.5 * (pa + pa.T)
    transform = _sym_sqrt(pa) @ _inv_sym_sqrt(pf)
    dev_a = transform @ st.deviations
    dev_a = dev_a - dev_a.mean(axis=1, keepdims=True)
    analysis = from_stats(mean_a, dev_a)
    return AnalysisReport(
        analysis=analysis,
        increments_norm=_frob(analysis.states - ens.states),
        covariance=pa,
    )


def enkf_perturbed(
    ens: Ensemble,
    obs_op: LinearObservation,
    obs_err: ObsError,
    y: np.ndarray,
    rng: np.random.Generator,
    tapers: Optional[TaperMatrices] = None,
    recenter: bool = False,
) -> AnalysisReport:
    """EnKF with perturbed observations, y_i = y + eta_i, eta_i ~ N(0, R).

    The perturbations are used raw; ``recenter`` subtracts their ensemble
    mean first (off by default).
    """
    st = stats(ens)
    y = np.asarray(y, dtype=float)
    hp, hpht = _localized_products(st, obs_op, tapers)
    factor = _innovation_factor(hpht, obs_err)
    eta = obs_err.sqrt_apply(rng.standard_normal((obs_op.k, ens.size)))
    if recenter:
        eta = eta - eta.mean(axis=1, keepdims=True)
    innovations = y[:, None] + eta - obs_op.apply_ensemble(ens)
    states_a = ens.states + hp.T @ cho_solve(factor, innovations)
    analysis = Ensemble(states_a)
    return AnalysisReport(
        analysis=analysis,
        increments_norm=_frob(states_a - ens.states),
    )


def esrf_sequential(
    ens: Ensemble,
    obs_op: LinearObservation,
    obs_err: ObsError,
    y: np.ndarray,
    tapers: Optional[TaperMatrices] = None,
) -> AnalysisReport:
    """Serial ensemble square-root filter, one scalar observation at a time.

    Requires diagonal R. Without localization the analysis covariance is
    independent of the processing order; with localization the order
    sensitivity is accepted.
    """
    if not obs_err.is_diagonal:
        raise ValidationError("esrf_sequential needs a diagonal R")
    st = stats(ens)
    y = np.asarray(y, dtype=float)
    mean = st.mean.copy()
    dev = st.deviations.copy()
    m = ens.size
    for o in range(obs_op.k):
        hdev = obs_op.apply_row(o, dev)  # (m,)
        hvar = float(hdev @ hdev) / (m - 1)
        r = float(obs_err.variances[o])
        phT = dev @ hdev / (m - 1)  # P h^T, (n,)
        if tapers is not None:
            phT = tapers.c1[:, o] * phT
        denom = hvar + r
        gain = phT / denom
        mean += gain * (y[o] - obs_op.apply_row(o, mean))
        alpha = 1.0 / (1.0 + np.sqrt(r / denom))
        dev -= np.outer(alpha * gain, hdev)
    analysis = from_stats(mean, dev)
    return AnalysisReport(
        analysis=analysis,
        increments_norm=_frob(analysis.states - ens.states),
    )


def denkf(
    ens: Ensemble,
    obs_op: LinearObservation,
    obs_err: ObsError,
    y: np.ndarray,
    tapers: Optional[TaperMatrices] = None,
) -> AnalysisReport:
    """Deterministic EnKF: Kalman mean update, deviations damped by half the gain."""
    st = stats(ens)
    y = np.asarray(y, dtype=float)
    hp, hpht = _localized_products(st, obs_op, tapers)
    factor = _innovation_factor(hpht, obs_err)
    mean_a = st.mean + hp.T @ cho_solve(factor, y - obs_op.apply(st.mean))
    hdev = obs_op.apply_ensemble(st.deviations)
    dev_a = st.deviations - 0.5 * hp.T @ cho_solve(factor, hdev)
    analysis = from_stats(mean_a, dev_a)
    return AnalysisReport(
        analysis=analysis,
        increments_norm=_frob(analysis.states - ens.states),
    )


def _monitor(trace: list[float], warnings: list[str]) -> None:
    old, new = trace[-2], trace[-1]
    if new > old + _POTENTIAL_RTOL * max(1.0, abs(old)):
        warnings.append(
            f"potential increased at step {len(trace) - 2}: {old:.6g} -> {new:.6g}"
        )


def cenkf1(
    ens: Ensemble,
    obs_op: LinearObservation,
    obs_err: ObsError,
    y: np.ndarray,
    tapers: Optional[TaperMatrices] = None,
    steps: int = 4,
) -> AnalysisReport:
    """Gradient-flow analysis, cross products refreshed every Euler step.

    Integrates dx_i/ds = -(1/2) (HP)^T R^{-1} (H x_i + H mean - 2y) over
    s in [0, 1] with step 1/steps, HP localized and recomputed from the
    current ensemble. The potential is recorded before the first and
    after every step; an increase is a warning, not an error.
    """
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    y = np.asarray(y, dtype=float)
    ds = 1.0 / steps
    x = np.array(ens.states, dtype=float)
    trace = [potential(x, obs_op, obs_err, y)]
    warnings: list[str] = []
    for l in range(steps):
        st = stats(Ensemble(x))
        hp, _ = _localized_products(st, obs_op, tapers)
        hx = obs_op.apply_ensemble(x)
        hmean = obs_op.apply(st.mean)
        grad = obs_err.precision_apply(hx + (hmean - 2.0 * y)[:, None])
        x = x - 0.5 * ds * (hp.T @ grad)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite state at pseudo-time step {l}", step=l)
        trace.append(potential(x, obs_op, obs_err, y))
        _monitor(trace, warnings)
    analysis = Ensemble(x)
    return AnalysisReport(
        analysis=analysis,
        increments_norm=_frob(x - ens.states),
        potential_trace=tuple(trace),
        warnings=tuple(warnings),
    )


def cenkf2(
    ens: Ensemble,
    obs_op: LinearObservation,
    obs_err: ObsError,
    y: np.ndarray,
    tapers: Optional[TaperMatrices] = None,
    steps: int = 4,
) -> AnalysisReport:
    """Gradient flow with frozen coefficients, run in observation space.

    HP and HPH^T are fixed at their forecast values. The Euler recursion
    advances z_i = H x_i - y at O(k m) per step; the accumulated z sums
    are mapped back to state space once at the end, which reproduces the
    state-space recursion exactly.
    """
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    y = np.asarray(y, dtype=float)
    ds = 1.0 / steps
    st = stats(ens)
    hp, hpht = _localized_products(st, obs_op, tapers)
    z = obs_op.apply_ensemble(ens) - y[:, None]  # (k, m)
    acc = np.zeros_like(z)
    trace = [_potential_from_z(z, obs_err)]
    warnings: list[str] = []
    for l in range(steps):
        acc += z
        zsum = z + z.mean(axis=1, keepdims=True)
        z = z - 0.5 * ds * (hpht @ obs_err.precision_apply(zsum))
        if not np.all(np.isfinite(z)):
            raise DivergenceError(f"non-finite state at pseudo-time step {l}", step=l)
        trace.append(_potential_from_z(z, obs_err))
        _monitor(trace, warnings)
    accsum = acc + acc.mean(axis=1, keepdims=True)
    states_a = ens.states - 0.5 * ds * (hp.T @ obs_err.precision_apply(accsum))
    analysis = Ensemble(states_a)
    return AnalysisReport(
        analysis=analysis,
        increments_norm=_frob(states_a - ens.states),
        potential_trace=tuple(trace),
        warnings=tuple(warnings),
    )


def _potential_from_z(z: np.ndarray, obs_err: ObsError) -> float:
    """V evaluated from observation-space residuals z_i = H x_i - y."""
    m = z.shape[1]
    member_cost = 0.5 * np.sum(z * obs_err.precision_apply(z), axis=0)
    zbar = z.mean(axis=1)
    mean_cost = 0.5 * float(zbar @ obs_err.precision_apply(zbar))
    return (m / 2.0) * (mean_cost + member_cost.mean())


def cenkf1_nonlinear(
    ens: Ensemble,
    obs: NonlinearObservation,
    obs_err: ObsError,
    y: np.ndarray,
    state_taper: Optional[np.ndarray] = None,
    steps: int = 4,
) -> AnalysisReport:
    """Gradient flow for a nonlinear observation operator h(x).

    Integrates dx_i/ds = -(1/2) P~ { grad S(x_i) + grad S(mean) } with
    grad S(x) = J(x)^T R^{-1} (h(x) - y) and P~ the (optionally tapered)
    dense ensemble covariance. The n x n path is capped at n <= 1000.
    """
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    if ens.dim > 1000:
        raise ValidationError(
            f"dense covariance path limited to n <= 1000, got n={ens.dim}"
        )
    y = np.asarray(y, dtype=float)
    ds = 1.0 / steps
    x = np.array(ens.states, dtype=float)

    def grad_s(v: np.ndarray) -> np.ndarray:
        return np.asarray(obs.jacobian(v), dtype=float).T @ obs_err.precision_apply(
            np.asarray(obs.func(v), dtype=float) - y
        )

    def v_of(states: np.ndarray) -> float:
        m = states.shape[1]
        costs = []
        for i in range(m):
            r = np.asarray(obs.func(states[:, i]), dtype=float) - y
            costs.append(0.5 * float(r @ obs_err.precision_apply(r)))
        mean_r = np.asarray(obs.func(states.mean(axis=1)), dtype=float) - y
        mean_cost = 0.5 * float(mean_r @ obs_err.precision_apply(mean_r))
        return (m / 2.0) * (mean_cost + float(np.mean(costs)))

    trace = [v_of(x)]
    warnings: list[str] = []
    for l in range(steps):
        st = stats(Ensemble(x))
        p = covariance(st)
        if state_taper is not None:
            p = state_taper * p
        gbar = grad_s(st.mean)
        grads = np.stack([grad_s(x[:, i]) + gbar for i in range(x.shape[1])], axis=1)
        x = x - 0.5 * ds * (p @ grads)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite state at pseudo-time step {l}", step=l)
        trace.append(v_of(x))
        _monitor(trace, warnings)
    analysis = Ensemble(x)
    return AnalysisReport(
        analysis=analysis,
        increments_norm=_frob(x - ens.states),
        potential_trace=tuple(trace),
        warnings=tuple(warnings),
    )


def run_analysis(
    cfg: AnalysisConfig,
    ens: Ensemble,
    obs_op: LinearObservation,
    obs_err: ObsError,
    y: np.ndarray,
    rng: Optional[np.random.Generator] = None,
) -> AnalysisReport:
    """Inflate per cfg, then dispatch to the configured analysis."""
    if cfg.inflation > 1.0:
        ens = inflate(ens, cfg.inflation)
    loc = cfg.localization
    if cfg.variant == "enkf_perturbed":
        if rng is None:
            raise ValidationError("enkf_perturbed needs an rng")
        return enkf_perturbed(ens, obs_op, obs_err, y, rng, tapers=loc)
    if cfg.variant == "esrf_sequential":
        return esrf_sequential(ens, obs_op, obs_err, y, tapers=loc)
    if cfg.variant == "denkf":
        return denkf(ens, obs_op, obs_err, y, tapers=loc)
    if cfg.variant == "cenkf1":
        return cenkf1(ens, obs_op, obs_err, y, tapers=loc, steps=cfg.steps)
    if cfg.variant == "cenkf2":
        return cenkf2(ens, obs_op, obs_err, y, tapers=loc, steps=cfg.steps)
    return kalman_oracle(ens, obs_op, obs_err, y, tapers=loc)


@dataclass(frozen=True)
class MollifiedRun:
    """Trajectory of a mollified continuous-assimilation integration."""

    times: np.ndarray  # (T+1,)
    states: np.ndarray  # (T+1, n, m)

    @property
    def final(self) -> Ensemble:
        return Ensemble(self.states[-1])


def mollified_assimilate(
    model,
    cfg: IntegratorConfig,
    ens: Ensemble,
    obs_schedule: Sequence[tuple[float, np.ndarray]],
    obs_op: LinearObservation,
    obs_err: ObsError,
    duration: float,
    epsilon: float,
    tapers: Optional[TaperMatrices] = None,
) -> MollifiedRun:
    """Continuous assimilation with hat-mollified observation impulses.

    Integrates dx_i/dt = f(x_i) - sum_j delta_eps(t - t_j) g_j(x) where
    g_j is the gradient-flow term of the linear cenkf formulation for
    observation y_j and delta_eps(s) = max(0, 1 - |s|/eps)/eps. The model
    part advances with the configured integrator, the impulse with forward
    Euler at the step start, so with no observations the run reduces to
    plain propagation.
    """
    if epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    if cfg.dt > epsilon / 2 + 1e-15:
        raise ValidationError(
            f"dt={cfg.dt} does not resolve the mollifier; need dt <= epsilon/2={epsilon / 2}"
        )
    ratio = duration / cfg.dt
    nsteps = round(ratio)
    if nsteps < 1 or abs(ratio - nsteps) > 1e-9 * max(1.0, abs(ratio)):
        raise ValidationError(
            f"duration {duration} is not a positive integer multiple of dt={cfg.dt}"
        )
    schedule = sorted(
        ((float(t), np.asarray(yv, dtype=float)) for t, yv in obs_schedule),
        key=lambda pair: pair[0],
    )
    for (t0, _), (t1, _) in zip(schedule, schedule[1:]):
        if t1 - t0 < 2 * epsilon:
            raise ValidationError(
                f"mollifier windows overlap: observations at t={t0} and t={t1} "
                f"are closer than 2*epsilon={2 * epsilon}"
            )
    x = np.array(ens.states, dtype=float)
    times = np.empty(nsteps + 1)
    states = np.empty((nsteps + 1, *x.shape))
    times[0] = 0.0
    states[0] = x
    for step_idx in range(nsteps):
        t = step_idx * cfg.dt
        forcing = np.zeros_like(x)
        for t_j, y_j in schedule:
            w = max(0.0, 1.0 - abs(t - t_j) / epsilon) / epsilon
            if w == 0.0:
                continue
            st = stats(Ensemble(x))
            hp, _ = _localized_products(st, obs_op, tapers)
            hx = obs_op.apply_ensemble(x)
            hmean = obs_op.apply(st.mean)
            grad = obs_err.precision_apply(hx + (hmean - 2.0 * y_j)[:, None])
            forcing += w * 0.5 * (hp.T @ grad)
        x = integrate_step(model, cfg, x) - cfg.dt * forcing
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite state at time step {step_idx}", step=step_idx)
        times[step_idx + 1] = (step_idx + 1) * cfg.dt
        states[step_idx + 1] = x
    return MollifiedRun(times=times, states=states)
