"""Ensemble container and the ensemble algebra used by every filter.

States are stored column-wise: an ensemble is an (n, m) matrix whose
columns are the members. Filters work on (mean, deviations) pairs, and
observation-space covariance products are always formed from H X'
(k x m work) instead of the dense n x n covariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, ValidationError


@dataclass(frozen=True)
class Ensemble:
    """Immutable collection of m state columns of dimension n (m >= 2)."""

    states: np.ndarray

    def __post_init__(self):
        states = np.array(self.states, dtype=float)
        if states.ndim != 2:
            raise DimensionMismatchError(
                f"ensemble states must be a 2-d matrix, got shape {states.shape}"
            )
        if states.shape[1] < 2:
            raise ValidationError(
                f"an ensemble needs at least 2 members, got {states.shape[1]}"
            )
        if not np.isfinite(states).all():
            raise ValidationError("ensemble states contain non-finite entries")
        states.flags.writeable = False
        object.__setattr__(self, "states", states)

    @property
    def dim(self) -> int:
        return self.states.shape[0]

    @property
    def size(self) -> int:
        return self.states.shape[1]


@dataclass(frozen=True)
class EnsembleStats:
    """Mean vector and deviation matrix of an ensemble.

    The deviations have (numerically) zero row sums, and
    mean[:, None] + deviations reconstructs the member states.
    """

    mean: np.ndarray
    deviations: np.ndarray

    @property
    def size(self) -> int:
        return self.deviations.shape[1]


def stats(ens: Ensemble) -> EnsembleStats:
    """Split an ensemble into its mean and deviation matrix."""
    mean = ens.states.mean(axis=1)
    return EnsembleStats(mean=mean, deviations=ens.states - mean[:, None])


def from_stats(mean: np.ndarray, deviations: np.ndarray) -> Ensemble:
    """Rebuild an ensemble from a mean and a deviation matrix."""
    mean = np.asarray(mean, dtype=float)
    deviations = np.asarray(deviations, dtype=float)
    if mean.shape != (deviations.shape[0],):
        raise DimensionMismatchError(
            f"mean of length {mean.shape} does not match deviations "
            f"with {deviations.shape[0]} rows"
        )
    return Ensemble(mean[:, None] + deviations)


def covariance(st: EnsembleStats) -> np.ndarray:
    """Sample covariance X' X'^T / (m - 1); dense, for small problems only."""
    return st.deviations @ st.deviations.T / (st.size - 1)


def cross_products(st: EnsembleStats, obs_op) -> tuple[np.ndarray, np.ndarray]:
    """Observation-space covariance products (H P, H P H^T).

    Both are formed from the k x m product H X', never from the dense
    covariance, so the cost is O(k m n) / O(k^2 m).

    Returns:
        hp: (k, n) matrix H P.
        hpht: (k, k) matrix H P H^T.
    """
    hdev = obs_op.apply_ensemble(st.deviations)
    denom = st.size - 1
    hp = hdev @ st.deviations.T / denom
    hpht = hdev @ hdev.T / denom
    return hp, hpht


def inflate(ens: Ensemble, delta: float) -> Ensemble:
    """Scale deviations by delta >= 1 about the (unchanged) mean."""
    if delta < 1.0:
        raise ValidationError(f"inflation factor must be >= 1, got {delta}")
    if delta == 1.0:
        return ens
    st = stats(ens)
    return from_stats(st.mean, delta * st.deviations)
