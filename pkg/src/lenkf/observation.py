"""Observation operators, error models, and synthetic-observation generation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .ensemble import Ensemble
from .errors import DimensionMismatchError, ValidationError


class LinearObservation:
    """Linear observation operator H, either a row selection or a dense matrix.

    Selection operators pick k distinct state components; dense operators
    apply an arbitrary k x n matrix.
    """

    def __init__(self, *, indices=None, matrix=None, n=None):
        if (indices is None) == (matrix is None):
            raise ValidationError("specify exactly one of indices or matrix")
        if indices is not None:
            indices = np.asarray(indices, dtype=int)
            if indices.ndim != 1 or indices.size == 0:
                raise ValidationError("selection indices must be a nonempty 1-d list")
            if n is None:
                raise ValidationError("selection operators need the state dimension n")
            if np.unique(indices).size != indices.size:
                raise ValidationError("selection indices must be distinct")
            if indices.min() < 0 or indices.max() >= n:
                raise ValidationError(f"selection indices must lie in [0, {n})")
            self.indices = indices
            self.matrix = None
            self._n = int(n)
        else:
            matrix = np.asarray(matrix, dtype=float)
            if matrix.ndim != 2:
                raise DimensionMismatchError("dense operator must be a 2-d matrix")
            if __debug__ and min(matrix.shape) > 0:
                # full row rank expected of a sensible operator; debug-only check
                svals = np.linalg.svd(matrix, compute_uv=False)
                if matrix.shape[0] > matrix.shape[1] or svals[-1] <= 1e-10:
                    raise ValidationError("dense observation operator is row rank deficient")
            self.indices = None
            self.matrix = matrix
            self._n = matrix.shape[1]

    @classmethod
    def selection(cls, indices, n: int) -> "LinearObservation":
        return cls(indices=indices, n=n)

    @classmethod
    def dense(cls, matrix) -> "LinearObservation":
        return cls(matrix=matrix)

    @property
    def k(self) -> int:
        return len(self.indices) if self.indices is not None else self.matrix.shape[0]

    @property
    def n(self) -> int:
        return self._n

    @property
    def is_selection(self) -> bool:
        return self.indices is not None

    def as_matrix(self) -> np.ndarray:
        """The operator as a dense k x n matrix."""
        if self.matrix is not None:
            return self.matrix
        h = np.zeros((self.k, self.n))
        h[np.arange(self.k), self.indices] = 1.0
        return h

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Map a state vector to observation space."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise DimensionMismatchError(
                f"state of shape {x.shape} does not match operator with n={self.n}"
            )
        return x[self.indices] if self.is_selection else self.matrix @ x

    def apply_ensemble(self, states) -> np.ndarray:
        """Map every column of an (n, q) matrix or Ensemble to observation space."""
        if isinstance(states, Ensemble):
            states = states.states
        states = np.asarray(states, dtype=float)
        if states.ndim != 2 or states.shape[0] != self.n:
            raise DimensionMismatchError(
                f"states of shape {states.shape} do not match operator with n={self.n}"
            )
        return states[self.indices, :] if self.is_selection else self.matrix @ states

    def apply_row(self, o: int, x: np.ndarray):
        """Apply row o of the operator to a vector or to matrix columns."""
        if self.is_selection:
            return x[self.indices[o]]
        return self.matrix[o] @ x


class ObsError:
    """Observation-error covariance R, diagonal or full SPD.

    Full matrices are Cholesky-factored at construction; a failure there
    is a validation error, never an apply-time one.
    """

    def __init__(self, *, variances=None, matrix=None):
        if (variances is None) == (matrix is None):
            raise ValidationError("specify exactly one of variances or matrix")
        if variances is not None:
            variances = np.asarray(variances, dtype=float)
            if variances.ndim != 1 or np.any(variances <= 0):
                raise ValidationError("variances must be a 1-d vector of positives")
            self.variances = variances
            self.matrix = None
            self._chol = None
        else:
            matrix = np.asarray(matrix, dtype=float)
            if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
                raise DimensionMismatchError("R must be a square matrix")
            if not np.allclose(matrix, matrix.T, rtol=1e-12, atol=0):
                raise ValidationError("R must be symmetric")
            try:
                self._chol = scipy.linalg.cholesky(matrix, lower=True)
            except scipy.linalg.LinAlgError as exc:
                raise ValidationError("R is not positive definite") from exc
            self.variances = None
            self.matrix = matrix

    @classmethod
    def diagonal(cls, variances) -> "ObsError":
        return cls(variances=variances)

    @classmethod
    def full(cls, matrix) -> "ObsError":
        return cls(matrix=matrix)

    @property
    def k(self) -> int:
        return len(self.variances) if self.variances is not None else self.matrix.shape[0]

    @property
    def is_diagonal(self) -> bool:
        return self.variances is not None

    def as_matrix(self) -> np.ndarray:
        return np.diag(self.variances) if self.is_diagonal else self.matrix

    def precision_apply(self, v: np.ndarray) -> np.ndarray:
        """R^{-1} v for a k-vector or a matrix with k rows."""
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.k:
            raise DimensionMismatchError(
                f"vector of shape {v.shape} does not match R with k={self.k}"
            )
        if self.is_diagonal:
            return v / self.variances if v.ndim == 1 else v / self.variances[:, None]
        return scipy.linalg.cho_solve((self._chol, True), v)

    def sqrt_apply(self, xi: np.ndarray) -> np.ndarray:
        """R^{1/2} xi, used to color standard-normal noise."""
        xi = np.asarray(xi, dtype=float)
        if self.is_diagonal:
            root = np.sqrt(self.variances)
            return root * xi if xi.ndim == 1 else root[:, None] * xi
        return self._chol @ xi


@dataclass(frozen=True)
class ObservationBatch:
    """One observation vector with the analysis-cycle index it belongs to."""

    y: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim != 1:
            raise ValidationError(f"observation vector must be 1-d, got shape {y.shape}")
        if not np.isfinite(y).all():
            raise ValidationError("observation vector contains non-finite entries")
        object.__setattr__(self, "y", y)


@dataclass(frozen=True)
class NonlinearObservation:
    """Nonlinear operator h with its Jacobian, for the gradient-flow filters."""

    func: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    k: int


def synthesize(
    obs_op: LinearObservation,
    obs_err: ObsError,
    truth: np.ndarray,
    rng: np.random.Generator,
    time_index: int = 0,
) -> ObservationBatch:
    """Draw y = H truth + R^{1/2} xi with xi standard normal.

    Reproducible for a fixed generator state.
    """
    noise = obs_err.sqrt_apply(rng.standard_normal(obs_op.k))
    return ObservationBatch(y=obs_op.apply(truth) + noise, time_index=time_index)
