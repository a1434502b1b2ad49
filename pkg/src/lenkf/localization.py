"""Distance metrics, taper functions, and Schur-product taper matrices.

Localization suppresses spurious long-range sample correlations by
multiplying observation-space covariance products entrywise with
distance-based taper matrices: c1 (n x k) tapers grid-point/observation
pairs and c2 (k x k) tapers observation/observation pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, ValidationError

HALF_SUPPORT = "half_support"
FULL_SUPPORT = "full_support"


@dataclass(frozen=True)
class RingDistance:
    """Cyclic index distance min(|i - i'|, n - |i - i'|) on a ring of n points."""

    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError(f"ring period must be positive, got {self.n}")

    def pairwise(self, a, b) -> np.ndarray:
        a = np.asarray(a, dtype=float)[:, None]
        b = np.asarray(b, dtype=float)[None, :]
        d = np.abs(a - b)
        return np.minimum(d, self.n - d)


@dataclass(frozen=True)
class GridDistance:
    """Euclidean distance between points of a rows x cols grid.

    Flat indices are interpreted row-major: g -> (g // cols, g % cols).
    """

    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValidationError("grid dimensions must be positive")

    def pairwise(self, a, b) -> np.ndarray:
        a = np.asarray(a, dtype=int)
        b = np.asarray(b, dtype=int)
        ai, aj = np.divmod(a, self.cols)
        bi, bj = np.divmod(b, self.cols)
        di = ai[:, None] - bi[None, :]
        dj = aj[:, None] - bj[None, :]
        return np.hypot(di, dj)


@dataclass(frozen=True)
class TaperFunction:
    """Distance-dependent localization weight in [0, 1].

    Families:
      * ``gaspari_cohn``: the standard fifth-order piecewise-rational
        compactly supported correlation function. With the default
        ``half_support`` convention the radius is the half-support
        parameter, so the taper vanishes at distance 2 * radius;
        ``full_support`` makes it vanish at the radius itself.
      * ``gaussian``: exp(-0.5 r^2 / radius^2).
      * ``none``: constant 1 (localization disabled).
    """

    family: str
    radius: float = 0.0
    convention: str = HALF_SUPPORT

    def __post_init__(self):
        if self.family not in ("gaspari_cohn", "gaussian", "none"):
            raise ValidationError(f"unknown taper family {self.family!r}")
        if self.family != "none" and self.radius <= 0:
            raise ValidationError(f"taper radius must be positive, got {self.radius}")
        if self.convention not in (HALF_SUPPORT, FULL_SUPPORT):
            raise ValidationError(f"unknown radius convention {self.convention!r}")

    @classmethod
    def gaspari_cohn(cls, radius: float, convention: str = HALF_SUPPORT) -> "TaperFunction":
        return cls("gaspari_cohn", radius, convention)

    @classmethod
    def gaussian(cls, radius: float) -> "TaperFunction":
        return cls("gaussian", radius)

    @classmethod
    def none(cls) -> "TaperFunction":
        return cls("none")

    def __call__(self, r):
        return taper_value(self, r)


def _gaspari_cohn(z: np.ndarray) -> np.ndarray:
    """Gaspari-Cohn quintic on the normalized distance z = r / c."""
    out = np.zeros_like(z)
    near = z <= 1.0
    zn = z[near]
    out[near] = -0.25 * zn**5 + 0.5 * zn**4 + 0.625 * zn**3 - (5.0 / 3.0) * zn**2 + 1.0
    far = (z > 1.0) & (z <= 2.0)
    zf = z[far]
    out[far] = (
        zf**5 / 12.0
        - 0.5 * zf**4
        + 0.625 * zf**3
        + (5.0 / 3.0) * zf**2
        - 5.0 * zf
        + 4.0
        - 2.0 / (3.0 * zf)
    )
    return out


def taper_value(f: TaperFunction, r):
    """Evaluate the taper at distance(s) r >= 0."""
    r = np.asarray(r, dtype=float)
    scalar = r.ndim == 0
    r = np.atleast_1d(r)
    if np.any(r < 0):
        raise ValidationError("distances must be nonnegative")
    if f.family == "none":
        out = np.ones_like(r)
    elif f.family == "gaussian":
        out = np.exp(-0.5 * r**2 / f.radius**2)
    else:
        c = f.radius if f.convention == HALF_SUPPORT else 0.5 * f.radius
        out = _gaspari_cohn(r / c)
    return float(out[0]) if scalar else out


@dataclass(frozen=True)
class TaperMatrices:
    """Precomputed taper matrices for a fixed observation layout.

    c1[g, o] tapers grid point g against observation o (shape n x k);
    c2[o, o'] tapers observation pairs (shape k x k, symmetric).
    """

    c1: np.ndarray
    c2: np.ndarray

    def __post_init__(self):
        c1 = np.asarray(self.c1, dtype=float)
        c2 = np.asarray(self.c2, dtype=float)
        if c1.ndim != 2 or c2.shape != (c1.shape[1], c1.shape[1]):
            raise DimensionMismatchError(
                f"incompatible taper shapes {c1.shape} and {c2.shape}"
            )
        object.__setattr__(self, "c1", c1)
        object.__setattr__(self, "c2", c2)


def build_tapers(metric, f: TaperFunction, obs_locations, n: int) -> TaperMatrices:
    """Build the (n x k, k x k) taper matrices for observations on grid points."""
    locations = np.asarray(obs_locations, dtype=int)
    if locations.ndim != 1:
        raise ValidationError("observation locations must be a 1-d index list")
    if np.any(locations < 0) or np.any(locations >= n):
        raise ValidationError(f"observation locations must lie in [0, {n})")
    grid = np.arange(n)
    c1 = taper_value(f, metric.pairwise(grid, locations))
    c2 = taper_value(f, metric.pairwise(locations, locations))
    return TaperMatrices(c1=c1, c2=c2)


def build_state_taper(metric, f: TaperFunction, n: int) -> np.ndarray:
    """Dense n x n taper for state-space covariances (small n only)."""
    grid = np.arange(n)
    return taper_value(f, metric.pairwise(grid, grid))


def schur(c: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Entrywise (Schur) product of two same-shaped matrices."""
    c = np.asarray(c)
    y = np.asarray(y)
    if c.shape != y.shape:
        raise DimensionMismatchError(
            f"Schur product needs identical shapes, got {c.shape} and {y.shape}"
        )
    return c * y


def localize_hp(tapers: TaperMatrices | None, hp: np.ndarray) -> np.ndarray:
    """Taper a (k, n) H P product; c1 is stored (n, k) so its transpose applies."""
    if tapers is None:
        return hp
    return schur(tapers.c1.T, hp)


def localize_hpht(tapers: TaperMatrices | None, hpht: np.ndarray) -> np.ndarray:
    """Taper a (k, k) H P H^T product."""
    if tapers is None:
        return hpht
    return schur(tapers.c2, hpht)
