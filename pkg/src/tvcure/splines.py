"""B-spline bases on equidistant knots, difference penalties and recentered bases.

Bases follow the usual P-spline convention: the domain is divided into equal
segments and the knot sequence is extended ``degree`` knots beyond each
boundary, so every basis function is a shifted copy of the same bump and the
basis forms a partition of unity on the closed domain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline


@dataclass(frozen=True)
class SplineBasis:
    """A B-spline basis of ``n_basis`` functions on ``[domain_lo, domain_hi]``.

    Instances are immutable and safe to share across workers.
    """

    domain_lo: float
    domain_hi: float
    n_basis: int
    degree: int
    knots: np.ndarray

    def clamp(self, x) -> tuple[np.ndarray, int]:
        """Clip ``x`` to the basis domain, returning the clipped values and
        how many fell outside."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        outside = int(np.sum((x < self.domain_lo) | (x > self.domain_hi)))
        return np.clip(x, self.domain_lo, self.domain_hi), outside

    def eval(self, x) -> np.ndarray:
        """Evaluate all basis functions at ``x``.

        Returns an array of shape ``(len(x), n_basis)`` (or ``(n_basis,)`` for
        scalar input).  Values outside the domain are clamped to the nearest
        boundary.
        """
        scalar = np.isscalar(x) or np.ndim(x) == 0
        xc, _ = self.clamp(x)
        design = BSpline.design_matrix(
            xc, self.knots, self.degree, extrapolate=False
        ).toarray()
        return design[0] if scalar else design


@dataclass(frozen=True)
class PenaltyMatrix:
    """Roughness penalty ``D'D`` for a difference operator of a given order."""

    order: int
    dimension: int
    matrix: np.ndarray

    @property
    def rank(self) -> int:
        return self.dimension - self.order


@dataclass(frozen=True)
class CenteredBasis:
    """Spline basis recentered to have zero average over the domain.

    The raw ``base`` holds ``L + 1`` functions; centering subtracts each
    column's domain mean and the last column is dropped, leaving ``L``
    identifiable columns.  ``column_means`` keeps the means of all ``L + 1``
    raw columns so new covariate values evaluate consistently.
    """

    base: SplineBasis
    column_means: np.ndarray
    quadrature_points: int

    @property
    def n_effective(self) -> int:
        return self.base.n_basis - 1

    def eval(self, x) -> np.ndarray:
        """Evaluate the ``L`` retained centered columns at ``x``."""
        scalar = np.isscalar(x) or np.ndim(x) == 0
        design = np.atleast_2d(self.base.eval(x))
        centered = design[:, : self.n_effective] - self.column_means[: self.n_effective]
        return centered[0] if scalar else centered


def build_basis(
    domain_lo: float, domain_hi: float, n_basis: int, degree: int = 3
) -> SplineBasis:
    """Construct a B-spline basis on equidistant knots.

    Parameters
    ----------
    domain_lo, domain_hi : float
        Closed evaluation domain; ``domain_hi`` must exceed ``domain_lo``.
    n_basis : int
        Number of basis functions; must be at least ``degree + 1``.
    degree : int
        Polynomial degree of the splines (cubic by default).
    """
    if not domain_hi > domain_lo:
        raise ValueError(
            f"domain must have positive length, got [{domain_lo}, {domain_hi}]"
        )
    if n_basis < degree + 1:
        raise ValueError(f"n_basis must be >= degree + 1, got {n_basis}")
    n_segments = n_basis - degree
    dx = (domain_hi - domain_lo) / n_segments
    # interior knots via linspace so the boundary knots hit the domain ends exactly
    interior = np.linspace(domain_lo, domain_hi, n_segments + 1)
    left = domain_lo - dx * np.arange(degree, 0, -1)
    right = domain_hi + dx * np.arange(1, degree + 1)
    knots = np.concatenate([left, interior, right])
    return SplineBasis(
        domain_lo=float(domain_lo),
        domain_hi=float(domain_hi),
        n_basis=int(n_basis),
        degree=int(degree),
        knots=knots,
    )


def build_penalty(dimension: int, order: int = 2) -> PenaltyMatrix:
    """Difference penalty of the given order on ``dimension`` coefficients."""
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    if order >= dimension:
        raise ValueError(
            f"order must be smaller than dimension, got order={order}, dimension={dimension}"
        )
    diff = np.diff(np.eye(dimension), n=order, axis=0)
    return PenaltyMatrix(order=int(order), dimension=int(dimension), matrix=diff.T @ diff)


def recenter(basis: SplineBasis, quadrature_points: int = 1000) -> CenteredBasis:
    """Center every basis column to zero domain average and drop the last one.

    Column means are computed with the trapezoid rule on an equidistant grid
    of ``quadrature_points`` points over the domain.
    """
    if quadrature_points < 100:
        raise ValueError(f"quadrature_points must be >= 100, got {quadrature_points}")
    grid = np.linspace(basis.domain_lo, basis.domain_hi, quadrature_points)
    values = basis.eval(grid)
    width = basis.domain_hi - basis.domain_lo
    means = np.trapezoid(values, grid, axis=0) / width
    return CenteredBasis(
        base=basis, column_means=means, quadrature_points=int(quadrature_points)
    )
