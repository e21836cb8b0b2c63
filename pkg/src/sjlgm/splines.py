"""Clamped B-spline bases for the nonlinear time effect."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplineConfig:
    """Degree ``d``, interior knots and boundary interval of a B-spline basis.

    Boundary knots are repeated ``d + 1`` times, so the basis has
    ``len(interior_knots) + d + 1`` functions.
    """

    degree: int
    interior_knots: tuple[float, ...]
    boundary: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "interior_knots", tuple(float(k) for k in self.interior_knots))
        object.__setattr__(self, "boundary", (float(self.boundary[0]), float(self.boundary[1])))
        lo, hi = self.boundary
        if int(self.degree) != self.degree or self.degree < 0:
            raise ValueError("degree must be a non-negative integer")
        object.__setattr__(self, "degree", int(self.degree))
        if not lo < hi:
            raise ValueError("boundary must satisfy min < max")
        k = np.asarray(self.interior_knots)
        if k.size and (np.any(k <= lo) or np.any(k >= hi)):
            raise ValueError("interior knots must lie strictly inside the boundary")
        if k.size > 1 and np.any(np.diff(k) <= 0):
            raise ValueError("interior knots must be strictly increasing")

    @property
    def knot_vector(self) -> np.ndarray:
        lo, hi = self.boundary
        d = self.degree
        return np.concatenate([np.full(d + 1, lo), self.interior_knots, np.full(d + 1, hi)])


def basis_dimension(c: SplineConfig) -> int:
    return len(c.interior_knots) + c.degree + 1


def evaluate_basis(c: SplineConfig, times) -> np.ndarray:
    """Evaluate every basis function at ``times`` by the Cox-de Boor recursion.

    Returns an ``(n, basis_dimension(c))`` matrix whose rows sum to one.
    Times outside the boundary interval are clamped to it.
    """
    t = np.atleast_1d(np.asarray(times, dtype=float)).ravel()
    if t.size == 0:
        raise ValueError("empty time vector")
    lo, hi = c.boundary
    outside = (t < lo) | (t > hi)
    if outside.any():
        logger.warning("clamping %d spline evaluation times to [%g, %g]", int(outside.sum()), lo, hi)
        t = np.clip(t, lo, hi)
    u = c.knot_vector
    d = c.degree
    n_int = len(u) - 1
    # Degree-0 indicators on half-open spans; the right endpoint belongs to the last non-empty span.
    B = ((u[None, :-1] <= t[:, None]) & (t[:, None] < u[None, 1:])).astype(float)
    last = np.flatnonzero(u[:-1] < u[1:])[-1]
    B[t == hi, :] = 0.0
    B[t == hi, last] = 1.0
    for p in range(1, d + 1):
        m = n_int - p
        left_den = u[p: p + m] - u[:m]
        right_den = u[p + 1: p + 1 + m] - u[1: 1 + m]
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(left_den > 0, (t[:, None] - u[None, :m]) / left_den, 0.0)
            right = np.where(right_den > 0, (u[None, p + 1: p + 1 + m] - t[:, None]) / right_den, 0.0)
        B = left * B[:, :m] + right * B[:, 1: m + 1]
    return B


def default_knots(times, l: int) -> tuple[float, ...]:
    """Interior knots at the ``j/(l+1)`` quantiles of the observed times."""
    if l < 0:
        raise ValueError("l must be non-negative")
    t = np.asarray(times, dtype=float)
    if l == 0:
        return ()
    if np.unique(t).size < l + 2:
        raise ValueError(f"need at least {l + 2} distinct times for {l} interior knots")
    levels = np.arange(1, l + 1) / (l + 1)
    q = np.quantile(t, levels)
    lo, hi = t.min(), t.max()
    if q[0] <= lo or q[-1] >= hi or np.any(np.diff(q) <= 0):
        # heavy ties put quantiles on the boundary or on each other
        u = np.unique(t)
        q = np.quantile(u, levels)
        logger.info("tied times: knots placed at quantiles of the %d distinct times", u.size)
    return tuple(float(v) for v in q)


def make_config(times, degree: int = 3, nknots: int | None = None, knots=None) -> SplineConfig:
    """Config on the observed time range with explicit or quantile-placed knots."""
    t = np.asarray(times, dtype=float)
    boundary = (float(t.min()), float(t.max()))
    if knots is None:
        knots = default_knots(t, 1 if nknots is None else nknots)
    return SplineConfig(degree, tuple(knots), boundary)
