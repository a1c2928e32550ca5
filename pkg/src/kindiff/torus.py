"""Geometry of the flat torus / SO(2) product.

Angles in [-pi, pi) are the canonical internal representation; fractional
coordinates in [0, 1) are the I/O view used by datasets and the score
network.  The group update of a coordinate by a Lie-algebra velocity
reduces to a translation followed by a wrap, so no rotation matrices are
materialized outside of the equivalence tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi


def _require_finite(x: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} must be finite")


def wrap_unit(x):
    """Wrap real values into the fundamental domain [0, 1)."""
    x = np.asarray(x, dtype=float)
    _require_finite(x, "x")
    out = x - np.floor(x)
    # floor(x) can round such that x - floor(x) == 1.0 for tiny negatives
    out = np.where(out >= 1.0, out - 1.0, out)
    return out[()] if out.ndim == 0 else out


def wrap_angle(theta):
    """Wrap real values (radians) into [-pi, pi)."""
    theta = np.asarray(theta, dtype=float)
    _require_finite(theta, "theta")
    out = np.mod(theta + np.pi, TWO_PI) - np.pi
    out = np.where(out >= np.pi, out - TWO_PI, out)
    return out[()] if out.ndim == 0 else out


def frac_to_angle(f):
    """Map a fractional coordinate in [0, 1) to an angle in [-pi, pi)."""
    f = np.asarray(f, dtype=float)
    _require_finite(f, "f")
    return wrap_angle(TWO_PI * (f - 0.5))


def angle_to_frac(theta):
    """Inverse of :func:`frac_to_angle`."""
    theta = np.asarray(theta, dtype=float)
    _require_finite(theta, "theta")
    return wrap_unit(theta / TWO_PI + 0.5)


def torus_distance(a, b):
    """Geodesic distance on the circle, in [0, pi]."""
    return np.abs(wrap_angle(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))


def rotation_update(theta, v, dt):
    """Advance an angle by velocity v over time dt: wrap(theta + v*dt).

    Equals extracting the angle of R(theta) @ expm(skew(v*dt)); the matrix
    route lives only in the tests.
    """
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    _require_finite(theta, "theta")
    _require_finite(v, "v")
    if not np.isfinite(dt):
        raise ValueError("dt must be finite")
    return wrap_angle(theta + v * dt)


@dataclass(frozen=True)
class FrechetResult:
    """Karcher mean on the circle.

    mean:   global minimizer of the summed squared geodesic distance
    cost:   value of the objective at `mean`
    unique: False when a second, distinct minimizer ties within tolerance
    """

    mean: float
    cost: float
    unique: bool


def _frechet_candidates(theta: np.ndarray, weights: np.ndarray):
    """All local minimizers of the circular Frechet objective.

    The objective is piecewise quadratic in the candidate mean; each piece
    corresponds to a cyclic branch cut between consecutive sorted points,
    and the minimizer of a piece is the weighted arithmetic mean of the
    points unwrapped across that cut.  Enumerating every cut is exact.
    """
    order = np.argsort(theta, kind="stable")
    ts = theta[order]
    ws = weights[order]
    wsum = ws.sum()
    n = ts.size

    cands = np.empty(n)
    for c in range(n):
        lifted = ts.copy()
        lifted[: c + 1] += TWO_PI  # points up to the cut move one turn up
        cands[c] = wrap_angle(float(np.dot(ws, lifted) / wsum))
    # evaluate each candidate with true geodesic distances
    d = torus_distance(cands[:, None], theta[None, :])
    costs = (d * d) @ weights
    return cands, costs


def frechet_mean(points, weights=None, cost_tol: float = 1e-9,
                 angle_tol: float = 1e-7) -> FrechetResult:
    """Frechet (Karcher) mean of angles on the circle.

    Exact branch-enumeration solver: evaluates the weighted arithmetic mean
    of every branch assignment and returns the one with minimal geodesic
    cost.  `unique` is False when a distinct candidate (separated by more
    than `angle_tol`) comes within `cost_tol` of the optimum.
    """
    theta = np.atleast_1d(np.asarray(points, dtype=float))
    if theta.ndim != 1 or theta.size == 0:
        raise ValueError("points must be a non-empty 1-d collection of angles")
    _require_finite(theta, "points")
    theta = wrap_angle(theta)
    if weights is None:
        w = np.ones(theta.size)
    else:
        w = np.atleast_1d(np.asarray(weights, dtype=float))
        if w.shape != theta.shape:
            raise ValueError("weights must match points in shape")
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be nonnegative with positive sum")

    cands, costs = _frechet_candidates(theta, w)
    best = int(np.argmin(costs))
    best_cost = float(costs[best])
    best_mean = float(cands[best])

    tied = np.flatnonzero(costs <= best_cost + cost_tol)
    unique = True
    for idx in tied:
        if idx == best:
            continue
        if torus_distance(cands[idx], best_mean) > angle_tol:
            unique = False
            break
    return FrechetResult(mean=best_mean, cost=best_cost, unique=unique)
