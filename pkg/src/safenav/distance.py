"""Point-to-polytope distance: primal squared-distance QP, its dual, and
the lower-bound certificates used by the avoidance constraints.

Unit convention, used consistently by the controller: `h` carries square
meters, `g` (the dual optimum) carries meters. For a point outside the
polytope g**2 == h; inside, both are zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import InvalidObstacleError, Polytope

_FEAS_TOL = 1e-9


@dataclass(frozen=True)
class DistanceResult:
    h: float                 # squared minimum distance, m^2
    y_star: np.ndarray       # closest point inside the polytope
    g: float                 # dual optimal value = Euclidean distance, m
    lambda_star: np.ndarray  # dual multipliers, one per facet, >= 0


def primal_distance(p, P: Polytope) -> tuple[float, np.ndarray]:
    """argmin ||y - p||^2 over A y <= b, solved by active-set enumeration.

    With two variables the projection is the point itself, a facet
    projection, or a vertex; all candidates are enumerated exactly.
    """
    h, y_star, _ = _project(np.asarray(p, dtype=float), P)
    return h, y_star


def dual_distance(p, P: Polytope) -> tuple[float, np.ndarray]:
    """max (Ap - b)^T lam  s.t. ||A^T lam|| <= 1, lam >= 0.

    Recovered from the primal KKT multipliers; equals the Euclidean
    distance for exterior points and 0 (with lam = 0) inside.
    """
    p = np.asarray(p, dtype=float)
    h, _, mu = _project(p, P)
    g = float(np.sqrt(h))
    if g == 0.0:
        return 0.0, np.zeros(P.n_facets)
    return g, mu / (2.0 * g)


def distance_certificate(p, P: Polytope) -> DistanceResult:
    """Primal and dual solutions together (one projection)."""
    p = np.asarray(p, dtype=float)
    h, y_star, mu = _project(p, P)
    g = float(np.sqrt(h))
    lam = mu / (2.0 * g) if g > 0.0 else np.zeros(P.n_facets)
    return DistanceResult(h=h, y_star=y_star, g=g, lambda_star=lam)


def dual_lower_bound(p, P: Polytope, lam) -> float:
    """(Ap - b)^T lam for a dual-feasible lam; never exceeds dist(p, P)."""
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (P.n_facets,):
        raise ValueError("multiplier length must match facet count")
    if np.any(lam < -1e-12):
        raise ValueError("multipliers must be nonnegative")
    if np.linalg.norm(P.A.T @ lam) > 1.0 + 1e-9:
        raise ValueError("multipliers violate the dual norm constraint")
    return float((P.A @ p - P.b) @ lam)


def _project(p: np.ndarray, P: Polytope) -> tuple[float, np.ndarray, np.ndarray]:
    """Returns (h, y_star, mu) with mu the primal KKT multipliers:
    2 (y* - p) + A^T mu = 0, mu >= 0, complementary."""
    A, b = P.A, P.b
    s = A.shape[0]
    slack = A @ p - b
    if np.all(slack <= 0.0):
        return 0.0, p.copy(), np.zeros(s)

    best_h = np.inf
    best_y = None
    best_active = None
    # facet projections (single active constraint)
    viol = np.where(slack > 0.0)[0]
    cand = p[None, :] - slack[viol, None] * A[viol]
    feas = np.all(A @ cand.T <= b[:, None] + _FEAS_TOL, axis=0)
    for idx, ok in zip(viol, feas):
        if not ok:
            continue
        h = slack[idx] ** 2
        if h < best_h:
            best_h = h
            best_y = p - slack[idx] * A[idx]
            best_active = (int(idx),)
    # vertices (two active constraints), cached at construction
    if P.vertices.shape[0]:
        d2 = np.sum((P.vertices - p) ** 2, axis=1)
        i = int(np.argmin(d2))
        if d2[i] < best_h:
            best_h = float(d2[i])
            best_y = P.vertices[i].copy()
            act = np.where(np.abs(A @ best_y - b) <= 1e-8)[0]
            best_active = tuple(int(a) for a in act[:2]) if len(act) >= 2 else tuple(act)
    if best_y is None:
        raise InvalidObstacleError("projection failed; polytope invalid")

    mu = np.zeros(s)
    if len(best_active) == 1:
        i = best_active[0]
        mu[i] = 2.0 * max(slack[i], 0.0)
    else:
        i, j = best_active[0], best_active[1]
        M = np.stack([A[i], A[j]], axis=1)  # columns a_i, a_j
        try:
            mij = np.linalg.solve(M, 2.0 * (p - best_y))
        except np.linalg.LinAlgError:
            mij = np.linalg.lstsq(M, 2.0 * (p - best_y), rcond=None)[0]
        mu[i], mu[j] = max(mij[0], 0.0), max(mij[1], 0.0)
    return float(best_h), best_y, mu


def pg_dual_distance(p, P: Polytope, iters: int = 4000, restarts: int = 3) -> float:
    """Projected-gradient solver for the dual program.

    Independent of the KKT recovery above; kept as the test suite's
    cross-check. Feasibility is maintained by clipping to lam >= 0 and
    rescaling into the norm ball, with monotone accept.
    """
    p = np.asarray(p, dtype=float)
    c = P.A @ p - P.b
    AT = P.A.T

    def feas(lam):
        lam = np.maximum(lam, 0.0)
        nrm = np.linalg.norm(AT @ lam)
        return lam / nrm if nrm > 1.0 else lam

    best_val = 0.0
    rng = np.random.default_rng(0)
    for r in range(restarts):
        lam = np.zeros(P.n_facets) if r == 0 else feas(rng.random(P.n_facets))
        val = float(c @ lam)
        for it in range(iters):
            step = 0.5 / np.sqrt(it + 1.0)
            cand = feas(lam + step * c)
            cval = float(c @ cand)
            if cval > val:
                lam, val = cand, cval
        best_val = max(best_val, val)
    return best_val
