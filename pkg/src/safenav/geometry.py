"""Dubins shortest paths and convex polytope / circle primitives.

Everything here is pure and immutable after construction; the planner and
the avoidance constraints are both built on these primitives.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi

# Dubins candidate words, in tie-break order.
DUBINS_WORDS = ("LSL", "RSR", "LSR", "RSL", "RLR", "LRL")


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    r = theta % TWO_PI
    if r > math.pi:
        r -= TWO_PI
    return r


def mod2pi(theta: float) -> float:
    """Wrap an angle to [0, 2*pi)."""
    return theta % TWO_PI


@dataclass(frozen=True)
class Pose2D:
    """Planar pose; heading stored normalized to (-pi, pi]."""

    x: float
    y: float
    theta: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise ValueError("pose components must be finite")
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


def _advance(x: float, y: float, theta: float, seg: str, param: float, r: float):
    """Advance a pose along one path segment.

    Turns take `param` in radians (always >= 0), straights in meters.
    """
    if seg == "S":
        return x + param * math.cos(theta), y + param * math.sin(theta), theta
    if seg == "L":
        cx, cy = x - r * math.sin(theta), y + r * math.cos(theta)
        t2 = theta + param
        return cx + r * math.sin(t2), cy - r * math.cos(t2), t2
    if seg == "R":
        cx, cy = x + r * math.sin(theta), y - r * math.cos(theta)
        t2 = theta - param
        return cx - r * math.sin(t2), cy + r * math.cos(t2), t2
    raise ValueError(f"unknown segment type {seg!r}")


# Near-zero turn segments are clamped to zero so a degenerate arc does not
# misclassify the word (e.g. an LSL that is really a straight line).
_TURN_CLAMP = 1e-10


@dataclass(frozen=True)
class DubinsPath:
    """One curvature-bounded path: a word over {L, R, S} plus its parameters.

    segment_params holds radians for turn segments and meters for the
    straight segment.
    """

    word: str
    segment_params: tuple[float, float, float]
    r_min: float
    start: Pose2D

    def __post_init__(self):
        if self.word not in DUBINS_WORDS:
            raise ValueError(f"unknown Dubins word {self.word!r}")
        if self.r_min <= 0:
            raise ValueError("r_min must be positive")
        clamped = tuple(
            0.0 if (seg != "S" and p < _TURN_CLAMP) else p
            for seg, p in zip(self.word, self.segment_params)
        )
        object.__setattr__(self, "segment_params", clamped)

    @property
    def length(self) -> float:
        total = 0.0
        for seg, p in zip(self.word, self.segment_params):
            total += p if seg == "S" else p * self.r_min
        return total

    def segment_lengths(self) -> tuple[float, float, float]:
        return tuple(
            p if seg == "S" else p * self.r_min
            for seg, p in zip(self.word, self.segment_params)
        )

    def end(self) -> Pose2D:
        x, y, th = self.start.x, self.start.y, self.start.theta
        for seg, p in zip(self.word, self.segment_params):
            x, y, th = _advance(x, y, th, seg, p, self.r_min)
        return Pose2D(x, y, th)


def _lsl(alpha, beta, d):
    sa, ca, sb, cb = math.sin(alpha), math.cos(alpha), math.sin(beta), math.cos(beta)
    p_sq = 2.0 + d * d - 2.0 * math.cos(alpha - beta) + 2.0 * d * (sa - sb)
    if p_sq < 0.0:
        return None
    tmp = math.atan2(cb - ca, d + sa - sb)
    return mod2pi(-alpha + tmp), math.sqrt(p_sq), mod2pi(beta - tmp)


def _rsr(alpha, beta, d):
    sa, ca, sb, cb = math.sin(alpha), math.cos(alpha), math.sin(beta), math.cos(beta)
    p_sq = 2.0 + d * d - 2.0 * math.cos(alpha - beta) + 2.0 * d * (sb - sa)
    if p_sq < 0.0:
        return None
    tmp = math.atan2(ca - cb, d - sa + sb)
    return mod2pi(alpha - tmp), math.sqrt(p_sq), mod2pi(-beta + tmp)


def _lsr(alpha, beta, d):
    sa, ca, sb, cb = math.sin(alpha), math.cos(alpha), math.sin(beta), math.cos(beta)
    p_sq = -2.0 + d * d + 2.0 * math.cos(alpha - beta) + 2.0 * d * (sa + sb)
    if p_sq < 0.0:
        return None
    p = math.sqrt(p_sq)
    tmp = math.atan2(-ca - cb, d + sa + sb) - math.atan2(-2.0, p)
    return mod2pi(-alpha + tmp), p, mod2pi(-beta + tmp)


def _rsl(alpha, beta, d):
    sa, ca, sb, cb = math.sin(alpha), math.cos(alpha), math.sin(beta), math.cos(beta)
    p_sq = -2.0 + d * d + 2.0 * math.cos(alpha - beta) - 2.0 * d * (sa + sb)
    if p_sq < 0.0:
        return None
    p = math.sqrt(p_sq)
    tmp = math.atan2(ca + cb, d - sa - sb) - math.atan2(2.0, p)
    return mod2pi(alpha - tmp), p, mod2pi(beta - tmp)


def _rlr(alpha, beta, d):
    sa, ca, sb, cb = math.sin(alpha), math.cos(alpha), math.sin(beta), math.cos(beta)
    tmp = (6.0 - d * d + 2.0 * math.cos(alpha - beta) + 2.0 * d * (sa - sb)) / 8.0
    if abs(tmp) > 1.0:
        return None
    p = mod2pi(TWO_PI - math.acos(tmp))
    t = mod2pi(alpha - math.atan2(ca - cb, d - sa + sb) + p / 2.0)
    return t, p, mod2pi(alpha - beta - t + p)


def _lrl(alpha, beta, d):
    sa, ca, sb, cb = math.sin(alpha), math.cos(alpha), math.sin(beta), math.cos(beta)
    tmp = (6.0 - d * d + 2.0 * math.cos(alpha - beta) + 2.0 * d * (sb - sa)) / 8.0
    if abs(tmp) > 1.0:
        return None
    p = mod2pi(TWO_PI - math.acos(tmp))
    t = mod2pi(-alpha + math.atan2(-ca + cb, d + sa - sb) + p / 2.0)
    return t, p, mod2pi(beta - alpha - t + p)


_WORD_FNS = {"LSL": _lsl, "RSR": _rsr, "LSR": _lsr, "RSL": _rsl, "RLR": _rlr, "LRL": _lrl}

_ENDPOINT_TOL = 1e-9


def _endpoint_matches(path: DubinsPath, goal: Pose2D) -> bool:
    end = path.end()
    dth = abs(normalize_angle(end.theta - goal.theta))
    return (
        abs(end.x - goal.x) <= _ENDPOINT_TOL * max(1.0, abs(goal.x))
        and abs(end.y - goal.y) <= _ENDPOINT_TOL * max(1.0, abs(goal.y))
        and dth <= 1e-9
    )


def dubins_word_candidate(q0: Pose2D, q1: Pose2D, r_min: float, word: str) -> DubinsPath | None:
    """Solve one Dubins word; None when that word admits no solution."""
    dx, dy = q1.x - q0.x, q1.y - q0.y
    big_d = math.hypot(dx, dy)
    d = big_d / r_min
    phi = math.atan2(dy, dx) if big_d > 0.0 else 0.0
    alpha = mod2pi(q0.theta - phi)
    beta = mod2pi(q1.theta - phi)
    res = _WORD_FNS[word](alpha, beta, d)
    if res is None:
        return None
    t, p, q = res
    if word[1] == "S":
        params = (t, p * r_min, q)
    else:
        params = (t, p, q)
    path = DubinsPath(word=word, segment_params=params, r_min=r_min, start=q0)
    # Reject numerically inconsistent solutions rather than return a path
    # that does not actually land on the goal pose.
    if not _endpoint_matches(path, q1):
        return None
    return path


def dubins_shortest(q0: Pose2D, q1: Pose2D, r_min: float) -> DubinsPath:
    """Minimum-length path over all six words; ties go to the earlier word."""
    if r_min <= 0:
        raise ValueError("r_min must be positive")
    best = None
    for word in DUBINS_WORDS:
        cand = dubins_word_candidate(q0, q1, r_min, word)
        if cand is not None and (best is None or cand.length < best.length):
            best = cand
    if best is None:  # every pose pair admits at least one word
        raise RuntimeError("no Dubins word produced a consistent path")
    return best


def dubins_point_at(path: DubinsPath, s: float) -> Pose2D:
    """Pose at arc length s along the path (s clipped to [0, length])."""
    total = path.length
    s = min(max(s, 0.0), total)
    x, y, th = path.start.x, path.start.y, path.start.theta
    for seg, p in zip(path.word, path.segment_params):
        seg_len = p if seg == "S" else p * path.r_min
        if s <= seg_len:
            param = s if seg == "S" else s / path.r_min
            x, y, th = _advance(x, y, th, seg, param, path.r_min)
            return Pose2D(x, y, th)
        x, y, th = _advance(x, y, th, seg, p, path.r_min)
        s -= seg_len
    return Pose2D(x, y, th)


def dubins_sample(path: DubinsPath, ds: float) -> list[Pose2D]:
    """Evenly spaced poses along the path, endpoints included.

    Consecutive samples are at most ds apart in arc length and headings are
    tangent to the path.
    """
    if ds <= 0:
        raise ValueError("ds must be positive")
    total = path.length
    if total == 0.0:
        return [path.start]
    n = int(math.ceil(total / ds)) + 1
    seg_lens = path.segment_lengths()
    # poses at segment starts, computed once by exact advance
    joints = [(path.start.x, path.start.y, path.start.theta)]
    for seg, p in zip(path.word, path.segment_params):
        joints.append(_advance(*joints[-1], seg, p, path.r_min))
    cum = [0.0]
    for sl in seg_lens:
        cum.append(cum[-1] + sl)

    out = [path.start]
    for k in range(1, n):
        s = total * k / (n - 1)
        if k == n - 1:
            x, y, th = joints[-1]
        else:
            i = 0
            while i < 2 and s > cum[i + 1]:
                i += 1
            local = s - cum[i]
            seg = path.word[i]
            param = local if seg == "S" else local / path.r_min
            x, y, th = _advance(*joints[i], seg, param, path.r_min)
        out.append(Pose2D(x, y, th))
    return out


@dataclass(frozen=True)
class Circle:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        cx, cy = self.center
        if not (math.isfinite(cx) and math.isfinite(cy)):
            raise ValueError("center must be finite")
        object.__setattr__(self, "center", (float(cx), float(cy)))


class InvalidObstacleError(ValueError):
    """Raised when a halfspace description is empty or unbounded."""


@dataclass
class Polytope:
    """Bounded set {y : A y <= b} with unit-norm rows of A.

    Rows are re-scaled to unit norm at construction; feasible vertices are
    enumerated once (used for bounded/nonempty validation and cached for
    the distance computations).
    """

    A: np.ndarray
    b: np.ndarray
    source: Circle | None = None
    vertices: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float).ravel()
        if A.ndim != 2 or A.shape[1] != 2 or A.shape[0] != b.shape[0]:
            raise InvalidObstacleError("A must be s x 2 with matching b")
        if A.shape[0] < 3:
            raise InvalidObstacleError("polytope needs at least 3 facets")
        if not (np.isfinite(A).all() and np.isfinite(b).all()):
            raise InvalidObstacleError("non-finite facet data")
        norms = np.linalg.norm(A, axis=1)
        if np.any(norms <= 0):
            raise InvalidObstacleError("zero facet normal")
        A = A / norms[:, None]
        b = b / norms
        # bounded iff the facet normals leave no angular gap >= pi
        angles = np.sort(np.arctan2(A[:, 1], A[:, 0]))
        gaps = np.diff(np.concatenate([angles, [angles[0] + TWO_PI]]))
        if gaps.max() >= math.pi - 1e-12:
            raise InvalidObstacleError("unbounded polytope (normals span a halfplane)")
        self.A = A
        self.b = b
        self.vertices = _feasible_vertices(A, b)
        if self.vertices.shape[0] == 0:
            raise InvalidObstacleError("empty polytope")
        self.A.flags.writeable = False
        self.b.flags.writeable = False
        self.vertices.flags.writeable = False

    @property
    def n_facets(self) -> int:
        return self.A.shape[0]


def _feasible_vertices(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    s = A.shape[0]
    verts = []
    for i in range(s):
        for j in range(i + 1, s):
            M = A[[i, j]]
            det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
            if abs(det) < 1e-12:
                continue
            v = np.linalg.solve(M, b[[i, j]])
            if np.all(A @ v <= b + 1e-9):
                verts.append(v)
    return np.array(verts) if verts else np.zeros((0, 2))


def circle_to_polytope(c: Circle, n_facets: int = 8) -> Polytope:
    """Circumscribed regular n-gon containing the disk."""
    if n_facets < 3:
        raise ValueError("n_facets must be at least 3")
    ang = TWO_PI * np.arange(n_facets) / n_facets
    A = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    b = c.radius + A @ np.asarray(c.center)
    return Polytope(A=A, b=b, source=c)


def point_in_polytope(p, P: Polytope) -> bool:
    p = np.asarray(p, dtype=float)
    return bool(np.all(P.A @ p <= P.b))
