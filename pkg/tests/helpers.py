import math

import numpy as np

from safenav.geometry import Circle, Polytope


def random_pose(rng, span=12.0):
    from safenav.geometry import Pose2D
    return Pose2D(rng.uniform(-span, span), rng.uniform(-span, span),
                  rng.uniform(-math.pi, math.pi))


def random_polytope(rng, n_min=3, n_max=8) -> Polytope:
    """Bounded nonempty polytope: facet normals at jittered sorted angles
    (largest gap < pi by construction), positive offsets from a random
    interior point."""
    s = int(rng.integers(n_min, n_max + 1))
    # jittered uniform normal fan; jitter amplitude keeps every angular gap
    # strictly below pi so the polytope stays bounded
    jitter = 0.8 * math.pi * (s - 2) / (2 * s)
    ang = (2 * math.pi * np.arange(s) / s
           + rng.uniform(-jitter, jitter, s)
           + rng.uniform(0, 2 * math.pi))
    A = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    center = rng.uniform(-8, 8, 2)
    radii = rng.uniform(0.5, 4.0, s)
    b = A @ center + radii
    return Polytope(A=A, b=b)


def polytope_interior_point(P: Polytope, rng):
    """Random convex combination of the cached vertices."""
    w = rng.random(P.vertices.shape[0])
    w /= w.sum()
    return w @ P.vertices


