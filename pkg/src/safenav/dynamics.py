"""Discrete-time kinematic bicycle model and rollouts."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .geometry import normalize_angle


@dataclass(frozen=True)
class State:
    """Rear-axle state [x, y, v, theta]."""

    x: float
    y: float
    v: float
    theta: float

    def as_tuple(self):
        return (self.x, self.y, self.v, self.theta)


@dataclass(frozen=True)
class Control:
    """Input [a, delta]: acceleration and front-wheel steering angle."""

    a: float
    delta: float


@dataclass(frozen=True)
class BicycleParams:
    L: float = 2.0        # wheelbase, meters
    dt: float = 0.1       # control period, seconds (10 Hz)
    v_min: float = 0.0
    v_max: float = 4.0
    a_max: float = 2.0
    delta_max: float = 0.5

    def __post_init__(self):
        if self.L <= 0 or self.dt <= 0:
            raise ValueError("L and dt must be positive")
        if not (self.v_min <= 0.0 <= self.v_max or self.v_min == 0.0 < self.v_max):
            raise ValueError("velocity bounds must straddle or start at zero")

    @property
    def turn_radius(self) -> float:
        """Tightest kinematically reachable turn radius, L / tan(delta_max)."""
        return self.L / math.tan(self.delta_max)


def bicycle_step(s: State, u: Control, p: BicycleParams) -> State:
    """One explicit-Euler step; theta re-wrapped, v clamped to its bounds."""
    x = s.x + s.v * math.cos(s.theta) * p.dt
    y = s.y + s.v * math.sin(s.theta) * p.dt
    v = s.v + u.a * p.dt
    theta = s.theta + (s.v * math.tan(u.delta) / p.L) * p.dt
    v = min(max(v, p.v_min), p.v_max)
    return State(x, y, v, normalize_angle(theta))


def rollout(s0: State, controls, p: BicycleParams) -> list[State]:
    """Iterate bicycle_step; returns len(controls)+1 states starting at s0."""
    states = [s0]
    for u in controls:
        states.append(bicycle_step(states[-1], u, p))
    return states
