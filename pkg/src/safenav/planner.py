"""Learned local planner: path encoder, obstacle-grid encoder and decoder,
plus Dubins reference-trajectory generation and a non-learned fallback.

The network predicts the next target pose from the start-to-goal Dubins
sketch, a rasterized obstacle grid, the goal, and the pose history; a
fresh Dubins curve from the current pose to that target becomes the
controller's reference. All forward passes are pure float64 numpy so an
externally trained weight file reproduces bit-comparable outputs.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dynamics import State
from .geometry import (Circle, Pose2D, dubins_point_at, dubins_sample,
                       dubins_shortest, normalize_angle)

# Architecture table. These dimensions are restated in
# shared/model_arch.json at the repository root; the trainer and the test
# suites of both components check against that single file.
GRID_SIZE = 50
CELL_SIZE = 1.0
REF_INPUT = 3
HIDDEN = 64
Z_DIM = 32
CONV_CHANNELS = (1, 8, 16)
FLAT_DIM = 16 * 12 * 12  # two conv/pool stages: 50 -> 25 -> 12
FC_INIT_IN = HIDDEN + Z_DIM + 3
NORM_XY = 50.0
NORM_THETA = math.pi
SAMPLE_DS = 0.5
ENC_SEQ_CAP = 256
HIST_CAP = 512
N_PRED = 10
BN_EPS = 1e-5
TURN_RADIUS = 2.0 / math.tan(0.5)  # bicycle wheelbase / tan(max steer)
FORMAT_VERSION = 1

TENSOR_SHAPES = {
    "ref_encoder.W_ih": (4 * HIDDEN, REF_INPUT),
    "ref_encoder.W_hh": (4 * HIDDEN, HIDDEN),
    "ref_encoder.b_ih": (4 * HIDDEN,),
    "ref_encoder.b_hh": (4 * HIDDEN,),
    "obs.conv1.W": (CONV_CHANNELS[1], CONV_CHANNELS[0], 3, 3),
    "obs.conv1.b": (CONV_CHANNELS[1],),
    "obs.bn1.mean": (CONV_CHANNELS[1],),
    "obs.bn1.var": (CONV_CHANNELS[1],),
    "obs.bn1.scale": (CONV_CHANNELS[1],),
    "obs.bn1.shift": (CONV_CHANNELS[1],),
    "obs.conv2.W": (CONV_CHANNELS[2], CONV_CHANNELS[1], 3, 3),
    "obs.conv2.b": (CONV_CHANNELS[2],),
    "obs.bn2.mean": (CONV_CHANNELS[2],),
    "obs.bn2.var": (CONV_CHANNELS[2],),
    "obs.bn2.scale": (CONV_CHANNELS[2],),
    "obs.bn2.shift": (CONV_CHANNELS[2],),
    "obs.fc_z.W": (Z_DIM, FLAT_DIM),
    "obs.fc_z.b": (Z_DIM,),
    "dec.fc_init.W": (HIDDEN, FC_INIT_IN),
    "dec.fc_init.b": (HIDDEN,),
    "dec.W_ih": (4 * HIDDEN, REF_INPUT),
    "dec.W_hh": (4 * HIDDEN, HIDDEN),
    "dec.b_ih": (4 * HIDDEN,),
    "dec.b_hh": (4 * HIDDEN,),
    "dec.fc_out.W": (3, HIDDEN),
    "dec.fc_out.b": (3,),
}


def arch_table() -> dict:
    """All pinned dimensions and constants, in the weights-file layout."""
    return {
        "grid_size": GRID_SIZE,
        "cell_size": CELL_SIZE,
        "ref_input": REF_INPUT,
        "hidden": HIDDEN,
        "z_dim": Z_DIM,
        "conv_channels": list(CONV_CHANNELS),
        "flat_dim": FLAT_DIM,
        "fc_init_in": FC_INIT_IN,
        "norm_xy": NORM_XY,
        "norm_theta": NORM_THETA,
        "sample_ds": SAMPLE_DS,
        "enc_seq_cap": ENC_SEQ_CAP,
        "hist_cap": HIST_CAP,
        "n_pred": N_PRED,
        "bn_eps": BN_EPS,
        "turn_radius": TURN_RADIUS,
        "tensors": {k: list(v) for k, v in TENSOR_SHAPES.items()},
    }


class WeightsError(ValueError):
    """Malformed or inconsistent weights file."""


@dataclass
class ModelWeights:
    tensors: dict[str, np.ndarray]
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        for name, shape in TENSOR_SHAPES.items():
            if name not in self.tensors:
                raise WeightsError(f"{name}: missing tensor")
            arr = np.asarray(self.tensors[name], dtype=float)
            if arr.shape != shape:
                raise WeightsError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.isfinite(arr).all():
                raise WeightsError(f"{name}: non-finite values")
            self.tensors[name] = arr
        for bn in ("obs.bn1.var", "obs.bn2.var"):
            if np.any(self.tensors[bn] <= 0):
                raise WeightsError(f"{bn}: variances must be positive")
        extra = set(self.tensors) - set(TENSOR_SHAPES)
        if extra:
            raise WeightsError(f"unknown tensors: {sorted(extra)}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def load_weights(data: bytes | str) -> ModelWeights:
    """Parse a weights file (JSON text) and validate every tensor."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as exc:
        raise WeightsError(f"not valid JSON: {exc}") from exc
    version = obj.get("format_version")
    if version != FORMAT_VERSION:
        raise WeightsError(f"unknown format_version {version!r}")
    raw = obj.get("tensors")
    if not isinstance(raw, dict):
        raise WeightsError("missing tensors object")
    tensors = {}
    for name, entry in raw.items():
        if name not in TENSOR_SHAPES:
            raise WeightsError(f"{name}: unknown tensor")
        shape = tuple(entry.get("shape", ()))
        if shape != TENSOR_SHAPES[name]:
            raise WeightsError(f"{name}: expected shape {TENSOR_SHAPES[name]}, got {shape}")
        arr = np.asarray(entry.get("data"), dtype=float)
        if arr.size != int(np.prod(shape)):
            raise WeightsError(f"{name}: data length {arr.size} does not match shape")
        tensors[name] = arr.reshape(shape)
    return ModelWeights(tensors=tensors, format_version=version)


def read_weights(path) -> ModelWeights:
    with open(path, "rb") as f:
        return load_weights(f.read())


def save_weights(weights: ModelWeights, path) -> None:
    # json emits shortest round-trip float form, i.e. >= 9 significant digits
    obj = {
        "format_version": weights.format_version,
        "arch": arch_table(),
        "tensors": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in weights.tensors.items()
        },
    }
    with open(path, "w") as f:
        json.dump(obj, f)


@dataclass
class GridMap:
    cells: np.ndarray            # (GRID_SIZE, GRID_SIZE), values in {0, 1}
    origin: tuple[float, float] = (0.0, 0.0)
    cell_size: float = CELL_SIZE


def rasterize(obstacles: Sequence[Circle], grid_size: int = GRID_SIZE,
              cell_size: float = CELL_SIZE) -> GridMap:
    """Occupancy grid over the workspace; cell (i, j) covers center
    (i + 0.5, j + 0.5) and is set when that center lies in some disk."""
    cells = np.zeros((grid_size, grid_size), dtype=np.uint8)
    if obstacles:
        idx = (np.arange(grid_size) + 0.5) * cell_size
        cx, cy = np.meshgrid(idx, idx, indexing="ij")
        for c in obstacles:
            dx = cx - c.center[0]
            dy = cy - c.center[1]
            cells |= (dx * dx + dy * dy <= c.radius ** 2).astype(np.uint8)
    return GridMap(cells=cells)


def lstm_cell(x_in: np.ndarray, h: np.ndarray, c: np.ndarray,
              W_ih: np.ndarray, W_hh: np.ndarray,
              b_ih: np.ndarray, b_hh: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM step; gate order along the stacked dimension is i, f, g, o."""
    n = W_hh.shape[1]
    if x_in.shape != (W_ih.shape[1],) or h.shape != (n,) or c.shape != (n,):
        raise WeightsError("lstm dimension mismatch")
    gates = W_ih @ x_in + b_ih + W_hh @ h + b_hh
    i = _sigmoid(gates[:n])
    f = _sigmoid(gates[n: 2 * n])
    g = np.tanh(gates[2 * n: 3 * n])
    o = _sigmoid(gates[3 * n:])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def cdm_forward(x: np.ndarray, conv_w: np.ndarray, conv_b: np.ndarray,
                bn_mean: np.ndarray, bn_var: np.ndarray,
                bn_scale: np.ndarray, bn_shift: np.ndarray) -> np.ndarray:
    """Conv 3x3 (stride 1, zero pad 1) -> batch-norm inference transform ->
    ReLU -> 2x2 max pool (stride 2, floor)."""
    if x.ndim != 3 or x.shape[0] != conv_w.shape[1] or x.shape[1] < 2 or x.shape[2] < 2:
        raise WeightsError("cdm input shape mismatch")
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3), axis=(1, 2))
    out = np.einsum("chwij,kcij->khw", win, conv_w) + conv_b[:, None, None]
    out = (out - bn_mean[:, None, None]) / np.sqrt(bn_var[:, None, None] + BN_EPS)
    out = out * bn_scale[:, None, None] + bn_shift[:, None, None]
    out = np.maximum(out, 0.0)
    hh = (out.shape[1] // 2) * 2
    ww = (out.shape[2] // 2) * 2
    out = out[:, :hh, :ww]
    out = out.reshape(out.shape[0], hh // 2, 2, ww // 2, 2).max(axis=(2, 4))
    return out


def _normalize_pose(x: float, y: float, theta: float) -> np.ndarray:
    return np.array([x / NORM_XY, y / NORM_XY, theta / NORM_THETA])


def subsample_indices(n: int, cap: int) -> np.ndarray:
    """Uniform index subsample, pinned to integer arithmetic so any other
    implementation reproduces it exactly: idx_k = floor(k*(n-1)/(cap-1))."""
    if n <= cap:
        return np.arange(n)
    k = np.arange(cap)
    return (k * (n - 1)) // (cap - 1)


def encode_reference(q0: Pose2D, goal: Pose2D, weights: ModelWeights) -> np.ndarray:
    """Final hidden state after consuming the normalized start-to-goal
    Dubins samples (ds = SAMPLE_DS, at most ENC_SEQ_CAP points)."""
    path = dubins_shortest(q0, goal, TURN_RADIUS)
    samples = dubins_sample(path, SAMPLE_DS)
    idx = subsample_indices(len(samples), ENC_SEQ_CAP)
    h = np.zeros(HIDDEN)
    c = np.zeros(HIDDEN)
    W_ih, W_hh = weights["ref_encoder.W_ih"], weights["ref_encoder.W_hh"]
    b_ih, b_hh = weights["ref_encoder.b_ih"], weights["ref_encoder.b_hh"]
    for i in idx:
        p = samples[int(i)]
        h, c = lstm_cell(_normalize_pose(p.x, p.y, p.theta), h, c, W_ih, W_hh, b_ih, b_hh)
    return h


def encode_obstacles(grid: GridMap, weights: ModelWeights) -> np.ndarray:
    """Two conv/pool stages, flatten, and the linear compression to Z."""
    x = grid.cells.astype(float)[None, :, :]
    x = cdm_forward(x, weights["obs.conv1.W"], weights["obs.conv1.b"],
                    weights["obs.bn1.mean"], weights["obs.bn1.var"],
                    weights["obs.bn1.scale"], weights["obs.bn1.shift"])
    x = cdm_forward(x, weights["obs.conv2.W"], weights["obs.conv2.b"],
                    weights["obs.bn2.mean"], weights["obs.bn2.var"],
                    weights["obs.bn2.scale"], weights["obs.bn2.shift"])
    flat = x.ravel()
    return weights["obs.fc_z.W"] @ flat + weights["obs.fc_z.b"]


def decode_next_target(H: np.ndarray, Z: np.ndarray, goal: Pose2D,
                       history: Sequence[Pose2D], weights: ModelWeights) -> Pose2D:
    """Run the decoder over the pose history and denormalize its output."""
    if len(history) == 0:
        raise ValueError("history must contain at least the start pose")
    init_in = np.concatenate([H, Z, _normalize_pose(goal.x, goal.y, goal.theta)])
    h = weights["dec.fc_init.W"] @ init_in + weights["dec.fc_init.b"]
    c = np.zeros(HIDDEN)
    W_ih, W_hh = weights["dec.W_ih"], weights["dec.W_hh"]
    b_ih, b_hh = weights["dec.b_ih"], weights["dec.b_hh"]
    idx = subsample_indices(len(history), HIST_CAP)
    for i in idx:
        p = history[int(i)]
        h, c = lstm_cell(_normalize_pose(p.x, p.y, p.theta), h, c, W_ih, W_hh, b_ih, b_hh)
    out = weights["dec.fc_out.W"] @ h + weights["dec.fc_out.b"]
    return Pose2D(out[0] * NORM_XY, out[1] * NORM_XY, normalize_angle(out[2] * NORM_THETA))


@dataclass
class RefTraj:
    states: list[State]


@dataclass(frozen=True)
class PlannerConfig:
    v_ref: float = 2.0
    dt: float = 0.1
    horizon: int = 11
    turn_radius: float = TURN_RADIUS


def plan_reference(x_t: State, target: Pose2D, cfg: PlannerConfig,
                   stop_at_target: bool = False) -> RefTraj:
    """Sample the current-pose-to-target Dubins curve at v_ref * dt spacing
    into exactly horizon+1 reference states; the final pose is held when
    the curve is shorter than the horizon."""
    start = Pose2D(x_t.x, x_t.y, x_t.theta)
    path = dubins_shortest(start, target, cfg.turn_radius)
    spacing = cfg.v_ref * cfg.dt
    total = path.length
    states = []
    for k in range(cfg.horizon + 1):
        p = dubins_point_at(path, k * spacing) if total > 0.0 else start
        v = 0.0 if (stop_at_target and k * spacing >= total) else cfg.v_ref
        states.append(State(p.x, p.y, v, p.theta))
    return RefTraj(states=states)


def fallback_plan(x_t: State, goal: Pose2D, cfg: PlannerConfig) -> RefTraj:
    """Non-learned mode: reference along the Dubins curve to the goal,
    decelerating to rest at it.

    The goal is re-targeted at the line-of-sight bearing instead of its
    stored heading: episode success is judged on position only, and
    chasing an arbitrary arrival heading under the minimum turn radius
    makes the replanned curve loop near the goal instead of terminating.
    """
    bearing = math.atan2(goal.y - x_t.y, goal.x - x_t.x)
    target = Pose2D(goal.x, goal.y, bearing)
    return plan_reference(x_t, target, cfg, stop_at_target=True)


class NeuralPlanner:
    """Per-episode wrapper: the two encoders run once, the decoder and the
    reference generation run every control step."""

    def __init__(self, weights: ModelWeights, cfg: PlannerConfig):
        self.weights = weights
        self.cfg = cfg
        self.H = None
        self.Z = None
        self.goal = None

    def start_episode(self, start: Pose2D, goal: Pose2D, obstacles: Sequence[Circle]):
        self.goal = goal
        self.H = encode_reference(start, goal, self.weights)
        self.Z = encode_obstacles(rasterize(obstacles), self.weights)

    def plan(self, x_t: State, history: Sequence[Pose2D]) -> tuple[RefTraj, Pose2D]:
        target = decode_next_target(self.H, self.Z, self.goal, history, self.weights)
        return plan_reference(x_t, target, self.cfg), target


class FallbackPlanner:
    def __init__(self, cfg: PlannerConfig):
        self.cfg = cfg
        self.goal = None

    def start_episode(self, start: Pose2D, goal: Pose2D, obstacles: Sequence[Circle]):
        self.goal = goal

    def plan(self, x_t: State, history: Sequence[Pose2D]) -> tuple[RefTraj, Pose2D]:
        return fallback_plan(x_t, self.goal, self.cfg), self.goal
