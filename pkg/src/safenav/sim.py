"""Closed-loop simulation: randomized scenarios, episodes, collision
auditing, benchmark statistics, dataset export and SVG rendering.

The collision audit is independent of the controller's own margins: every
applied step is re-checked with the primal distance against the 8-gon
obstacle over-approximations, and an episode only counts as Success if
that audited distance stayed positive throughout.
"""
from __future__ import annotations

import json
import math
import multiprocessing
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from .controller import (
    BaselineDcbfController,
    ControllerConfig,
    MddController,
    StepOutcome,
)
from .distance import primal_distance
from .dynamics import BicycleParams, Control, State, bicycle_step
from .geometry import Circle, Polytope, Pose2D, circle_to_polytope
from .planner import FallbackPlanner, ModelWeights, NeuralPlanner, PlannerConfig

WORKSPACE = 50.0
CORRIDOR_HALF_WIDTH = 5.0   # obstacles near the diagonal stay within this offset
LINE_BAND = (18.0, 32.0)
MIN_CLEARANCE = 1.0         # start/goal must clear every disk by this margin
DATASET_MIN_POSES = 40


class GenerationError(RuntimeError):
    """Scenario sampling exceeded its rejection budget."""


@dataclass(frozen=True)
class Scenario:
    seed: int
    layout: str                  # 'square' | 'line'
    start: Pose2D
    goal: Pose2D
    obstacles: tuple[Circle, ...]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "layout": self.layout,
            "start": [self.start.x, self.start.y, self.start.theta],
            "goal": [self.goal.x, self.goal.y, self.goal.theta],
            "obstacles": [[c.center[0], c.center[1], c.radius] for c in self.obstacles],
        }

    @staticmethod
    def from_dict(d: dict) -> "Scenario":
        return Scenario(
            seed=int(d["seed"]),
            layout=str(d["layout"]),
            start=Pose2D(*d["start"]),
            goal=Pose2D(*d["goal"]),
            obstacles=tuple(Circle((c[0], c[1]), c[2]) for c in d["obstacles"]),
        )


def generate_scenario(seed: int, layout: str = "square") -> Scenario:
    """Deterministic-in-seed random world (PCG64 stream).

    square: start in [2,10]^2, goal in [40,48]^2, free headings; 4-6 disks
    with radii in [1,4], half uniform over the workspace and the rest in a
    corridor around the main diagonal. line: fixed start (5,25,0), goal
    (45,25) free heading, disks confined to the horizontal band y in
    [18,32]. Disks stay inside the workspace and clear both endpoint
    positions by at least MIN_CLEARANCE.
    """
    if layout not in ("square", "line"):
        raise ValueError(f"unknown layout {layout!r}")
    rng = np.random.Generator(np.random.PCG64(seed))
    if layout == "square":
        start = Pose2D(rng.uniform(2, 10), rng.uniform(2, 10), rng.uniform(-math.pi, math.pi))
        goal = Pose2D(rng.uniform(40, 48), rng.uniform(40, 48), rng.uniform(-math.pi, math.pi))
    else:
        start = Pose2D(5.0, 25.0, 0.0)
        goal = Pose2D(45.0, 25.0, rng.uniform(-math.pi, math.pi))
    count = int(rng.integers(4, 7))
    n_uniform = count // 2
    obstacles = []
    rejections = 0
    for i in range(count):
        while True:
            r = rng.uniform(1.0, 4.0)
            if layout == "line":
                cx = rng.uniform(r, WORKSPACE - r)
                cy = rng.uniform(LINE_BAND[0] + r, LINE_BAND[1] - r)
            elif i < n_uniform:
                cx = rng.uniform(r, WORKSPACE - r)
                cy = rng.uniform(r, WORKSPACE - r)
            else:
                s = rng.uniform(0.0, WORKSPACE)
                off = rng.uniform(-CORRIDOR_HALF_WIDTH, CORRIDOR_HALF_WIDTH)
                inv_sqrt2 = 1.0 / math.sqrt(2.0)
                cx = s - off * inv_sqrt2
                cy = s + off * inv_sqrt2
            ok = (r <= cx <= WORKSPACE - r) and (r <= cy <= WORKSPACE - r)
            for p in (start, goal):
                if ok and math.hypot(cx - p.x, cy - p.y) < r + MIN_CLEARANCE:
                    ok = False
            if ok:
                obstacles.append(Circle((cx, cy), r))
                break
            rejections += 1
            if rejections > 1000:
                raise GenerationError(f"seed {seed}: over-constrained scenario generation")
    return Scenario(seed=seed, layout=layout, start=start, goal=goal, obstacles=tuple(obstacles))


def check_collision(s: State, obstacles: Sequence[Polytope]) -> bool:
    """Closed-set contact test against the polytope over-approximations."""
    p = np.array([s.x, s.y])
    for P in obstacles:
        h, _ = primal_distance(p, P)
        if h <= 0.0:
            return True
    return False


@dataclass(frozen=True)
class EpisodeSettings:
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    bicycle: BicycleParams = field(default_factory=BicycleParams)
    goal_tol: float = 1.0
    max_steps: int = 600
    n_facets: int = 8
    v_ref: float = 2.0


@dataclass
class StepRecord:
    step: int
    state: tuple                 # (x, y, v, theta) before applying the control
    control: tuple               # (a, delta) applied
    reference: list              # (horizon+1) x 4 reference rows
    status: str                  # controller StepOutcome value
    planner_seconds: float
    controller_seconds: float
    min_distance: float          # audited distance to nearest polytope after the step
    eq_residual_min: float       # min decay-constraint residual at the solution
    chain_margin_min: float      # min of h(pred) - max(dual bound, 0)^2 (dual controller)
    omega_min: float
    solver_iterations: int
    target: Optional[tuple] = None


@dataclass
class EpisodeLog:
    scenario_seed: int
    layout: str
    controller: str
    planner: str
    outcome: str = "Timeout"     # Success | Collision | Timeout | SolverAbort
    steps: list = field(default_factory=list)
    final_state: Optional[tuple] = None
    solver_failures: int = 0     # steps where the fallback brake had to be applied
    min_distance: float = math.inf

    def states(self) -> list[tuple]:
        return [r.state for r in self.steps]

    def to_dict(self) -> dict:
        return {
            "scenario_seed": self.scenario_seed,
            "layout": self.layout,
            "controller": self.controller,
            "planner": self.planner,
            "outcome": self.outcome,
            "final_state": self.final_state,
            "solver_failures": self.solver_failures,
            "min_distance": self.min_distance,
            "steps": [asdict(r) for r in self.steps],
        }

    @staticmethod
    def from_dict(d: dict) -> "EpisodeLog":
        log = EpisodeLog(
            scenario_seed=d["scenario_seed"], layout=d["layout"],
            controller=d["controller"], planner=d["planner"], outcome=d["outcome"],
            final_state=tuple(d["final_state"]) if d.get("final_state") else None,
            solver_failures=d.get("solver_failures", 0),
            min_distance=d.get("min_distance", math.inf),
        )
        for r in d.get("steps", []):
            r = dict(r)
            r["state"] = tuple(r["state"])
            r["control"] = tuple(r["control"])
            if r.get("target"):
                r["target"] = tuple(r["target"])
            log.steps.append(StepRecord(**r))
        return log

    CSV_HEADER = ("step,x,y,v,theta,a,delta,status,planner_seconds,controller_seconds,"
                  "min_distance,eq_residual_min,chain_margin_min,omega_min,solver_iterations")

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.CSV_HEADER + "\n")
            for r in self.steps:
                f.write(
                    f"{r.step},{r.state[0]!r},{r.state[1]!r},{r.state[2]!r},{r.state[3]!r},"
                    f"{r.control[0]!r},{r.control[1]!r},{r.status},{r.planner_seconds!r},"
                    f"{r.controller_seconds!r},{r.min_distance!r},{r.eq_residual_min!r},"
                    f"{r.chain_margin_min!r},{r.omega_min!r},{r.solver_iterations}\n"
                )


def _make_planner(planner: str, weights: Optional[ModelWeights], settings: EpisodeSettings):
    pcfg = PlannerConfig(v_ref=settings.v_ref, dt=settings.bicycle.dt,
                         horizon=settings.controller.horizon)
    if planner == "fallback":
        return FallbackPlanner(pcfg)
    if planner == "neural":
        if weights is None:
            raise ValueError("neural planner requires weights")
        return NeuralPlanner(weights, pcfg)
    raise ValueError(f"unknown planner {planner!r}")


def run_episode(sc: Scenario, planner: str, controller: str,
                settings: EpisodeSettings | None = None,
                weights: Optional[ModelWeights] = None) -> EpisodeLog:
    """Closed loop until Success (within goal_tol of the goal position),
    Collision (audited contact), Timeout, or SolverAbort (start in contact)."""
    settings = settings or EpisodeSettings()
    cfg, params = settings.controller, settings.bicycle
    polytopes = [circle_to_polytope(c, settings.n_facets) for c in sc.obstacles]
    plan = _make_planner(planner, weights, settings)
    plan.start_episode(sc.start, sc.goal, list(sc.obstacles))
    if controller == "mdd1":
        ctrl = MddController(cfg, params)
        ctrl_obstacles = polytopes
    elif controller == "dcbf":
        ctrl = BaselineDcbfController(cfg, params)
        ctrl_obstacles = list(sc.obstacles)
    else:
        raise ValueError(f"unknown controller {controller!r}")

    log = EpisodeLog(scenario_seed=sc.seed, layout=sc.layout,
                     controller=controller, planner=planner)
    state = State(sc.start.x, sc.start.y, 0.0, sc.start.theta)
    history = [sc.start]
    for step in range(settings.max_steps):
        t0 = time.perf_counter()
        ref, target = plan.plan(state, history)
        t_plan = time.perf_counter() - t0
        t0 = time.perf_counter()
        res = ctrl.step(state, ref.states, ctrl_obstacles)
        t_ctrl = time.perf_counter() - t0

        if res.outcome is StepOutcome.INFEASIBLE_START:
            log.steps.append(_record(step, state, res, ref, t_plan, t_ctrl, 0.0,
                                     polytopes, planner, target))
            log.outcome = "SolverAbort"
            log.solver_failures += 1
            break
        if res.outcome is StepOutcome.BRAKE:
            log.solver_failures += 1

        state_next = bicycle_step(state, res.u0, params)
        dmin = _audit_distance(state_next, polytopes)
        log.min_distance = min(log.min_distance, dmin)
        log.steps.append(_record(step, state, res, ref, t_plan, t_ctrl, dmin,
                                 polytopes, planner, target))
        state = state_next
        history.append(Pose2D(state.x, state.y, state.theta))
        if dmin <= 0.0:
            log.outcome = "Collision"
            break
        if math.hypot(state.x - sc.goal.x, state.y - sc.goal.y) <= settings.goal_tol:
            log.outcome = "Success"
            break
    log.final_state = state.as_tuple()
    return log


def _audit_distance(s: State, polytopes: Sequence[Polytope]) -> float:
    p = np.array([s.x, s.y])
    best = math.inf
    for P in polytopes:
        h, _ = primal_distance(p, P)
        best = min(best, math.sqrt(h))
    return best


def _record(step, state, res, ref, t_plan, t_ctrl, dmin, polytopes, planner, target):
    eq_min = float(res.dcbf_residuals.min()) if res.dcbf_residuals.size else math.inf
    chain = math.inf
    if res.lambdas and res.outcome in (StepOutcome.OPTIMAL, StepOutcome.DEGRADED):
        chain = _chain_margin(res)
    return StepRecord(
        step=step,
        state=state.as_tuple(),
        control=(res.u0.a, res.u0.delta),
        reference=[[s.x, s.y, s.v, s.theta] for s in ref.states],
        status=res.outcome.value,
        planner_seconds=t_plan,
        controller_seconds=t_ctrl,
        min_distance=dmin,
        eq_residual_min=eq_min,
        chain_margin_min=chain,
        omega_min=float(res.omegas.min()) if res.omegas.size else math.inf,
        solver_iterations=res.solution.iterations if res.solution else 0,
        target=(target.x, target.y, target.theta) if (planner == "neural" and target) else None,
    )


def _chain_margin(res) -> float:
    """min over obstacles and horizon steps of h(pred) - max(bound, 0)^2,
    with h re-computed by the primal projection (independent audit)."""
    worst = math.inf
    ncbf = res.lambdas[0].shape[0] if res.lambdas else 0
    preds = res.predicted_states[1: ncbf + 1]
    for i, ob in enumerate(res.active.obstacles):
        lam = res.lambdas[i]
        P = ob.polytope
        for k, s in enumerate(preds):
            p = np.array([s.x, s.y])
            h, _ = primal_distance(p, P)
            lb = float((P.A @ p - P.b) @ lam[k])
            worst = min(worst, h - max(lb, 0.0) ** 2)
    return worst


@dataclass
class BenchVariant:
    name: str
    planner: str = "fallback"
    controller: str = "mdd1"
    weights: Optional[ModelWeights] = None
    settings: EpisodeSettings = field(default_factory=EpisodeSettings)


@dataclass
class BenchmarkReport:
    variant: str
    layout: str
    base_seed: int
    n: int
    success_rate: float
    mean_planner_seconds: float      # over successful episodes
    mean_controller_seconds: float
    mean_max_step_seconds: float     # mean over episodes of max single-step time
    median_planner_seconds: float
    median_controller_seconds: float
    scenarios: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


def strip_timing(obj):
    """Recursively drop keys ending in '_seconds' (the wall-clock fields)."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if not k.endswith("_seconds")}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def _episode_summary(log: EpisodeLog) -> dict:
    pl = [r.planner_seconds for r in log.steps]
    cl = [r.controller_seconds for r in log.steps]
    return {
        "seed": log.scenario_seed,
        "outcome": log.outcome,
        "steps": len(log.steps),
        "min_distance": log.min_distance if math.isfinite(log.min_distance) else None,
        "solver_failures": log.solver_failures,
        "eq_residual_min": min((r.eq_residual_min for r in log.steps), default=None),
        "chain_margin_min": min((r.chain_margin_min for r in log.steps), default=None),
        "planner_mean_seconds": float(np.mean(pl)) if pl else None,
        "controller_mean_seconds": float(np.mean(cl)) if cl else None,
        "max_step_seconds": float(max(p + c for p, c in zip(pl, cl))) if pl else None,
    }


def _episode_worker(args):
    sc_dict, planner, controller, settings, weights_tensors = args
    sc = Scenario.from_dict(sc_dict)
    weights = ModelWeights(tensors={k: np.asarray(v) for k, v in weights_tensors.items()}) \
        if weights_tensors else None
    log = run_episode(sc, planner, controller, settings, weights)
    return _episode_summary(log)


def run_benchmark(n: int, layout: str, variants: Sequence[BenchVariant],
                  base_seed: int, workers: int = 1) -> dict[str, BenchmarkReport]:
    """Identical scenario set (seeds base_seed .. base_seed+n-1) for every
    variant; timing statistics aggregate successful episodes only."""
    if n < 1:
        raise ValueError("n must be >= 1")
    scenarios = [generate_scenario(base_seed + i, layout) for i in range(n)]
    reports = {}
    for var in variants:
        jobs = [(sc.to_dict(), var.planner, var.controller, var.settings,
                 var.weights.tensors if var.weights else None) for sc in scenarios]
        if workers > 1:
            with multiprocessing.Pool(workers) as pool:
                summaries = pool.map(_episode_worker, jobs)
        else:
            summaries = [_episode_worker(j) for j in jobs]
        summaries.sort(key=lambda s: s["seed"])
        succ = [s for s in summaries if s["outcome"] == "Success"]
        def _mean(key):
            vals = [s[key] for s in succ if s[key] is not None]
            return float(np.mean(vals)) if vals else math.nan
        def _median(key):
            vals = [s[key] for s in succ if s[key] is not None]
            return float(np.median(vals)) if vals else math.nan
        reports[var.name] = BenchmarkReport(
            variant=var.name, layout=layout, base_seed=base_seed, n=n,
            success_rate=len(succ) / n,
            mean_planner_seconds=_mean("planner_mean_seconds"),
            mean_controller_seconds=_mean("controller_mean_seconds"),
            mean_max_step_seconds=_mean("max_step_seconds"),
            median_planner_seconds=_median("planner_mean_seconds"),
            median_controller_seconds=_median("controller_mean_seconds"),
            scenarios=summaries,
        )
    return reports


def export_dataset(n: int, base_seed: int, out_path, layout: str = "square",
                   settings: EpisodeSettings | None = None, workers: int = 1) -> int:
    """Run the fallback planner + dual controller as the expert and write
    successful, re-audited episodes (>= DATASET_MIN_POSES poses) as JSON
    lines: seed, layout, start, goal, obstacles, trajectory."""
    settings = settings or EpisodeSettings()
    seeds = [base_seed + i for i in range(n)]

    def one(seed):
        sc = generate_scenario(seed, layout)
        log = run_episode(sc, "fallback", "mdd1", settings)
        return sc, log

    results = []
    if workers > 1:
        with multiprocessing.Pool(workers) as pool:
            results = pool.map(_dataset_worker, [(s, layout, settings) for s in seeds])
    else:
        results = [_dataset_worker((s, layout, settings)) for s in seeds]

    written = 0
    with open(out_path, "w") as f:
        for rec in results:
            if rec is None:
                continue
            f.write(json.dumps(rec) + "\n")
            written += 1
    return written


def _dataset_worker(args) -> Optional[dict]:
    seed, layout, settings = args
    sc = generate_scenario(seed, layout)
    log = run_episode(sc, "fallback", "mdd1", settings)
    if log.outcome != "Success":
        return None
    poses = [(r.state[0], r.state[1], r.state[3]) for r in log.steps]
    poses.append((log.final_state[0], log.final_state[1], log.final_state[3]))
    if len(poses) < DATASET_MIN_POSES:
        return None
    # paranoid re-audit against the same over-approximations
    polys = [circle_to_polytope(c, settings.n_facets) for c in sc.obstacles]
    for (x, y, th) in poses:
        if check_collision(State(x, y, 0.0, th), polys):
            return None
    d = sc.to_dict()
    d["trajectory"] = [[x, y, th] for (x, y, th) in poses]
    return d


def parse_dataset_line(line: str) -> dict:
    rec = json.loads(line)
    for key in ("seed", "layout", "start", "goal", "obstacles", "trajectory"):
        if key not in rec:
            raise ValueError(f"dataset record missing field {key!r}")
    return rec


def render_svg(log: EpisodeLog, sc: Scenario, out_path, n_facets: int = 8) -> None:
    """Standalone SVG: obstacle polygons, traversed trajectory, per-step
    reference segments, and markers at steps whose solve was not optimal."""
    scale = 12.0
    size = WORKSPACE * scale

    def sx(x):
        return x * scale

    def sy(y):
        return size - y * scale

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg",
                     width=str(size), height=str(size),
                     viewBox=f"0 0 {size} {size}")
    ET.SubElement(svg, "rect", x="0", y="0", width=str(size), height=str(size),
                  fill="#ffffff", stroke="#cccccc")
    for c in sc.obstacles:
        poly = circle_to_polytope(c, n_facets)
        verts = poly.vertices
        ang = np.arctan2(verts[:, 1] - c.center[1], verts[:, 0] - c.center[0])
        order = np.argsort(ang)
        pts = " ".join(f"{sx(verts[i, 0]):.2f},{sy(verts[i, 1]):.2f}" for i in order)
        ET.SubElement(svg, "polygon", points=pts, fill="#222222", opacity="0.85")
        ET.SubElement(svg, "circle", cx=f"{sx(c.center[0]):.2f}", cy=f"{sy(c.center[1]):.2f}",
                      r=f"{c.radius * scale:.2f}", fill="none", stroke="#666666",
                      attrib={"stroke-dasharray": "4 3"})
    for r in log.steps:
        pts = " ".join(f"{sx(p[0]):.2f},{sy(p[1]):.2f}" for p in r.reference)
        ET.SubElement(svg, "polyline", points=pts, fill="none", stroke="#7fbf7f",
                      opacity="0.35", attrib={"stroke-width": "1"})
    if log.steps:
        traj = [r.state for r in log.steps]
        if log.final_state:
            traj.append(log.final_state)
        pts = " ".join(f"{sx(s[0]):.2f},{sy(s[1]):.2f}" for s in traj)
        ET.SubElement(svg, "polyline", points=pts, fill="none", stroke="#1f5fbf",
                      attrib={"stroke-width": "2"})
    for r in log.steps:
        if r.status != StepOutcome.OPTIMAL.value:
            ET.SubElement(svg, "circle", cx=f"{sx(r.state[0]):.2f}", cy=f"{sy(r.state[1]):.2f}",
                          r="3", fill="#d62728")
    ET.SubElement(svg, "circle", cx=f"{sx(sc.start.x):.2f}", cy=f"{sy(sc.start.y):.2f}",
                  r="5", fill="#2ca02c")
    ET.SubElement(svg, "circle", cx=f"{sx(sc.goal.x):.2f}", cy=f"{sy(sc.goal.y):.2f}",
                  r="5", fill="none", stroke="#d62728", attrib={"stroke-width": "2"})
    ET.ElementTree(svg).write(out_path, xml_declaration=True, encoding="unicode")
