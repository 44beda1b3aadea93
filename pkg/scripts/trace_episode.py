"""Dev harness: trace one episode with per-step diagnostics."""
import math
import sys
import time

import numpy as np

sys.path.insert(0, "src")
from safenav.controller import MddController, BaselineDcbfController
from safenav.dynamics import State, bicycle_step
from safenav.geometry import Pose2D, circle_to_polytope
from safenav.planner import FallbackPlanner, PlannerConfig
from safenav.sim import EpisodeSettings, generate_scenario

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 7000
max_steps = int(sys.argv[2]) if len(sys.argv) > 2 else 400

sc = generate_scenario(seed, "square")
settings = EpisodeSettings()
cfg, params = settings.controller, settings.bicycle
polys = [circle_to_polytope(c, 8) for c in sc.obstacles]
plan = FallbackPlanner(PlannerConfig())
plan.start_episode(sc.start, sc.goal, list(sc.obstacles))
ctrl = MddController(cfg, params)
state = State(sc.start.x, sc.start.y, 0.0, sc.start.theta)
hist = [sc.start]
t_all = time.perf_counter()
times = []
fails = 0
for step in range(max_steps):
    ref, tgt = plan.plan(state, hist)
    t0 = time.perf_counter()
    r = ctrl.step(state, ref.states, polys)
    times.append(time.perf_counter() - t0)
    if r.outcome.value not in ("optimal", "degraded"):
        fails += 1
    state = bicycle_step(state, r.u0, params)
    hist.append(Pose2D(state.x, state.y, state.theta))
    if math.hypot(state.x - sc.goal.x, state.y - sc.goal.y) <= 1.0:
        print("SUCCESS at step", step, flush=True)
        break
    if step % 25 == 0:
        print(f"step {step}: pos=({state.x:.1f},{state.y:.1f}) v={state.v:.2f} "
              f"nact={len(r.active.obstacles)} el={times[-1]*1000:.0f}ms {r.outcome.value} "
              f"it={r.solution.iterations if r.solution else -1}", flush=True)
times = np.array(times)
print(f"total {time.perf_counter()-t_all:.1f}s; mean {1000*times.mean():.1f}ms "
      f"median {1000*np.median(times):.1f}ms max {1000*times.max():.0f}ms; fails={fails}")
print("final:", (round(state.x, 1), round(state.y, 1), round(state.v, 2)))
