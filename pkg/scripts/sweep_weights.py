"""Dev harness: sweep tracking weights over a few scenarios."""
import multiprocessing
import sys
import time

import numpy as np

sys.path.insert(0, "src")
from safenav.controller import ControllerConfig
from safenav.sim import EpisodeSettings, generate_scenario, run_episode

VARIANTS = {
    "A20": ControllerConfig(state_weights=(20.0, 20.0, 4.0, 1.0),
                            control_weights=(0.02, 0.02), smoothness_weights=(0.05, 0.05)),
    "B40": ControllerConfig(state_weights=(40.0, 40.0, 8.0, 1.0),
                            control_weights=(0.02, 0.02), smoothness_weights=(0.05, 0.05)),
    "C40": ControllerConfig(state_weights=(40.0, 40.0, 4.0, 0.5),
                            control_weights=(0.01, 0.01), smoothness_weights=(0.02, 0.02)),
}
SEEDS = [7000, 7001, 7002, 7003, 7004, 7005, 7006, 7007, 7008, 7009, 7010, 7011]


def one(job):
    name, seed, layout = job
    cfg = VARIANTS[name]
    sc = generate_scenario(seed, layout)
    settings = EpisodeSettings(controller=cfg, max_steps=600)
    t0 = time.perf_counter()
    log = run_episode(sc, "fallback", "mdd1", settings)
    el = time.perf_counter() - t0
    ct = [r.controller_seconds for r in log.steps]
    return (f"{name:6s} {layout:6s} seed {seed}: {log.outcome:9s} steps={len(log.steps):3d} "
            f"fails={log.solver_failures} mind={log.min_distance:6.3f} "
            f"ct_med={1000*np.median(ct):5.1f}ms ct_max={1000*np.max(ct):6.0f}ms el={el:5.1f}s")


if __name__ == "__main__":
    names = sys.argv[1].split(",") if len(sys.argv) > 1 else list(VARIANTS)
    layouts = sys.argv[2].split(",") if len(sys.argv) > 2 else ["square"]
    jobs = [(n, s, lay) for n in names for lay in layouts for s in SEEDS]
    with multiprocessing.Pool(2) as pool:
        for line in pool.imap(one, jobs):
            print(line, flush=True)
