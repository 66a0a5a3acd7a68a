"""Train a tracking policy on three target shapes and compare it with a tuned PID."""

import argparse
import time

from ropedyn.controller import TRACKING, TaskSpec, TrainConfig, train_run
from ropedyn.harness import evaluate_pid, evaluate_tracking, make_target, parameter_grid, tracking_start, tune_pid
from ropedyn.rope import RopeParams

NOISE = {"masses": 0.1, "bending_stiffness": 0.1, "torsion_stiffness": 0.1}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iterations", type=int, default=800)
    ap.add_argument("--quick", action="store_true", help="100 iterations")
    args = ap.parse_args()
    if args.quick:
        args.iterations = 100

    p = RopeParams.uniform(8, length=0.3, rope_mass=0.02, linear_stiffness=50.0)
    states, specs = [], []
    for kind in ("lemniscate", "egg", "sinusoid"):
        for d in (2.5, 3.5):
            g = make_target(kind, d).samples
            states.append(tracking_start(p, g[0]))
            specs.append(TaskSpec(TRACKING, g[1:]))
    cfg = TrainConfig(kind=TRACKING, batch_size=6, horizon=260, iterations=args.iterations, lr=5e-4,
                      lr_final=5e-5, bound=2.5, noise_scales=NOISE, seed=args.seed)
    t0 = time.perf_counter()
    w = train_run(states, specs, p, cfg).weights
    print(f"trained in {time.perf_counter() - t0:.0f}s")

    grid = parameter_grid(p)
    print(f"{'target':<12}{'dur':>5}{'policy [m]':>12}{'pid [m]':>10}  gains")
    for kind in ("lemniscate", "egg", "sinusoid"):
        for d in (2.5, 3.5):
            target = make_target(kind, d)
            err, _ = evaluate_tracking(w, grid, target, bound=2.5)
            gains, _ = tune_pid(p, target, (0.1, 0.25, 0.5, 1, 2, 4), (0, 0.1, 0.2, 0.4, 0.8), (0.0, 0.5))
            pid, _ = evaluate_pid(gains, grid, target)
            print(f"{kind:<12}{d:>5}{err.mean():>12.4f}{pid.mean():>10.4f}  "
                  f"kp={gains.kp:g} kd={gains.kd:g} ki={gains.ki:g}")


if __name__ == "__main__":
    main()
