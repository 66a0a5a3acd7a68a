"""Train a stabilizing policy and evaluate it over the 27-cell parameter grid.

Reports the settle time distribution against the passive rope, recovery
after pushes, and (with ``--dagger``) one round of adversarial refinement.
"""

import argparse
import time

import numpy as np

from ropedyn.controller import (
    TaskSpec,
    TrainConfig,
    TrainingSet,
    batch_loss,
    dagger_update,
    simulate_policy,
    train_run,
)
from ropedyn.harness import (
    displaced_state,
    evaluate_stabilization,
    find_adversarial,
    inject_disturbance,
    parameter_grid,
)
from ropedyn.rope import RopeParams, RopeState

NOISE = {"masses": 0.1, "bending_stiffness": 0.1, "torsion_stiffness": 0.1}
TEST = [(0.5, 0.3), (0.35, 2.0), (0.6, 4.0), (0.45, 5.5)]


def describe(label, rep, limit=6.0):
    t = rep.times[~np.isnan(rep.times)]
    worst = f"{t.max():.2f}" if t.size else "-"
    print(f"{label:<26}{rep.success_fraction(limit):>8.0%}{t.size:>6d}/{rep.times.size:<4d}{worst:>8}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--iterations", type=int, default=60)
    ap.add_argument("--states", type=int, default=64)
    ap.add_argument("--dagger", action="store_true")
    ap.add_argument("--quick", action="store_true", help="10 iterations, 16 states")
    args = ap.parse_args()
    if args.quick:
        args.iterations, args.states = 10, 16

    p = RopeParams.uniform(8, tip_mass=0.015)
    rng = np.random.default_rng(args.seed)
    states = [displaced_state(p, a, z) for a, z in
              zip(rng.uniform(0.15, 0.8, args.states), rng.uniform(0, 2 * np.pi, args.states))]
    cfg = TrainConfig(batch_size=8, horizon=300, iterations=args.iterations, lr=1e-3,
                      noise_scales=NOISE, seed=args.seed)
    t0 = time.perf_counter()
    w = train_run(states, None, p, cfg).weights
    print(f"trained in {time.perf_counter() - t0:.0f}s")

    grid = parameter_grid(p)
    test = [displaced_state(p, a, z) for a, z in TEST]
    print(f"{'case':<26}{'<= 6 s':>8}{'settled':>11}{'worst':>8}")
    describe("passive", evaluate_stabilization(None, test, grid, 15.0))
    describe("policy", evaluate_stabilization(w, test, grid, 15.0))

    P, V, _ = simulate_policy(w, test[:1], [p], 800)
    rest = RopeState(P[0, -1], V[0, -1])
    for impulse in (0.005, 0.01, 0.02):
        kicks = [inject_disturbance(rest, [impulse, 0, 0], p.n_links, p),
                 inject_disturbance(rest, [0, impulse, 0], p.n_links // 2, p)]
        describe(f"push {impulse:g} N s", evaluate_stabilization(w, kicks, grid, 6.0))

    if args.dagger:
        found = find_adversarial(w, p, 10, seed=args.seed + 7, horizon=cfg.horizon)
        adv = [s for s, _ in found]
        ts = TrainingSet(adv, [TaskSpec()] * len(adv))
        idx = list(range(len(adv)))
        before = batch_loss(w, ts, idx, [p] * len(adv), cfg)
        pool = dagger_update(TrainingSet(states, [TaskSpec()] * len(states)), [ev for _, ev in found], 5.0)
        refine = TrainConfig(batch_size=8, horizon=150, iterations=40, lr=1e-3, noise_scales=NOISE,
                             seed=args.seed + 1)
        w2 = train_run(pool, None, p, refine, weights=w).weights
        after = batch_loss(w2, ts, idx, [p] * len(adv), cfg)
        print(f"dagger: {len(found)} flagged states, loss {before:.3e} -> {after:.3e}")
        describe("refined policy", evaluate_stabilization(w2, test, grid, 15.0))


if __name__ == "__main__":
    main()
