"""Exact enumeration vs Monte Carlo on the two-state flip game.

The instance is small enough to enumerate: every initial-state /
randomizer / noise combination of every agent, with probabilities kept
as exact fractions.  That gives the conditional terminal law, the
payoff, the unique equilibrium point on the summary lattice, and the
(identically zero) deviation gains.  The same quantities are then
re-estimated by simulation and printed side by side with z-scores.

Run:  python3 demos/flip_oracle_demo.py [seed]
"""

import math
import sys

import numpy as np

from meanfield import (
    Strategy,
    builtin_discrete_flip,
    estimate_conditional_law,
    estimate_deviation_gain,
    exact_conditional_law,
    exact_deviation_gain,
    exact_mfe,
    flip_instance,
    induce_profile,
    solve_mfe,
)

REPS = 4000
PARTICLES = 2048


def main(seed: int) -> None:
    model = builtin_discrete_flip(0.5)
    inst = flip_instance(0.5)
    incumbent = np.zeros((2, 1), dtype=np.int64)

    print(f"flip(0.5), seed {seed}: oracle vs {REPS}-rep Monte Carlo")
    print(f"{'quantity':<28}{'oracle':>10}{'estimate':>12}{'z':>8}")

    for n in (2, 3):
        law = exact_conditional_law(inst, n, [incumbent] * n, 0)
        p1 = float(law[1])
        profile = induce_profile(Strategy.lookup([0.0, 1.0], np.zeros((2, 1))), n)
        est, _ = estimate_conditional_law(model, profile, i=0, x0_pin=0.0,
                                          n=n, reps=REPS, seed=seed)
        p1_hat = float(np.sum(est.weights[est.points[:, 0] > 0.5]))
        se = math.sqrt(p1 * (1 - p1) / REPS)
        print(f"{f'law[x1=1 | x0=0], n={n}':<28}{p1:>10.4f}{p1_hat:>12.4f}"
              f"{(p1_hat - p1) / se:>8.2f}")

        dev = exact_deviation_gain(inst, n, incumbent, 0)
        gain, gain_se = estimate_deviation_gain(
            model, profile, i=0, x0_pin=0.0, n=n, reps=REPS,
            deviation_class={"kind": "all_maps"}, seed=seed)
        z = gain / gain_se if gain_se > 0 else 0.0
        print(f"{f'deviation gain, n={n}':<28}{float(dev.gain):>10.4f}"
              f"{gain:>12.4f}{z:>8.2f}")

    # The summary lattice has exactly one self-consistent mass.
    point = exact_mfe(inst, lattice=64)[0]
    sol = solve_mfe(model, particles=PARTICLES, x0_grid=[0.0, 1.0],
                    seed=seed, tol=5e-4, max_br_iters=60)
    mass = float(np.sum(sol.mu_hat.weights[sol.mu_hat.block("x1")[:, 0] > 0.5]))
    frac = float(point.fraction)
    se = math.sqrt(max(mass * (1 - mass), 1e-12) / PARTICLES)
    print(f"{'equilibrium mass at 1':<28}{frac:>10.4f}{mass:>12.4f}"
          f"{(mass - frac) / se:>8.2f}")
    print(f"\nparticle solve: {sol.br_iterations} sweeps, "
          f"residual {sol.fixed_point_residual:.2e}, converged={sol.converged}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 7)
