"""How fast do the min and mean estimators converge with the number of trials?

    python scripts/estimator_convergence.py --reps 20000

Compares simulated mean-of-minima and hit rates against closed forms for a few
discrete degeneration distributions.
"""

import argparse

from quantlaw.oracle import DiscreteDelta, estimator_sim

DISTS = {
    "uniform3": DiscreteDelta.uniform([0.1, 0.2, 0.3]),
    "rare-best": DiscreteDelta((0.05, 0.2, 0.4), (0.02, 0.58, 0.40)),
    "heavy-tail": DiscreteDelta((0.1, 0.15, 0.3, 1.0), (0.3, 0.4, 0.2, 0.1)),
}


def main():
    ap = argparse.ArgumentParser(description="estimator convergence table")
    ap.add_argument("--reps", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print(f"{'dist':>10} {'n':>5} {'E[min] sim':>11} {'exact':>8} {'hit sim':>8} {'exact':>8} {'mean sim':>9}")
    for name, dist in DISTS.items():
        for n in (1, 5, 10, 30, 100, 300):
            rep = estimator_sim(dist, n, args.reps, args.seed)
            print(f"{name:>10} {n:5d} {rep.mean_of_mins:11.5f} {dist.expected_min(n):8.5f} "
                  f"{rep.prob_min_hit:8.4f} {dist.prob_min_hit(n):8.4f} {rep.mean_of_means:9.5f}")


if __name__ == "__main__":
    main()
