"""Distance of the proximal solution to U_prox as delta grows, on one fixed instance."""
import argparse
from dataclasses import dataclass

import numpy as np

from implicit_etf.geometry import haar_directions
from implicit_etf.nearest import NearestEtfProblem, solve_nearest_etf
from implicit_etf.stiefel import TrustRegionSolver


@dataclass
class ProximalConfig:
    d: int = 8
    C: int = 3
    seed: int = 0
    deltas: tuple = (1.0, 10.0, 1e2, 1e3, 1e4)


def distances(cfg):
    rng = np.random.default_rng(cfg.seed)
    H = rng.standard_normal((cfg.d, cfg.C))
    H -= H.mean(axis=1, keepdims=True)
    H /= np.linalg.norm(H)
    U_prox = haar_directions(cfg.d, cfg.C, rng)
    solver = TrustRegionSolver(tol=1e-12)
    out = []
    for delta in cfg.deltas:
        sol = solve_nearest_etf(NearestEtfProblem(H, delta, U_prox), U_prox, solver)
        out.append((delta, float(np.linalg.norm(sol.U_star - U_prox))))
    return out


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--d", type=int, default=8)
    parser.add_argument("--C", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    rows = distances(ProximalConfig(args.d, args.C, args.seed))
    for delta, dist in rows:
        print(f"delta={delta:>8g}  |U* - U_prox|_F = {dist:.3e}")
    monotone = all(b <= a for (_, a), (_, b) in zip(rows, rows[1:]))
    print("non-increasing:", monotone)


if __name__ == "__main__":
    main()
