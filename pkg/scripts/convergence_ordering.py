"""Iterations to 100% train accuracy per mode and seed, and whether implicit_etf is fastest.

    python scripts/convergence_ordering.py --preset ufm10 --seeds 0 1 2 3 4
"""
import argparse
from dataclasses import dataclass, field

from implicit_etf.experiment import PRESETS
from implicit_etf.ufm import MODES, TrainConfig, make_ufm, train


@dataclass
class OrderingConfig:
    preset: str = "ufm10"
    seeds: tuple = (0, 1, 2, 3, 4)
    max_iterations: int = 2000
    train: TrainConfig = field(default_factory=TrainConfig)


def iterations_to_interpolation(d, C, N, mode, seed, cfg):
    tc = TrainConfig(
        iterations=cfg.max_iterations,
        learning_rate=cfg.train.learning_rate,
        seed=seed,
        metrics=False,
        stop_at_interpolation=True,
    )
    last = train(make_ufm(d, C, N, mode, seed=seed), tc).trace[-1]
    return last.iteration if last.train_top1 >= 1.0 else None


def ordering_table(cfg):
    d, C, N = PRESETS[cfg.preset]
    table = {}
    for seed in cfg.seeds:
        table[seed] = {mode: iterations_to_interpolation(d, C, N, mode, seed, cfg) for mode in MODES}
    return table


def implicit_is_fastest(row):
    mine = row["implicit_etf"]
    if mine is None:
        return False
    return all(other is None or mine <= other for mode, other in row.items() if mode != "implicit_etf")


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--preset", default="ufm10", choices=sorted(PRESETS))
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--max-iterations", type=int, default=2000)
    parser.add_argument("--learning-rate", type=float, default=5.0)
    args = parser.parse_args()
    cfg = OrderingConfig(args.preset, tuple(args.seeds), args.max_iterations, TrainConfig(learning_rate=args.learning_rate))

    table = ordering_table(cfg)
    print("seed " + " ".join(f"{m:>13}" for m in MODES) + "  implicit fastest")
    wins = 0
    for seed, row in table.items():
        ok = implicit_is_fastest(row)
        wins += ok
        cells = " ".join(f"{'-' if row[m] is None else row[m]:>13}" for m in MODES)
        print(f"{seed:>4} {cells}  {ok}")
    print(f"implicit_etf fastest (ties allowed) in {wins}/{len(table)} seeds")


if __name__ == "__main__":
    main()
