"""Gradient-map classification: a naturally trained net scores the gradient
maps of a robust and a standard model, in clipped and unclipped modes.
"""

import argparse

from robustlab.experiments import (DEFAULT_CACHE, gradmap_experiment,
                                   save_results)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n-eval", type=int, default=2_000)
    parser.add_argument("--cache-dir", default=str(DEFAULT_CACHE))
    parser.add_argument("--out", default="gradmap_results.json")
    args = parser.parse_args()
    results = gradmap_experiment(args.n_eval, args.cache_dir)
    save_results(args.out, results)
    for mode, cells in results.items():
        print(f"{mode}: robust {cells['robust']:.4f} "
              f"vs standard {cells['standard']:.4f}")
    print(f"results written to {args.out}")


if __name__ == "__main__":
    main()
