#!/usr/bin/env python3
"""Compare the pure NumPy kernels against the compiled extension.

Equivalent to ``kline bench``; kept as a standalone script so the numbers
are easy to collect without installing entry points.
"""

import argparse

from kline.bench import format_benchmarks, run_benchmarks


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--reps", type=int, default=50, help="repetitions per kernel")
    args = parser.parse_args()
    print(format_benchmarks(run_benchmarks(reps=args.reps)))


if __name__ == "__main__":
    main()
