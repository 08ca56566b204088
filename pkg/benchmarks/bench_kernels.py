"""Benchmark the compiled kernels against the pure-numpy fallback.

Times the two hot paths behind the fixed-effect machinery, demean_sweeps
and cluster_score_sums, on synthetic problems shaped like the real ones:
a panel with cell and year dimensions for the demeaning sweeps, and
cluster-summed score rows for the sandwich meat.  Both implementations
are imported directly, so the CREDITSCAN_BACKEND switch is irrelevant
here; results are checked for agreement before timing.

Run from the repository root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --rows 500000 --reps 7
"""

import argparse
import time

import numpy as np

from creditscan import _kernels_py

try:
    from creditscan import _ext
except ImportError:
    _ext = None


def _best_of(fn, reps):
    best = np.inf
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        elapsed = time.perf_counter() - start
        if elapsed < best:
            best = elapsed
    return best


def demean_problem(rng, rows, cols, cells, years):
    data = rng.standard_normal((rows, cols))
    weights = rng.uniform(0.5, 3.0, size=rows)
    codes = [rng.integers(0, cells, size=rows).astype(np.int64),
             rng.integers(0, years, size=rows).astype(np.int64)]
    rms = np.sqrt((weights @ (data * data)) / weights.sum())
    scales = np.maximum(1.0, rms)
    return dict(data=np.ascontiguousarray(data),
                weights=np.ascontiguousarray(weights),
                codes=codes, sizes=[cells, years],
                scales=np.ascontiguousarray(scales))


def run_demean(impl, prob):
    # the sweep mutates its input, so each call works on a fresh copy
    data = prob["data"].copy()
    impl.demean_sweeps(data, prob["weights"], prob["codes"], prob["sizes"],
                       prob["scales"], 1e-10, 200)
    return data


def cluster_problem(rng, rows, cols, clusters):
    scores = rng.standard_normal((rows, cols))
    codes = rng.integers(0, clusters, size=rows).astype(np.int64)
    return dict(scores=np.ascontiguousarray(scores), codes=codes,
                clusters=clusters)


def run_cluster(impl, prob):
    return impl.cluster_score_sums(prob["scores"], prob["codes"],
                                   prob["clusters"])


def bench_case(name, runner, prob, reps):
    ref = runner(_kernels_py, prob)
    py = _best_of(lambda: runner(_kernels_py, prob), reps)
    line = f"{name:<24s} python {py * 1e3:9.2f} ms"
    if _ext is not None:
        got = runner(_ext, prob)
        diff = float(np.max(np.abs(got - ref)))
        if diff > 1e-9:
            raise AssertionError(f"{name}: backends disagree by {diff:g}")
        ext = _best_of(lambda: runner(_ext, prob), reps)
        line += f"   ext {ext * 1e3:9.2f} ms   speedup {py / ext:6.2f}x"
    print(line)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=200_000)
    parser.add_argument("--cols", type=int, default=8)
    parser.add_argument("--cells", type=int, default=2_800)
    parser.add_argument("--years", type=int, default=7)
    parser.add_argument("--clusters", type=int, default=2_800)
    parser.add_argument("--reps", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    print(f"rows={args.rows} cols={args.cols} cells={args.cells} "
          f"years={args.years} clusters={args.clusters} reps={args.reps}")
    if _ext is None:
        print("compiled extension not importable; timing the fallback only")

    bench_case("demean_sweeps", run_demean,
               demean_problem(rng, args.rows, args.cols, args.cells,
                              args.years), args.reps)
    bench_case("cluster_score_sums", run_cluster,
               cluster_problem(rng, args.rows, args.cols + 4, args.clusters),
               args.reps)


if __name__ == "__main__":
    main()
