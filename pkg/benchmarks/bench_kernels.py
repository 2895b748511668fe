"""Time the compiled kernels against the numpy fallback on synthetic inputs.

    python3 benchmarks/bench_kernels.py --entities 20000 --repeats 20
"""
import argparse
import json
import time

import numpy as np

from clmpt.kernels import backends


def csr(rng, n, avg_degree):
    degrees = rng.poisson(avg_degree, size=n)
    indptr = np.concatenate([[0], np.cumsum(degrees)]).astype(np.int64)
    indices = rng.integers(0, n, size=int(indptr[-1])).astype(np.int64)
    return indptr, indices


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--entities", type=int, default=20_000)
    parser.add_argument("--degree", type=float, default=8.0, help="average out-degree of the relation")
    parser.add_argument("--targets", type=int, default=64, help="hard answers ranked per score vector")
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--json", help="also write the timings here")
    args = parser.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    n = args.entities
    indptr, indices = csr(rng, n, args.degree)
    src_mask = (rng.random(n) < 0.1).astype(np.uint8)
    scores = rng.integers(0, 1000, size=n).astype(np.float64)
    targets = rng.choice(n, size=args.targets, replace=False).astype(np.int64)
    answer_mask = np.zeros(n, dtype=np.uint8)
    answer_mask[targets] = 1
    answer_mask[rng.choice(n, size=n // 50, replace=False)] = 1

    impls = backends()
    cases = {
        "relation_counts": lambda m: m.relation_counts(indptr, indices, src_mask, n),
        "filtered_ranks": lambda m: m.filtered_ranks(scores, targets, answer_mask),
    }
    results = {}
    for case, call in cases.items():
        outputs = {name: call(m) for name, m in impls.items()}
        ref = outputs["python"]
        for name, out in outputs.items():
            if not np.array_equal(out, ref):
                raise SystemExit(f"{case}: backend {name} disagrees with the numpy fallback")
        results[case] = {name: best_of(lambda m=m: call(m), args.repeats) for name, m in impls.items()}

    print(f"{n} entities, {len(indices)} edges, {args.targets} targets, best of {args.repeats}")
    print(f"{'kernel':<18}" + "".join(f"{name:>12}" for name in impls) + f"{'speedup':>10}")
    for case, timing in results.items():
        cells = "".join(f"{1e3 * timing[name]:>10.3f}ms" for name in impls)
        speedup = f"{timing['python'] / timing['cython']:>9.1f}x" if "cython" in timing else f"{'n/a':>10}"
        print(f"{case:<18}{cells}{speedup}")
    if "cython" not in impls:
        print("compiled extension not built; only the numpy fallback was timed")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as f:
            json.dump(results, f, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
