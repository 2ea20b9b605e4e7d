"""Compare the numba kernels with the pure-python / numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 3]

Each path runs in its own interpreter because LIPSYSID_DISABLE_NUMBA is
read at import time. Compile time is excluded (one warm-up call first).
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _best(fn, repeat):
    fn()  # warm-up / JIT compile
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def worker(repeat):
    from lipsysid import _accel, kernels
    from lipsysid import verification as ver
    from lipsysid.dataset import Dataset
    from lipsysid.dynamics import f_linear
    from lipsysid.kdtree import KdTree

    rng = np.random.default_rng(0)
    X = rng.uniform(-3, 3, (4000, 2))
    Y = f_linear(X) + 0.01 * rng.normal(size=X.shape)
    d = Dataset(X, Y, np.arange(len(X)) * 0.01, np.zeros(len(X), dtype=int))
    tree = KdTree(X)
    grid = ver.build_lattices((np.full(2, -3.0), np.full(2, 3.0)), 0.1)
    resid = np.abs(rng.normal(size=len(X)))
    Xq, Yq = X[:1500], Y[:1500]
    queries = rng.uniform(-3, 3, (1000, 2))

    def knn():
        for q in queries:
            tree.query_knn(q, 10)

    def boxes():
        for q in queries:
            tree.query_box(q - 0.1, q + 0.1)

    out = {
        "numba": _accel.NUMBA_ENABLED,
        "max_pair_quotient (1500 pts)": _best(lambda: kernels.max_pair_quotient(Xq, Yq), repeat),
        "lattice errors (900 lattices, 4000 pts)": _best(
            lambda: ver.lattice_errors(tree, resid, grid, 4.0, 5), repeat),
        "kd knn (1000 queries, k=10)": _best(knn, repeat),
        "kd box (1000 queries)": _best(boxes, repeat),
        "empirical K (4000 pts)": _best(lambda: ver.empirical_lipschitz(d), repeat),
    }
    print(json.dumps(out))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        worker(args.repeat)
        return
    res = {}
    for label, flag in (("numba", "0"), ("fallback", "1")):
        env = dict(os.environ, LIPSYSID_DISABLE_NUMBA=flag)
        proc = subprocess.run(
            [sys.executable, __file__, "--worker", "--repeat", str(args.repeat)],
            env=env, capture_output=True, text=True, check=True,
        )
        res[label] = json.loads(proc.stdout.strip().splitlines()[-1])
    if not res["numba"].pop("numba"):
        print("warning: numba unavailable; both columns use the fallback")
    res["fallback"].pop("numba")
    w = max(len(k) for k in res["numba"])
    print(f"{'kernel':<{w}}  {'numba [s]':>10}  {'fallback [s]':>12}  {'speed-up':>8}")
    for k, t in res["numba"].items():
        f = res["fallback"][k]
        print(f"{k:<{w}}  {t:10.4f}  {f:12.4f}  {f / t:8.1f}x")


if __name__ == "__main__":
    main()
