"""Time the numba kernels against their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--reps 5] [--samples 20000]

Both paths must agree exactly; the script checks that before timing.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from s4c import _kernels as K
from s4c.models import TabularModel
from s4c.rng import Rng


def _random_parents(n: int, rng: np.random.Generator) -> np.ndarray:
    parents = np.full(n, -1, dtype=np.int64)
    for i in range(1, n):
        parents[i] = rng.integers(i)
    return parents


def _median_ms(fn, reps: int) -> float:
    fn()  # warm-up (includes JIT compilation on the numba path)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * statistics.median(times)


def bench_ancestor_mask(reps: int, n_trees: int = 200, n_nodes: int = 64) -> tuple[float, float]:
    rng = np.random.default_rng(0)
    trees = [_random_parents(n_nodes, rng) for _ in range(n_trees)]
    for p in trees[:10]:
        assert np.array_equal(K.ancestor_mask_np(p), K.ancestor_mask_nb(p))
    t_np = _median_ms(lambda: [K.ancestor_mask_np(p) for p in trees], reps)
    t_nb = _median_ms(lambda: [K.ancestor_mask_nb(p) for p in trees], reps)
    return t_np, t_nb


def bench_spec_sample(reps: int, n_samples: int) -> tuple[float, float]:
    target = TabularModel.random(4, seed=1, concentration=0.7).matrix()
    draft = TabularModel.random(4, seed=2, concentration=0.7).matrix()
    keys = K.stream_keys_np(Rng.from_seed(0).key, np.arange(n_samples, dtype=np.uint64))
    args = (target, draft, 0, 3, keys, 6, 2, 3)
    a = K.spec_sample_tabular(*args[:4], keys[:500], *args[5:], use_numba=False)
    b = K.spec_sample_tabular(*args[:4], keys[:500], *args[5:], use_numba=True)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    t_np = _median_ms(lambda: K.spec_sample_tabular(*args, use_numba=False), reps)
    t_nb = _median_ms(lambda: K.spec_sample_tabular(*args, use_numba=True), reps)
    return t_np, t_nb


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--samples", type=int, default=20_000)
    args = ap.parse_args(argv)
    if K.numba is None:
        print("numba is not installed; nothing to compare")
        return 1
    rows = [("ancestor_mask (200 trees x 64 nodes)", *bench_ancestor_mask(args.reps)),
            (f"spec_sample_tabular ({args.samples} sequences)", *bench_spec_sample(args.reps, args.samples))]
    print(f"{'kernel':<44}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, t_np, t_nb in rows:
        print(f"{name:<44}{t_np:>12.2f}{t_nb:>12.2f}{t_np / t_nb:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
