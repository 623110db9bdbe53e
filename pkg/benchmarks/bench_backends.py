#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the pure-numpy reference.

Sizes mirror the reference experiment's hot path: candidate scoring on K=8
questions, mini-batch teacher refinement steps, and G=16 group
normalization. Run as ``python benchmarks/bench_backends.py``.
"""

import time

import numpy as np

from goldilocks.backends import reference

try:
    from goldilocks.backends import _core
except ImportError:
    _core = None


def timeit(fn, *args, repeat=20000):
    fn(*args)  # warm up
    start = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - start) / repeat


def main():
    rng = np.random.default_rng(0)
    feature_dim, embed_dim, positions = 8, 16, 4
    rows = positions * embed_dim
    enc_w = np.ascontiguousarray(rng.normal(size=(rows, feature_dim)))
    enc_b = rng.normal(size=rows)
    head_w = rng.normal(size=embed_dim)
    head_b = 0.1

    candidate_feats = np.ascontiguousarray(rng.normal(size=(8, feature_dim)))
    batch_feats = np.ascontiguousarray(rng.normal(size=(8, feature_dim)))
    targets = rng.uniform(0, 0.5, 8)
    rewards = np.ascontiguousarray(rng.integers(0, 2, 16).astype(np.float64))

    workloads = [
        ("teacher_predict (8 candidates)",
         lambda impl: impl.teacher_predict(candidate_feats, enc_w, enc_b, head_w,
                                           head_b, positions, True)),
        ("teacher_batch_grads (batch 8)",
         lambda impl: impl.teacher_batch_grads(batch_feats, targets, enc_w, enc_b,
                                               head_w, head_b, positions, True)),
        ("group_normalize (G=16)",
         lambda impl: impl.group_normalize(rewards)),
    ]

    impls = [("python", reference)]
    if _core is not None:
        impls.append(("cython", _core))
    else:
        print("compiled core not available; benchmarking the reference only")

    print(f"{'kernel':<34}" + "".join(f"{name:>12}" for name, _ in impls)
          + ("     speedup" if _core else ""))
    for label, call in workloads:
        times = [timeit(lambda impl=impl: call(impl)) for _, impl in impls]
        row = f"{label:<34}" + "".join(f"{t * 1e6:>10.2f}us" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
