"""Compare the compiled ragged-row kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Reports the best-of-N wall time per kernel on a batch shaped like a
full-batch training epoch (2000 examples of 6-16 tokens), checks the two
backends agree, and times one training epoch under each backend.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from inftrace import _kernels_py

try:
    from inftrace import _kernels as compiled
except ImportError:  # extension not built
    compiled = None


def make_batch(n=2000, vocab=60, d=8, seed=0):
    rng = np.random.default_rng(seed)
    lengths = rng.integers(6, 17, size=n)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int_)
    index = rng.integers(0, vocab, size=offsets[-1]).astype(np.int_)
    rows = rng.normal(size=(offsets[-1], d))
    pooled = rng.normal(size=(n, d))
    return index, offsets, rows, pooled, vocab


def bench(mod, args, repeat):
    index, offsets, rows, pooled, vocab = args
    calls = {
        "scatter_add_rows": lambda: mod.scatter_add_rows(rows, index, vocab),
        "segment_mean": lambda: mod.segment_mean(rows, offsets),
        "segment_spread": lambda: mod.segment_spread(pooled, offsets),
    }
    return {name: min(timeit.repeat(fn, number=20, repeat=repeat)) / 20 for name, fn in calls.items()}


EPOCH = """
import time
from inftrace.data import synth_corpus
from inftrace.model import Objective, init_params, config_for
tr = synth_corpus(0, 2000, 1, 1)[0]
theta = init_params(config_for(tr))
obj = Objective(theta, tr.examples, 0.0)
obj.loss_grad()
t = time.perf_counter()
for _ in range(10):
    obj.loss_grad()
print((time.perf_counter() - t) / 10)
"""


def epoch_time(pure: bool) -> float:
    env = dict(os.environ, INFTRACE_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", EPOCH], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    batch = make_batch()
    py = bench(_kernels_py, batch, args.repeat)
    if compiled is None:
        print("compiled extension not built; python backend only")
        for name, t in py.items():
            print(f"{name:<18} python {t * 1e6:9.1f} us")
        return
    index, offsets, rows, pooled, vocab = batch
    for name, a, b in (
        ("scatter_add_rows", compiled.scatter_add_rows(rows, index, vocab), _kernels_py.scatter_add_rows(rows, index, vocab)),
        ("segment_mean", compiled.segment_mean(rows, offsets), _kernels_py.segment_mean(rows, offsets)),
        ("segment_spread", compiled.segment_spread(pooled, offsets), _kernels_py.segment_spread(pooled, offsets)),
    ):
        if not np.allclose(a, b, rtol=1e-12, atol=1e-12):
            sys.exit(f"backends disagree on {name}")
    cc = bench(compiled, batch, args.repeat)
    print(f"{'kernel':<18} {'python':>12} {'compiled':>12} {'speedup':>8}")
    for name in py:
        print(f"{name:<18} {py[name] * 1e6:9.1f} us {cc[name] * 1e6:9.1f} us {py[name] / cc[name]:7.2f}x")
    tp, tc = epoch_time(True), epoch_time(False)
    print(f"{'training epoch':<18} {tp * 1e3:9.2f} ms {tc * 1e3:9.2f} ms {tp / tc:7.2f}x")


if __name__ == "__main__":
    main()
