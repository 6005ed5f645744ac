"""Compare the numba and pure-numpy kernel backends.

Each backend runs in its own interpreter because the choice is made at import
time from ``METRIC_OOD_NUMBA``. Usage::

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 64]
"""

import argparse
import json
import os
import subprocess
import sys
import time

CHILD = r"""
import json, sys, time
import numpy as np
from metric_ood import kernels
from metric_ood.nn import build_network

repeat, batch = int(sys.argv[1]), int(sys.argv[2])
rng = np.random.default_rng(0)
x = rng.random((batch, 28, 28, 1))
h = rng.random((batch, 12, 12, 8))
net = build_network("lenet", (28, 28, 1), 5, seed=0)


def best(fn):
    fn()  # warm-up, includes any JIT compilation
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times) * 1e3


cols = kernels.im2col(h, 5, 5, 1)
pooled, idx = kernels.maxpool_forward(h, 2)


def step():
    emb, acts = net.forward(x)
    net.backward(acts, np.ones_like(emb))


out = {
    "backend": kernels.BACKEND,
    "im2col_ms": best(lambda: kernels.im2col(h, 5, 5, 1)),
    "col2im_ms": best(lambda: kernels.col2im(cols, h.shape, 5, 5, 1)),
    "maxpool_fwd_ms": best(lambda: kernels.maxpool_forward(h, 2)),
    "maxpool_bwd_ms": best(lambda: kernels.maxpool_backward(pooled, idx, h.shape, 2)),
    "lenet_step_ms": best(step),
}
print(json.dumps(out))
"""


def run(flag, repeat, batch):
    env = dict(os.environ, METRIC_OOD_NUMBA=flag)
    res = subprocess.run([sys.executable, "-c", CHILD, str(repeat), str(batch)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=64)
    args = ap.parse_args()
    t0 = time.perf_counter()
    fast, slow = run("1", args.repeat, args.batch), run("0", args.repeat, args.batch)
    keys = [k for k in fast if k.endswith("_ms")]
    print(f"batch {args.batch}, best of {args.repeat} (ms)")
    print(f"{'kernel':<16}{fast['backend']:>10}{slow['backend']:>10}{'speedup':>10}")
    for k in keys:
        print(f"{k[:-3]:<16}{fast[k]:>10.3f}{slow[k]:>10.3f}{slow[k] / fast[k]:>9.2f}x")
    print(f"total wall time {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
