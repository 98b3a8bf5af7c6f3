"""Time the numba and pure-numpy sparse kernels side by side.

    python benchmarks/bench_kernels.py [--nodes 3000] [--degree 4] [--width 64] [--repeats 20]

Also times one training epoch of a Bregman GCN under each backend (the
backend is fixed at import time, so that part runs in subprocesses).
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from bregnn import kernels
from bregnn.sparsegraph import generate_sbm

EPOCH_SCRIPT = """
import time
from bregnn import kernels
from bregnn.layers import ModelConfig, build_model
from bregnn.sparsegraph import generate_sbm
from bregnn.train import TrainConfig, fit
ds = generate_sbm({n}, 5, {p_in}, {p_out}, 32, seed=0)
cfg = ModelConfig(base="gat", bregman_enhanced=True, depth=4, hidden=64, activation="tanh")
fit(build_model(cfg, ds), ds, TrainConfig(max_epochs=2, patience=2, seeds=[0]))  # warm-up / JIT
start = time.perf_counter()
fit(build_model(cfg, ds), ds, TrainConfig(max_epochs=20, patience=20, seeds=[0]))
print(kernels.BACKEND_NAME, (time.perf_counter() - start) / 20)
"""


def best_of(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--nodes", type=int, default=3000)
    parser.add_argument("--degree", type=float, default=4.0)
    parser.add_argument("--width", type=int, default=64)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    p_in = args.degree / args.nodes
    ds = generate_sbm(args.nodes, 5, 4 * p_in, p_in / 4, 4, seed=0)
    adj = ds.adjacency()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((adj.n, args.width))
    scores = rng.standard_normal(adj.nnz)
    idx = rng.integers(0, adj.n, size=adj.nnz)
    src = rng.standard_normal((adj.nnz, args.width))
    alpha = kernels.numpy_backend.segment_softmax(adj.row_ptr, scores)

    calls = {
        "csr_spmm": lambda b: b.csr_spmm(adj.row_ptr, adj.col_idx, adj.vals, x),
        "csr_spmm_t": lambda b: b.csr_spmm_t(adj.row_ptr, adj.col_idx, adj.vals, x, adj.n),
        "csr_sddmm": lambda b: b.csr_sddmm(adj.row_ptr, adj.col_idx, x, x),
        "segment_softmax": lambda b: b.segment_softmax(adj.row_ptr, scores),
        "segment_softmax_backward": lambda b: b.segment_softmax_backward(adj.row_ptr, alpha, scores),
        "scatter_add_rows": lambda b: b.scatter_add_rows(idx, src, adj.n),
    }
    print(f"graph: n={adj.n}, nnz={adj.nnz}, width={args.width}")
    print(f"{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, call in calls.items():
        t_np = best_of(lambda: call(kernels.numpy_backend), args.repeats)
        if kernels.numba_backend is None:
            print(f"{name:<26}{1e3 * t_np:>10.3f}{'n/a':>10}")
            continue
        t_nb = best_of(lambda: call(kernels.numba_backend), args.repeats)
        print(f"{name:<26}{1e3 * t_np:>10.3f}{1e3 * t_nb:>10.3f}{t_np / t_nb:>8.2f}x")

    print("\nBregman GAT epoch (depth 4, hidden 64):")
    script = EPOCH_SCRIPT.format(n=args.nodes, p_in=4 * p_in, p_out=p_in / 4)
    for flag in ("1", "0"):
        env = dict(os.environ, BREGNN_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", script], env=env, capture_output=True, text=True, check=True)
        backend, seconds = out.stdout.split()
        print(f"  {backend:<6} {1e3 * float(seconds):8.1f} ms/epoch")


if __name__ == "__main__":
    main()
