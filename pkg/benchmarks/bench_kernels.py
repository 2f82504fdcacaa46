"""Time the compiled and pure-Python embedding kernels on the same inputs.

    python benchmarks/bench_kernels.py [--rows 50000] [--batch 4096] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from optembed import kernels


def make_inputs(rows, fields, dim, batch, seed):
    r = np.random.default_rng(seed)
    per = rows // fields
    table = r.normal(size=(per * fields, dim))
    idx = r.integers(0, per, size=(batch, fields)) + np.arange(fields) * per
    dims = r.integers(1, dim + 1, size=fields)
    dx = r.normal(size=(batch, fields * dim))
    row_fields = np.repeat(np.arange(fields), per)
    gap = np.abs(table).sum(1) - 0.5 * dim
    keep = (gap > 0).astype(np.float64)
    return table, idx, dims, dx, row_fields, gap, keep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=50_000)
    ap.add_argument("--fields", type=int, default=8)
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--batch", type=int, default=4096)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    table, idx, dims, dx, row_fields, gap, keep = make_inputs(args.rows, args.fields, args.dim,
                                                              args.batch, seed=0)
    n_rows = table.shape[0]
    cases = {
        "gather_embeddings": lambda impl: kernels.gather_embeddings(table, idx, dims, impl=impl),
        "scatter_row_grads": lambda impl: kernels.scatter_row_grads(dx, idx, dims, n_rows, impl=impl),
        "l1_norms": lambda impl: kernels.l1_norms(table, impl=impl),
        "masked_embed_grads": lambda impl: kernels.masked_embed_grads(table, table, keep, gap, row_fields,
                                                                      args.fields, impl=impl),
    }
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not available; timing the fallback only")
    print(f"{'kernel':<20}" + "".join(f"{b + ' ms':>14}" for b in backends) + f"{'speedup':>10}")
    for name, call in cases.items():
        best = {}
        for b, impl in backends.items():
            call(impl)  # warm up
            best[b] = min(timeit.repeat(lambda: call(impl), number=1, repeat=args.repeat)) * 1e3
        speed = f"{best['python'] / best['cython']:>9.1f}x" if "cython" in best else f"{'-':>10}"
        print(f"{name:<20}" + "".join(f"{best[b]:>14.3f}" for b in backends) + speed)


if __name__ == "__main__":
    main()
