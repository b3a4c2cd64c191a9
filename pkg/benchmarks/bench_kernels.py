"""Compare the compiled segment kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--dim 32]

Also times one GNN-QE projection on the desk-sized graph under each backend.
"""
import argparse
import timeit

import numpy as np

from ikqe import kernels


def _case(rows, segments, dim, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(rows, dim)), np.sort(rng.integers(0, segments, rows)), segments


def _time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(dim, repeat):
    rows = []
    for n_rows, n_seg in ((10_000, 1_000), (100_000, 5_000), (400_000, 20_000)):
        values, seg, n = _case(n_rows, n_seg, dim)
        for name in ("segment_sum", "segment_max", "segment_min"):
            fn = getattr(kernels, name)
            times = {}
            for backend in ("python", "cython"):
                kernels.use_backend(backend)
                times[backend] = _time(lambda: fn(values, seg, n), repeat)
            rows.append((name, n_rows, times["python"], times["cython"]))
    return rows


def bench_projection(repeat):
    from ikqe.gnnqe import NBFNetParams, mean_log_degree, nbfnet_project
    from ikqe.graph import add_inverse_relations
    from ikqe.synthetic import typed_cluster_graph

    g = add_inverse_relations(typed_cluster_graph(300)[0])
    params = NBFNetParams(g.num_relations, 32, 4, 64, mean_log_degree(g))
    x = np.zeros(g.num_entities)
    x[0] = 1.0
    out = {}
    for backend in ("python", "cython"):
        kernels.use_backend(backend)
        out[backend] = _time(lambda: nbfnet_project(g, x, 0, params), repeat)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dim", type=int, default=32)
    args = ap.parse_args()
    try:
        kernels.use_backend("cython")
    except ImportError:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
    print(f"{'kernel':<12} {'rows':>8} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for name, n, tp, tc in bench_kernels(args.dim, args.repeat):
        print(f"{name:<12} {n:>8} {tp * 1e3:>10.2f} {tc * 1e3:>10.2f} {tp / tc:>7.1f}x")
    proj = bench_projection(args.repeat)
    print(f"\nGNN-QE projection, 300-entity graph: numpy {proj['python'] * 1e3:.1f} ms, "
          f"cython {proj['cython'] * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
