"""Compare the compiled and pure-Python HNSW kernels.

Each backend runs in its own interpreter because the choice is fixed at import.
Both runs build the same graph from the same vectors, so the graph digest must
match; the script reports a mismatch as a failure.

    python3 benchmarks/bench_kernels.py --n 5000 --dim 128 --queries 200
"""

import argparse
import json
import os
import subprocess
import sys
import textwrap

_WORKER = textwrap.dedent("""
    import hashlib, json, statistics, sys, time
    import numpy as np
    from finrag.vindex import BACKEND, HnswIndex, IndexEntry
    from finrag.vindex.persist import dumps

    n, dim, nq, seed = map(int, sys.argv[1:5])
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((n, dim))
    data /= np.linalg.norm(data, axis=1, keepdims=True)
    queries = rng.standard_normal((nq, dim))
    queries /= np.linalg.norm(queries, axis=1, keepdims=True)

    index = HnswIndex(dim)
    t0 = time.perf_counter()
    for i, v in enumerate(data):
        index.insert(IndexEntry(f"v{i}", v))
    build = time.perf_counter() - t0

    lat, hits = [], []
    for q in queries:
        t0 = time.perf_counter()
        res = index.search_topk(q, 10)
        lat.append(time.perf_counter() - t0)
        hits.append([h.id for h in res])
    exact = np.argsort(-(queries @ data.T), axis=1)[:, :10]
    recall = np.mean([len(set(h) & {f"v{j}" for j in row}) / 10 for h, row in zip(hits, exact)])
    print(json.dumps({
        "backend": BACKEND,
        "build_s": build,
        "search_ms_median": statistics.median(lat) * 1e3,
        "recall_at_10": float(recall),
        "graph_sha256": hashlib.sha256(dumps(index)).hexdigest(),
    }))
""")


def run_backend(pure: bool, args) -> dict:
    env = dict(os.environ, FINRAG_PURE_PYTHON="1" if pure else "0")
    argv = [sys.executable, "-c", _WORKER, str(args.n), str(args.dim), str(args.queries), str(args.seed)]
    proc = subprocess.run(argv, env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=3000, help="vectors to index")
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--queries", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    results = [run_backend(False, args), run_backend(True, args)]
    if results[0]["backend"] != "cython":
        print("compiled extension not built; both runs used the pure-Python kernels", file=sys.stderr)

    print(f"n={args.n} dim={args.dim} queries={args.queries}")
    print(f"{'backend':<8} {'build s':>9} {'search ms':>10} {'recall@10':>10}")
    for r in results:
        print(f"{r['backend']:<8} {r['build_s']:>9.2f} {r['search_ms_median']:>10.3f} {r['recall_at_10']:>10.3f}")
    fast, slow = results
    print(f"speedup: build x{slow['build_s'] / fast['build_s']:.1f}, "
          f"search x{slow['search_ms_median'] / fast['search_ms_median']:.1f}")
    same = fast["graph_sha256"] == slow["graph_sha256"]
    print(f"identical graphs: {'yes' if same else 'NO'}")
    return 0 if same else 1


if __name__ == "__main__":
    raise SystemExit(main())
