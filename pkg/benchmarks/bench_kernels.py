"""Compare the compiled loss kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 200]

Prints per-call time for each kernel at a few batch sizes plus the speedup.
"""

import argparse
import timeit

import numpy as np

from todcl._kernels import compiled_backend, python_backend


def cases(rng):
    for n, d in ((8, 128), (32, 128), (128, 256)):
        Hc, Hs = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        pos = -np.ones(n, dtype=np.int64)
        grp = (np.arange(n, dtype=np.int64) + 1) % n
        yield f"pointwise N={n} d={d}", "contrastive", (Hc, Hs, 0.1, pos)
        yield f"groupwise N={n} d={d}", "contrastive", (Hc, Hs, 0.5, grp)
        yield f"variant   N={n} d={d}", "variant", (Hc, Hs)
    for rows, vocab in ((8 * 64, 800), (8 * 96, 2000)):
        logits = rng.normal(size=(rows, vocab))
        targets = rng.integers(0, vocab, size=rows).astype(np.int64)
        yield f"token_nll rows={rows} V={vocab}", "token_nll", (logits, targets, 0)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    if compiled_backend is None:
        print("compiled extension not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'case':34s} {'numpy us':>10s} {'cython us':>10s} {'speedup':>8s}")
    for name, fn, inputs in cases(rng):
        t_py = timeit.timeit(lambda: getattr(python_backend, fn)(*inputs), number=args.repeat) / args.repeat
        if compiled_backend is None:
            print(f"{name:34s} {t_py * 1e6:10.1f} {'-':>10s} {'-':>8s}")
            continue
        t_c = timeit.timeit(lambda: getattr(compiled_backend, fn)(*inputs), number=args.repeat) / args.repeat
        ref, got = getattr(python_backend, fn)(*inputs), getattr(compiled_backend, fn)(*inputs)
        assert abs(ref[0] - got[0]) < 1e-9 * max(1.0, abs(ref[0])), name
        print(f"{name:34s} {t_py * 1e6:10.1f} {t_c * 1e6:10.1f} {t_py / t_c:7.2f}x")


if __name__ == "__main__":
    main()
