"""Compare the numba and pure-numpy kernel backends.

The backend is fixed at import time from STORMBENCH_BACKEND, so this script
re-executes itself once per backend in a subprocess and prints a timing table
plus a numerical agreement check.

Usage: python benchmarks/bench_backends.py [--repeats N]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

CASES = [
    # (name, batch, cin, cout, hw, kernel)
    ("conv 3x3 small", 4, 8, 8, 32, 3),
    ("conv 3x3 large", 4, 16, 16, 64, 3),
    ("conv 5x5", 4, 8, 8, 64, 5),
    ("gelu 4M", None, None, None, None, None),
]


def run_case(kernels, name, repeats):
    rng = np.random.default_rng(0)
    if name.startswith("gelu"):
        x = rng.standard_normal(4 * 1024 * 1024).astype(np.float32)
        fn = lambda: kernels.gelu_forward(x)
    else:
        spec = next(c for c in CASES if c[0] == name)
        _, b, cin, cout, hw, k = spec
        pad = k // 2
        xp = rng.standard_normal((b, cin, hw + 2 * pad, hw + 2 * pad)).astype(np.float32)
        w = rng.standard_normal((cout, cin, k, k)).astype(np.float32)
        fn = lambda: kernels.conv2d_forward(xp, w)
    out = fn()  # warm-up (numba JIT compile)
    t0 = time.perf_counter()
    for _ in range(repeats):
        out = fn()
    seconds = (time.perf_counter() - t0) / repeats
    digest = float(np.float64(np.asarray(out, dtype=np.float64).sum()))
    return seconds, digest


def worker(repeats):
    from stormbench import kernels
    results = {"backend": kernels.BACKEND, "cases": {}}
    for case in CASES:
        seconds, digest = run_case(kernels, case[0], repeats)
        results["cases"][case[0]] = {"seconds": seconds, "digest": digest}
    print(json.dumps(results))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()
    if args.worker:
        worker(args.repeats)
        return

    runs = {}
    for backend in ("numpy", "numba"):
        env = dict(os.environ, STORMBENCH_BACKEND=backend)
        proc = subprocess.run([sys.executable, __file__, "--worker",
                               "--repeats", str(args.repeats)],
                              env=env, capture_output=True, text=True)
        if proc.returncode != 0:
            print(f"{backend} backend unavailable:\n{proc.stderr}", file=sys.stderr)
            continue
        runs[backend] = json.loads(proc.stdout.splitlines()[-1])

    if len(runs) < 2:
        sys.exit(1)
    print(f"{'case':<18}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>10}  agree")
    for case in CASES:
        a = runs["numpy"]["cases"][case[0]]
        b = runs["numba"]["cases"][case[0]]
        agree = np.isclose(a["digest"], b["digest"], rtol=1e-4)
        print(f"{case[0]:<18}{a['seconds'] * 1e3:>12.3f}{b['seconds'] * 1e3:>12.3f}"
              f"{a['seconds'] / b['seconds']:>9.2f}x  {'yes' if agree else 'NO'}")


if __name__ == "__main__":
    main()
