"""Time the transform kernels with and without numba.

    python3 benchmarks/bench_kernels.py [--repeat N] [--n-v 64] [--n-z 64] [--A 24]

Each backend runs in its own interpreter, since ``HTSEMI_NO_NUMBA`` is read at import.
The first call is reported separately; on the numba path it includes compilation
(or loading the on-disk cache).
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from htsemi import fiber, gft
from htsemi._accel import USE_NUMBA

n_v, n_z, A, repeat = (int(x) for x in sys.argv[1:5])
grid = gft.GridSpec(10.0, 8 * np.pi, n_v, n_z)
frame = fiber.HermiteFrame(1, A)
c0 = gft.analytic_c0(grid)
F = gft.random_band_limited(grid, frame, np.random.default_rng(0), band=2)

def clock(fn):
    t0 = time.perf_counter()
    out = fn()
    return time.perf_counter() - t0, out

first_inv, f = clock(lambda: gft.inverse_gft(F, c0))
first_fwd, Ff = clock(lambda: gft.forward_gft(f, frame, check=False))
inv = min(clock(lambda: gft.inverse_gft(F, c0))[0] for _ in range(repeat))
fwd = min(clock(lambda: gft.forward_gft(f, frame, check=False))[0] for _ in range(repeat))
print(json.dumps({"numba": USE_NUMBA, "first_inverse": first_inv, "first_forward": first_fwd,
                  "inverse": inv, "forward": fwd, "checksum": float(gft.plancherel_norm_sq(Ff, c0))}))
"""


def run_backend(no_numba: bool, args) -> dict:
    env = dict(os.environ)
    if no_numba:
        env["HTSEMI_NO_NUMBA"] = "1"
    else:
        env.pop("HTSEMI_NO_NUMBA", None)
    cmd = [sys.executable, "-c", WORKER, str(args.n_v), str(args.n_z), str(args.A), str(args.repeat)]
    proc = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--n-v", type=int, default=64)
    p.add_argument("--n-z", type=int, default=64)
    p.add_argument("--A", type=int, default=24)
    args = p.parse_args(argv)

    rows = [run_backend(False, args), run_backend(True, args)]
    print(f"grid n_v={args.n_v} n_z={args.n_z}, frame A={args.A}, best of {args.repeat}")
    print(f"{'backend':<8} {'first inv':>10} {'first fwd':>10} {'inverse':>10} {'forward':>10}")
    for r in rows:
        name = "numba" if r["numba"] else "numpy"
        print(f"{name:<8} {r['first_inverse']:>9.3f}s {r['first_forward']:>9.3f}s {r['inverse']:>9.3f}s {r['forward']:>9.3f}s")
    a, b = rows[0]["checksum"], rows[1]["checksum"]
    print(f"checksum agreement: {abs(a - b) / abs(b):.2e} relative")
    return 0


if __name__ == "__main__":
    sys.exit(main())
