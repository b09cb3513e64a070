"""Compare the compiled kernel backend against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N]

Times the two hot kernels at the simulator's working sizes, then an
end-to-end mini federation round with each backend forced in turn via a
subprocess (backend selection happens at import).
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from driftfl import kernels

SIZES = [
    ("batch forward 256x10->16->5", "forward", dict(n=256, d=10, h=16, k=5)),
    ("batch forward 2000x10->16->5", "forward", dict(n=2000, d=10, h=16, k=5)),
    ("risk grads 400x10->16->5 joint", "grads", dict(n=400, d=10, h=16, k=5)),
    ("risk grads 400x10->16->5 head", "grads_head", dict(n=400, d=10, h=16, k=5)),
    ("risk grads 2000x8->8->3 head", "grads_head", dict(n=2000, d=8, h=8, k=3)),
]


def make_case(rng, n, d, h, k):
    return (rng.standard_normal((h, d)), rng.standard_normal(h),
            rng.standard_normal((k, h)), rng.standard_normal(k),
            rng.standard_normal((n, d)), rng.integers(0, k, size=n),
            np.full(n, 1.0 / n))


def time_op(fn, repeats):
    fn()  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_backend(impl, repeats):
    rng = np.random.default_rng(0)
    out = {}
    for label, op, size in SIZES:
        W1, b1, W2, b2, X, y, coef = make_case(rng, **size)
        if op == "forward":
            fn = lambda: impl.forward_batch(W1, b1, W2, b2, X)
        elif op == "grads":
            fn = lambda: impl.risk_grads(W1, b1, W2, b2, X, y, coef, False)
        else:
            fn = lambda: impl.risk_grads(W1, b1, W2, b2, X, y, coef, True)
        out[label] = time_op(fn, repeats)
    return out


def bench_end_to_end():
    """Run a small federation in a subprocess per backend and report seconds."""
    snippet = r"""
import json, time, logging
logging.disable(logging.WARNING)
from driftfl import federation as fed, shift, estimation as est, kernels
spec = shift.ScenarioSpec(T=20, num_classes=5, input_dim=10,
                          mean_scale=2.0, noise_std=2.0)
cfg = fed.RunConfig(num_clients=10, T=20, participant_rate=1.0,
                    local_epochs=4, comm_interval=1, rate_mode="adaptive",
                    bounds=est.RateBounds(0.02, 2.0), batch_size=256,
                    anchor_size=400, scenario=spec, seed=0,
                    pretrain_samples=2000, pretrain_epochs=100)
t0 = time.time()
fed.run(cfg)
print(json.dumps({"backend": kernels.backend_name(),
                  "seconds": time.time() - t0}))
"""
    results = {}
    for forced in ("", "1"):
        env = dict(os.environ, DRIFTFL_PURE_PYTHON=forced)
        if not forced:
            env.pop("DRIFTFL_PURE_PYTHON")
        proc = subprocess.run([sys.executable, "-c", snippet], env=env,
                              capture_output=True, text=True, check=True)
        record = json.loads(proc.stdout.strip().splitlines()[-1])
        results[record["backend"]] = record["seconds"]
    return results


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=30)
    args = parser.parse_args()

    backends = kernels.available_backends()
    print(f"active backend: {kernels.backend_name()}")
    print(f"available: {sorted(backends)}\n")

    timings = {name: bench_backend(impl, args.repeats)
               for name, impl in backends.items()}
    width = max(len(label) for label, _, _ in SIZES)
    header = f"{'kernel':<{width}}  " + "  ".join(f"{n:>12}" for n in sorted(timings))
    print(header)
    for label, _, _ in SIZES:
        row = f"{label:<{width}}  "
        row += "  ".join(f"{timings[n][label] * 1e6:>10.1f}us"
                         for n in sorted(timings))
        if len(timings) == 2:
            speedup = timings["numpy"][label] / timings["compiled"][label]
            row += f"   x{speedup:.1f}"
        print(row)

    if len(backends) == 2:
        print("\nend-to-end mini federation (10 clients, T=20):")
        for name, seconds in sorted(bench_end_to_end().items()):
            print(f"  {name:>9}: {seconds:.2f}s")


if __name__ == "__main__":
    main()
