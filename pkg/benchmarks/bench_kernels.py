"""numba vs numpy timings for the two hot kernels, plus end-to-end oracle throughput.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Kernel timings call both implementations directly. The oracle timing runs in
a child process per path so the HEADFLOW_DISABLE_NUMBA flag takes effect.
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from headflow import kernels


def best_of(fn, repeat):
    fn()  # warm-up / compile
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def attend_inputs(B, H=4, Q=8, P=16, dk=16, seed=0):
    rng = np.random.default_rng(seed)
    f = lambda *s: rng.standard_normal(s).astype(np.float32)
    return (f(B, H, Q, dk), f(H, P, dk), f(H, P, dk), f(H, P, dk), f(H, P, dk),
            rng.random((B, H, Q, P)) < 0.5, f(B, H, Q, dk), f(B, H, Q, dk))


def cd_inputs(M, N, seed=0):
    rng = np.random.default_rng(seed)
    X = (rng.random((M, N)) < 0.25).astype(np.float64)
    y = X @ rng.standard_normal(N) + 0.01 * rng.standard_normal(M)
    Xc, yc = X - X.mean(0), y - y.mean()
    return Xc.T @ Xc / M, Xc.T @ yc / M, float(yc @ yc) / M


ORACLE_SNIPPET = """
import time, numpy as np
from headflow.model import ModelConfig
from headflow.synthetic import WiringSpec, gen_copyhead_model, gen_tasks, gen_calibration_pool
from headflow.intervention import compute_baseline_kv
from headflow.oracle import ModelOracle
from headflow.attribution import SamplingSpec, sample_masks
cfg = ModelConfig()
m = gen_copyhead_model(cfg, WiringSpec(), seed=0)
seq = gen_tasks(m, 1, seed=1)[0]
o = ModelOracle(cfg, m.weights, seq, compute_baseline_kv(cfg, m.weights, gen_calibration_pool(m, 20, seed=2)))
qs = [o.query(x) for x in sample_masks(SamplingSpec(16, n_samples=N, seed=0))]
o.evaluate_batch(qs[:10])
t = time.perf_counter(); o.evaluate_batch(qs); dt = time.perf_counter() - t
print(f"{dt:.4f}")
"""


def oracle_time(n, disable):
    env = dict(os.environ, HEADFLOW_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", f"N = {n}\n" + ORACLE_SNIPPET],
                         env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--oracle-n", type=int, default=4000)
    args = ap.parse_args()

    print(f"{'kernel':<28}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for B in (1, 128):
        a = attend_inputs(B)
        t_np = best_of(lambda: kernels.attend_numpy(*a), args.repeat)
        t_nb = best_of(lambda: kernels.attend_numba(*a), args.repeat)
        print(f"{'attend B=' + str(B):<28}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>10.1f}")
    for N in (16, 64):
        g, c, yy = cd_inputs(2000, N)
        t_np = best_of(lambda: kernels.cd_gram_numpy(g, c, yy, 5e-4, 0.5, 1000, 1e-6), args.repeat)
        t_nb = best_of(lambda: kernels.cd_gram_numba(g, c, yy, 5e-4, 0.5, 1000, 1e-6), args.repeat)
        print(f"{'cd_gram N=' + str(N):<28}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>10.1f}")

    t_np = oracle_time(args.oracle_n, True)
    t_nb = oracle_time(args.oracle_n, False)
    label = f"oracle {args.oracle_n} masks"
    print(f"{label:<28}{t_np * 1e3:>12.1f}{t_nb * 1e3:>12.1f}{t_np / t_nb:>10.1f}")


if __name__ == "__main__":
    main()
