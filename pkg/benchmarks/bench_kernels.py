"""Compare the compiled kernels against the numpy fallback.

Times each row kernel on batch-sized inputs, then a full training step with
each backend (the step benchmark runs in a subprocess per backend because the
backend is fixed at import).

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from vmtlab import kernels

STEP_SNIPPET = """
import json
from vmtlab import kernels, trainer
from vmtlab.config import ExperimentConfig
import time
n = {n}
cfg = ExperimentConfig().update("train", iterations=10**6, eval_interval=10**9)
state = trainer.train_vmt(cfg, stop_at=5)
t0 = time.perf_counter()
trainer.train_vmt(cfg, state=state, stop_at=5 + n)
print(json.dumps({{"backend": kernels.BACKEND, "ms_per_step": 1e3 * (time.perf_counter() - t0) / n}}))
"""


def bench_row_kernels(repeat: int) -> list[tuple[str, str, float]]:
    rng = np.random.default_rng(0)
    z = rng.normal(size=(128, 2))
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    q = p[::-1].copy()
    g = rng.normal(size=128)
    h = rng.normal(size=(128, 64))
    b = rng.normal(size=64)
    gh = rng.normal(size=(128, 64))
    cases = {
        "softmax_rows": lambda m: m.softmax_rows(z),
        "kl_rows": lambda m: m.kl_rows(p, q),
        "kl_rows_vjp": lambda m: m.kl_rows_vjp(p, q, g),
        "entropy_rows": lambda m: m.entropy_rows(p),
        "bias_act_": lambda m: m.bias_act_(h.copy(), b, True),
        "bias_act_vjp": lambda m: m.bias_act_vjp(h, gh, True),
    }
    out = []
    for name, fn in cases.items():
        for backend, mod in kernels.backends().items():
            t = min(timeit.repeat(lambda: fn(mod), number=200, repeat=repeat)) / 200
            out.append((name, backend, t * 1e6))
    return out


def bench_step(steps: int) -> list[dict]:
    rows = []
    for forced in ("", "python"):
        env = dict(os.environ, VMTLAB_KERNELS=forced)
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=steps)], env=env,
                             capture_output=True, text=True, check=True)
        rows.append(json.loads(res.stdout.strip().splitlines()[-1]))
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--steps", type=int, default=200)
    args = ap.parse_args()
    if "cython" not in kernels.backends():
        print("compiled kernels not built; only the fallback is available")
    print(f"{'kernel':<16}{'backend':<10}{'us/call':>10}")
    for name, backend, us in bench_row_kernels(args.repeat):
        print(f"{name:<16}{backend:<10}{us:>10.2f}")
    print()
    for row in bench_step(args.steps):
        print(f"training step ({row['backend']}): {row['ms_per_step']:.3f} ms")


if __name__ == "__main__":
    main()
