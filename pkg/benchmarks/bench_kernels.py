"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 200]

Also times whole SAAC gradient steps under each backend, in subprocesses so
that backend selection happens at import.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from saac import _kernels_py

try:
    from saac import _kernels as _compiled
except ImportError:
    _compiled = None

STEP_SCRIPT = """
import time
from saac import kernels
from saac.envs import make_env
from saac.numerics import make_rng
from saac.replay import ReplayBuffer, Transition
from saac.trainer import Learner, TrainConfig
cfg = TrainConfig(adversary="{variant}", hidden=(64, 64), batch_size=64)
env = make_env("hazard_point")
rng = make_rng(0)
buf = ReplayBuffer(2000, 4, 2)
s = env.reset(rng)
while len(buf) < 2000:
    a = rng.uniform(-1, 1, 2)
    r = env.step(a, rng)
    buf.push(Transition(s, a, r.reward, r.constraint_cost, r.next_state, r.terminated))
    s = env.reset(rng) if r.terminated or r.truncated else r.next_state
lrn = Learner(cfg, 4, 2, 1.0, rng)
for _ in range(20):
    lrn.train_step(buf, rng)
t = time.perf_counter()
for _ in range({steps}):
    lrn.train_step(buf, rng)
print(kernels.BACKEND, (time.perf_counter() - t) / {steps})
"""


def cases(rng):
    B, n_in, n_out = 64, 64, 64
    x = rng.normal(size=(B, n_in))
    W = rng.normal(size=(n_in, n_out))
    b = rng.normal(size=n_out)
    y = np.tanh(x @ W + b)
    dy = rng.normal(size=(B, n_out))
    out = np.empty((B, n_out))
    dW, db, dx = np.empty_like(W), np.empty_like(b), np.empty_like(x)
    p, g = rng.normal(size=20_000), rng.normal(size=20_000)
    m, v = np.zeros_like(p), np.zeros_like(p)
    pred, target = rng.normal(size=(B, 25)), rng.normal(size=(B, 25))
    taus = (np.arange(25) + 0.5) / 25
    grad = np.empty_like(pred)
    return {
        "dense_forward 64x64x64": lambda k: k.dense_forward(x, W, b, out, True),
        "dense_backward 64x64x64": lambda k: k.dense_backward(x, W, y, dy, dW, db, dx, True),
        "adam_update 20k": lambda k: k.adam_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 10),
        "polyak 20k": lambda k: k.polyak(m, p, 0.005),
        "quantile_huber 64x25x25": lambda k: k.quantile_huber(pred, target, taus, 1.0, grad),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--steps", type=int, default=100)
    args = ap.parse_args()
    if _compiled is None:
        print("compiled extension not built; only the fallback is available")
    print(f"{'kernel':<28}{'python us':>12}{'cython us':>12}{'speedup':>10}")
    for name, fn in cases(np.random.default_rng(0)).items():
        t_py = min(timeit.repeat(lambda: fn(_kernels_py), number=args.repeat, repeat=3))
        t_py *= 1e6 / args.repeat
        if _compiled is None:
            print(f"{name:<28}{t_py:>12.2f}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_compiled), number=args.repeat, repeat=3))
        t_c *= 1e6 / args.repeat
        print(f"{name:<28}{t_py:>12.2f}{t_c:>12.2f}{t_py / t_c:>9.2f}x")
    print()
    for variant in ("none", "cons", "cvar"):
        for pure in ("1", "0"):
            env = {**os.environ, "SAAC_PURE_PYTHON": pure}
            out = subprocess.run([sys.executable, "-c",
                                  STEP_SCRIPT.format(variant=variant, steps=args.steps)],
                                 env=env, capture_output=True, text=True, check=True)
            backend, secs = out.stdout.split()
            print(f"train_step[{variant}] {backend:<8}{float(secs) * 1e3:8.2f} ms")


if __name__ == "__main__":
    main()
