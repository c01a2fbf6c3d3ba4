"""Time the rollout and trace kernels on both backends.

    python benchmarks/bench_kernels.py [--n 100000] [--horizon 20] [--repeat 3]

The numba path is compiled once before timing.  Both paths consume the same
uniforms, so the script also checks that they return identical arrays.
"""
import argparse
import time

import numpy as np

from casa import kernels
from casa.mdp import make_rng, random_mdp, random_policy


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--n", type=int, default=100_000)
    parser.add_argument("--horizon", type=int, default=20)
    parser.add_argument("--states", type=int, default=20)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args()

    rng = make_rng(0)
    mdp = random_mdp(args.states, 4, 0.95, rng)
    mu = random_policy(args.states, 4, rng, floor=0.05)
    start = rng.integers(0, args.states, args.n)
    uniforms = rng.random((args.n, args.horizon, 2))
    roll_args = (start, mu.probs, mdp.transition, mdp.reward, mdp.terminal_mask, uniforms)

    kernels.rollout(start[:2], mu.probs, mdp.transition, mdp.reward, mdp.terminal_mask, uniforms[:2], use_numba=True)
    t_nb, out_nb = best_of(lambda: kernels.rollout(*roll_args, use_numba=True), args.repeat)
    t_np, out_np = best_of(lambda: kernels.rollout(*roll_args, use_numba=False), args.repeat)
    same = all(np.array_equal(a, b) for a, b in zip(out_nb, out_np))
    print(f"rollout  N={args.n} H={args.horizon}: numba {t_nb * 1e3:8.1f} ms  numpy {t_np * 1e3:8.1f} ms  "
          f"speedup {t_np / t_nb:5.1f}x  identical={same}")

    _, _, rewards, probs, dones, lengths = out_nb
    delta = rewards - 0.1
    weight = np.minimum(probs * 1.1, 1.05)
    trace_args = (delta, weight, weight, dones, lengths, 0.95)
    kernels.discounted_trace(delta[:2], weight[:2], weight[:2], dones[:2], lengths[:2], 0.95, use_numba=True)
    t_nb, g_nb = best_of(lambda: kernels.discounted_trace(*trace_args, use_numba=True), args.repeat)
    t_np, g_np = best_of(lambda: kernels.discounted_trace(*trace_args, use_numba=False), args.repeat)
    gap = float(np.abs(g_nb - g_np).max())
    print(f"trace    N={args.n} H={args.horizon}: numba {t_nb * 1e3:8.1f} ms  numpy {t_np * 1e3:8.1f} ms  "
          f"speedup {t_np / t_nb:5.1f}x  max gap {gap:.1e}")


if __name__ == "__main__":
    main()
