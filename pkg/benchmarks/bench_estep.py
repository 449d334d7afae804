"""Time one E-step and one click-probability pass per backend.

    python benchmarks/bench_estep.py --sessions 200000 --repeat 5

The numba kernels are compiled (or loaded from cache) before timing starts.
"""

import argparse
import statistics
import time

import numpy as np

from vbclick import kernels
from vbclick.em import EmConfig, compile_dataset, e_step, init_params_for
from vbclick.models import ModelKind
from vbclick.synth import SimConfig, generate_ground_truth, simulate_sessions


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times), statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sessions", type=int, default=200_000)
    ap.add_argument("--kind", default="vubm2")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    kind = ModelKind.parse(args.kind)
    cfg = SimConfig(n_sessions=args.sessions)
    gt, _ = generate_ground_truth(cfg, seed=0)
    data = compile_dataset(simulate_sessions(gt, cfg, kind, seed=1), kind)
    params = init_params_for(data, EmConfig())
    sigma = params.sigma.values if params.sigma is not None else np.zeros(1)
    print(f"{kind.label}: {len(data):,} impressions, {len(data.chunks())} chunks, threads={args.threads}")

    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    results = {}
    for name in backends:
        _, click_probs = kernels.get_backend(name)
        e_step(data, params, args.threads, name)  # warm-up / JIT
        est = best_of(lambda: e_step(data, params, args.threads, name), args.repeat)
        cp = best_of(lambda: click_probs(data.a_idx, data.g_idx, data.s_idx, params.alpha.values,
                                         params.gamma.values, sigma, kind.exam_mode), args.repeat)
        results[name] = est[0]
        print(f"  {name:6s} e_step best {est[0] * 1e3:8.2f} ms  median {est[1] * 1e3:8.2f} ms   "
              f"click_probs best {cp[0] * 1e3:8.2f} ms")
    if len(results) == 2:
        print(f"  numba speed-up on e_step: {results['numpy'] / results['numba']:.1f}x")


if __name__ == "__main__":
    main()
