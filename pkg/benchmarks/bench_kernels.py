"""Time each hot kernel in its numba-compiled and pure-numpy form.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--seconds S]

Inputs are sized like a 30 s excerpt at 44.1 kHz (about 2600 STFT frames).
The compiled kernels are warmed up once before timing so JIT cost is
reported separately.
"""

import argparse
import time
import timeit

import numpy as np

from songreason import _accel
from songreason._kernels import LOOP_IMPLS, NUMPY_IMPLS


def make_inputs(seconds: float, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    frames = int(seconds * 44100 / 512)
    logmag = np.log1p(100 * rng.random((frames, 1025)))
    env = np.abs(rng.normal(size=frames))
    emission = rng.random((frames // 4, 25))
    return {
        "spectral_flux": (logmag,),
        "autocorr": (env, 400),
        "beat_dp": (env, 43.0, 100.0),
        "viterbi": (emission, 2.0),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seconds", type=float, default=30.0)
    args = ap.parse_args()
    inputs = make_inputs(args.seconds)
    print(f"{'kernel':<14}{'jit (s)':>10}{'numba (ms)':>12}{'numpy (ms)':>12}{'speedup':>9}")
    for name, call_args in inputs.items():
        compiled = _accel.jit(LOOP_IMPLS[name])
        t0 = time.perf_counter()
        compiled(*call_args)
        jit_s = time.perf_counter() - t0
        fast = min(timeit.repeat(lambda: compiled(*call_args), number=1, repeat=args.repeat))
        slow = min(timeit.repeat(lambda: NUMPY_IMPLS[name](*call_args), number=1,
                                 repeat=args.repeat))
        print(f"{name:<14}{jit_s:>10.2f}{fast * 1e3:>12.3f}{slow * 1e3:>12.3f}{slow / fast:>8.1f}x")


if __name__ == "__main__":
    main()
