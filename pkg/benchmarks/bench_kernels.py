"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20] [--pairs 20000]

Part 1 calls both implementations of each kernel in-process on the same
inputs (numba timings exclude the first, compiling call). Part 2 runs one
training epoch in two subprocesses, one with GHAN_DISABLE_NUMBA=1.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from ghan import kernels

EPOCH_SCRIPT = """
import time
from ghan import kernels
from ghan.dataset import IngestConfig, assemble_dataset
from ghan.model import ModelConfig
from ghan.synth import SynthConfig, generate
from ghan.train import TrainConfig, dataset_samples, train
sc = SynthConfig(text_dim=64)
d = generate(sc)
ds = assemble_dataset(d.prices, d.events, d.embeddings, IngestConfig(text_dim=64))
mc = ModelConfig(n_stocks=len(ds.tickers), text_dim=64)
r = ds.ranges()
tr, va = dataset_samples(ds, r["train"], mc.dead_zone), dataset_samples(ds, r["val"], mc.dead_zone)
train(tr[:8], va[:4], mc, TrainConfig(epochs=1, batch_size=8))  # warm-up and JIT compile
t0 = time.perf_counter()
train(tr, va, mc, TrainConfig(epochs=1))
print(kernels.BACKEND, time.perf_counter() - t0)
"""


def kernel_cases(pairs, rng):
    n_seg = max(1, pairs // 4)
    seg = np.sort(rng.integers(0, n_seg, size=pairs)).astype(np.int64)
    logits = rng.normal(size=pairs)
    values = rng.normal(size=(pairs, 16))
    probs = kernels.np_segment_softmax(logits, seg, n_seg)
    close = 100 * np.exp(np.cumsum(rng.normal(0, 0.01, size=pairs)))
    return {
        "segment_max": (logits, seg, n_seg),
        "segment_sum": (values, seg, n_seg),
        "segment_softmax": (logits, seg, n_seg),
        "segment_softmax_backward": (probs, rng.normal(size=pairs), seg, n_seg),
        "rolling_mean": (close, 50),
        "ema": (close, 26),
        "wilder_rsi": (close, 14),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--pairs", type=int, default=20_000)
    ap.add_argument("--skip-epoch", action="store_true", help="only run the kernel micro-benchmarks")
    args = ap.parse_args(argv)

    if not kernels.HAS_NUMBA:
        print("numba unavailable; only the numpy backend can be timed", file=sys.stderr)
    cases = kernel_cases(args.pairs, np.random.default_rng(0))
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speed-up':>9s}")
    for name, inputs in cases.items():
        impls = kernels.implementations(name)
        times = {}
        for backend, fn in impls.items():
            fn(*inputs)
            times[backend] = min(timeit.repeat(lambda: fn(*inputs), number=1, repeat=args.repeat)) * 1e3
        nb = times.get("numba")
        ratio = f"{times['numpy'] / nb:8.1f}x" if nb else "      n/a"
        print(f"{name:28s} {times['numpy']:10.3f} {nb if nb else float('nan'):10.3f} {ratio}")

    if args.skip_epoch:
        return 0
    print("\none training epoch on synth defaults (text_dim 64):")
    for disabled in ("0", "1"):
        env = {**os.environ, "GHAN_DISABLE_NUMBA": disabled}
        out = subprocess.run([sys.executable, "-c", EPOCH_SCRIPT], env=env, capture_output=True, text=True, check=True)
        backend, secs = out.stdout.split()
        print(f"  {backend:6s} {float(secs):7.2f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
