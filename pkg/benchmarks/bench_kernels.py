"""Time the compiled kernels against the numpy fallback.

Runs each kernel on shapes the model actually produces (projection-sized
matmuls, recurrent matvecs, activation maps) plus one full forward and
backward pass through every modality, under both backends.  Reports the
median of `--repeats` timings and the speedup of compiled over numpy.

Usage: python3 benchmarks/bench_kernels.py [--repeats 7] [--scale 1.0]
"""

import argparse
import time

import numpy as np

from attnpop import backend, training
from attnpop.model import ModelConfig, PopularityModel
from attnpop.tensor import GradTape, Tensor


def _kernel_cases(scale):
    rng = np.random.default_rng(0)
    d = max(2, int(256 * scale))
    h = max(2, int(128 * scale))
    mat = np.ascontiguousarray(rng.standard_normal((d, h)))
    mat_t = np.ascontiguousarray(rng.standard_normal((h, d)))
    square = np.ascontiguousarray(rng.standard_normal((h, h)))
    vec = np.ascontiguousarray(rng.standard_normal(d))
    hid = np.ascontiguousarray(rng.standard_normal(h))
    act = np.ascontiguousarray(rng.standard_normal(h))
    pos = np.ascontiguousarray(np.abs(act) + 0.1)
    return (
        ("matmul", lambda k: k.matmul(mat, square)),
        ("matmul_nt", lambda k: k.matmul_nt(mat, mat)),
        ("matmul_tn", lambda k: k.matmul_tn(mat, mat)),
        ("matvec", lambda k: k.matvec(mat_t, vec)),
        ("vecmat", lambda k: k.vecmat(vec, mat)),
        ("outer", lambda k: k.outer(vec, hid)),
        ("tanh_fwd", lambda k: k.tanh_fwd(act)),
        ("tanh_bwd", lambda k: k.tanh_bwd(act, hid)),
        ("sigmoid_fwd", lambda k: k.sigmoid_fwd(act)),
        ("sigmoid_bwd", lambda k: k.sigmoid_bwd(pos, hid)),
        ("relu_fwd", lambda k: k.relu_fwd(act)),
        ("relu_bwd", lambda k: k.relu_bwd(act, hid)),
        ("softmax_fwd", lambda k: k.softmax_fwd(act)),
        ("softmax_bwd", lambda k: k.softmax_bwd(pos / pos.sum(), hid)),
    )


def _model_case(modality, scale):
    dim = max(4, int(64 * scale))
    config = ModelConfig(modality=modality,
                         feature_dim=max(8, int(512 * scale)),
                         embed_dim=dim, attention_hidden=dim // 2,
                         lstm_hidden=dim // 2, fusion_hidden=dim,
                         word_dim=max(4, int(50 * scale)), seed=0)
    model = PopularityModel.create(config)
    rng = np.random.default_rng(1)
    frames = tuple(Tensor(rng.standard_normal(config.feature_dim))
                   for _ in range(8)) if modality != "text" else None
    words = tuple(Tensor(rng.standard_normal(config.word_dim))
                  for _ in range(12)) if modality != "video" else None

    def run(_kernels):
        with GradTape() as tape:
            loss = training.bce_loss(
                model.predict(frames=frames, words=words).logit_node, 1)
            tape.backward(loss)

    return f"{modality} fwd+bwd", run


def _median_time(fn, kernels, repeats, inner):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        for _ in range(inner):
            fn(kernels)
        times.append((time.perf_counter() - start) / inner)
    return sorted(times)[len(times) // 2]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=7,
                        help="timing repetitions per case (median wins)")
    parser.add_argument("--inner", type=int, default=200,
                        help="kernel calls per timing sample")
    parser.add_argument("--scale", type=float, default=1.0,
                        help="shrink or grow every benchmarked shape")
    args = parser.parse_args()

    if "compiled" not in backend.available():
        parser.exit(1, "compiled backend is not built; nothing to compare\n")
    initial = backend.kernels

    cases = [(name, fn, args.inner) for name, fn in _kernel_cases(args.scale)]
    for modality in ("video", "text", "multimodal"):
        name, fn = _model_case(modality, args.scale)
        cases.append((name, fn, max(1, args.inner // 100)))

    width = max(len(name) for name, _, _ in cases)
    print(f"{'case'.ljust(width)}  {'numpy':>12}  {'compiled':>12}  speedup")
    for name, fn, inner in cases:
        timings = {}
        for which in ("numpy", "compiled"):
            kernels = backend.use(which)
            fn(kernels)  # warm up and materialize caches
            timings[which] = _median_time(fn, kernels, args.repeats, inner)
        ratio = timings["numpy"] / timings["compiled"]
        print(f"{name.ljust(width)}  {timings['numpy'] * 1e6:>10.2f}us  "
              f"{timings['compiled'] * 1e6:>10.2f}us  {ratio:>6.2f}x")
    backend.kernels = initial


if __name__ == "__main__":
    main()
