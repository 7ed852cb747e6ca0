"""Time the numpy and Cython kernel backends on shapes seen during toy training.

    python3 benchmarks/bench_kernels.py [--repeat N] [--dtype float32|float64]

Prints one line per kernel and shape with the best-of-N time for each backend
and the speedup of the compiled core. Also times a full train step with each
backend. Outputs of the two backends are checked for agreement first.
"""
import argparse
import timeit

import numpy as np

from msgan import _kernels
from msgan._kernels import _reference

SHAPES = [  # (N, C, H, W, k, padding)
    (4, 3, 16, 16, 1, 0),
    (4, 64, 16, 16, 3, 1),
    (4, 64, 8, 8, 3, 1),
    (4, 64, 4, 4, 4, 0),
    (8, 32, 32, 32, 3, 1),
]


def _cases(dtype, rng):
    for n, c, h, w, k, p in SHAPES:
        x = rng.normal(size=(n, c, h, w)).astype(dtype)
        ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
        cols = rng.normal(size=(n * ho * wo, c * k * k)).astype(dtype)
        tag = f"{n}x{c}x{h}x{w} k{k}"
        yield f"im2col  {tag}", lambda m, x=x, k=k, p=p: m.im2col(x, k, p)
        yield f"col2im  {tag}", lambda m, c_=cols, s=x.shape, k=k, p=p: m.col2im(c_, s, k, p)
        idx = _reference.pool_argmax(x)
        g = rng.normal(size=(n, c, h // 2, w // 2)).astype(dtype)
        yield f"pool    {tag}", lambda m, x=x: m.pool_argmax(x)
        yield f"gather  {tag}", lambda m, x=x, i=idx: m.pool_gather(x, i)
        yield f"scatter {tag}", lambda m, g=g, i=idx: m.pool_scatter(g, i)


def _train_step_ms(backend, repeat):
    from msgan.data import SyntheticSpec, generate_synthetic
    from msgan.models import ModelConfig
    from msgan.training import TrainConfig, Trainer
    _kernels.use(backend)
    ds = generate_synthetic(SyntheticSpec(seed=0), 8, 16)
    trainer = Trainer(ModelConfig("rgb", 16, latent_dim=64, width_factor="1/8"), TrainConfig()).attach(ds)
    batch = next(trainer.batches())
    trainer.train_step(batch)  # warm-up
    return min(timeit.repeat(lambda: trainer.train_step(batch), number=1, repeat=repeat)) * 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    args = ap.parse_args()
    if "cython" not in _kernels.available():
        print("compiled core not built; only the numpy backend is available")
        return
    mods = {"numpy": _reference, "cython": _kernels._BACKENDS["cython"]}
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in _cases(np.dtype(args.dtype), rng):
        a, b = fn(mods["numpy"]), fn(mods["cython"])
        assert np.allclose(a, b, rtol=1e-5, atol=1e-5), f"backends disagree on {name}"
        t = {k: min(timeit.repeat(lambda m=m: fn(m), number=3, repeat=args.repeat)) / 3 * 1e3
             for k, m in mods.items()}
        print(f"{name:34s} {t['numpy']:10.3f} {t['cython']:10.3f} {t['numpy'] / t['cython']:7.2f}x")
    steps = {k: _train_step_ms(k, args.repeat) for k in mods}
    print(f"{'train step (rgb, top 16, width 1/8)':34s} {steps['numpy']:10.1f} {steps['cython']:10.1f} "
          f"{steps['numpy'] / steps['cython']:7.2f}x")


if __name__ == "__main__":
    main()
