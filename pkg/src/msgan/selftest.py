"""Finite-difference and brute-force oracle suites behind ``msgan selftest``."""
from __future__ import annotations

import contextlib
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import functional as F
from .autodiff.gradcheck import check_grad, finite_diff_grad, relative_error
from .autodiff.rng import RngStream
from .autodiff.tensor import DetachedGradientWarning, Tensor, grad, precision
from .layers import he_scale, minibatch_std, pixel_norm
from .models import Discriminator, ModelConfig, ScaleImageSet
from .training import gradient_penalty

DTYPES = {"single": np.float32, "double": np.float64}
# analytic gradients in float32 are compared with a float64 oracle
GRAD_TOL = {"double": 1e-4, "single": 2e-3}
GP_TOL = {"double": 1e-3, "single": 2e-2}


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self):
        return bool(np.isfinite(self.error) and self.error < self.tolerance)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:28s} err={self.error:.3e}  tol={self.tolerance:.0e}"


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _tie_free(rng, shape):
    # distinct values, spaced so +-h probes cannot reorder them
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) * 0.01 - 0.005 * n).reshape(shape) + rng.uniform(0, 1e-3)


def _cases(rng):
    """(name, f(list[Tensor]) -> scalar, list of input arrays) for one random instance."""
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 4))
    h = 2 * int(rng.integers(1, 4))
    o = int(rng.integers(1, 4))
    proj = rng.normal(size=(n, o, h, h))
    proj_c = rng.normal(size=(n, c, h, h))
    k = int(rng.choice([1, 3, 4]))
    pad = {1: 0, 3: 1, 4: 0}[k]
    hk = max(h, 4)

    def weighted(t, p):
        return F.sum(F.mul(t, Tensor(p.astype(t.dtype))))

    x = rng.normal(size=(n, c, hk, hk))
    yield "conv2d", lambda a: F.sum(F.mul(F.conv2d(a[0], a[1], a[2], pad), F.conv2d(a[0], a[1], a[2], pad))), \
        [x, rng.normal(size=(o, c, k, k)), rng.normal(size=o)]
    yield "dense", lambda a: F.sum(F.mul(F.dense(a[0], a[1], a[2]), F.dense(a[0], a[1], a[2]))), \
        [rng.normal(size=(n, 5)), rng.normal(size=(o, 5)), rng.normal(size=o)]
    yield "leaky_relu", lambda a: weighted(F.leaky_relu(a[0], 0.2), proj_c), [_away_from_zero(rng, (n, c, h, h))]
    yield "upsample_nearest2x", lambda a: weighted(F.upsample_nearest2x(a[0]), np.repeat(np.repeat(proj_c, 2, 2), 2, 3)), \
        [rng.normal(size=(n, c, h, h))]
    yield "max_pool2x", lambda a: weighted(F.max_pool2x(a[0]), proj_c[:, :, : h // 2, : h // 2]), \
        [_tie_free(rng, (n, c, h, h))]
    yield "avg_pool2x", lambda a: weighted(F.avg_pool2x(a[0]), proj_c[:, :, : h // 2, : h // 2]), \
        [rng.normal(size=(n, c, h, h))]
    yield "concat_channels", lambda a: weighted(F.concat_channels(a[0], a[1]), np.concatenate([proj_c, proj], 1)), \
        [rng.normal(size=(n, c, h, h)), rng.normal(size=(n, o, h, h))]
    # one channel would reduce pixel norm to sign(x), which has no gradient worth checking
    proj_pn = rng.normal(size=(n, c + 1, h, h))
    yield "pixel_norm", lambda a: weighted(pixel_norm(a[0]), proj_pn), [rng.normal(size=(n, c + 1, h, h))]
    nb = n + 1
    proj_mb = rng.normal(size=(nb, c + 1, h, h))
    yield "minibatch_std", lambda a: weighted(minibatch_std(a[0]), proj_mb), [rng.normal(size=(nb, c, h, h))]
    s = he_scale(c * 9)
    yield "eq_conv2d", lambda a: weighted(F.conv2d(a[0], F.mul(a[1], s), a[2], 1), proj), \
        [rng.normal(size=(n, c, h, h)), rng.normal(size=(o, c, 3, 3)), rng.normal(size=o)]
    proj_map = rng.normal(size=(n, o, 4, 4))
    yield "eq_dense_4x4_map", lambda a: weighted(
        F.leaky_relu(F.reshape(F.dense(a[0], F.mul(a[1], he_scale(5 * 16)), a[2]), (n, o, 4, 4))), proj_map), \
        [rng.normal(size=(n, 5)), rng.normal(size=(o * 16, 5)), rng.normal(size=o * 16) + 0.3]


def gradient_checks(instances=20, seed=0, precision_name="double"):
    """Per-primitive worst relative error over ``instances`` random draws."""
    rng = np.random.default_rng(seed)
    dtype = DTYPES[precision_name]
    worst = {}
    for _ in range(instances):
        for name, f, arrays in _cases(rng):
            err = check_grad(f, arrays, h=1e-5, dtype=dtype)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(f"grad:{k}", v, GRAD_TOL[precision_name]) for k, v in worst.items()]


def minibatch_std_oracle(x, eps=1e-8):
    """Two-pass loop oracle: explicit mean, explicit deviations, then averaging."""
    n, c, h, w = x.shape
    total = 0.0
    for ci in range(c):
        for hi in range(h):
            for wi in range(w):
                mu = sum(x[b, ci, hi, wi] for b in range(n)) / n
                var = sum((x[b, ci, hi, wi] - mu) ** 2 for b in range(n)) / n
                total += np.sqrt(var + eps)
    return total / (c * h * w)


def layer_oracles(shapes=100, seed=0):
    """Minibatch std against the loop oracle; pixel norm RMS against 1 and against ms / (ms + eps)."""
    rng = np.random.default_rng(seed)
    mb_err, rms_err, exact_err = 0.0, 0.0, 0.0
    for _ in range(shapes):
        n, c, h = int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 5))
        x = rng.normal(size=(n, c, h, h)) * rng.uniform(0.1, 10)
        with precision("double"):
            y = minibatch_std(Tensor(x)).data
            z = pixel_norm(Tensor(x)).data
        ref = minibatch_std_oracle(x)
        mb_err = max(mb_err, float(np.abs(y[:, -1] - ref).max()), float(np.abs(y[:, :-1] - x).max()))
        ms = np.array([[[sum(x[b, ci, i, j] ** 2 for ci in range(c)) / c for j in range(h)]
                        for i in range(h)] for b in range(n)])
        mean_sq = (z ** 2).mean(axis=1)
        # RMS is sqrt(ms / (ms + eps)): within 1e-5 of one only where eps / ms <= 1e-5
        live = ms >= 1e-3
        if live.any():
            rms_err = max(rms_err, float(np.abs(np.sqrt(mean_sq[live]) - 1.0).max()))
        exact_err = max(exact_err, float(np.abs(mean_sq - ms / (ms + 1e-8)).max()))
    return [CheckResult("oracle:minibatch_std", mb_err, 1e-6),
            CheckResult("oracle:pixel_norm_rms", rms_err, 1e-5),
            CheckResult("oracle:pixel_norm_exact", exact_err, 1e-9)]


TOY_GP_CONFIG = ModelConfig(variant="rgb", top_resolution=8, latent_dim=8, width_factor="1/256")


def toy_critic(seed=0, dtype=np.float64):
    with precision("double" if dtype == np.float64 else "single"):
        return Discriminator(TOY_GP_CONFIG, RngStream(seed, "toy-critic"))


def gp_second_order(seed=0, lambda_gp=10.0, precision_name="double"):
    """d(lambda * GP)/d(theta) against central differences over every critic parameter."""
    dtype = DTYPES[precision_name]
    d = toy_critic(seed, dtype)
    params = list(d.parameters().values())
    rng = np.random.default_rng(seed + 1)
    n = 3
    real = {k: rng.normal(size=(n, m, k[0], k[0])) for k, m in d.expected.items()}
    fake = {k: rng.normal(size=(n, m, k[0], k[0])) for k, m in d.expected.items()}

    def images(src, dt):
        return ScaleImageSet((r, g, Tensor(src[(r, g)].astype(dt))) for r, g in sorted(src))

    def penalty(dt):
        return F.mul(gradient_penalty(d, images(real, dt), images(fake, dt), RngStream(seed, "gp-eps")),
                     lambda_gp)

    for p in params:
        p.data = p.data.astype(dtype)
    with warnings.catch_warnings():
        # biases feeding only a leaky ReLU or the final score have a zero input-gradient dependence
        warnings.simplefilter("ignore", DetachedGradientWarning)
        analytic = np.concatenate([g.data.reshape(-1) for g in grad(penalty(dtype), params)])

    originals = [p.data.astype(np.float64).copy() for p in params]
    sizes = [p.size for p in params]
    flat0 = np.concatenate([o.reshape(-1) for o in originals])

    def f(vec):
        off = 0
        for p, o, sz in zip(params, originals, sizes):
            p.data = vec.data[off:off + sz].reshape(o.shape).copy()
            off += sz
        return penalty(np.float64)

    numeric = finite_diff_grad(f, flat0, h=1e-6)
    for p, o in zip(params, originals):
        p.data = o
    return CheckResult("gp:second_order", relative_error(analytic, numeric), GP_TOL[precision_name]), \
        sum(sizes)


@contextlib.contextmanager
def inject_fault(name):
    """Test hook: flip the sign of a primitive's input gradient."""
    if name != "conv2d":
        raise ValueError(f"no fault hook for {name!r}")
    original = F.Conv2d.backward

    def broken(ctx, g):
        gx, gw = original(ctx, g)
        return (None if gx is None else F.mul(gx, -1.0)), gw

    F.Conv2d.backward = staticmethod(broken)
    try:
        yield
    finally:
        F.Conv2d.backward = staticmethod(original)


def run_all(precision_name="double", instances=20, seed=0):
    results = gradient_checks(instances, seed, precision_name)
    results += layer_oracles(seed=seed)
    results.append(gp_second_order(seed, precision_name=precision_name)[0])
    return results
