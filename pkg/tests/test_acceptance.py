"""The ten acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed together at the
end of the pytest run (see conftest.py) and also as each test finishes.
"""
import time

import numpy as np
import pytest

from msgan import selftest
from msgan.audit import shape_audit, table_rows_match
from msgan.autodiff import functional as F
from msgan.autodiff.gradcheck import finite_diff_grad
from msgan.autodiff.rng import RngStream
from msgan.autodiff.tensor import Tensor, precision
from msgan.cli import main
from msgan.data import (SyntheticSpec, band_correlation, default_correlation, denormalize, generate_synthetic,
                        normalize, read_tile, write_tile)
from msgan.models import Discriminator, Generator, ModelConfig, ScaleImageSet, build_discriminator, \
    build_generator, parameter_count
from msgan.training import (TrainConfig, Trainer, d_loss, g_loss, load_checkpoint, save_checkpoint,
                            trainer_from_checkpoint)

REPORT = {}


def record(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}: {detail}"
    REPORT[number] = line
    print(line)
    assert ok, line


# 1 -------------------------------------------------------------------------

def test_01_shape_conformance(tmp_path, capsys):
    t0 = time.perf_counter()
    full = tmp_path / "rgb.json"
    full.write_text('{"model": {"variant": "rgb", "top_resolution": 256, "width_factor": "1"}}')
    code = main(["shapes", "--config", str(full)])
    out = capsys.readouterr().out
    g3, d3, rows3 = table_rows_match(ModelConfig("rgb", 256), 3)
    g10, d10, rows10 = table_rows_match(ModelConfig("tenband_interp", 256), 10)
    concat10 = [r.computed for r in rows10 if r.layer == "Concat"]
    audit10 = all(r.match for r in shape_audit(ModelConfig("tenband_interp", 256)))
    elapsed = time.perf_counter() - t0
    ok = (code == 0 and "MISMATCH" not in out and g3 and d3 and g10 and d10 and audit10
          and concat10[0] == (138, 128, 128) and (522, 32, 32) in concat10 and elapsed < 1.0)
    record(1, "shape conformance", ok,
           f"m=3 rows {sum(r.match for r in rows3)}/{len(rows3)}, m=10 rows {sum(r.match for r in rows10)}/"
           f"{len(rows10)}, exit {code}, {elapsed:.2f}s")


# 2 -------------------------------------------------------------------------

def test_02_layer_oracles():
    mb, rms, exact = selftest.layer_oracles(shapes=100, seed=0)
    ok = mb.error < 1e-6 and rms.error < 1e-5 and exact.passed
    record(2, "layer oracles", ok,
           f"minibatch_std max err {mb.error:.1e} (<1e-6), pixel_norm |RMS-1| {rms.error:.1e} (<1e-5)")


# 3 -------------------------------------------------------------------------

def test_03_gradient_checks():
    t0 = time.perf_counter()
    results = selftest.gradient_checks(instances=20, seed=0, precision_name="double")
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.error)
    ok = all(r.error < 1e-4 for r in results) and elapsed < 60
    record(3, "gradient checks", ok,
           f"{len(results)} primitives x 20 instances, worst {worst.name} {worst.error:.1e} (<1e-4), {elapsed:.1f}s")


# 4 -------------------------------------------------------------------------

def test_04_second_order_gp():
    t0 = time.perf_counter()
    result, n_params = selftest.gp_second_order(seed=0, lambda_gp=10.0)
    elapsed = time.perf_counter() - t0
    ok = result.error < 1e-3 and n_params <= 500 and elapsed < 60
    record(4, "second-order GP check", ok,
           f"{n_params} critic parameters, rel err {result.error:.1e} (<1e-3), {elapsed:.1f}s")


# 5 -------------------------------------------------------------------------

def test_05_loss_algebra():
    with precision("double"):
        config = ModelConfig("rgb", 8, latent_dim=8, width_factor="1/128")
        g = build_generator(config, RngStream(0, "frozen-g"))
        d = build_discriminator(config, RngStream(0, "frozen-d"))
        rng = np.random.default_rng(5)
        n = 3
        real = ScaleImageSet((r, "rgb", Tensor(rng.uniform(-1, 1, (n, 3, r, r)))) for r in (4, 8))
        fake = g(Tensor(rng.normal(size=(n, 8))))
        lam = 10.0
        loss, parts = d_loss(d, real, fake, RngStream(7, "pinned"), lam, return_parts=True)

        # independent evaluation: same pinned epsilon, gradient norms by central differences
        eps = RngStream(7, "pinned").uniform((n, 1, 1, 1), dtype=np.float64)
        keys = real.keys()
        x_hat = {k: eps * real[k].data + (1 - eps) * fake[k].data for k in keys}
        norms = []
        for i in range(n):
            sizes = [x_hat[k][i].size for k in keys]
            flat = np.concatenate([x_hat[k][i].ravel() for k in keys])

            def score(v, i=i):
                off, items = 0, []
                for k, sz in zip(keys, sizes):
                    img = x_hat[k].copy()
                    img[i] = v.data[off:off + sz].reshape(img[i].shape)
                    items.append((k[0], k[1], Tensor(img)))
                    off += sz
                return F.sum(d(ScaleImageSet(items)))
            norms.append(np.linalg.norm(finite_diff_grad(score, flat, h=1e-6)))
        gp_ref = float(np.mean((np.array(norms) - 1.0) ** 2))
        d_fake_ref = float(np.mean(d(fake).data))
        d_real_ref = float(np.mean(d(real).data))
        loss_ref = d_fake_ref - d_real_ref + lam * gp_ref
        gl = g_loss(d, fake).item()
    errs = [abs(parts["d_fake"] - d_fake_ref), abs(parts["d_real"] - d_real_ref), abs(parts["gp"] - gp_ref),
            abs(loss.item() - loss_ref), abs(gl + d_fake_ref)]
    ok = max(errs) < 1e-6
    record(5, "loss algebra", ok, f"max term error {max(errs):.1e} (<1e-6), d_loss {loss.item():.6f}")


# 6 -------------------------------------------------------------------------

TOY6 = ModelConfig("rgb", 16, width_factor="1/8")


def _toy_run(seed):
    ds = generate_synthetic(SyntheticSpec(seed=0), 200, 16)
    t = Trainer(TOY6, TrainConfig(learning_rate=1e-3, lambda_gp=10.0, batch_size=4, seed=seed,
                                  max_steps=500)).attach(ds)
    hist = t.run()
    params = b"".join(p.data.tobytes() for p in {**t.g.parameters(), **t.d.parameters()}.values())
    return hist, params


@pytest.mark.slow
def test_06_toy_training_stability():
    t0 = time.perf_counter()
    hist, params = _toy_run(seed=0)
    hist2, params2 = _toy_run(seed=0)
    elapsed = time.perf_counter() - t0
    finite = all(np.isfinite([m.d_loss, m.g_loss, m.gp]).all() for m in hist)
    median = float(np.median(np.concatenate([m.grad_norms for m in hist[-100:]])))
    same = params == params2 and [m.row()[:-1] for m in hist] == [m.row()[:-1] for m in hist2]
    ok = len(hist) == 500 and finite and 0.5 <= median <= 1.5 and same
    record(6, "toy training stability", ok,
           f"{len(hist)} steps, finite={finite}, median grad norm (last 100) {median:.3f} in [0.5, 1.5], "
           f"bit-reproducible={same}, {elapsed:.0f}s for two runs")


# 7 -------------------------------------------------------------------------

def test_07_multiresolution_variants():
    ds = generate_synthetic(SyntheticSpec(seed=1), 8, 16)
    notes, ok = [], True
    for variant in ("tenband_interp", "tenband_grouped", "tenband_hybrid"):
        config = ModelConfig(variant, 16, latent_dim=32, width_factor="1/8")
        t = Trainer(config, TrainConfig(seed=2)).attach(ds)
        out = t.g(Tensor(t.latent(4).data))
        score = t.d(out)
        m = t.train_step(next(t.batches()))
        ok &= score.shape == (4, 1) and bool(np.isfinite([m.d_loss, m.g_loss]).all())
        if variant == "tenband_hybrid":
            top = [v.shape[1] for (r, _), v in out.items() if r == 16]
            below = [v.shape[1] for (r, _), v in out.items() if r < 16]
            ok &= top == [4] and set(below) == {10}
            notes.append(f"3C top channels {top}, below {sorted(set(below))}")
    record(7, "multi-resolution variants", ok, "3A/3B/3C forward + train_step ok; " + "; ".join(notes))


# 8 -------------------------------------------------------------------------

def test_08_reduced_footprint():
    ratio = parameter_count(ModelConfig("rgb", 256, width_factor="1/2")) / parameter_count(ModelConfig("rgb", 256))
    full, thin = ModelConfig("rgb", 256), ModelConfig("rgb", 256, conv_thinning=True)

    def gen_convs(c):
        return [len(b.convs) + (b.project is not None) for b in Generator(c).blocks]

    def disc_convs(c):
        return [len(s.block.convs) for s in Discriminator(c).trunk]

    halved = (all(t * 2 == f for t, f in zip(gen_convs(thin), gen_convs(full)))
              and all(t * 2 == f for t, f in zip(disc_convs(thin), disc_convs(full))))
    scales = sorted({k[0] for k in thin.image_keys()})
    ok = 0.24 < ratio < 0.30 and halved and scales == [4, 16, 64, 256]
    record(8, "reduced footprint", ok,
           f"param ratio {ratio:.4f} in (0.24, 0.30), convs per block G {gen_convs(full)}->{gen_convs(thin)}, "
           f"image scales {scales}")


# 9 -------------------------------------------------------------------------

def test_09_data_pipeline(tmp_path):
    rng = np.random.default_rng(0)
    exact = True
    spec = SyntheticSpec(seed=4)
    base = generate_synthetic(spec, 1, 8)[0]
    for i in range(1000):
        tile = base
        for b in tile.bands:
            b.plane = rng.uniform(0, 10000, b.plane.shape).astype(np.float32)
        path = tmp_path / "t.mstl"
        write_tile(path, tile)
        back = read_tile(path)
        exact &= all(a.plane.tobytes() == b.plane.tobytes() and a.name == b.name and a.divisor == b.divisor
                     for a, b in zip(tile.bands, back.bands))
    ds = generate_synthetic(SyntheticSpec(seed=6), 1000, 8)
    corr_err = float(np.abs(band_correlation(ds) - default_correlation()).max())
    inv_err = 0.0
    for t in ds.tiles[:100]:
        s = normalize(t)
        for a, b in zip(t.bands, denormalize(s).bands):
            inv_err = max(inv_err, float(np.abs(a.plane / 5000.0 - b.plane / 5000.0).max()))
    ok = exact and corr_err < 0.05 and inv_err < 1e-3
    record(9, "data pipeline", ok,
           f"1000 tiles bit-exact={exact}, correlation error {corr_err:.3f} (<0.05), inverse error {inv_err:.1e}")


# 10 ------------------------------------------------------------------------

def test_10_checkpoint_resume(tmp_path):
    ds = generate_synthetic(SyntheticSpec(seed=3), 24, 16)
    config = ModelConfig("rgb", 16, latent_dim=64, width_factor="1/8")

    def trainer():
        return Trainer(config, TrainConfig(seed=11)).attach(ds)

    straight = trainer()
    straight.run(steps=12)
    first = trainer()
    first.run(steps=7)  # crosses an epoch boundary (6 batches per epoch)
    save_checkpoint(tmp_path / "c.msgc", first)
    resumed = trainer_from_checkpoint(load_checkpoint(tmp_path / "c.msgc")).attach(ds)
    resumed.run(steps=5)

    def state(t):
        blobs = {**{k: p.data for k, p in {**t.g.parameters(), **t.d.parameters()}.items()},
                 **{f"g/{k}": v for k, v in t.opt_g.state.items()},
                 **{f"d/{k}": v for k, v in t.opt_d.state.items()}}
        return {k: np.asarray(v).tobytes() for k, v in blobs.items()}

    a, b = state(straight), state(resumed)
    ok = resumed.step_count == straight.step_count == 12 and a == b
    record(10, "checkpoint resume", ok,
           f"{len(a)} tensors bit-identical at step {resumed.step_count}: {a == b}")
