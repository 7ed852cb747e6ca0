import json
import shutil
import subprocess

import numpy as np
import pytest

from msgan.cli import export_ppm, main, parse_run_config, to_bytes
from msgan.data import BANDS_10M, BANDS_20M, Band, Tile, read_tile, write_tile


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def flat_tile(value, size=4):
    bands = [Band(n, 1, np.full((size, size), value, np.float32)) for n in BANDS_10M]
    bands += [Band(n, 2, np.full((size // 2, size // 2), value, np.float32)) for n in BANDS_20M]
    return Tile(size, size, bands)


# ---------------------------------------------------------------- config

def test_run_config_unknown_keys_rejected():
    for doc in [{"modle": {}}, {"train": {"lr": 1}}, {"data": {"tile": "x"}},
                {"data": {"synthetic": {"count": 3, "sise": 4}}}]:
        with pytest.raises(Exception):
            parse_run_config(doc)


def test_run_config_defaults():
    run = parse_run_config({})
    assert run.train.learning_rate == 1e-3 and run.train.lambda_gp == 10 and run.train.batch_size == 4
    assert run.train.epochs == 12 and run.model.top_resolution == 256


# ---------------------------------------------------------------- shapes

def test_shapes_full_rgb_config(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"model": {"variant": "rgb", "top_resolution": 256}})
    assert main(["shapes", "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert "MISMATCH" not in out and "reference generator table (m=3): match" in out


def test_shapes_truncated_schedule(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"variant": "rgb", "top_resolution": 8})
    assert main(["shapes", "--config", cfg]) == 0
    assert "256" not in capsys.readouterr().out


def test_shapes_malformed_json(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text("{\"model\": ")
    assert main(["shapes", "--config", str(p)]) == 2
    assert "malformed JSON" in capsys.readouterr().err


def test_shapes_invalid_config(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"model": {"top_resolution": 12}})
    assert main(["shapes", "--config", cfg]) == 2


# -------------------------------------------------------------- selftest

def test_selftest_passes(capsys):
    assert main(["selftest", "--instances", "3"]) == 0
    assert "all" in capsys.readouterr().out


def test_selftest_injected_fault_names_conv2d(capsys):
    assert main(["selftest", "--instances", "2", "--inject-fault", "conv2d"]) == 1
    failed = [l for l in capsys.readouterr().out.splitlines() if l.startswith("failed:")][0]
    assert "grad:conv2d" in failed


# ----------------------------------------------------- synth/train/sample

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "tiles"), "--count", "12", "--size", "16"]) == 0
    cfg = write_json(root / "run.json", {
        "model": {"variant": "tenband_hybrid", "top_resolution": 16, "width_factor": "1/8", "latent_dim": 32},
        "train": {"max_steps": 6}})
    assert main(["train", "--config", cfg, "--data", str(root / "tiles"), "--out", str(root / "run")]) == 0
    return root


def test_train_writes_checkpoint_and_metrics(trained):
    rows = (trained / "run" / "metrics.csv").read_text().splitlines()
    assert len(rows) == 7
    values = np.array([[float(v) for v in r.split(",")[:5]] for r in rows[1:]])
    assert np.all(np.isfinite(values))
    assert (trained / "run" / "checkpoint.msgc").exists()


def test_sample_deterministic_and_hybrid_layout(trained):
    ck = str(trained / "run" / "checkpoint.msgc")
    for out in ("s1", "s2"):
        assert main(["sample", "--checkpoint", ck, "--count", "2", "--seed", "4", "--out", str(trained / out)]) == 0
    a, b = sorted((trained / "s1").iterdir()), sorted((trained / "s2").iterdir())
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    t = read_tile(a[0])
    assert [(b.name, b.plane.shape) for b in t.bands] == \
        [(n, (16, 16)) for n in BANDS_10M] + [(n, (8, 8)) for n in BANDS_20M]
    assert all(0 <= b.plane.min() and b.plane.max() <= 10000 for b in t.bands)


def test_sample_invalid_checkpoint(trained, tmp_path):
    bad = tmp_path / "bad.msgc"
    bad.write_bytes(b"garbage")
    assert main(["sample", "--checkpoint", str(bad), "--count", "1", "--seed", "0", "--out", str(tmp_path)]) == 2
    assert main(["sample", "--checkpoint", str(tmp_path / "missing"), "--count", "1", "--seed", "0",
                 "--out", str(tmp_path)]) == 2


def test_train_missing_data(tmp_path):
    cfg = write_json(tmp_path / "run.json", {"model": {"top_resolution": 8}})
    assert main(["train", "--config", cfg, "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2


def test_train_from_synthetic_section(tmp_path):
    cfg = write_json(tmp_path / "run.json", {
        "model": {"variant": "rgb", "top_resolution": 8, "width_factor": "1/64", "latent_dim": 8},
        "train": {"max_steps": 2}, "data": {"synthetic": {"count": 8, "size": 8, "seed": 1}}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 0


# ---------------------------------------------------------------- export

def test_byte_mapping_endpoints():
    np.testing.assert_array_equal(to_bytes([-1.0, 0.0, 1.0, -3.0, 7.0]), [0, 128, 255, 0, 255])


@pytest.mark.parametrize("refl,byte", [(0.0, 0), (10000.0, 255), (5000.0, 128)])
def test_export_flat_tiles(tmp_path, refl, byte):
    tile = tmp_path / "t.mstl"
    write_tile(tile, flat_tile(refl))
    out = tmp_path / "x.ppm"
    assert main(["export", "--tile", str(tile), "--bands", "red,green,blue", "--out", str(out)]) == 0
    raw = out.read_bytes()
    header = b"P6\n4 4\n255\n"
    assert raw.startswith(header) and raw[len(header):] == bytes([byte]) * 48


def test_export_replicates_20m_band():
    t = flat_tile(5000.0)
    t.band("swir1").plane[0, 0] = 10000.0
    body = export_ppm(t, ["swir1", "red", "blue"])[len(b"P6\n4 4\n255\n"):]
    img = np.frombuffer(body, np.uint8).reshape(4, 4, 3)
    assert (img[:2, :2, 0] == 255).all() and img[2, 2, 0] == 128


def test_export_unknown_band(tmp_path, capsys):
    tile = tmp_path / "t.mstl"
    write_tile(tile, flat_tile(0.0))
    assert main(["export", "--tile", str(tile), "--bands", "red,green,ultraviolet",
                 "--out", str(tmp_path / "x.ppm")]) == 2
    assert "ultraviolet" in capsys.readouterr().err


def test_console_script_usage_error():
    exe = shutil.which("msgan")
    if exe is None:
        pytest.skip("console script not installed")
    r = subprocess.run([exe, "shapes"], capture_output=True, text=True)
    assert r.returncode == 2
