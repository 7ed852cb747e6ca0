"""``msgan`` command line: shape audits, self-tests, data, training, sampling, export.

Exit codes: 0 success, 1 a check failed, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff.rng import RngStream
from .autodiff.tensor import Tensor, no_grad, precision
from .data import (BANDS_10M, BANDS_20M, REFLECTANCE_MAX, Band, NormalizationError, SyntheticSpec, Tile,
                   TileDataset, TileFormatError, box_downsample, generate_synthetic, read_tile, write_tile)
from .models import ConfigError, ModelConfig
from .training import (CheckpointError, TrainConfig, Trainer, TrainingError, load_checkpoint,
                       trainer_from_checkpoint)

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
CHECKPOINT_NAME = "checkpoint.msgc"
METRICS_NAME = "metrics.csv"

_SYNTH_KEYS = {"count", "size", "seed", "smoothness", "correlation"}


class UsageError(Exception):
    """Bad flags or input files; reported on stderr with exit code 2."""


# ------------------------------------------------------------------ config

@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: dict


def _read_json(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON ({exc})") from None


def _object(value, what):
    if not isinstance(value, dict):
        raise UsageError(f"{what} must be a JSON object")
    return value


def parse_run_config(doc):
    """Validate a run configuration document; unknown keys are errors at every level."""
    doc = _object(doc, "run config")
    unknown = set(doc) - {"model", "train", "data"}
    if unknown:
        raise UsageError(f"unknown run config sections: {sorted(unknown)}")
    try:
        model = ModelConfig.from_dict(_object(doc.get("model", {}), "model"))
        train = TrainConfig.from_dict(_object(doc.get("train", {}), "train"))
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    data = _object(doc.get("data", {}), "data")
    unknown = set(data) - {"tiles", "synthetic"}
    if unknown:
        raise UsageError(f"unknown data keys: {sorted(unknown)}")
    if len(data) > 1:
        raise UsageError("data takes either 'tiles' or 'synthetic', not both")
    if "synthetic" in data:
        unknown = set(_object(data["synthetic"], "data.synthetic")) - _SYNTH_KEYS
        if unknown:
            raise UsageError(f"unknown data.synthetic keys: {sorted(unknown)}")
    return RunConfig(model, train, data)


def load_run_config(path):
    return parse_run_config(_read_json(path))


def _synthetic_spec(d):
    kw = {k: d[k] for k in ("smoothness", "seed") if k in d}
    try:
        if "correlation" in d:
            kw["correlation"] = np.asarray(d["correlation"], dtype=np.float64)
        return SyntheticSpec(**kw)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid synthetic spec: {exc}") from None


def _dataset(run, data_dir):
    if data_dir is not None:
        return TileDataset.load(data_dir)
    if "tiles" in run.data:
        return TileDataset.load(run.data["tiles"])
    if "synthetic" in run.data:
        s = run.data["synthetic"]
        return generate_synthetic(_synthetic_spec(s), int(s.get("count", 64)),
                                  int(s.get("size", run.model.top_resolution)))
    raise UsageError("no training data: pass --data or set data.tiles / data.synthetic")


# ---------------------------------------------------------------- commands

def cmd_shapes(args):
    from .audit import shape_audit, table_rows_match
    doc = _read_json(args.config)
    if isinstance(doc, dict) and "model" in doc:
        config = parse_run_config(doc).model
    else:
        config = ModelConfig.from_dict(_object(doc, "model config"))
    rows = shape_audit(config)
    for r in rows:
        print(r.format())
    ok = all(r.match for r in rows)
    print(f"{sum(r.match for r in rows)}/{len(rows)} rows match")
    m = {"rgb": 3, "tenband_interp": 10}.get(config.variant)
    if m and config.top_resolution == 256 and config.width_factor == 1 and not config.conv_thinning:
        g_ok, d_ok, _ = table_rows_match(config, m)
        print(f"reference generator table (m={m}): {'match' if g_ok else 'MISMATCH'}")
        print(f"reference discriminator table (m={m}): {'match' if d_ok else 'MISMATCH'}")
        ok = ok and g_ok and d_ok
    return EXIT_OK if ok else EXIT_CHECK


def cmd_selftest(args):
    from . import selftest
    name = args.precision or None

    def run():
        return selftest.run_all(name or "double", instances=args.instances, seed=args.seed)

    if args.inject_fault:
        with selftest.inject_fault(args.inject_fault):
            results = run()
    else:
        results = run()
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_CHECK
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_synth(args):
    spec = _synthetic_spec(_check_synth_doc(_read_json(args.spec))) if args.spec else SyntheticSpec()
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.size < 4 or args.size % 2:
        raise UsageError(f"--size must be even and >= 4, got {args.size}")
    ds = generate_synthetic(spec, args.count, args.size)
    paths = ds.save(args.out)
    print(f"wrote {len(paths)} tiles to {args.out}")
    return EXIT_OK


def _check_synth_doc(doc):
    unknown = set(_object(doc, "synthetic spec")) - (_SYNTH_KEYS - {"count", "size"})
    if unknown:
        raise UsageError(f"unknown synthetic spec keys: {sorted(unknown)}")
    return doc


def cmd_train(args):
    run = load_run_config(args.config)
    train = run.train
    if args.steps is not None:
        train = TrainConfig.from_dict({**train.to_dict(), "max_steps": args.steps})
    dataset = _dataset(run, args.data)
    top = run.model.top_resolution
    for t in dataset.tiles:
        ratio = t.width // top
        if t.width != t.height or t.width < top or ratio * top != t.width or ratio & (ratio - 1):
            raise UsageError(f"tile size {t.width}x{t.height} is not top_resolution {top} "
                             "times a power of two")
    if len(dataset) < train.batch_size:
        raise UsageError(f"dataset has {len(dataset)} tiles, fewer than batch_size {train.batch_size}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(run.model, train).attach(dataset)
    history = trainer.run(metrics_path=out / METRICS_NAME, checkpoint_path=out / CHECKPOINT_NAME,
                          checkpoint_every=args.checkpoint_every)
    last = history[-1] if history else None
    summary = f"trained {trainer.step_count} steps"
    if last:
        summary += f"; last d_loss {last.d_loss:.4f}, g_loss {last.g_loss:.4f}"
    print(summary)
    return EXIT_OK


def generated_tiles(generator, images):
    """Denormalized tiles, one per batch item, laid out per variant."""
    config = generator.config
    top = config.top_resolution
    v = config.variant

    def refl(x):
        return ((np.clip(x.astype(np.float64), -1.0, 1.0) + 1.0) * (REFLECTANCE_MAX / 2)).astype(np.float32)

    tiles = []
    for i in range(images.batch_size):
        if v == "rgb":
            img = images[(top, "rgb")].data[i]
            bands = [Band(n, 1, refl(p)) for n, p in zip(("red", "green", "blue"), img)]
        else:
            if v == "tenband_interp":
                img = images[(top, "all")].data[i]
                g10, g20 = img[:4], box_downsample(img[4:])
            elif v == "tenband_grouped":
                g10, g20 = images[(top, "10m")].data[i], images[(top // 2, "20m")].data[i]
            else:
                g10, g20 = images[(top, "10m")].data[i], images[(top // 2, "all")].data[i][4:]
            bands = [Band(n, 1, refl(p)) for n, p in zip(BANDS_10M, g10)]
            bands += [Band(n, 2, refl(p)) for n, p in zip(BANDS_20M, g20)]
        tiles.append(Tile(top, top, bands))
    return tiles


def cmd_sample(args):
    ckpt = load_checkpoint(args.checkpoint)
    trainer = trainer_from_checkpoint(ckpt)
    g = trainer.g
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    z = RngStream(args.seed, "sample").normal((args.count, g.config.latent_dim))
    with no_grad():
        images = g(Tensor(z))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(args.count)))
    for i, tile in enumerate(generated_tiles(g, images)):
        write_tile(out / f"sample_{i:0{width}d}.mstl", tile)
    print(f"wrote {args.count} samples to {out}")
    return EXIT_OK


def to_bytes(values):
    """Map [-1, 1] to 0..255 via floor((v + 1) / 2 * 255 + 0.5), clamped."""
    v = np.asarray(values, dtype=np.float64)
    return np.clip(np.floor((v + 1.0) / 2.0 * 255.0 + 0.5), 0, 255).astype(np.uint8)


def export_ppm(tile, band_names):
    """Binary P6 image bytes from three bands, 20m planes pixel-replicated."""
    planes = []
    for name in band_names:
        try:
            b = tile.band(name)
        except KeyError:
            raise UsageError(f"tile has no band {name!r}; available: {', '.join(tile.band_names)}") from None
        p = b.plane.astype(np.float64)
        if b.divisor == 2:
            p = np.repeat(np.repeat(p, 2, axis=0), 2, axis=1)
        planes.append(to_bytes(p / (REFLECTANCE_MAX / 2) - 1.0))
    rgb = np.stack(planes, axis=-1)
    header = f"P6\n{tile.width} {tile.height}\n255\n".encode("ascii")
    return header + rgb.tobytes()


def cmd_export(args):
    names = [n.strip() for n in args.bands.split(",")]
    if len(names) != 3 or not all(names):
        raise UsageError("--bands takes exactly three comma-separated band names")
    tile = read_tile(args.tile)
    Path(args.out).write_bytes(export_ppm(tile, names))
    print(f"wrote {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(prog="msgan", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("shapes", help="audit layer shapes against the expected tables")
    s.add_argument("--config", required=True, help="run config or bare model config (JSON)")
    s.set_defaults(func=cmd_shapes)

    s = sub.add_parser("selftest", help="finite-difference and oracle checks")
    s.add_argument("--precision", choices=("single", "double"), help="compute precision (default double)")
    s.add_argument("--instances", type=int, default=20, help="random instances per gradient check")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--inject-fault", choices=("conv2d",), help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_selftest)

    s = sub.add_parser("synth", help="write synthetic multispectral tiles")
    s.add_argument("--spec", help="JSON with correlation, smoothness, seed (all optional)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, default=64, help="tile width/height in 10m pixels")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train from a run config")
    s.add_argument("--config", required=True)
    s.add_argument("--data", help="tile directory (overrides the config's data section)")
    s.add_argument("--out", required=True, help="directory for the checkpoint and metrics CSV")
    s.add_argument("--steps", type=int, help="stop after this many steps")
    s.add_argument("--checkpoint-every", type=int, help="also checkpoint every N steps")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate tiles from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("export", help="write three bands of a tile as a binary PPM")
    s.add_argument("--tile", required=True)
    s.add_argument("--bands", required=True, help="e.g. red,green,blue")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export)
    return p


_INPUT_ERRORS = (UsageError, ConfigError, TileFormatError, NormalizationError, CheckpointError,
                 FileNotFoundError, NotADirectoryError, json.JSONDecodeError)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "precision", None):
            with precision(args.precision):
                return args.func(args)
        return args.func(args)
    except _INPUT_ERRORS as exc:
        print(f"msgan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"msgan {args.command}: training failed: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
