"""Multispectral tiles: storage, normalization, band grouping and synthesis.

Tile file layout (all integers little-endian)::

    b"MSTL" | u32 version=1 | u32 width | u32 height | u32 band_count
    per band: u32 name_len | name (UTF-8) | u8 divisor | float32 plane, row-major

A band with divisor ``r`` has extent ``(height // r, width // r)``.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from math import comb
from pathlib import Path

import numpy as np

from .models import BANDS_10M, BANDS_20M

TILE_MAGIC = b"MSTL"
TILE_VERSION = 1
REFLECTANCE_MAX = 10000.0
_HALF = REFLECTANCE_MAX / 2.0

# Sentinel-2 band identifiers for the ten bands used here (60m bands excluded).
SENTINEL2_BANDS = {
    "blue": ("B02", 10), "green": ("B03", 10), "red": ("B04", 10), "nir": ("B08", 10),
    "red_edge_1": ("B05", 20), "red_edge_2": ("B06", 20), "red_edge_3": ("B07", 20),
    "narrow_nir": ("B8A", 20), "swir1": ("B11", 20), "swir2": ("B12", 20),
}


class TileFormatError(ValueError):
    """Base class for malformed tile files or tiles violating their invariants."""


class TileMagicError(TileFormatError):
    pass


class TileVersionError(TileFormatError):
    pass


class TileTruncatedError(TileFormatError):
    pass


class TileExtentError(TileFormatError):
    pass


class NormalizationError(ValueError):
    pass


@dataclass
class Band:
    name: str
    divisor: int
    plane: np.ndarray


@dataclass
class Tile:
    width: int
    height: int
    bands: list = field(default_factory=list)

    def band(self, name):
        for b in self.bands:
            if b.name == name:
                return b
        raise KeyError(name)

    @property
    def band_names(self):
        return [b.name for b in self.bands]

    def validate(self):
        if not self.bands:
            raise TileFormatError("tile has no bands")
        if self.width <= 0 or self.height <= 0 or self.width % 2 or self.height % 2:
            raise TileExtentError(f"tile extents must be positive and even, got {self.width}x{self.height}")
        for b in self.bands:
            if b.divisor not in (1, 2):
                raise TileExtentError(f"band {b.name!r}: divisor must be 1 or 2, got {b.divisor}")
            want = (self.height // b.divisor, self.width // b.divisor)
            if tuple(b.plane.shape) != want:
                raise TileExtentError(f"band {b.name!r}: plane shape {tuple(b.plane.shape)} does not "
                                      f"match divisor {b.divisor} (expected {want})")


def write_tile(path, tile):
    tile.validate()
    parts = [TILE_MAGIC, struct.pack("<IIII", TILE_VERSION, tile.width, tile.height, len(tile.bands))]
    for b in tile.bands:
        name = b.name.encode("utf-8")
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<B", b.divisor))
        parts.append(np.ascontiguousarray(b.plane, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf, what):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise self.what(f"file truncated at byte {len(self.buf)} (needed {self.pos + n})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_tile(path):
    r = _Reader(Path(path).read_bytes(), TileTruncatedError)
    if r.take(4) != TILE_MAGIC:
        raise TileMagicError(f"{path}: not a tile file (bad magic)")
    version, width, height, count = r.unpack("<IIII")
    if version != TILE_VERSION:
        raise TileVersionError(f"{path}: unsupported tile version {version}")
    if count == 0:
        raise TileFormatError(f"{path}: tile has no bands")
    if width % 2 or height % 2:
        raise TileExtentError(f"{path}: extents must be even, got {width}x{height}")
    bands = []
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        (div,) = r.unpack("<B")
        if div not in (1, 2):
            raise TileExtentError(f"{path}: band {name!r} has divisor {div}")
        h, w = height // div, width // div
        plane = np.frombuffer(r.take(4 * h * w), dtype="<f4").reshape(h, w).astype(np.float32)
        bands.append(Band(name, div, plane))
    if r.pos != len(r.buf):
        raise TileFormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return Tile(width, height, bands)


# ----------------------------------------------------------------- samples

@dataclass
class MultiResSample:
    """10m group ``[4,H,W]`` and 20m group ``[6,H/2,W/2]``, values in [-1, 1]."""

    group_10m: np.ndarray
    group_20m: np.ndarray

    @property
    def size(self):
        return self.group_10m.shape[-1]

    def check(self):
        g10, g20 = self.group_10m, self.group_20m
        if g10.ndim != 3 or g10.shape[0] != len(BANDS_10M) or g10.shape[1] != g10.shape[2]:
            raise ValueError(f"group_10m must be [4,H,H], got {g10.shape}")
        h = g10.shape[1]
        if g20.shape != (len(BANDS_20M), h // 2, h // 2):
            raise ValueError(f"group_20m must be [6,{h // 2},{h // 2}], got {g20.shape}")
        for name, g in (("group_10m", g10), ("group_20m", g20)):
            if not np.all(np.isfinite(g)) or g.min() < -1.0 or g.max() > 1.0:
                raise ValueError(f"{name} values outside [-1, 1]")
        return self


def normalize(tile):
    """Map reflectance ``v`` to ``v / 5000 - 1`` and assemble the two band groups."""
    planes = {}
    for name in BANDS_10M + BANDS_20M:
        try:
            b = tile.band(name)
        except KeyError:
            raise NormalizationError(f"tile lacks band {name!r}") from None
        want = 1 if name in BANDS_10M else 2
        if b.divisor != want:
            raise NormalizationError(f"band {name!r} has divisor {b.divisor}, expected {want}")
        bad = int(np.count_nonzero(~((b.plane >= 0) & (b.plane <= REFLECTANCE_MAX))))
        if bad:
            raise NormalizationError(f"band {name!r}: {bad} values outside [0, {REFLECTANCE_MAX:g}]")
        planes[name] = b.plane.astype(np.float64) / _HALF - 1.0
    g10 = np.stack([planes[n] for n in BANDS_10M]).astype(np.float32)
    g20 = np.stack([planes[n] for n in BANDS_20M]).astype(np.float32)
    return MultiResSample(g10, g20).check()


def denormalize(sample):
    """Inverse of :func:`normalize`; returns a 10-band tile."""
    h = sample.group_10m.shape[1]
    bands = [Band(n, 1, ((p.astype(np.float64) + 1.0) * _HALF).astype(np.float32))
             for n, p in zip(BANDS_10M, sample.group_10m)]
    bands += [Band(n, 2, ((p.astype(np.float64) + 1.0) * _HALF).astype(np.float32))
              for n, p in zip(BANDS_20M, sample.group_20m)]
    return Tile(h, h, bands)


def upsample_20m_nearest(sample):
    """All ten bands on the 10m grid, the 20m planes pixel-replicated."""
    up = np.repeat(np.repeat(sample.group_20m, 2, axis=1), 2, axis=2)
    return np.concatenate([sample.group_10m, up], axis=0)


def box_downsample(x, times=1):
    """Repeated 2x2 mean over the last two axes."""
    for _ in range(times):
        *lead, h, w = x.shape
        x = x.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))
    return x


# --------------------------------------------------------------- filtering

@dataclass(frozen=True)
class FilterThresholds:
    cloud_rgb_mean: float = 0.6
    water_nir: float = -0.7
    water_fraction: float = 0.3


@dataclass(frozen=True)
class FilterDecision:
    keep: bool
    reason: str | None = None


def filter_sample(sample, thresholds=FilterThresholds()):
    """Drop bright (cloud-like) samples and samples dominated by dark NIR (water)."""
    rgb = sample.group_10m[:3]
    if float(rgb.mean()) > thresholds.cloud_rgb_mean:
        return FilterDecision(False, "cloud")
    nir = sample.group_10m[BANDS_10M.index("nir")]
    if float(np.mean(nir < thresholds.water_nir)) > thresholds.water_fraction:
        return FilterDecision(False, "water")
    return FilterDecision(True)


# --------------------------------------------------------------- synthesis

_LOADINGS = np.array([
    # brightness, vegetation
    [0.90, -0.20], [0.90, 0.00], [0.90, -0.30], [0.30, 0.90], [0.80, 0.20],
    [0.50, 0.80], [0.40, 0.85], [0.30, 0.90], [0.85, -0.10], [0.90, -0.30],
])
BAND_MEANS = np.array([800, 1100, 1300, 3000, 1600, 2400, 2800, 3100, 2600, 1800], dtype=np.float64)
BAND_AMPLITUDE = 350.0


def default_correlation():
    """Two-factor band correlation: PSD by construction, unit diagonal."""
    c = _LOADINGS @ _LOADINGS.T
    np.fill_diagonal(c, 1.0)
    return c


@dataclass
class SyntheticSpec:
    correlation: np.ndarray = field(default_factory=default_correlation)
    smoothness: int = 2
    seed: int = 0

    def __post_init__(self):
        c = np.asarray(self.correlation, dtype=np.float64)
        self.correlation = c
        n = len(BANDS_10M) + len(BANDS_20M)
        if c.shape != (n, n):
            raise ValueError(f"correlation must be {n}x{n}, got {c.shape}")
        if not np.allclose(c, c.T, atol=1e-12) or not np.allclose(np.diag(c), 1.0, atol=1e-12):
            raise ValueError("correlation must be symmetric with unit diagonal")
        if np.linalg.eigvalsh(c).min() < -1e-9:
            raise ValueError("correlation matrix is not positive semi-definite")
        if self.smoothness < 0:
            raise ValueError("smoothness must be >= 0")

    def mixing_matrix(self):
        try:
            return np.linalg.cholesky(self.correlation)
        except np.linalg.LinAlgError:
            w, v = np.linalg.eigh(self.correlation)
            return v * np.sqrt(np.clip(w, 0.0, None))


def _binomial_smooth(x, passes):
    """``passes`` applications of the periodic [1, 2, 1] / 4 filter along both image axes."""
    for _ in range(passes):
        for axis in (-2, -1):
            x = 0.25 * (np.roll(x, 1, axis) + 2.0 * x + np.roll(x, -1, axis))
    if passes:
        # variance of the combined binomial kernel, one factor per axis
        x = x / (comb(4 * passes, 2 * passes) / 16.0 ** passes)
    return x


class TileDataset:
    """Ordered, immutable collection of tiles."""

    def __init__(self, tiles):
        self.tiles = list(tiles)
        self._samples = None

    def __len__(self):
        return len(self.tiles)

    def __getitem__(self, i):
        return self.tiles[i]

    def samples(self):
        if self._samples is None:
            self._samples = [normalize(t) for t in self.tiles]
        return self._samples

    def save(self, directory, prefix="tile"):
        os.makedirs(directory, exist_ok=True)
        width = max(5, len(str(len(self.tiles))))
        paths = []
        for i, t in enumerate(self.tiles):
            p = Path(directory) / f"{prefix}_{i:0{width}d}.mstl"
            write_tile(p, t)
            paths.append(p)
        return paths

    @classmethod
    def load(cls, directory):
        paths = sorted(Path(directory).glob("*.mstl"))
        if not paths:
            raise FileNotFoundError(f"no .mstl tiles in {directory}")
        return cls(read_tile(p) for p in paths)


def generate_synthetic(spec, n, size):
    """``n`` tiles of correlated, spatially smooth reflectance fields."""
    if size < 4 or size % 2:
        raise ValueError(f"size must be even and >= 4, got {size}")
    from .autodiff.rng import RngStream
    stream = RngStream(spec.seed, "synthetic")
    mix = spec.mixing_matrix()
    nb = mix.shape[0]
    tiles = []
    for _ in range(n):
        noise = stream.normal((nb, size, size), dtype=np.float64)
        fields = _binomial_smooth(noise, spec.smoothness)
        mixed = np.tensordot(mix, fields, axes=1)
        refl = np.clip(BAND_MEANS[:, None, None] + BAND_AMPLITUDE * mixed, 0.0, REFLECTANCE_MAX)
        bands = []
        for i, name in enumerate(BANDS_10M + BANDS_20M):
            if name in BANDS_10M:
                bands.append(Band(name, 1, refl[i].astype(np.float32)))
            else:
                bands.append(Band(name, 2, box_downsample(refl[i]).astype(np.float32)))
        tiles.append(Tile(size, size, bands))
    return TileDataset(tiles)


def band_correlation(dataset):
    """Empirical 10x10 band correlation on the 20m grid, pooled over all pixels."""
    cols = []
    for t in dataset.tiles:
        planes = []
        for name in BANDS_10M + BANDS_20M:
            b = t.band(name)
            p = b.plane.astype(np.float64)
            planes.append(box_downsample(p) if b.divisor == 1 else p)
        cols.append(np.stack(planes).reshape(len(planes), -1))
    return np.corrcoef(np.concatenate(cols, axis=1))


def dataset_iter(dataset, batch_size, stream):
    """Batches of a seeded permutation of ``dataset``; the final partial batch is dropped."""
    n = len(dataset)
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size must lie in [1, {n}], got {batch_size}")
    order = stream.permutation(n)
    for b in range(n // batch_size):
        yield [dataset[int(i)] for i in order[b * batch_size:(b + 1) * batch_size]]
