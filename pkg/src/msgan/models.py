"""Generator/discriminator construction for every architecture variant.

Variants:

``rgb``
    3 channels at every scale.
``tenband_interp``
    10 channels at every scale; the 20m bands are brought to the 10m grid by
    the data pipeline before training.
``tenband_grouped``
    The generator shares its trunk and emits the 10m group (4 channels) at
    each scale ``s`` and the 20m group (6 channels) pooled to ``s/2``. The
    discriminator runs a 10m branch over the top two scales and a 20m branch
    over the 20m top scale; their features are concatenated at ``top/4`` and
    a shared trunk follows.
``tenband_hybrid``
    Only the 10m group at the top scale, all ten bands at every lower scale.

``width_factor`` scales every channel count (rounding down, floor 1) and
``conv_thinning`` keeps one convolution per block with images only at scales
4, 16, 64 and 256.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import Tensor, as_tensor
from .layers import LRELU_SLOPE, EqConv2d, EqDense, minibatch_std, pixel_norm

VARIANTS = ("rgb", "tenband_interp", "tenband_grouped", "tenband_hybrid")
BASE_CHANNELS = {4: 512, 8: 512, 16: 512, 32: 512, 64: 256, 128: 128, 256: 64}
MAX_RESOLUTION = 256
THINNED_SCALES = (4, 16, 64, 256)


@dataclass(frozen=True)
class BandGroupSpec:
    name: str
    bands: tuple
    divisor: int

    @property
    def channels(self):
        return len(self.bands)


BANDS_10M = ("blue", "green", "red", "nir")
BANDS_20M = ("red_edge_1", "red_edge_2", "red_edge_3", "narrow_nir", "swir1", "swir2")

BAND_GROUPS = {
    "rgb": BandGroupSpec("rgb", ("red", "green", "blue"), 1),
    "10m": BandGroupSpec("10m", BANDS_10M, 1),
    "20m": BandGroupSpec("20m", BANDS_20M, 2),
    "all": BandGroupSpec("all", BANDS_10M + BANDS_20M, 1),
}


class ConfigError(ValueError):
    """The model configuration is invalid or not supported."""


def _fraction(value):
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value.strip())
    if isinstance(value, float):
        return Fraction(value).limit_denominator(1 << 16)
    return Fraction(value)


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "rgb"
    top_resolution: int = 256
    latent_dim: int = 512
    width_factor: Fraction = field(default=Fraction(1))
    conv_thinning: bool = False

    def __post_init__(self):
        object.__setattr__(self, "width_factor", _fraction(self.width_factor))
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        top = self.top_resolution
        if not isinstance(top, int) or top < 4 or top & (top - 1) or top > MAX_RESOLUTION:
            raise ConfigError(f"top_resolution must be a power of two in [4, {MAX_RESOLUTION}], got {top!r}")
        if not 0 < self.width_factor <= 1:
            raise ConfigError(f"width_factor must lie in (0, 1], got {self.width_factor}")
        if not isinstance(self.latent_dim, int) or self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be a positive integer, got {self.latent_dim!r}")
        if self.conv_thinning:
            if top not in THINNED_SCALES:
                raise ConfigError(f"conv_thinning needs top_resolution in {THINNED_SCALES}, got {top}")
            if self.variant not in ("rgb", "tenband_interp"):
                raise ConfigError(f"conv_thinning is not supported for variant {self.variant!r}")
        if self.variant == "tenband_grouped" and top < 16:
            raise ConfigError("tenband_grouped needs top_resolution >= 16 (branches merge at top/4)")
        if self.variant == "tenband_hybrid" and top < 8:
            raise ConfigError("tenband_hybrid needs top_resolution >= 8")

    # -- schedule --------------------------------------------------------
    @property
    def scales(self):
        """Resolutions of the generator blocks, 4 .. top."""
        out, s = [], 4
        while s <= self.top_resolution:
            out.append(s)
            s *= 2
        return out

    @property
    def image_scales(self):
        """Block resolutions at which images are exchanged between G and D."""
        if self.conv_thinning:
            return [s for s in THINNED_SCALES if s <= self.top_resolution]
        return self.scales

    def channels(self, scale):
        return max(1, int(np.floor(BASE_CHANNELS[scale] * self.width_factor)))

    @property
    def m_channels(self):
        groups = {"rgb": ["rgb"], "tenband_interp": ["all"], "tenband_grouped": ["10m", "20m"],
                  "tenband_hybrid": ["10m", "all"]}[self.variant]
        return {g: BAND_GROUPS[g].channels for g in groups}

    def emissions(self, scale):
        """(group, pooled) pairs emitted by the generator block at ``scale``."""
        if scale not in self.image_scales:
            return []
        if self.variant == "rgb":
            return [("rgb", False)]
        if self.variant == "tenband_interp":
            return [("all", False)]
        if self.variant == "tenband_grouped":
            return [("10m", False)] + ([("20m", True)] if scale >= 8 else [])
        return [("10m", False)] if scale == self.top_resolution else [("all", False)]

    def image_keys(self):
        """Sorted (resolution, group) keys of the image set exchanged between G and D."""
        keys = []
        for s in self.image_scales:
            for group, pooled in self.emissions(s):
                keys.append((s // 2 if pooled else s, group))
        return sorted(keys)

    def to_dict(self):
        d = asdict(self)
        d["width_factor"] = str(self.width_factor)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


class ScaleImageSet:
    """Images keyed by (resolution, group), ordered by resolution then group."""

    def __init__(self, entries=()):
        self._items = {}
        for res, group, image in entries:
            self.add(res, group, image)

    def add(self, resolution, group, image):
        image = as_tensor(image)
        if image.ndim != 4 or image.shape[2] != resolution or image.shape[3] != resolution:
            raise F.ShapeError(f"image for ({resolution}, {group}) has shape {image.shape}")
        self._items[(resolution, group)] = image

    def keys(self):
        return sorted(self._items)

    def items(self):
        return [(k, self._items[k]) for k in self.keys()]

    def entries(self):
        return [(r, g, self._items[(r, g)]) for r, g in self.keys()]

    def __getitem__(self, key):
        return self._items[key]

    def __contains__(self, key):
        return key in self._items

    def __len__(self):
        return len(self._items)

    @property
    def batch_size(self):
        return next(iter(self._items.values())).shape[0]

    def map(self, fn):
        return ScaleImageSet((r, g, fn(t)) for r, g, t in self.entries())

    def detach(self):
        return self.map(lambda t: t.detach())

    def shapes(self):
        return {k: t.shape for k, t in self.items()}


# ------------------------------------------------------------------ generator

@dataclass
class _Row:
    model: str
    block: str
    op: str
    act: str
    shape: tuple


class GenBlock:
    def __init__(self, config, scale, index, stream):
        self.scale = scale
        self.index = index
        self.first = scale == 4
        c = config.channels(scale)
        self.channels = c
        prefix = f"g.b{index}"
        n_conv3 = (0 if config.conv_thinning else 1) if self.first else (1 if config.conv_thinning else 2)
        self.project = None
        cin = c
        if self.first:
            L = config.latent_dim
            self.project = EqDense(L, c * 16, f"{prefix}.map4x4", stream, fan_in=L * 16)
        else:
            cin = config.channels(scale // 2)
        self.convs = []
        for i in range(n_conv3):
            self.convs.append(EqConv2d(cin if i == 0 else c, c, 3, f"{prefix}.conv{i + 1}", stream))
        self.to_images = []
        for group, pooled in config.emissions(scale):
            m = BAND_GROUPS[group].channels
            self.to_images.append((group, pooled, EqConv2d(c, m, 1, f"{prefix}.to_{group}", stream)))

    def layers(self):
        out = [self.project] if self.project else []
        return out + self.convs + [layer for _, _, layer in self.to_images]

    def __call__(self, x):
        if self.first:
            x = F.reshape(self.project(x), (x.shape[0], self.channels, 4, 4))
            x = F.leaky_relu(x, LRELU_SLOPE)
        else:
            x = F.upsample_nearest2x(x)
        for conv in self.convs:
            x = pixel_norm(F.leaky_relu(conv(x), LRELU_SLOPE))
        images = []
        for group, pooled, layer in self.to_images:
            img = layer(x)
            if pooled:
                img = F.avg_pool2x(img)
            images.append((img.shape[2], group, img))
        return x, images

    def trace(self, c, h, rows):
        b = str(self.index)
        if self.first:
            c, h = self.channels, 4
            rows.append(_Row("G", b, "Conv 4x4", "LReLU", (c, h, h)))
            b = ""
        else:
            h *= 2
            rows.append(_Row("G", "", "Upsample", "-", (c, h, h)))
        for conv in self.convs:
            _, c, _, _ = conv.out_shape((1, c, h, h))
            rows.append(_Row("G", b, "Conv 3x3", "LReLU", (c, h, h)))
            b = ""
        for group, pooled, layer in self.to_images:
            r = h // 2 if pooled else h
            rows.append(_Row("G", "", f"To Image [{group}]" + (" + Pool" if pooled else ""), "-",
                             (layer.cout, r, r)))
        return c, h


class Generator:
    def __init__(self, config, stream=None):
        self.config = config
        self.blocks = [GenBlock(config, s, i + 1, stream) for i, s in enumerate(config.scales)]

    def layers(self):
        return [layer for b in self.blocks for layer in b.layers()]

    def parameters(self):
        out = {}
        for layer in self.layers():
            out.update(layer.parameters())
        return out

    @property
    def num_parameters(self):
        return sum(layer.num_parameters for layer in self.layers())

    def __call__(self, latent):
        latent = as_tensor(latent)
        if latent.ndim != 2 or latent.shape[1] != self.config.latent_dim:
            raise F.ShapeError(f"latent must be [N, {self.config.latent_dim}], got {latent.shape}")
        if not np.all(np.isfinite(latent.data)):
            raise ValueError("latent contains non-finite values")
        x = pixel_norm(latent)
        out = ScaleImageSet()
        for block in self.blocks:
            x, images = block(x)
            for res, group, img in images:
                out.add(res, group, img)
        return out

    forward = __call__

    def trace(self):
        rows = [_Row("G", "", "Latent Vector", "Norm", (self.config.latent_dim, 1, 1))]
        c, h = self.config.latent_dim, 1
        for block in self.blocks:
            c, h = block.trace(c, h, rows)
        return rows


# -------------------------------------------------------------- discriminator

class DiscBlock:
    """MinibatchStd, 3x3 convs, then max pool (or the final dense layer at 4x4)."""

    def __init__(self, config, scale, cin, name, stream):
        self.scale = scale
        self.final = scale == 4
        c = config.channels(scale)
        c_next = config.channels(scale // 2) if scale > 4 else c
        specs = [(cin + 1, c_next)] if config.conv_thinning else [(cin + 1, c), (c, c_next)]
        self.convs = [EqConv2d(a, b, 3, f"{name}.conv{i + 1}", stream) for i, (a, b) in enumerate(specs)]
        self.out_channels = c_next
        self.dense = EqDense(c_next * 16, 1, f"{name}.fc", stream) if self.final else None

    def layers(self):
        return self.convs + ([self.dense] if self.dense else [])

    def __call__(self, x):
        x = minibatch_std(x)
        for conv in self.convs:
            x = F.leaky_relu(conv(x), LRELU_SLOPE)
        if self.final:
            return self.dense(F.reshape(x, (x.shape[0], -1)))
        return F.max_pool2x(x)

    def trace(self, c, h, rows, label):
        rows.append(_Row("D", label, "MiniBatchStd", "-", (c + 1, h, h)))
        c += 1
        for conv in self.convs:
            _, c, _, _ = conv.out_shape((1, c, h, h))
            rows.append(_Row("D", "", "Conv 3x3", "LReLU", (c, h, h)))
        if self.final:
            rows.append(_Row("D", "", "Fully Connected", "Linear", (1, 1, 1)))
            return 1, 1
        rows.append(_Row("D", "", "Max Pool", "-", (c, h // 2, h // 2)))
        return c, h // 2


class _Stage:
    def __init__(self, concat_keys, block):
        self.concat_keys = concat_keys
        self.block = block


class _Branch:
    def __init__(self, entry, from_image, stages):
        self.entry = entry
        self.from_image = from_image
        self.stages = stages


class Discriminator:
    def __init__(self, config, stream=None):
        self.config = config
        top = config.top_resolution
        keys = config.image_keys()
        self.expected = {k: BAND_GROUPS[k[1]].channels for k in keys}
        self._block_index = 0

        def block(scale, cin, prefix):
            self._block_index += 1
            return DiscBlock(config, scale, cin, f"{prefix}.b{self._block_index}", stream)

        def at(scale, exclude=()):
            return [k for k in keys if k[0] == scale and k not in exclude]

        self.branches = []
        if config.variant == "tenband_grouped":
            e10, e20 = (top, "10m"), (top // 2, "20m")
            f10 = EqConv2d(4, config.channels(top), 1, "d.from_10m", stream)
            b1 = block(top, f10.cout, "d.br10m")
            b2 = block(top // 2, b1.out_channels + 4, "d.br10m")
            self.branches.append(_Branch(e10, f10, [_Stage([], b1), _Stage([(top // 2, "10m")], b2)]))
            f20 = EqConv2d(6, config.channels(top // 2), 1, "d.from_20m", stream)
            b3 = block(top // 2, f20.cout, "d.br20m")
            self.branches.append(_Branch(e20, f20, [_Stage([], b3)]))
            c = b2.out_channels + b3.out_channels
            trunk_scales = [s for s in reversed(config.scales) if s <= top // 4]
            used = {e10, e20, (top // 2, "10m")}
        else:
            entry = (top, self._top_group())
            fr = EqConv2d(self.expected[entry], config.channels(top), 1, "d.from_image", stream)
            self.branches.append(_Branch(entry, fr, []))
            c = fr.cout
            trunk_scales = list(reversed(config.scales))
            used = {entry}
        self.trunk = []
        for s in trunk_scales:
            ck = at(s, used)
            c += sum(self.expected[k] for k in ck)
            b = block(s, c, "d.trunk")
            self.trunk.append(_Stage(ck, b))
            c = b.out_channels

    def _top_group(self):
        return {"rgb": "rgb", "tenband_interp": "all", "tenband_hybrid": "10m"}[self.config.variant]

    def layers(self):
        out = []
        for br in self.branches:
            out.append(br.from_image)
            out.extend(layer for st in br.stages for layer in st.block.layers())
        out.extend(layer for st in self.trunk for layer in st.block.layers())
        return out

    def parameters(self):
        out = {}
        for layer in self.layers():
            out.update(layer.parameters())
        return out

    @property
    def num_parameters(self):
        return sum(layer.num_parameters for layer in self.layers())

    def validate(self, images):
        have = {k: t.shape for k, t in images.items()}
        for key, m in self.expected.items():
            res, group = key
            if key not in have:
                raise F.ShapeError(f"discriminator input missing image at scale {res} (group {group})")
            shape = have[key]
            if shape[1] != m:
                raise F.ShapeError(f"discriminator input at scale {res} (group {group}) has {shape[1]} "
                                   f"channels, expected {m}")
        extra = sorted(set(have) - set(self.expected))
        if extra:
            raise F.ShapeError(f"unexpected discriminator inputs at scales {[k[0] for k in extra]}: {extra}")
        sizes = {s[0] for s in have.values()}
        if len(sizes) != 1:
            raise F.ShapeError(f"inconsistent batch sizes across scales: {sorted(sizes)}")

    @staticmethod
    def _stage(stage, x, images):
        for key in stage.concat_keys:
            x = F.concat_channels(x, images[key])
        return stage.block(x)

    def __call__(self, images):
        self.validate(images)
        feats = []
        for br in self.branches:
            x = br.from_image(images[br.entry])
            for st in br.stages:
                x = self._stage(st, x, images)
            feats.append(x)
        x = F.concat(feats, axis=1)
        for st in self.trunk:
            x = self._stage(st, x, images)
        return x

    forward = __call__

    def trace(self):
        rows = []
        image_no = [0]

        def image(key):
            image_no[0] += 1
            rows.append(_Row("D", "", f"Image {image_no[0]} [{key[1]}]", "-", (self.expected[key], key[0], key[0])))
            return self.expected[key]

        block_no = [0]

        def stage(st, c, h):
            for key in st.concat_keys:
                c += image(key)
            if st.concat_keys:
                rows.append(_Row("D", "", "Concat", "-", (c, h, h)))
            block_no[0] += 1
            return st.block.trace(c, h, rows, str(block_no[0]))

        outs = []
        for br in self.branches:
            image(br.entry)
            h = br.entry[0]
            c = br.from_image.cout
            rows.append(_Row("D", "", f"From Image [{br.entry[1]}]", "-", (c, h, h)))
            for st in br.stages:
                c, h = stage(st, c, h)
            outs.append((c, h))
        if len(outs) > 1:
            c, h = sum(o[0] for o in outs), outs[0][1]
            rows.append(_Row("D", "", "Merge Branches", "-", (c, h, h)))
        else:
            c, h = outs[0]
        for st in self.trunk:
            c, h = stage(st, c, h)
        return rows


# --------------------------------------------------------------------- API

def build_generator(config, stream):
    return Generator(config, stream)


def build_discriminator(config, stream):
    return Discriminator(config, stream)


def generator_forward(g, latent):
    return g(latent)


def discriminator_forward(d, images):
    return d(images)


def parameter_count(config):
    """Exact number of trainable scalars in the generator and discriminator."""
    return Generator(config).num_parameters + Discriminator(config).num_parameters


def zero_images(config, n, dtype=None):
    """An all-zero image set with the shapes the discriminator expects."""
    d = Discriminator(config)
    return ScaleImageSet(
        (r, g, Tensor(np.zeros((n, m, r, r), dtype=dtype) if dtype else np.zeros((n, m, r, r))))
        for (r, g), m in sorted(d.expected.items()))
