"""Shape audit: the built architectures against the published layer tables.

The published tables are stored verbatim as data (width 1, top 256). Expected
rows for other configurations are derived from them by arithmetic only:
channel scaling, truncation to the scale list, conv thinning and band-group
substitution. Computed rows come from tracing the builders' layer objects;
no weights are allocated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import BAND_GROUPS, Discriminator, Generator, ModelConfig

# Generator table: (block, operation, activation, (C, H, W)).
GENERATOR_TABLE = [
    ("", "Latent Vector", "Norm", (512, 1, 1)),
    ("1", "Conv 4x4", "LReLU", (512, 4, 4)),
    ("", "Conv 3x3", "LReLU", (512, 4, 4)),
    ("", "Upsample", "-", (512, 8, 8)),
    ("2", "Conv 3x3", "LReLU", (512, 8, 8)),
    ("", "Conv 3x3", "LReLU", (512, 8, 8)),
    ("", "Upsample", "-", (512, 16, 16)),
    ("3", "Conv 3x3", "LReLU", (512, 16, 16)),
    ("", "Conv 3x3", "LReLU", (512, 16, 16)),
    ("", "Upsample", "-", (512, 32, 32)),
    ("4", "Conv 3x3", "LReLU", (512, 32, 32)),
    ("", "Conv 3x3", "LReLU", (512, 32, 32)),
    ("", "Upsample", "-", (512, 64, 64)),
    ("5", "Conv 3x3", "LReLU", (256, 64, 64)),
    ("", "Conv 3x3", "LReLU", (256, 64, 64)),
    ("", "Upsample", "-", (256, 128, 128)),
    ("6", "Conv 3x3", "LReLU", (128, 128, 128)),
    ("", "Conv 3x3", "LReLU", (128, 128, 128)),
    ("", "Upsample", "-", (128, 256, 256)),
    ("7", "Conv 3x3", "LReLU", (64, 256, 256)),
    ("", "Conv 3x3", "LReLU", (64, 256, 256)),
]

# Discriminator table; channels are (base, m multiplier, constant), i.e.
# "(128+m+1)" is (128, 1, 1). "Image 4" appears twice in the source table;
# images are renumbered 1..7 when rows are derived.
DISCRIMINATOR_TABLE = [
    ("", "Image 1", "-", ((0, 1, 0), 256)),
    ("", "From RGB", "-", ((64, 0, 0), 256)),
    ("1", "MiniBatchStd", "-", ((64, 0, 1), 256)),
    ("", "Conv 3x3", "LReLU", ((64, 0, 0), 256)),
    ("", "Conv 3x3", "LReLU", ((128, 0, 0), 256)),
    ("", "Max Pool", "-", ((128, 0, 0), 128)),
    ("", "Image 2", "-", ((0, 1, 0), 128)),
    ("", "Concat", "-", ((128, 1, 0), 128)),
    ("2", "MiniBatchStd", "-", ((128, 1, 1), 128)),
    ("", "Conv 3x3", "LReLU", ((128, 0, 0), 128)),
    ("", "Conv 3x3", "LReLU", ((256, 0, 0), 128)),
    ("", "Max Pool", "-", ((256, 0, 0), 64)),
    ("", "Image 3", "-", ((0, 1, 0), 64)),
    ("", "Concat", "-", ((256, 1, 0), 64)),
    ("3", "MiniBatchStd", "-", ((256, 1, 1), 64)),
    ("", "Conv 3x3", "LReLU", ((256, 0, 0), 64)),
    ("", "Conv 3x3", "LReLU", ((512, 0, 0), 64)),
    ("", "Max Pool", "-", ((512, 0, 0), 32)),
    ("", "Image 4", "-", ((0, 1, 0), 32)),
    ("", "Concat", "-", ((512, 1, 0), 32)),
    ("4", "MiniBatchStd", "-", ((512, 1, 1), 32)),
    ("", "Conv 3x3", "LReLU", ((512, 0, 0), 32)),
    ("", "Conv 3x3", "LReLU", ((512, 0, 0), 32)),
    ("", "Max Pool", "-", ((512, 0, 0), 16)),
    ("", "Image 4", "-", ((0, 1, 0), 16)),
    ("", "Concat", "-", ((512, 1, 0), 16)),
    ("5", "MiniBatchStd", "-", ((512, 1, 1), 16)),
    ("", "Conv 3x3", "LReLU", ((512, 0, 0), 16)),
    ("", "Conv 3x3", "LReLU", ((512, 0, 0), 16)),
    ("", "Max Pool", "-", ((512, 0, 0), 8)),
    ("", "Image 5", "-", ((0, 1, 0), 8)),
    ("", "Concat", "-", ((512, 1, 0), 8)),
    ("6", "MiniBatchStd", "-", ((512, 1, 1), 8)),
    ("", "Conv 3x3", "LReLU", ((512, 0, 0), 8)),
    ("", "Conv 3x3", "LReLU", ((512, 0, 0), 8)),
    ("", "Max Pool", "-", ((512, 0, 0), 4)),
    ("", "Image 6", "-", ((0, 1, 0), 4)),
    ("", "Concat", "-", ((512, 1, 0), 4)),
    ("7", "MiniBatchStd", "-", ((512, 1, 1), 4)),
    ("", "Conv 3x3", "LReLU", ((512, 0, 0), 4)),
    ("", "Conv 3x3", "LReLU", ((512, 0, 0), 4)),
    ("", "Fully Connected", "Linear", None),
]


@dataclass
class AuditRow:
    model: str
    block: str
    layer: str
    expected: tuple | None
    computed: tuple | None
    match: bool

    def format(self):
        def fmt(s):
            return "-" if s is None else " x ".join(str(v) for v in s)
        flag = "ok" if self.match else "MISMATCH"
        return f"{self.model:2s} {self.block:>3s} {self.layer:26s} {fmt(self.expected):>18s} {fmt(self.computed):>18s}  {flag}"


def _scaled(c, config):
    return c if c == 0 else max(1, int(np.floor(c * config.width_factor)))


def _gen_channels_at(scale, config):
    for _, op, _, (c, h, _) in GENERATOR_TABLE:
        if op.startswith("Conv") and h == scale:
            return _scaled(c, config)
    raise KeyError(scale)


def expected_generator_rows(config: ModelConfig):
    """(block, op, activation, shape) rows for the generator of ``config``."""
    top = config.top_resolution
    kept = []
    for i, (block, op, act, (c, h, w)) in enumerate(GENERATOR_TABLE):
        if h > top:
            continue
        # thinning keeps the 4x4 map of block 1 and the first 3x3 conv of later blocks
        if config.conv_thinning and op == "Conv 3x3" and GENERATOR_TABLE[i - 1][1] != "Upsample":
            continue
        c = config.latent_dim if op == "Latent Vector" else _scaled(c, config)
        kept.append((block, op, act, (c, h, w)))
    rows = []
    for i, row in enumerate(kept):
        rows.append(row)
        op, h = row[1], row[3][1]
        last_conv = op.startswith("Conv") and (i + 1 == len(kept) or kept[i + 1][1] == "Upsample")
        if last_conv and h in config.image_scales:
            for group, pooled in config.emissions(h):
                r = h // 2 if pooled else h
                rows.append(("", f"To Image [{group}]" + (" + Pool" if pooled else ""), "-",
                             (BAND_GROUPS[group].channels, r, r)))
    return rows


def _disc_blocks():
    """Split the discriminator table into per-scale chunks keyed by block scale."""
    blocks, current = {}, None
    for row in DISCRIMINATOR_TABLE:
        _, op, _, spec = row
        if op == "MiniBatchStd":
            current = spec[1]
            blocks[current] = []
        if current is not None:
            blocks[current].append(row)
    return blocks


def _chain_groups(config, scale):
    """Image groups concatenated at ``scale`` in a single-chain discriminator."""
    top = config.top_resolution
    if config.variant == "rgb":
        return ["rgb"]
    if config.variant == "tenband_interp":
        return ["all"]
    return ["10m"] if scale == top else ["all"]


def expected_discriminator_rows(config: ModelConfig):
    top = config.top_resolution
    blocks = _disc_blocks()
    rows = []
    counter = {"image": 0, "block": 0}

    def image(group, res):
        counter["image"] += 1
        m = BAND_GROUPS[group].channels
        rows.append(("", f"Image {counter['image']} [{group}]", "-", (m, res, res)))
        return m

    def block(scale, cin):
        counter["block"] += 1
        chunk = blocks[scale]
        convs = [r for r in chunk if r[1] == "Conv 3x3"]
        if config.conv_thinning:
            convs = convs[1:]
        rows.append((str(counter["block"]), "MiniBatchStd", "-", (cin + 1, scale, scale)))
        c = cin + 1
        for _, op, act, ((base, _, _), _) in convs:
            c = _scaled(base, config)
            rows.append(("", op, act, (c, scale, scale)))
        if scale == 4:
            rows.append(("", "Fully Connected", "Linear", (1, 1, 1)))
        else:
            rows.append(("", "Max Pool", "-", (c, scale // 2, scale // 2)))
        return c

    def from_image(group, res):
        c = _gen_channels_at(res, config)
        rows.append(("", f"From Image [{group}]", "-", (c, res, res)))
        return c

    if config.variant == "tenband_grouped":
        image("10m", top)
        c = block(top, from_image("10m", top))
        c += image("10m", top // 2)
        rows.append(("", "Concat", "-", (c, top // 2, top // 2)))
        c10 = block(top // 2, c)
        image("20m", top // 2)
        c20 = block(top // 2, from_image("20m", top // 2))
        c = c10 + c20
        rows.append(("", "Merge Branches", "-", (c, top // 4, top // 4)))
        scales = [s for s in reversed(config.scales) if s <= top // 4]
        for s in scales:
            c += image("10m", s) + image("20m", s)
            rows.append(("", "Concat", "-", (c, s, s)))
            c = block(s, c)
        return rows

    groups = _chain_groups(config, top)
    image(groups[0], top)
    c = block(top, from_image(groups[0], top))
    for s in reversed(config.scales):
        if s == top:
            continue
        if s in config.image_scales:
            # channel arithmetic of the table's "(C+m)" rows
            c += image(_chain_groups(config, s)[0], s)
            rows.append(("", "Concat", "-", (c, s, s)))
        c = block(s, c)
    return rows


def reference_expected_rows(m=3):
    """Rows of the two reference tables verbatim, with ``m`` substituted."""
    gen = [(b, op, act, shape) for b, op, act, shape in GENERATOR_TABLE]
    disc = []
    for b, op, act, spec in DISCRIMINATOR_TABLE:
        if spec is None:
            disc.append((b, op, act, (1, 1, 1)))
            continue
        (base, mm, const), res = spec
        disc.append((b, op, act, (base + mm * m + const, res, res)))
    return gen, disc


def _normalise(op):
    op = op.split(" [")[0]
    if op.startswith("Image"):
        return "Image"
    if op == "From RGB":
        return "From Image"
    return op


def _compare(model, expected, computed):
    out = []
    n = max(len(expected), len(computed))
    for i in range(n):
        e = expected[i] if i < len(expected) else None
        c = computed[i] if i < len(computed) else None
        layer = (c or e)[1]
        match = (e is not None and c is not None and e[0] == c[0]
                 and _normalise(e[1]) == _normalise(c[1]) and tuple(e[3]) == tuple(c[3]))
        out.append(AuditRow(model, (c or e)[0], layer, e and tuple(e[3]), c and tuple(c[3]), match))
    return out


def shape_audit(config: ModelConfig):
    """Compare traced layer shapes with the expected table rows.

    Mismatches are reported in the returned rows, never raised.
    """
    g_rows = [(r.block, r.op, r.act, r.shape) for r in Generator(config).trace()]
    d_rows = [(r.block, r.op, r.act, r.shape) for r in Discriminator(config).trace()]
    return (_compare("G", expected_generator_rows(config), g_rows)
            + _compare("D", expected_discriminator_rows(config), d_rows))


def table_rows_match(config: ModelConfig, m=3):
    """Check the traced rgb/256 architecture against the reference tables row by row.

    Caption-only rows (the per-block 1x1 image convs) are skipped on the
    generator side. Returns (generator_ok, discriminator_ok, details).
    """
    gen, disc = reference_expected_rows(m)
    g_rows = [(r.block, r.op, r.act, r.shape) for r in Generator(config).trace()
              if not r.op.startswith("To Image")]
    d_rows = [(r.block, r.op, r.act, r.shape) for r in Discriminator(config).trace()]
    g_cmp = _compare("G", gen, g_rows)
    d_cmp = _compare("D", disc, d_rows)
    return all(r.match for r in g_cmp), all(r.match for r in d_cmp), g_cmp + d_cmp
