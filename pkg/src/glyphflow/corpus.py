"""Synthetic page corpus: aligned (target, condition, box-map, prompt) records.

Layouts come in four modes (grid, column, random, scatter); glyphs are
stamped from the atlas with per-box scale and aspect jitter; the target
applies the page style's raster warps while the condition stays in the
identity style. Randomness for record i derives from (seed, i), so
generation is order-independent and byte-reproducible.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels
from .atlas import GlyphAtlas, StyleSpec, vocab_for
from .layout import (PALETTE, PALETTE_SIZE, CharBox, LayoutSpec, decode_box_map,
                     render_box_map)

FORMAT_VERSION = 1
LAYOUT_MODES = ("grid", "column", "random", "scatter")
RANDOM_MODE_MAX_IOU = 0.3
_PLACEMENT_ATTEMPTS = 200
_TRIPLET_ATTEMPTS = 20


class CapacityExceededError(ValueError):
    pass


class EmptyPoolError(ValueError):
    pass


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    canvas_size: int = 64
    k_min: int = 3
    k_max: int = 8
    font_size: int = 16
    mode_weights: dict[str, float] = field(default_factory=lambda: {
        "grid": 0.45, "column": 0.15, "random": 0.2, "scatter": 0.2})
    scale_jitter: tuple[float, float] = (0.85, 1.15)
    aspect_jitter: tuple[float, float] = (0.9, 1.1)
    p_synth: float = 0.5
    seed: int = 0

    def validate(self, patch_size: int | None = None):
        if self.k_min < 1 or self.k_max < self.k_min:
            raise ValueError(f"bad character count range [{self.k_min}, {self.k_max}]")
        if sorted(self.mode_weights) != sorted(LAYOUT_MODES):
            raise ValueError(f"mode weights must cover exactly {LAYOUT_MODES}")
        total = sum(self.mode_weights.values())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"mode weights sum to {total}, expected 1")
        if any(w < 0 for w in self.mode_weights.values()):
            raise ValueError("mode weights must be nonnegative")
        if not 0.0 <= self.p_synth <= 1.0:
            raise ValueError(f"p_synth {self.p_synth} outside [0, 1]")
        lo, hi = self.scale_jitter
        if not 0 < lo <= hi:
            raise ValueError(f"bad scale jitter range {self.scale_jitter}")
        lo, hi = self.aspect_jitter
        if not 0 < lo <= hi:
            raise ValueError(f"bad aspect jitter range {self.aspect_jitter}")
        if patch_size is not None and self.canvas_size % patch_size:
            raise ValueError(
                f"canvas {self.canvas_size} not divisible by patch size {patch_size}")
        return self

    @property
    def max_box_w(self):
        return int(math.ceil(self.font_size * self.scale_jitter[1] * self.aspect_jitter[1]))

    @property
    def max_box_h(self):
        return int(math.ceil(self.font_size * self.scale_jitter[1] / self.aspect_jitter[0]))


@dataclass(frozen=True)
class Triplet:
    target: np.ndarray       # uint8 [canvas, canvas]
    condition: np.ndarray    # uint8 [canvas, canvas]
    boxmap: np.ndarray       # uint8 [canvas, canvas, 3]
    layout: LayoutSpec
    prompt: np.ndarray       # int64 token ids, unpadded: [style, glyph...]


def _draw_box_dims(cfg: CorpusConfig, rng) -> tuple[int, int]:
    s = rng.uniform(*cfg.scale_jitter)
    r = rng.uniform(*cfg.aspect_jitter)
    w = max(4, int(round(cfg.font_size * s * r)))
    h = max(4, int(round(cfg.font_size * s / r)))
    return w, h


def _grid_dims(k: int) -> tuple[int, int]:
    cols = int(math.ceil(math.sqrt(k)))
    rows = int(math.ceil(k / cols))
    return rows, cols


def _grid_fits(cfg: CorpusConfig, k: int) -> bool:
    rows, cols = _grid_dims(k)
    return (cfg.canvas_size // cols >= cfg.max_box_w
            and cfg.canvas_size // rows >= cfg.max_box_h)


def mode_capacity(cfg: CorpusConfig, mode: str) -> int:
    """Largest k the mode can guarantee to place on this canvas."""
    if mode in ("grid", "scatter"):
        for k in range(PALETTE_SIZE, 0, -1):
            if _grid_fits(cfg, k):
                return k
        return 0
    if mode == "column":
        if cfg.max_box_w > cfg.canvas_size:
            return 0
        return min(PALETTE_SIZE, cfg.canvas_size // cfg.max_box_h)
    if mode == "random":
        per_box = cfg.max_box_w * cfg.max_box_h
        return min(PALETTE_SIZE, int(0.9 * cfg.canvas_size ** 2 / per_box))
    raise ValueError(f"unknown layout mode {mode!r}")


def _raster_sorted(boxes) -> tuple[CharBox, ...]:
    ordered = sorted(boxes, key=lambda b: (b.y, b.x))
    return tuple(replace(b, order_index=i) for i, b in enumerate(ordered))


def sample_layout(cfg: CorpusConfig, mode: str, k: int, rng) -> LayoutSpec:
    """Place k glyph-less boxes (glyph_id 0) in the requested mode.

    Grid and column boxes are centered in disjoint cells; `random` allows
    pairwise IoU up to RANDOM_MODE_MAX_IOU; `scatter` places boxes at
    uniform offsets inside a random subset of grid cells, so placement is
    disjoint but non-columnar. Reading order is column right-to-left then
    top-to-bottom for grid/column, raster order for random/scatter.
    """
    if mode not in LAYOUT_MODES:
        raise ValueError(f"unknown layout mode {mode!r}")
    if k < 1 or k > mode_capacity(cfg, mode):
        raise CapacityExceededError(
            f"{k} boxes exceed {mode} capacity {mode_capacity(cfg, mode)} "
            f"on a {cfg.canvas_size}px canvas")
    canvas = cfg.canvas_size
    boxes: list[CharBox] = []

    if mode == "grid":
        rows, cols = _grid_dims(k)
        cw, ch = canvas // cols, canvas // rows
        order = 0
        for ci in range(cols - 1, -1, -1):
            for ri in range(rows):
                if order >= k:
                    break
                w, h = _draw_box_dims(cfg, rng)
                boxes.append(CharBox(0, ci * cw + (cw - w) // 2,
                                     ri * ch + (ch - h) // 2, w, h, order))
                order += 1
        return LayoutSpec(canvas, tuple(boxes)).validate()

    if mode == "column":
        ch = canvas // k
        for i in range(k):
            w, h = _draw_box_dims(cfg, rng)
            boxes.append(CharBox(0, (canvas - w) // 2,
                                 i * ch + (ch - h) // 2, w, h, i))
        return LayoutSpec(canvas, tuple(boxes)).validate()

    if mode == "random":
        for _ in range(k):
            w, h = _draw_box_dims(cfg, rng)
            for attempt in range(_PLACEMENT_ATTEMPTS):
                x = int(rng.integers(0, canvas - w + 1))
                y = int(rng.integers(0, canvas - h + 1))
                cand = CharBox(0, x, y, w, h, 0)
                from .layout import iou
                if all(iou(cand, b) <= RANDOM_MODE_MAX_IOU for b in boxes):
                    boxes.append(cand)
                    break
            else:
                raise CapacityExceededError(
                    f"random mode could not place box {len(boxes)} of {k}")
        return LayoutSpec(canvas, _raster_sorted(boxes)).validate()

    # scatter: random cells of the k-grid, random offset inside each cell
    rows, cols = _grid_dims(k)
    cw, ch = canvas // cols, canvas // rows
    cells = rng.permutation(rows * cols)[:k]
    for cell in cells:
        ri, ci = int(cell) // cols, int(cell) % cols
        w, h = _draw_box_dims(cfg, rng)
        x = ci * cw + int(rng.integers(0, cw - w + 1))
        y = ri * ch + int(rng.integers(0, ch - h + 1))
        boxes.append(CharBox(0, x, y, w, h, 0))
    return LayoutSpec(canvas, _raster_sorted(boxes)).validate()


# -- glyph stamping ----------------------------------------------------

def _stamp_glyph(canvas: np.ndarray, bitmap: np.ndarray, box: CharBox,
                 style: StyleSpec, rng) -> None:
    jr = int(round(style.jitter_amplitude))
    margin = style.thickness + int(math.ceil(abs(style.slant) * box.h / 2)) + jr
    local = np.zeros((box.h + 2 * margin, box.w + 2 * margin), dtype=bool)
    scaled = kernels.scale_bitmap(np.ascontiguousarray(bitmap, dtype=np.uint8),
                                  box.h, box.w).astype(bool)
    local[margin:margin + box.h, margin:margin + box.w] = scaled
    if style.thickness:
        local = kernels.dilate_mask(local, style.thickness)
    if style.slant:
        local = kernels.shear_mask(local, style.slant)
    if jr:
        offsets = rng.integers(-jr, jr + 1, size=local.shape + (2,)).astype(np.int8)
        local = kernels.jitter_mask(local, offsets)
    kernels.composite_ink(canvas, local, box.y - margin, box.x - margin,
                          np.uint8(style.ink_value))


def render_page(atlas: GlyphAtlas, layout: LayoutSpec, style: StyleSpec,
                rng=None) -> np.ndarray:
    """Stamp every layout glyph onto a white canvas in the given style."""
    canvas = np.full((layout.canvas_size, layout.canvas_size), 255, dtype=np.uint8)
    for box in layout.boxes:
        _stamp_glyph(canvas, atlas.bitmap(box.glyph_id), box, style, rng)
    return canvas


def render_condition(atlas: GlyphAtlas, layout: LayoutSpec) -> np.ndarray:
    return render_page(atlas, layout, atlas.style(0))


def render_triplet(atlas: GlyphAtlas, layout: LayoutSpec, glyph_ids,
                   style_id: int, rng) -> Triplet:
    """Render the aligned (target, condition, boxmap, prompt) record.

    `glyph_ids` follow the layout's reading order and overwrite the
    layout's glyph ids; the prompt is [style token, glyph tokens...].
    """
    if len(glyph_ids) != len(layout.boxes):
        raise ValueError(
            f"{len(glyph_ids)} glyphs for {len(layout.boxes)} boxes")
    style = atlas.style(style_id)
    vocab = vocab_for(atlas)
    boxes = tuple(replace(b, glyph_id=int(g)) for b, g in zip(layout.boxes, glyph_ids))
    placed = LayoutSpec(layout.canvas_size, boxes).validate()
    condition = render_page(atlas, placed, atlas.style(0))
    target = condition.copy() if style.is_identity else render_page(atlas, placed, style, rng)
    prompt = np.array([vocab.style_token(style_id)]
                      + [vocab.glyph_token(int(g)) for g in glyph_ids], dtype=np.int64)
    return Triplet(target=target, condition=condition,
                   boxmap=render_box_map(placed, PALETTE),
                   layout=placed, prompt=prompt)


def mix_pools(pool_a, pool_b, p_synth: float, rng):
    """Draw one sample: from pool_b with probability p_synth, else pool_a."""
    if len(pool_a) == 0 or len(pool_b) == 0:
        raise EmptyPoolError("both pools must be nonempty")
    if not 0.0 <= p_synth <= 1.0:
        raise ValueError(f"p_synth {p_synth} outside [0, 1]")
    pool = pool_b if rng.random() < p_synth else pool_a
    return pool[int(rng.integers(len(pool)))]


def triplet_rng(seed: int, index: int):
    return np.random.default_rng(np.random.SeedSequence((seed, index)))


def make_triplet(cfg: CorpusConfig, atlas: GlyphAtlas, index: int) -> Triplet:
    """Generate record `index` deterministically from (cfg.seed, index)."""
    rng = triplet_rng(cfg.seed, index)
    modes = sorted(cfg.mode_weights)
    weights = np.array([cfg.mode_weights[m] for m in modes])
    last_err = None
    for _ in range(_TRIPLET_ATTEMPTS):
        mode = modes[int(rng.choice(len(modes), p=weights / weights.sum()))]
        cap = mode_capacity(cfg, mode)
        if cap < cfg.k_min:
            last_err = CapacityExceededError(
                f"{mode} capacity {cap} below k_min={cfg.k_min}")
            continue
        k = int(rng.integers(cfg.k_min, min(cfg.k_max, cap) + 1))
        try:
            layout = sample_layout(cfg, mode, k, rng)
        except CapacityExceededError as exc:
            last_err = exc
            continue
        glyphs = rng.integers(0, atlas.n_glyphs, size=k)
        style_id = int(rng.integers(0, atlas.n_styles))
        triplet = render_triplet(atlas, layout, glyphs, style_id, rng)
        # overlapping `random` layouts can clip an earlier box's visible
        # rect; only decode-exact records enter the corpus
        decoded = decode_box_map(triplet.boxmap, PALETTE,
                                 [b.glyph_id for b in triplet.layout.boxes])
        if decoded == triplet.layout:
            return triplet
        last_err = CapacityExceededError(
            f"record {index}: layout not decode-exact after overlap")
    raise last_err


def generate_corpus(cfg: CorpusConfig, atlas: GlyphAtlas, count: int) -> list[Triplet]:
    cfg.validate()
    return [make_triplet(cfg, atlas, i) for i in range(count)]


# -- on-disk format ----------------------------------------------------

MANIFEST_NAME = "manifest.txt"
RECORDS_NAME = "records.bin"


def _manifest_lines(cfg: CorpusConfig, count: int) -> list[str]:
    mw = ",".join(f"{m}:{cfg.mode_weights[m]!r}" for m in LAYOUT_MODES)
    return [
        f"version={FORMAT_VERSION}",
        f"canvas_size={cfg.canvas_size}",
        f"k_min={cfg.k_min}",
        f"k_max={cfg.k_max}",
        f"font_size={cfg.font_size}",
        f"mode_weights={mw}",
        f"scale_jitter={cfg.scale_jitter[0]!r},{cfg.scale_jitter[1]!r}",
        f"aspect_jitter={cfg.aspect_jitter[0]!r},{cfg.aspect_jitter[1]!r}",
        f"p_synth={cfg.p_synth!r}",
        f"seed={cfg.seed}",
        f"count={count}",
    ]


def _encode_record(t: Triplet) -> bytes:
    c = t.target.shape[0]
    parts = [
        t.target.astype(np.uint8).tobytes(),
        t.condition.astype(np.uint8).tobytes(),
        t.boxmap[:, :, 0].astype(np.uint8).tobytes(),
        t.boxmap[:, :, 1].astype(np.uint8).tobytes(),
        t.boxmap[:, :, 2].astype(np.uint8).tobytes(),
        struct.pack("<H", len(t.layout.boxes)),
    ]
    for b in t.layout.boxes:
        parts.append(struct.pack("<5H", b.glyph_id, b.x, b.y, b.w, b.h))
    parts.append(struct.pack("<H", len(t.prompt)))
    parts.append(np.asarray(t.prompt, dtype="<u2").tobytes())
    return b"".join(parts)


def _decode_record(buf: bytes, canvas: int) -> Triplet:
    plane = canvas * canvas
    off = 0

    def take(n):
        nonlocal off
        chunk = buf[off:off + n]
        if len(chunk) != n:
            raise CorpusFormatError("record truncated")
        off += n
        return chunk

    target = np.frombuffer(take(plane), dtype=np.uint8).reshape(canvas, canvas).copy()
    condition = np.frombuffer(take(plane), dtype=np.uint8).reshape(canvas, canvas).copy()
    rgb = [np.frombuffer(take(plane), dtype=np.uint8).reshape(canvas, canvas)
           for _ in range(3)]
    boxmap = np.stack(rgb, axis=-1).copy()
    (n_boxes,) = struct.unpack("<H", take(2))
    boxes = []
    for i in range(n_boxes):
        g, x, y, w, h = struct.unpack("<5H", take(10))
        boxes.append(CharBox(g, x, y, w, h, i))
    (n_prompt,) = struct.unpack("<H", take(2))
    prompt = np.frombuffer(take(2 * n_prompt), dtype="<u2").astype(np.int64)
    if off != len(buf):
        raise CorpusFormatError(f"record has {len(buf) - off} trailing bytes")
    return Triplet(target=target, condition=condition, boxmap=boxmap,
                   layout=LayoutSpec(canvas, tuple(boxes)), prompt=prompt)


def write_corpus(path, cfg: CorpusConfig, triplets) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / MANIFEST_NAME).write_text(
        "\n".join(_manifest_lines(cfg, len(triplets))) + "\n")
    with open(root / RECORDS_NAME, "wb") as fh:
        for t in triplets:
            payload = _encode_record(t)
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)


def _parse_manifest(text: str) -> tuple[CorpusConfig, int]:
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise CorpusFormatError(f"bad manifest line {line!r}")
        key, value = line.split("=", 1)
        fields[key] = value
    try:
        version = int(fields["version"])
    except (KeyError, ValueError):
        raise CorpusFormatError("manifest missing a numeric version") from None
    if version != FORMAT_VERSION:
        raise CorpusFormatError(
            f"corpus format version {version}; this build reads {FORMAT_VERSION}")
    try:
        mode_weights = {}
        for item in fields["mode_weights"].split(","):
            name, w = item.split(":")
            mode_weights[name] = float(w)
        sj = tuple(float(v) for v in fields["scale_jitter"].split(","))
        aj = tuple(float(v) for v in fields["aspect_jitter"].split(","))
        cfg = CorpusConfig(
            canvas_size=int(fields["canvas_size"]),
            k_min=int(fields["k_min"]), k_max=int(fields["k_max"]),
            font_size=int(fields["font_size"]), mode_weights=mode_weights,
            scale_jitter=sj, aspect_jitter=aj,
            p_synth=float(fields["p_synth"]), seed=int(fields["seed"]))
        count = int(fields["count"])
    except (KeyError, ValueError) as exc:
        raise CorpusFormatError(f"manifest field error: {exc}") from exc
    return cfg, count


def read_corpus(path) -> tuple[CorpusConfig, list[Triplet]]:
    root = Path(path)
    try:
        manifest = (root / MANIFEST_NAME).read_text()
    except OSError as exc:
        raise CorpusFormatError(f"cannot read manifest: {exc}") from exc
    cfg, count = _parse_manifest(manifest)
    triplets = []
    with open(root / RECORDS_NAME, "rb") as fh:
        for _ in range(count):
            header = fh.read(4)
            if len(header) != 4:
                raise CorpusFormatError("records.bin ended early")
            (length,) = struct.unpack("<I", header)
            triplets.append(_decode_record(fh.read(length), cfg.canvas_size))
    return cfg, triplets
