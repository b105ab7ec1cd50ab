"""Character-box layouts and the color-coded box-map codec.

A layout is an ordered list of axis-aligned glyph boxes on a square
canvas. Rendering paints box i in the deterministic palette color i on a
white background; decoding classifies pixels back to palette colors and
recovers tight bounding rectangles, so render -> decode round-trips
exactly for non-overlapping layouts.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from . import kernels

MIN_BOX_EDGE = 4
MIN_DECODE_AREA = 16
DECODE_THRESHOLD = 64
PALETTE_MIN_CONTRAST = 48
# white + decode threshold + noise margin: a background pixel perturbed by
# +-20 per channel must still sit beyond the 64 match threshold
PALETTE_WHITE_CONTRAST = 85
PALETTE_SIZE = 24


class LayoutError(ValueError):
    """Invalid layout or edit; `box_index` points at the offender."""

    def __init__(self, message, box_index=None):
        super().__init__(message)
        self.box_index = box_index


class PaletteExhaustedError(LayoutError):
    pass


@dataclass(frozen=True)
class CharBox:
    glyph_id: int
    x: int
    y: int
    w: int
    h: int
    order_index: int

    @property
    def x1(self):
        return self.x + self.w

    @property
    def y1(self):
        return self.y + self.h

    @property
    def area(self):
        return self.w * self.h


@dataclass(frozen=True)
class LayoutSpec:
    canvas_size: int
    boxes: tuple[CharBox, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def validate(self):
        if len(self.boxes) > PALETTE_SIZE:
            raise PaletteExhaustedError(
                f"layout has {len(self.boxes)} boxes; palette holds {PALETTE_SIZE}")
        for i, b in enumerate(self.boxes):
            if b.order_index != i:
                raise LayoutError(f"box {i} has order_index {b.order_index}", box_index=i)
            if b.glyph_id < 0:
                raise LayoutError(f"box {i} has negative glyph id", box_index=i)
            if b.w < MIN_BOX_EDGE or b.h < MIN_BOX_EDGE:
                raise LayoutError(
                    f"box {i} is {b.w}x{b.h}; minimum edge is {MIN_BOX_EDGE}", box_index=i)
            if b.x < 0 or b.y < 0 or b.x1 > self.canvas_size or b.y1 > self.canvas_size:
                raise LayoutError(f"box {i} exceeds the canvas", box_index=i)
        return self


def _build_palette():
    # Two brightness rings of saturated hues, greedily filtered so every
    # pair keeps max-channel contrast >= PALETTE_MIN_CONTRAST and every
    # color stays far from the white background. Deterministic.
    candidates = []
    for value, phase in ((0.95, 0.0), (0.55, 0.5), (0.75, 0.25)):
        for i in range(12):
            hue = ((i + phase) / 12.0) % 1.0
            rgb = colorsys.hsv_to_rgb(hue, 0.9, value)
            candidates.append(tuple(int(round(255 * c)) for c in rgb))
    chosen: list[tuple[int, int, int]] = []
    for cand in candidates:
        if 255 - min(cand) < PALETTE_WHITE_CONTRAST:
            continue
        if all(max(abs(a - b) for a, b in zip(cand, prev)) >= PALETTE_MIN_CONTRAST
               for prev in chosen):
            chosen.append(cand)
        if len(chosen) == PALETTE_SIZE:
            break
    return np.array(chosen, dtype=np.uint8)


PALETTE = _build_palette()


def render_box_map(layout: LayoutSpec, palette: np.ndarray = PALETTE) -> np.ndarray:
    """White RGB canvas with box i filled solid in palette color i; later
    boxes overwrite earlier ones where they overlap."""
    layout.validate()
    if len(layout.boxes) > len(palette):
        raise PaletteExhaustedError(
            f"{len(layout.boxes)} boxes but only {len(palette)} palette colors")
    img = np.full((layout.canvas_size, layout.canvas_size, 3), 255, dtype=np.uint8)
    for box in layout.boxes:
        img[box.y:box.y1, box.x:box.x1] = palette[box.order_index]
    return img


def decode_box_map(image: np.ndarray, palette: np.ndarray = PALETTE,
                   glyphs: Sequence[int] | None = None) -> LayoutSpec:
    """Recover a layout from a box-map image.

    Pixels are matched to their nearest palette color (max-channel metric,
    threshold DECODE_THRESHOLD, ties to the lower index); colors covering
    at least MIN_DECODE_AREA pixels emit their tight bounding rectangle.
    Glyph ids are filled from `glyphs` by order when provided.
    """
    if image.ndim != 3 or image.shape[0] != image.shape[1] or image.shape[2] != 3:
        raise LayoutError(f"expected square RGB image, got shape {image.shape}")
    canvas = image.shape[0]
    labels = kernels.decode_labels(np.ascontiguousarray(image, dtype=np.uint8),
                                   palette, DECODE_THRESHOLD)
    boxes = []
    for pi in range(len(palette)):
        ys, xs = np.nonzero(labels == pi)
        if ys.size < MIN_DECODE_AREA:
            continue
        order = len(boxes)
        glyph = int(glyphs[order]) if glyphs is not None and order < len(glyphs) else 0
        boxes.append(CharBox(glyph_id=glyph,
                             x=int(xs.min()), y=int(ys.min()),
                             w=int(xs.max() - xs.min() + 1),
                             h=int(ys.max() - ys.min() + 1),
                             order_index=order))
    return LayoutSpec(canvas_size=canvas, boxes=tuple(boxes))


def iou(a: CharBox, b: CharBox) -> float:
    ix = max(0, min(a.x1, b.x1) - max(a.x, b.x))
    iy = max(0, min(a.y1, b.y1) - max(a.y, b.y))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union else 0.0


# -- edits ------------------------------------------------------------

@dataclass(frozen=True)
class MoveEdit:
    index: int
    dx: int
    dy: int


@dataclass(frozen=True)
class ResizeEdit:
    index: int
    w: int
    h: int


@dataclass(frozen=True)
class DeleteEdit:
    index: int


@dataclass(frozen=True)
class InsertEdit:
    index: int
    glyph_id: int
    x: int
    y: int
    w: int
    h: int


@dataclass(frozen=True)
class ReplaceGlyphEdit:
    index: int
    glyph_id: int


Edit = MoveEdit | ResizeEdit | DeleteEdit | InsertEdit | ReplaceGlyphEdit


def _renumber(boxes: Iterable[CharBox]) -> tuple[CharBox, ...]:
    return tuple(replace(b, order_index=i) for i, b in enumerate(boxes))


def apply_edit(layout: LayoutSpec, edit: Edit) -> LayoutSpec:
    """Apply one edit and return a validated layout; order indices are
    renumbered 0..n-1. Raises LayoutError for bad targets or geometry."""
    boxes = list(layout.boxes)
    n = len(boxes)
    if isinstance(edit, InsertEdit):
        if not 0 <= edit.index <= n:
            raise LayoutError(f"insertion point {edit.index} outside 0..{n}")
        boxes.insert(edit.index, CharBox(edit.glyph_id, edit.x, edit.y,
                                         edit.w, edit.h, edit.index))
    else:
        if not 0 <= edit.index < n:
            raise LayoutError(f"edit targets box {edit.index} of {n}")
        b = boxes[edit.index]
        if isinstance(edit, MoveEdit):
            boxes[edit.index] = replace(b, x=b.x + edit.dx, y=b.y + edit.dy)
        elif isinstance(edit, ResizeEdit):
            boxes[edit.index] = replace(b, w=edit.w, h=edit.h)
        elif isinstance(edit, DeleteEdit):
            del boxes[edit.index]
        elif isinstance(edit, ReplaceGlyphEdit):
            boxes[edit.index] = replace(b, glyph_id=edit.glyph_id)
        else:
            raise LayoutError(f"unknown edit {edit!r}")
    return LayoutSpec(layout.canvas_size, _renumber(boxes)).validate()


# -- JSON wire format -------------------------------------------------

def layout_to_json(layout: LayoutSpec) -> dict:
    return {
        "canvas": layout.canvas_size,
        "boxes": [
            {"glyph": b.glyph_id, "x": b.x, "y": b.y, "w": b.w, "h": b.h,
             "order": b.order_index}
            for b in layout.boxes
        ],
    }


def layout_from_json(obj: dict) -> LayoutSpec:
    if not isinstance(obj, dict) or "canvas" not in obj or "boxes" not in obj:
        raise LayoutError("layout JSON needs 'canvas' and 'boxes'")
    canvas = obj["canvas"]
    if not isinstance(canvas, int) or canvas <= 0:
        raise LayoutError(f"bad canvas value {canvas!r}")
    boxes = []
    for i, entry in enumerate(obj["boxes"]):
        try:
            boxes.append(CharBox(glyph_id=int(entry["glyph"]),
                                 x=int(entry["x"]), y=int(entry["y"]),
                                 w=int(entry["w"]), h=int(entry["h"]),
                                 order_index=int(entry["order"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise LayoutError(f"box {i} is malformed: {exc}", box_index=i) from exc
    return LayoutSpec(canvas_size=canvas, boxes=tuple(boxes)).validate()


def parse_wire_layout(obj: dict, max_glyph_id: int) -> LayoutSpec:
    """Wire-format validation shared with the browser editor: structural
    layout rules plus the glyph-id upper bound."""
    layout = layout_from_json(obj)
    for b in layout.boxes:
        if b.glyph_id > max_glyph_id:
            raise LayoutError(f"box {b.order_index} names glyph {b.glyph_id} "
                              f"beyond the atlas ({max_glyph_id})",
                              box_index=b.order_index)
    return layout


def dumps_layout(layout: LayoutSpec) -> str:
    return json.dumps(layout_to_json(layout), indent=2)


def loads_layout(text: str) -> LayoutSpec:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LayoutError(f"layout is not valid JSON: {exc}") from exc
    return layout_from_json(obj)
