"""Procedural glyph atlas, page styles, and the prompt token vocabulary.

Glyphs are 7x7 binary bitmaps assembled from stroke primitives (bars,
crosses, hooks, corners, Z/T shapes) and greedily filtered so every pair
differs in at least MIN_HAMMING pixels; glyph identity therefore survives
heavy downscaling. Style 0 is the identity style used for condition
images; other styles are parametric raster warps.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

GLYPH_SIZE = 7
N_GLYPHS = 32
MIN_HAMMING = 8

PAD_TOKEN = 0
NULL_TOKEN = 1


class UnknownGlyphError(KeyError):
    pass


@dataclass(frozen=True)
class StyleSpec:
    style_id: int
    slant: float = 0.0
    thickness: int = 0
    jitter_amplitude: float = 0.0
    ink_gain: float = 1.0

    def __post_init__(self):
        if not 0.5 <= self.ink_gain <= 1.0:
            raise ValueError(f"ink_gain {self.ink_gain} outside [0.5, 1.0]")
        if self.thickness < 0 or self.jitter_amplitude < 0:
            raise ValueError("thickness and jitter_amplitude must be nonnegative")

    @property
    def is_identity(self):
        return (self.slant == 0.0 and self.thickness == 0
                and self.jitter_amplitude == 0.0 and self.ink_gain == 1.0)

    @property
    def ink_value(self) -> int:
        return int(round(255 * (1.0 - self.ink_gain)))


IDENTITY_STYLE = StyleSpec(style_id=0)

DEFAULT_STYLES = (
    IDENTITY_STYLE,
    StyleSpec(style_id=1, slant=0.25, ink_gain=0.95),
    StyleSpec(style_id=2, thickness=1, ink_gain=0.8),
    StyleSpec(style_id=3, slant=-0.2, jitter_amplitude=0.8, ink_gain=0.7),
)


def _stroke_candidates():
    """Deterministic stream of 7x7 stroke-combination bitmaps."""
    g = GLYPH_SIZE
    rows = [1, 3, 5]
    cols = [1, 3, 5]

    def blank():
        return np.zeros((g, g), dtype=np.uint8)

    singles = []
    for r in rows:
        m = blank(); m[r, :] = 1; singles.append(("h", r, m))
    for c in cols:
        m = blank(); m[:, c] = 1; singles.append(("v", c, m))
    d1 = blank(); np.fill_diagonal(d1, 1)
    d2 = blank(); np.fill_diagonal(np.fliplr(d2), 1)
    singles.append(("d", 0, d1))
    singles.append(("d", 1, d2))
    hooks = []
    box = blank(); box[0, :] = 1; box[-1, :] = 1; box[:, 0] = 1; box[:, -1] = 1
    hooks.append(box)
    for r, c in ((0, 0), (0, g - 1), (g - 1, 0), (g - 1, g - 1)):
        m = blank(); m[r, :] = 1; m[:, c] = 1; hooks.append(m)
    z = blank(); z[0, :] = 1; z[-1, :] = 1; np.fill_diagonal(np.fliplr(z), 1)
    hooks.append(z)

    for m in hooks:
        yield m
    for (k1, p1, m1), (k2, p2, m2) in combinations(singles, 2):
        yield np.clip(m1 + m2, 0, 1)
    for (k1, p1, m1), (k2, p2, m2), (k3, p3, m3) in combinations(singles, 3):
        yield np.clip(m1 + m2 + m3, 0, 1)


def _build_glyphs(n=N_GLYPHS):
    chosen: list[np.ndarray] = []
    for cand in _stroke_candidates():
        if cand.sum() < 5:
            continue
        if all(int(np.sum(cand != prev)) >= MIN_HAMMING for prev in chosen):
            chosen.append(cand)
        if len(chosen) == n:
            break
    if len(chosen) < n:
        raise RuntimeError(f"only {len(chosen)} glyphs satisfy the Hamming constraint")
    return {i: bm for i, bm in enumerate(chosen)}


@dataclass(frozen=True)
class GlyphAtlas:
    glyphs: dict[int, np.ndarray]
    styles: dict[int, StyleSpec]

    def bitmap(self, glyph_id: int) -> np.ndarray:
        try:
            return self.glyphs[glyph_id]
        except KeyError:
            raise UnknownGlyphError(f"glyph {glyph_id} not in atlas") from None

    def style(self, style_id: int) -> StyleSpec:
        try:
            return self.styles[style_id]
        except KeyError:
            raise UnknownGlyphError(f"style {style_id} not in atlas") from None

    @property
    def n_glyphs(self):
        return len(self.glyphs)

    @property
    def n_styles(self):
        return len(self.styles)


def default_atlas() -> GlyphAtlas:
    return GlyphAtlas(glyphs=_build_glyphs(),
                      styles={s.style_id: s for s in DEFAULT_STYLES})


@dataclass(frozen=True)
class TokenVocab:
    """Prompt token ids: PAD, NULL, then styles, then glyphs."""

    n_styles: int
    n_glyphs: int

    @property
    def size(self):
        return 2 + self.n_styles + self.n_glyphs

    def style_token(self, style_id: int) -> int:
        if not 0 <= style_id < self.n_styles:
            raise UnknownGlyphError(f"style {style_id} outside vocabulary")
        return 2 + style_id

    def glyph_token(self, glyph_id: int) -> int:
        if not 0 <= glyph_id < self.n_glyphs:
            raise UnknownGlyphError(f"glyph {glyph_id} outside vocabulary")
        return 2 + self.n_styles + glyph_id

    def encode_prompt(self, style_id: int, glyph_ids, l_max: int) -> np.ndarray:
        """[style, glyph...] padded with PAD to l_max."""
        toks = [self.style_token(style_id)] + [self.glyph_token(g) for g in glyph_ids]
        if len(toks) > l_max:
            raise ValueError(f"prompt length {len(toks)} exceeds l_max={l_max}")
        out = np.full(l_max, PAD_TOKEN, dtype=np.int64)
        out[:len(toks)] = toks
        return out

    def null_prompt(self, length: int, l_max: int) -> np.ndarray:
        """Unconditional prompt: real positions become NULL, padding stays PAD."""
        out = np.full(l_max, PAD_TOKEN, dtype=np.int64)
        out[:length] = NULL_TOKEN
        return out


def vocab_for(atlas: GlyphAtlas) -> TokenVocab:
    return TokenVocab(n_styles=atlas.n_styles, n_glyphs=atlas.n_glyphs)
