import numpy as np
import pytest

from glyphflow.atlas import (NULL_TOKEN, PAD_TOKEN, StyleSpec,
                             UnknownGlyphError)


def test_atlas_has_32_contiguous_distinct_glyphs(atlas):
    assert atlas.n_glyphs == 32
    assert sorted(atlas.glyphs) == list(range(32))
    for bm in atlas.glyphs.values():
        assert bm.shape == (7, 7)
        assert bm.sum() > 0
    ids = sorted(atlas.glyphs)
    for i in ids:
        for j in ids[i + 1:]:
            assert int(np.sum(atlas.glyphs[i] != atlas.glyphs[j])) >= 8


def test_style_zero_is_identity(atlas):
    s0 = atlas.style(0)
    assert s0.is_identity
    assert s0.ink_value == 0


def test_style_parameter_ranges():
    with pytest.raises(ValueError):
        StyleSpec(style_id=9, ink_gain=0.4)
    with pytest.raises(ValueError):
        StyleSpec(style_id=9, ink_gain=1.2)
    with pytest.raises(ValueError):
        StyleSpec(style_id=9, thickness=-1)
    assert StyleSpec(style_id=9, ink_gain=0.5).ink_value == 128


def test_unknown_glyph_and_style(atlas):
    with pytest.raises(UnknownGlyphError):
        atlas.bitmap(99)
    with pytest.raises(UnknownGlyphError):
        atlas.style(77)


def test_vocab_layout(atlas, vocab):
    assert PAD_TOKEN == 0 and NULL_TOKEN == 1
    assert vocab.size == 2 + atlas.n_styles + atlas.n_glyphs
    assert vocab.style_token(0) == 2
    assert vocab.glyph_token(0) == 2 + atlas.n_styles
    with pytest.raises(UnknownGlyphError):
        vocab.glyph_token(atlas.n_glyphs)


def test_encode_prompt_pads_and_limits(vocab):
    toks = vocab.encode_prompt(1, [3, 5], 6)
    assert toks.tolist() == [3, vocab.glyph_token(3), vocab.glyph_token(5), 0, 0, 0]
    with pytest.raises(ValueError):
        vocab.encode_prompt(0, list(range(8)), 6)


def test_null_prompt(vocab):
    toks = vocab.null_prompt(3, 6)
    assert toks.tolist() == [1, 1, 1, 0, 0, 0]
