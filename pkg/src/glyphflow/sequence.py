"""Token sequence construction: patchification, modality ids, and rotary
position encoding extended with a modality axis.

The composite sequence is [text | image | box | condition]; the three
visual streams share one input projection and are told apart by learned
modality embeddings plus a rotary axis that encodes the modality index
alongside the 2D patch coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODALITY_TEXT = 0
MODALITY_IMAGE = 1
MODALITY_BOX = 2
MODALITY_COND = 3

CHANNELS = 3
ROPE_BASE = 10000.0


@dataclass(frozen=True)
class PatchGrid:
    canvas_size: int
    patch_size: int
    channels: int = CHANNELS

    def __post_init__(self):
        if self.canvas_size % self.patch_size:
            raise ValueError(
                f"patch size {self.patch_size} does not divide canvas {self.canvas_size}")

    @property
    def cols(self):
        return self.canvas_size // self.patch_size

    @property
    def n_patches(self):
        return self.cols * self.cols

    @property
    def patch_dim(self):
        return self.channels * self.patch_size * self.patch_size


def patchify(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """[H, W, C] (or [B, H, W, C]) -> [N, C*p*p] rows in raster order,
    channel-major within each patch."""
    batched = image.ndim == 4
    img = image if batched else image[None]
    b, h, w, c = img.shape
    if h != grid.canvas_size or w != grid.canvas_size or c != grid.channels:
        raise ValueError(f"image shape {image.shape} does not match {grid}")
    p, g = grid.patch_size, grid.cols
    out = (img.reshape(b, g, p, g, p, c)
              .transpose(0, 1, 3, 5, 2, 4)
              .reshape(b, grid.n_patches, grid.patch_dim))
    return out if batched else out[0]


def unpatchify(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    batched = patches.ndim == 3
    pat = patches if batched else patches[None]
    b, n, pd = pat.shape
    if n != grid.n_patches or pd != grid.patch_dim:
        raise ValueError(f"patch matrix {patches.shape} does not match {grid}")
    p, g, c = grid.patch_size, grid.cols, grid.channels
    out = (pat.reshape(b, g, g, c, p, p)
              .transpose(0, 1, 4, 2, 5, 3)
              .reshape(b, grid.canvas_size, grid.canvas_size, c))
    return out if batched else out[0]


def sequence_layout(l_max: int, grid: PatchGrid):
    """Per-token (modality, y, x) for the composite sequence."""
    n, g = grid.n_patches, grid.cols
    total = l_max + 3 * n
    modality = np.empty(total, dtype=np.int64)
    coords = np.zeros((total, 2), dtype=np.int64)
    modality[:l_max] = MODALITY_TEXT
    coords[:l_max, 1] = np.arange(l_max)
    ys, xs = np.divmod(np.arange(n), g)
    for s, m in ((0, MODALITY_IMAGE), (1, MODALITY_BOX), (2, MODALITY_COND)):
        lo = l_max + s * n
        modality[lo:lo + n] = m
        coords[lo:lo + n, 0] = ys
        coords[lo:lo + n, 1] = xs
    return modality, coords


def rope_pair_split(head_dim: int) -> tuple[int, int, int]:
    """Allocate rotary pairs: a quarter to the modality axis (it only
    takes four values), the rest split between y and x."""
    if head_dim % 2:
        raise ValueError(f"head dim {head_dim} must be even")
    pairs = head_dim // 2
    n_mod = max(1, pairs // 4)
    rem = pairs - n_mod
    n_y = rem // 2
    n_x = rem - n_y
    if n_y < 1 or n_x < 1:
        raise ValueError(f"head dim {head_dim} too small for 3-axis rotary split")
    return n_mod, n_y, n_x


def _group_freqs(n: int) -> np.ndarray:
    return ROPE_BASE ** (-np.arange(n) / n)


def rope_angles(modality: np.ndarray, coords: np.ndarray, head_dim: int) -> np.ndarray:
    """[T, head_dim/2] rotation angles for (modality, y, x) tokens."""
    n_mod, n_y, n_x = rope_pair_split(head_dim)
    ang = np.concatenate([
        modality[:, None] * _group_freqs(n_mod)[None, :],
        coords[:, 0:1] * _group_freqs(n_y)[None, :],
        coords[:, 1:2] * _group_freqs(n_x)[None, :],
    ], axis=1)
    return ang


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate consecutive dim pairs of [..., T, head_dim] by the per-token
    angles (cos/sin are [T, head_dim/2])."""
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_rotate(vec: np.ndarray, modality: int, coord: tuple[int, int]) -> np.ndarray:
    """Single-vector rotary rotation for one (modality, (y, x)) position."""
    ang = rope_angles(np.array([modality]), np.array([coord]), vec.shape[-1])
    return apply_rope(vec[None], np.cos(ang), np.sin(ang))[0]


@dataclass(frozen=True)
class TokenSequence:
    tokens: np.ndarray     # [total, d_model]
    modality: np.ndarray   # [total]
    coords: np.ndarray     # [total, 2]
    lengths: tuple[int, int, int, int]

    def __post_init__(self):
        l, n1, n2, n3 = self.lengths
        if not (n1 == n2 == n3):
            raise ValueError(f"visual streams differ in length: {self.lengths}")
        if self.tokens.shape[0] != l + n1 + n2 + n3:
            raise ValueError("token count does not match lengths")


def assemble_sequence(prompt: np.ndarray, img_patches: np.ndarray,
                      box_patches: np.ndarray, cond_patches: np.ndarray,
                      tok_emb: np.ndarray, w_in: np.ndarray, b_in: np.ndarray,
                      e_mod: np.ndarray, grid: PatchGrid) -> TokenSequence:
    """Embed one sample into the composite sequence.

    Text tokens come from the embedding table; each visual stream is the
    shared projection of its patches plus that stream's modality embedding.
    """
    n = grid.n_patches
    if not (img_patches.shape == box_patches.shape == cond_patches.shape
            == (n, grid.patch_dim)):
        raise ValueError("patch matrices must share the grid's [N, patch_dim] shape")
    l = len(prompt)
    if np.any(prompt < 0) or np.any(prompt >= tok_emb.shape[0]):
        raise ValueError("prompt token outside the embedding table")
    text = tok_emb[prompt]
    visual = [patches @ w_in + b_in + e_mod[i]
              for i, patches in enumerate((img_patches, box_patches, cond_patches))]
    tokens = np.concatenate([text] + visual, axis=0)
    modality, coords = sequence_layout(l, grid)
    return TokenSequence(tokens=tokens, modality=modality, coords=coords,
                         lengths=(l, n, n, n))
