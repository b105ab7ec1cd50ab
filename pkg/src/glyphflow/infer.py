"""Sampling: the Euler ODE integrator, two-stage cascaded generation,
layout-edit regeneration, replacement inpainting, and guidance.

Every sampling run is a pure function of (weights, inputs, seed): all
noise draws come from purpose-keyed streams, so an edit session can
replay its initial image noise exactly, and given-box generation is
bit-identical to the cascaded path at the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .atlas import GlyphAtlas, vocab_for
from .backbone import Model
from .corpus import render_condition
from .layout import PALETTE, LayoutSpec, decode_box_map, render_box_map
from .pixels import field_to_gray, field_to_rgb, gray_to_field, rgb_to_field
from .sequence import patchify, unpatchify


class NonFiniteStateError(RuntimeError):
    pass


class InvalidMaskError(ValueError):
    pass


@dataclass(frozen=True)
class IntegratorConfig:
    n_steps: int = 25
    t_start: float = 1.0
    t_end: float = 0.0
    guidance_scale: float = 2.0
    seed: int = 0

    def validate(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps {self.n_steps} must be >= 1")
        if not (0.0 <= self.t_end < self.t_start <= 1.0):
            raise ValueError(
                f"need 0 <= t_end < t_start <= 1, got {self.t_end}, {self.t_start}")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be nonnegative")
        return self


@dataclass(frozen=True)
class GenerationContext:
    prompt: np.ndarray                 # padded token ids [L]
    condition: np.ndarray              # [-1,1] field [H, W, 3]
    box: np.ndarray | None = None      # clean box field when given
    x1: np.ndarray | None = None       # fixed initial image noise


@dataclass(frozen=True)
class InpaintTask:
    image: np.ndarray                  # corrupted page, uint8 [H, W]
    mask: np.ndarray                   # 1 = missing, uint8/bool [H, W]
    prompt_glyphs: tuple[int, ...]
    style_id: int
    condition: np.ndarray | None = None   # uint8 [H, W]; evolves jointly if absent
    boxmap: np.ndarray | None = None      # uint8 [H, W, 3] ground truth when known

    def validate(self):
        if self.mask.shape != self.image.shape:
            raise InvalidMaskError(
                f"mask {self.mask.shape} does not match image {self.image.shape}")
        vals = np.unique(self.mask)
        if not np.all(np.isin(vals, (0, 1))):
            raise InvalidMaskError(f"mask values {vals} are not binary")
        return self


def cfg_velocity(v_cond: np.ndarray, v_uncond: np.ndarray, w: float) -> np.ndarray:
    """Classifier-free combination v_uncond + w * (v_cond - v_uncond)."""
    if v_cond.shape != v_uncond.shape:
        raise ValueError("guidance branches disagree in shape")
    if w == 1.0:
        return v_cond.copy()
    if w == 0.0:
        return v_uncond.copy()
    return v_uncond + v_cond.dtype.type(w) * (v_cond - v_uncond)


def euler_integrate(z1: np.ndarray, cfg: IntegratorConfig, velocity_fn):
    """Explicit Euler on a uniform t grid from t_start down to t_end."""
    cfg.validate()
    ts = np.linspace(cfg.t_start, cfg.t_end, cfg.n_steps + 1)
    z = z1.copy()
    for i in range(cfg.n_steps):
        v = velocity_fn(z, float(ts[i]))
        z += z.dtype.type(ts[i + 1] - ts[i]) * v
        if not np.all(np.isfinite(z)):
            raise NonFiniteStateError(f"integration diverged at t={ts[i + 1]:.4f}")
    return z


# the ODE evolver is the integrator itself; stream pinning lives in the
# Sampler entry points that build each velocity closure
psi_integrate = euler_integrate


def _stream_rng(seed: int, tag: int):
    return np.random.default_rng(np.random.SeedSequence((seed, 3, tag)))


# noise-stream purposes; fixed tags keep every entry point replayable
_TAG_X1 = 0
_TAG_STAGE1_BOX = 1
_TAG_STAGE1_IMGPIN = 2
_TAG_UNCOND_BOX = 3
_TAG_UNCOND_COND = 4
_TAG_INPAINT = 5
_TAG_JOINT = 6


@dataclass
class GenerationResult:
    target: np.ndarray          # uint8 [H, W]
    condition: np.ndarray       # uint8 [H, W]
    boxmap: np.ndarray          # uint8 [H, W, 3], canonical re-render
    boxmap_raw: np.ndarray      # uint8 [H, W, 3], stage-1 ODE output
    layout: LayoutSpec
    decode_empty: bool = False


class Sampler:
    """Model-bound sampling entry points."""

    def __init__(self, model: Model, atlas: GlyphAtlas):
        self.model = model
        self.atlas = atlas
        self.vocab = vocab_for(atlas)
        self.cfg = model.cfg
        self.grid = model.cfg.grid

    # -- plumbing -------------------------------------------------------

    def _field_shape(self):
        c = self.cfg.canvas_size
        return (c, c, 3)

    def _pad_prompt(self, style_id: int, glyph_ids) -> np.ndarray:
        return self.vocab.encode_prompt(style_id, glyph_ids, self.cfg.l_max)

    def _velocities(self, prompts, img_f, box_f, cond_f, t_img, t_box, t_cond):
        """Batched field-space forward; returns per-stream velocity fields."""
        b = img_f.shape[0]
        dt = self.cfg.np_dtype
        to_t = lambda v: (np.full(b, v, dtype=dt) if np.isscalar(v)
                          else np.asarray(v, dtype=dt))
        v_img, v_box, v_cond, _ = self.model.forward(
            prompts, patchify(img_f, self.grid), patchify(box_f, self.grid),
            patchify(cond_f, self.grid), to_t(t_img), to_t(t_box), to_t(t_cond))
        return (unpatchify(v_img, self.grid), unpatchify(v_box, self.grid),
                unpatchify(v_cond, self.grid))

    def _noise(self, seed: int, tag: int, shape=None):
        shape = self._field_shape() if shape is None else shape
        return _stream_rng(seed, tag).standard_normal(shape).astype(self.cfg.np_dtype)

    # -- stage 1: layout planning ----------------------------------------

    def plan_layout(self, style_id: int, glyph_ids, condition: np.ndarray,
                    icfg: IntegratorConfig):
        """Integrate the box stream with the image pinned at pure noise and
        the condition clean; returns the raw box field."""
        prompt = self._pad_prompt(style_id, glyph_ids)[None]
        cond_f = gray_to_field(condition, self.cfg.np_dtype)[None]
        img_pin = self._noise(icfg.seed, _TAG_STAGE1_IMGPIN)[None]
        b1 = self._noise(icfg.seed, _TAG_STAGE1_BOX)[None]

        def vel(b_t, t):
            _, v_box, _ = self._velocities(prompt, img_pin, b_t, cond_f,
                                           1.0, t, 0.0)
            return v_box

        return euler_integrate(b1, icfg, vel)[0]

    # -- stage 2: content synthesis ---------------------------------------

    def synthesize_image(self, style_id: int, glyph_ids, layout: LayoutSpec,
                         icfg: IntegratorConfig, x1: np.ndarray | None = None):
        """Integrate the image stream against a clean layout; the box map
        and condition are re-rendered from the layout, so edited layouts
        flow through the identical path as planned ones."""
        dt = self.cfg.np_dtype
        boxmap = render_box_map(layout, PALETTE)
        condition = render_condition(self.atlas, layout)
        box_f = rgb_to_field(boxmap, dt)[None]
        cond_f = gray_to_field(condition, dt)[None]
        prompt = self._pad_prompt(style_id, glyph_ids)[None]
        if x1 is None:
            x1 = self._noise(icfg.seed, _TAG_X1)
        x1 = x1[None]
        w = icfg.guidance_scale
        if w != 1.0:
            null_prompt = self.vocab.null_prompt(1 + len(glyph_ids), self.cfg.l_max)[None]
            box_u = self._noise(icfg.seed, _TAG_UNCOND_BOX)[None]
            cond_u = self._noise(icfg.seed, _TAG_UNCOND_COND)[None]

            def vel(x_t, t):
                both = np.concatenate([x_t, x_t], axis=0)
                prompts = np.concatenate([prompt, null_prompt], axis=0)
                boxes = np.concatenate([box_f, box_u], axis=0)
                conds = np.concatenate([cond_f, cond_u], axis=0)
                t_box = np.array([0.0, 1.0], dtype=dt)
                t_cond = np.array([0.0, 1.0], dtype=dt)
                v_img, _, _ = self._velocities(prompts, both, boxes, conds,
                                               t, t_box, t_cond)
                return cfg_velocity(v_img[0:1], v_img[1:2], w)
        else:
            def vel(x_t, t):
                v_img, _, _ = self._velocities(prompt, x_t, box_f, cond_f,
                                               t, 0.0, 0.0)
                return v_img

        x0 = euler_integrate(x1, icfg, vel)[0]
        return dict(target=field_to_gray(x0), boxmap=boxmap, condition=condition)

    # -- public entry points ----------------------------------------------

    def generate_cascaded(self, style_id: int, glyph_ids, condition: np.ndarray,
                          icfg: IntegratorConfig) -> GenerationResult:
        """Plan the layout from (prompt, condition), then synthesize the
        page conditioned on the decoded plan."""
        raw_field = self.plan_layout(style_id, glyph_ids, condition, icfg)
        boxmap_raw = field_to_rgb(raw_field)
        layout = decode_box_map(boxmap_raw, PALETTE, list(glyph_ids))
        # a box with no prompt glyph behind it has nothing to render
        if len(layout.boxes) > len(glyph_ids):
            layout = LayoutSpec(layout.canvas_size,
                                layout.boxes[:len(glyph_ids)])
        decode_empty = len(layout.boxes) == 0
        stage2 = self.synthesize_image(style_id,
                                       [b.glyph_id for b in layout.boxes],
                                       layout, icfg)
        return GenerationResult(target=stage2["target"], condition=stage2["condition"],
                                boxmap=stage2["boxmap"], boxmap_raw=boxmap_raw,
                                layout=layout, decode_empty=decode_empty)

    def generate_given_box(self, style_id: int, layout: LayoutSpec,
                           icfg: IntegratorConfig) -> GenerationResult:
        """Skip planning; glyphs come from the layout's boxes."""
        layout.validate()
        glyphs = [b.glyph_id for b in layout.boxes]
        stage2 = self.synthesize_image(style_id, glyphs, layout, icfg)
        return GenerationResult(target=stage2["target"], condition=stage2["condition"],
                                boxmap=stage2["boxmap"],
                                boxmap_raw=stage2["boxmap"], layout=layout)

    def edit_regenerate(self, style_id: int, edited: LayoutSpec,
                        icfg: IntegratorConfig) -> GenerationResult:
        """Regenerate with the session's frozen initial noise (same seed
        stream) against an edited layout; condition and box map track the
        edit."""
        edited.validate()
        x1 = self._noise(icfg.seed, _TAG_X1)
        glyphs = [b.glyph_id for b in edited.boxes]
        stage2 = self.synthesize_image(style_id, glyphs, edited, icfg, x1=x1)
        return GenerationResult(target=stage2["target"], condition=stage2["condition"],
                                boxmap=stage2["boxmap"],
                                boxmap_raw=stage2["boxmap"], layout=edited)

    def bootstrap_condition(self, glyph_ids, seed: int) -> np.ndarray:
        """Condition page for a fresh prompt with no layout yet: sample a
        procedural arrangement for these glyphs and render it in the
        identity style."""
        from dataclasses import replace

        from .corpus import CorpusConfig, mode_capacity, sample_layout

        cfg = CorpusConfig(canvas_size=self.cfg.canvas_size, seed=seed)
        rng = np.random.default_rng(np.random.SeedSequence((seed, 5)))
        k = len(glyph_ids)
        mode = "grid" if k <= mode_capacity(cfg, "grid") else "random"
        layout = sample_layout(cfg, mode, k, rng)
        boxes = tuple(replace(b, glyph_id=int(g))
                      for b, g in zip(layout.boxes, glyph_ids))
        return render_condition(self.atlas, LayoutSpec(layout.canvas_size, boxes))

    def inpaint(self, task: InpaintTask, icfg: IntegratorConfig) -> dict:
        """Joint-regime restoration with per-step replacement: known image
        regions are re-noised ground truth at each step's level, so the
        output matches the input exactly outside the mask.

        When a ground-truth box map is supplied the same mask constrains
        the box stream; otherwise the layout is recovered freely. A given
        condition page is pinned clean; otherwise that stream evolves
        jointly too.
        """
        task.validate()
        icfg.validate()
        dt = self.cfg.np_dtype
        gt_f = gray_to_field(task.image, dt)
        m = task.mask.astype(dt)[:, :, None]
        prompt = self._pad_prompt(task.style_id, task.prompt_glyphs)[None]
        rng = _stream_rng(icfg.seed, _TAG_INPAINT)

        x = rng.standard_normal(gt_f.shape).astype(dt)
        b = rng.standard_normal(gt_f.shape).astype(dt)
        cond_given = task.condition is not None
        if cond_given:
            c = gray_to_field(task.condition, dt)
        else:
            c = rng.standard_normal(gt_f.shape).astype(dt)
        box_gt_f = rgb_to_field(task.boxmap, dt) if task.boxmap is not None else None

        ts = np.linspace(icfg.t_start, icfg.t_end, icfg.n_steps + 1)
        for i in range(icfg.n_steps):
            t_now, t_next = float(ts[i]), float(ts[i + 1])
            dt_step = dt.type(t_next - t_now)
            v_img, v_box, v_cond = self._velocities(
                prompt, x[None], b[None], c[None],
                t_now, t_now, 0.0 if cond_given else t_now)
            x = x + dt_step * v_img[0]
            b = b + dt_step * v_box[0]
            if not cond_given:
                c = c + dt_step * v_cond[0]
            # replacement: hold known regions at the re-noised ground truth
            eps = rng.standard_normal(gt_f.shape).astype(dt)
            noisy_gt = (1.0 - t_next) * gt_f + t_next * eps
            x = m * x + (1.0 - m) * noisy_gt
            if box_gt_f is not None:
                eps_b = rng.standard_normal(gt_f.shape).astype(dt)
                noisy_box = (1.0 - t_next) * box_gt_f + t_next * eps_b
                b = m * b + (1.0 - m) * noisy_box
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(b))):
                raise NonFiniteStateError(f"inpainting diverged at t={t_next:.4f}")
        return dict(image=field_to_gray(x), boxmap=field_to_rgb(b))
