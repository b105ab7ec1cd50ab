"""Reconstruction-error scoring: corrupt a query page at a ladder of
noise levels, reconstruct each in a single flow step, and aggregate the
squared errors into one score. Pages the model knows reconstruct well at
every level; blob-damaged or off-distribution pages score higher, with
low levels probing stroke detail and high levels probing layout.

Also hosts the elliptical blob perturbation used to benchmark the score.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .layout import PALETTE, LayoutSpec, render_box_map
from .pixels import gray_to_field, rgb_to_field
from .sequence import patchify, unpatchify

DEFAULT_LEVELS = tuple(round(0.1 * k, 1) for k in range(1, 10))


@dataclass(frozen=True)
class DRSConfig:
    noise_levels: tuple[float, ...] = DEFAULT_LEVELS
    weights: tuple[float, ...] | None = None   # None -> uniform 1/K
    trials: int = 3
    seed: int = 0

    def validate(self):
        if not self.noise_levels:
            raise ValueError("need at least one noise level")
        if any(not 0.0 < t < 1.0 for t in self.noise_levels):
            raise ValueError(f"noise levels {self.noise_levels} must lie in (0, 1)")
        if self.weights is not None:
            if len(self.weights) != len(self.noise_levels):
                raise ValueError("one weight per noise level")
            if any(w < 0 for w in self.weights):
                raise ValueError("weights must be nonnegative")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        return self

    def level_weights(self):
        if self.weights is not None:
            return tuple(self.weights)
        k = len(self.noise_levels)
        return tuple(1.0 / k for _ in range(k))


@dataclass(frozen=True)
class BlobSpec:
    count: int
    axis_range: tuple[float, float] = (2.0, 8.0)
    ink_prob: float = 0.5

    def validate(self):
        if self.count < 0:
            raise ValueError("blob count must be nonnegative")
        lo, hi = self.axis_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad axis range {self.axis_range}")
        if not 0.0 <= self.ink_prob <= 1.0:
            raise ValueError("ink probability outside [0, 1]")
        return self


BLOB_INTENSITIES = {"L": 8, "M": 20, "H": 40}


@dataclass(frozen=True)
class DRSReport:
    score: float
    levels: tuple[float, ...]
    mean_errors: tuple[float, ...]
    trial_errors: tuple[tuple[float, ...], ...]

    def to_json(self) -> dict:
        return {
            "score": self.score,
            "levels": [
                {"t": t, "mean_error": e, "trials": list(tr)}
                for t, e, tr in zip(self.levels, self.mean_errors, self.trial_errors)
            ],
        }

    def to_csv(self) -> str:
        lines = ["t,mean_error"]
        lines += [f"{t},{e}" for t, e in zip(self.levels, self.mean_errors)]
        return "\n".join(lines) + "\n"


def single_step_reconstruct(x_query: np.ndarray, t_k: float, rng, velocity_fn):
    """Corrupt to level t_k with fresh noise and undo it in one step:
    x_hat = x_t - t_k * v(x_t, t_k)."""
    if not 0.0 < t_k < 1.0:
        raise ValueError(f"t_k {t_k} must lie in (0, 1)")
    eps = rng.standard_normal(x_query.shape).astype(x_query.dtype)
    x_t = (1.0 - t_k) * x_query + t_k * eps
    v = velocity_fn(x_t[None], np.full(1, t_k, dtype=x_query.dtype))[0]
    return x_t - x_query.dtype.type(t_k) * v


def drs_score(x_query: np.ndarray, cfg: DRSConfig, velocity_fn) -> DRSReport:
    """Mean per-pixel squared reconstruction error per level, averaged
    over trials, aggregated by the level weights.

    velocity_fn takes a batch ([B, H, W, 3], t [B]) so a model can serve
    all (level, trial) corruptions in one call.
    """
    cfg.validate()
    k = len(cfg.noise_levels)
    shape = x_query.shape
    xs = np.empty((k * cfg.trials,) + shape, dtype=x_query.dtype)
    t_vec = np.empty(k * cfg.trials, dtype=x_query.dtype)
    for i, t_k in enumerate(cfg.noise_levels):
        for j in range(cfg.trials):
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 4, i, j)))
            eps = rng.standard_normal(shape).astype(x_query.dtype)
            idx = i * cfg.trials + j
            xs[idx] = (1.0 - t_k) * x_query + t_k * eps
            t_vec[idx] = t_k
    vs = velocity_fn(xs, t_vec)
    trial_errors = []
    mean_errors = []
    for i, t_k in enumerate(cfg.noise_levels):
        errs = []
        for j in range(cfg.trials):
            idx = i * cfg.trials + j
            x_hat = xs[idx] - x_query.dtype.type(t_k) * vs[idx]
            diff = x_query - x_hat
            errs.append(float(np.mean(diff * diff)))
        trial_errors.append(tuple(errs))
        mean_errors.append(float(np.mean(errs)))
    weights = cfg.level_weights()
    score = float(sum(w * e for w, e in zip(weights, mean_errors)))
    return DRSReport(score=score, levels=tuple(cfg.noise_levels),
                     mean_errors=tuple(mean_errors),
                     trial_errors=tuple(trial_errors))


def model_velocity_fn(sampler, style_id: int, glyph_ids, layout: LayoutSpec):
    """Velocity closure conditioned on clean (condition, box) rendered
    from the given layout; the image stream carries the query."""
    from .corpus import render_condition

    grid = sampler.grid
    dt = sampler.cfg.np_dtype
    box_f = rgb_to_field(render_box_map(layout, PALETTE), dt)
    cond_f = gray_to_field(render_condition(sampler.atlas, layout), dt)
    prompt = sampler.vocab.encode_prompt(style_id, glyph_ids, sampler.cfg.l_max)

    def vel(x_t, t_vec):
        b = x_t.shape[0]
        prompts = np.repeat(prompt[None], b, axis=0)
        boxes = np.repeat(box_f[None], b, axis=0)
        conds = np.repeat(cond_f[None], b, axis=0)
        zeros = np.zeros(b, dtype=dt)
        v_img, _, _, _ = sampler.model.forward(
            prompts, patchify(x_t, grid), patchify(boxes, grid),
            patchify(conds, grid), np.asarray(t_vec, dtype=dt), zeros, zeros)
        return unpatchify(v_img, grid)

    return vel


def add_blobs(image: np.ndarray, spec: BlobSpec, rng) -> np.ndarray:
    """Paint `count` filled ellipses with random centers, axes, and
    orientation; each is ink-black with probability ink_prob, else
    paper-white."""
    spec.validate()
    out = np.ascontiguousarray(image, dtype=np.uint8).copy()
    h, w = out.shape
    for _ in range(spec.count):
        cy = float(rng.uniform(0, h))
        cx = float(rng.uniform(0, w))
        a = float(rng.uniform(*spec.axis_range))
        b = float(rng.uniform(*spec.axis_range))
        theta = float(rng.uniform(0, np.pi))
        value = np.uint8(0) if rng.random() < spec.ink_prob else np.uint8(255)
        kernels.paint_ellipse(out, cy, cx, a, b, theta, value)
    return out
