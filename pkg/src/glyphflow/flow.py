"""Rectified-flow corruption, the four training regimes, loss assembly,
and the training loop.

Each step draws one regime that pins or samples the per-modality noise
levels: box planning trains with the image held at pure noise, content
synthesis trains with a clean (but delta-perturbed) box, the joint regime
corrupts all streams at one shared level for inpainting, and the
unconditional regime drops text and noises out box+condition for
classifier-free guidance. Randomness is keyed by (seed, purpose, step
[, sample]) so runs and resumes are reproducible step-for-step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .atlas import TokenVocab
from .backbone import Model, ModelConfig
from .corpus import Triplet
from .layout import PALETTE, render_box_map
from .pixels import gray_to_field, rgb_to_field
from .sequence import patchify

REGIMES = ("S1", "S2", "joint", "uncond")
COLOR_JITTER_RANGE = 16


class NonFiniteLossError(RuntimeError):
    def __init__(self, step, components):
        super().__init__(f"non-finite loss at step {step}: {components}")
        self.step = step
        self.components = components


@dataclass(frozen=True)
class TimestepTriplet:
    t_img: float
    t_box: float
    t_cond: float

    def __post_init__(self):
        for name in ("t_img", "t_box", "t_cond"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass(frozen=True)
class RegimeProbs:
    p_s1: float = 0.35
    p_s2: float = 0.35
    p_joint: float = 0.25
    p_uncond: float = 0.05

    def validate(self):
        vals = (self.p_s1, self.p_s2, self.p_joint, self.p_uncond)
        if any(v < 0 for v in vals):
            raise ValueError(f"negative regime probability in {vals}")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ValueError(f"regime probabilities sum to {sum(vals)}")
        return self


@dataclass(frozen=True)
class RegimeDraw:
    regime: str
    t: TimestepTriplet
    delta: float | None = None


@dataclass(frozen=True)
class TrainConfig:
    probs: RegimeProbs = field(default_factory=RegimeProbs)
    lambda_aux: float = 0.01
    delta_max: float = 0.1
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    batch_size: int = 8
    total_steps: int = 4000
    seed: int = 0
    color_jitter: bool = True
    save_every: int = 1000

    def validate(self):
        self.probs.validate()
        if self.lambda_aux < 0:
            raise ValueError(f"lambda_aux {self.lambda_aux} must be nonnegative")
        if not 0.0 <= self.delta_max <= 1.0:
            raise ValueError(f"delta_max {self.delta_max} outside [0, 1]")
        if min(self.batch_size, self.total_steps, self.save_every) < 1:
            raise ValueError("batch_size, total_steps, save_every must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        return self


# -- flow algebra -------------------------------------------------------

def interpolate(clean: np.ndarray, noise: np.ndarray, t) -> np.ndarray:
    if clean.shape != noise.shape:
        raise ValueError(f"shape mismatch {clean.shape} vs {noise.shape}")
    t = np.asarray(t, dtype=clean.dtype)
    return (1.0 - t) * clean + t * noise


def velocity_target(clean: np.ndarray, noise: np.ndarray) -> np.ndarray:
    if clean.shape != noise.shape:
        raise ValueError(f"shape mismatch {clean.shape} vs {noise.shape}")
    return noise - clean


def sample_t_logitnormal(rng) -> float:
    return float(1.0 / (1.0 + math.exp(-rng.standard_normal())))


def sample_regime(probs: RegimeProbs, delta_max: float, rng) -> RegimeDraw:
    """Pinning rules: S1 -> (1, ~, 0); S2 -> (~, 0, 0) plus a box
    perturbation level; joint -> one shared level; uncond -> (~, 1, 1)."""
    probs.validate()
    u = rng.random()
    edges = np.cumsum([probs.p_s1, probs.p_s2, probs.p_joint, probs.p_uncond])
    if u < edges[0]:
        return RegimeDraw("S1", TimestepTriplet(1.0, sample_t_logitnormal(rng), 0.0))
    if u < edges[1]:
        t_img = sample_t_logitnormal(rng)
        delta = float(rng.uniform(0.0, delta_max))
        return RegimeDraw("S2", TimestepTriplet(t_img, 0.0, 0.0), delta=delta)
    if u < edges[2]:
        t = sample_t_logitnormal(rng)
        return RegimeDraw("joint", TimestepTriplet(t, t, t))
    return RegimeDraw("uncond", TimestepTriplet(sample_t_logitnormal(rng), 1.0, 1.0))


def perturb_box_latent(b0: np.ndarray, delta: float, rng) -> np.ndarray:
    """Slide the clean box latent toward fresh noise by level delta."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta {delta} outside [0, 1]")
    eps = rng.standard_normal(b0.shape).astype(b0.dtype)
    return interpolate(b0, eps, delta)


_LOSS_WEIGHTS = {
    "S1": {"img": "aux", "box": 1.0, "cond": "aux"},
    "S2": {"img": 1.0, "box": "aux", "cond": "aux"},
    "joint": {"img": 1.0, "box": 1.0, "cond": 1.0},
    "uncond": {"img": 1.0, "box": "aux", "cond": "aux"},
}


def regime_weights(regime: str, lambda_aux: float) -> dict[str, float]:
    if regime not in _LOSS_WEIGHTS:
        raise ValueError(f"unknown regime {regime!r}")
    return {m: (lambda_aux if w == "aux" else w)
            for m, w in _LOSS_WEIGHTS[regime].items()}


def compute_loss(predictions: dict, targets: dict, regime: str,
                 lambda_aux: float):
    """Per-stream mean squared velocity error, combined by the regime's
    weights. Returns (total, components)."""
    comps = {}
    for m in ("img", "box", "cond"):
        if predictions[m].shape != targets[m].shape:
            raise ValueError(f"{m} prediction/target shape mismatch")
        diff = predictions[m] - targets[m]
        comps[m] = float(np.mean(diff * diff))
    weights = regime_weights(regime, lambda_aux)
    total = sum(weights[m] * comps[m] for m in comps)
    return total, comps


# -- optimizer ----------------------------------------------------------

class AdamW:
    """Decoupled-weight-decay Adam over one flat moment buffer.

    Parameter tensors stay separate dict entries; the optimizer keeps a
    stable name order and concatenates gradients once per step so the
    update runs as a single kernel call over every parameter element.
    """

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.names = sorted(params)
        self._offsets = {}
        total = 0
        for name in self.names:
            size = params[name].size
            self._offsets[name] = (total, total + size)
            total += size
        dtype = params[self.names[0]].dtype
        self.flat_m = np.zeros(total, dtype=dtype)
        self.flat_v = np.zeros(total, dtype=dtype)

    def apply(self, params: dict, grads: dict, lr: float, weight_decay: float):
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        dtype = self.flat_m.dtype
        flat_p = np.concatenate([params[n].ravel() for n in self.names])
        flat_g = np.concatenate([grads[n].astype(dtype, copy=False).ravel()
                                 for n in self.names])
        kernels.adamw_update(flat_p, flat_g, self.flat_m, self.flat_v,
                             lr, self.beta1, self.beta2, self.eps,
                             weight_decay, bc1, bc2)
        for name in self.names:
            lo, hi = self._offsets[name]
            np.copyto(params[name], flat_p[lo:hi].reshape(params[name].shape))

    def _split(self, flat):
        return {n: flat[self._offsets[n][0]:self._offsets[n][1]].copy()
                for n in self.names}

    def state(self):
        return {"step": self.step_count, "m": self._split(self.flat_m),
                "v": self._split(self.flat_v)}

    @classmethod
    def from_state(cls, params: dict, state: dict, beta1=0.9, beta2=0.999,
                   eps=1e-8):
        opt = cls(params, beta1=beta1, beta2=beta2, eps=eps)
        opt.step_count = state["step"]
        opt.flat_m = np.concatenate([state["m"][n].ravel() for n in opt.names])
        opt.flat_v = np.concatenate([state["v"][n].ravel() for n in opt.names])
        return opt


# -- data ---------------------------------------------------------------

class TrainData:
    """Corpus triplets staged as model-ready arrays."""

    def __init__(self, triplets: list[Triplet], cfg: ModelConfig, vocab: TokenVocab):
        if not triplets:
            raise ValueError("empty corpus")
        dt = cfg.np_dtype
        self.cfg = cfg
        self.vocab = vocab
        self.targets = np.stack([gray_to_field(t.target, dt) for t in triplets])
        self.conditions = np.stack([gray_to_field(t.condition, dt) for t in triplets])
        self.boxmaps = np.stack([rgb_to_field(t.boxmap, dt) for t in triplets])
        self.layouts = [t.layout for t in triplets]
        self.prompts = np.zeros((len(triplets), cfg.l_max), dtype=np.int64)
        self.prompt_lens = np.zeros(len(triplets), dtype=np.int64)
        for i, t in enumerate(triplets):
            if len(t.prompt) > cfg.l_max:
                raise ValueError(f"triplet {i} prompt longer than l_max={cfg.l_max}")
            self.prompts[i, :len(t.prompt)] = t.prompt
            self.prompt_lens[i] = len(t.prompt)

    def __len__(self):
        return len(self.layouts)

    def jittered_boxmap(self, index: int, rng) -> np.ndarray:
        """Box-map with per-box palette jitter (training-only augmentation)."""
        layout = self.layouts[index]
        offsets = rng.integers(-COLOR_JITTER_RANGE, COLOR_JITTER_RANGE + 1,
                               size=(len(PALETTE), 3))
        pal = np.clip(PALETTE.astype(np.int64) + offsets, 0, 255).astype(np.uint8)
        return rgb_to_field(render_box_map(layout, pal), self.cfg.np_dtype)


def step_rng(seed: int, step: int):
    return np.random.default_rng(np.random.SeedSequence((seed, 1, step)))


def sample_rng(seed: int, step: int, index: int):
    return np.random.default_rng(np.random.SeedSequence((seed, 2, step, index)))


def build_batch(data: TrainData, tcfg: TrainConfig, draw: RegimeDraw,
                indices: np.ndarray, step: int):
    """Corrupt one batch under the drawn regime.

    Returns model inputs (fields), per-stream velocity targets, and the
    prompt matrix. The S2 regime feeds the delta-perturbed box as the
    conditioning input while the loss target stays the clean box's
    velocity toward the same noise draw.
    """
    cfg = data.cfg
    dt = cfg.np_dtype
    b = len(indices)
    shape = (cfg.canvas_size, cfg.canvas_size, 3)
    img_in = np.empty((b,) + shape, dtype=dt)
    box_in = np.empty_like(img_in)
    cond_in = np.empty_like(img_in)
    u_img = np.empty_like(img_in)
    u_box = np.empty_like(img_in)
    u_cond = np.empty_like(img_in)
    prompts = np.empty((b, cfg.l_max), dtype=np.int64)
    t = draw.t
    for j, idx in enumerate(indices):
        rng = sample_rng(tcfg.seed, step, j)
        x0 = data.targets[idx]
        c0 = data.conditions[idx]
        b0 = (data.jittered_boxmap(int(idx), rng) if tcfg.color_jitter
              else data.boxmaps[idx])
        e_img = rng.standard_normal(shape).astype(dt)
        e_box = rng.standard_normal(shape).astype(dt)
        e_cond = rng.standard_normal(shape).astype(dt)
        u_img[j] = velocity_target(x0, e_img)
        u_box[j] = velocity_target(b0, e_box)
        u_cond[j] = velocity_target(c0, e_cond)
        img_in[j] = interpolate(x0, e_img, t.t_img)
        cond_in[j] = interpolate(c0, e_cond, t.t_cond)
        if draw.regime == "S2":
            box_in[j] = interpolate(b0, e_box, draw.delta)
        else:
            box_in[j] = interpolate(b0, e_box, t.t_box)
        if draw.regime == "uncond":
            prompts[j] = data.vocab.null_prompt(int(data.prompt_lens[idx]), cfg.l_max)
        else:
            prompts[j] = data.prompts[idx]
    return dict(img=img_in, box=box_in, cond=cond_in), \
           dict(img=u_img, box=u_box, cond=u_cond), prompts


def train_step(model: Model, opt: AdamW, data: TrainData, tcfg: TrainConfig,
               step: int):
    """One optimizer step; returns the loss record for the training log."""
    cfg = model.cfg
    rng = step_rng(tcfg.seed, step)
    indices = rng.integers(0, len(data), size=tcfg.batch_size)
    draw = sample_regime(tcfg.probs, tcfg.delta_max, rng)
    inputs, targets, prompts = build_batch(data, tcfg, draw, indices, step)

    grid = cfg.grid
    patches = {m: patchify(inputs[m], grid) for m in inputs}
    target_p = {m: patchify(targets[m], grid) for m in targets}
    t_vec = {m: np.full(tcfg.batch_size, v, dtype=cfg.np_dtype)
             for m, v in (("img", draw.t.t_img), ("box", draw.t.t_box),
                          ("cond", draw.t.t_cond))}
    v_img, v_box, v_cond, cache = model.forward(
        prompts, patches["img"], patches["box"], patches["cond"],
        t_vec["img"], t_vec["box"], t_vec["cond"], need_cache=True)
    preds = {"img": v_img, "box": v_box, "cond": v_cond}
    total, comps = compute_loss(preds, target_p, draw.regime, tcfg.lambda_aux)
    if not np.isfinite(total):
        raise NonFiniteLossError(step, comps)
    weights = regime_weights(draw.regime, tcfg.lambda_aux)
    douts = {m: (2.0 * weights[m] / preds[m].size) * (preds[m] - target_p[m])
             for m in preds}
    grads = model.backward(cache, douts["img"], douts["box"], douts["cond"])
    opt.apply(model.params, grads, tcfg.learning_rate, tcfg.weight_decay)
    return dict(step=step, total=total, L_img=comps["img"], L_box=comps["box"],
                L_cond=comps["cond"], regime=draw.regime, t_img=draw.t.t_img,
                t_box=draw.t.t_box, t_cond=draw.t.t_cond)


def format_log_line(rec: dict) -> str:
    return "\t".join([
        str(rec["step"]), f"{rec['total']:.6f}", f"{rec['L_img']:.6f}",
        f"{rec['L_box']:.6f}", f"{rec['L_cond']:.6f}", rec["regime"],
        f"{rec['t_img']:.6f}", f"{rec['t_box']:.6f}", f"{rec['t_cond']:.6f}",
    ])


def parse_log_line(line: str) -> dict:
    parts = line.rstrip("\n").split("\t")
    return dict(step=int(parts[0]), total=float(parts[1]), L_img=float(parts[2]),
                L_box=float(parts[3]), L_cond=float(parts[4]), regime=parts[5],
                t_img=float(parts[6]), t_box=float(parts[7]), t_cond=float(parts[8]))


def run_training(model: Model, triplets: list[Triplet], tcfg: TrainConfig,
                 out_dir, vocab: TokenVocab, opt_state: dict | None = None,
                 start_step: int = 0, corpus_seed: int | None = None,
                 progress=None) -> Path:
    """Train from `start_step` to total_steps; appends one log line per
    step and checkpoints every save_every steps. Returns the final
    checkpoint path."""
    tcfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = TrainData(triplets, model.cfg, vocab)
    opt = AdamW(model.params, beta1=tcfg.adam_beta1, beta2=tcfg.adam_beta2,
                eps=tcfg.adam_eps)
    if opt_state is not None:
        opt = AdamW.from_state(model.params, opt_state, beta1=tcfg.adam_beta1,
                               beta2=tcfg.adam_beta2, eps=tcfg.adam_eps)
    log_path = out / "train.log"
    final = out / "ckpt.cmck"
    with open(log_path, "a") as log:
        for step in range(start_step, tcfg.total_steps):
            rec = train_step(model, opt, data, tcfg, step)
            log.write(format_log_line(rec) + "\n")
            if progress is not None:
                progress(rec)
            done = step + 1
            if done % tcfg.save_every == 0 and done < tcfg.total_steps:
                model.save(out / f"ckpt-{done:06d}.cmck", opt_state=opt.state(),
                           step=done, corpus_seed=corpus_seed)
    model.save(final, opt_state=opt.state(), step=tcfg.total_steps,
               corpus_seed=corpus_seed)
    return final
