"""Operator entry points: corpus generation, training, sampling, editing,
inpainting, scoring, and serving.

Exit codes: 0 success, 1 runtime failure, 2 config/validation failure.
Failures print one machine-parsable line: `error: <code>: <message>`.
"""

from __future__ import annotations

import argparse
import os
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .atlas import default_atlas, vocab_for
from .backbone import CheckpointFormatError, ConfigError, Model
from .config import ConfigFileError, RunConfig, echo_config, load_run_config
from .corpus import (CapacityExceededError, CorpusFormatError, generate_corpus,
                     read_corpus, write_corpus)
from .flow import NonFiniteLossError, run_training
from .forensics import DRSConfig, drs_score, model_velocity_fn
from .infer import IntegratorConfig, InpaintTask, Sampler
from .layout import LayoutError, LayoutSpec, dumps_layout, loads_layout
from .pixels import gray_to_field
from .pngio import load_png, save_png


class CliError(Exception):
    def __init__(self, code: str, message: str, exit_code: int):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


def _config_error(code, message):
    return CliError(code, message, 2)


def _runtime_error(code, message):
    return CliError(code, message, 1)


def _parse_prompt(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.replace(",", " ").split()]
    except ValueError:
        raise _config_error("prompt", f"prompt {text!r} must be glyph ids") from None


def _load_run_config(args) -> RunConfig:
    try:
        return load_run_config(getattr(args, "config", None),
                               getattr(args, "set", None) or [])
    except ConfigFileError as exc:
        raise _config_error("config", str(exc)) from exc


def _load_model(path) -> tuple[Model, dict | None, int, int | None]:
    try:
        return Model.load(path)
    except FileNotFoundError as exc:
        raise _config_error("checkpoint", f"no checkpoint at {path}") from exc
    except (CheckpointFormatError, ConfigError) as exc:
        raise _config_error("checkpoint", str(exc)) from exc


def _load_layout_file(path) -> LayoutSpec:
    try:
        return loads_layout(Path(path).read_text())
    except OSError as exc:
        raise _config_error("layout", f"cannot read {path}: {exc}") from exc
    except LayoutError as exc:
        raise _config_error("layout", str(exc)) from exc


def cmd_corpus_make(args):
    cfg = _load_run_config(args)
    if args.seed is not None:
        cfg = replace(cfg, corpus=replace(cfg.corpus, seed=args.seed))
    if args.count is not None:
        cfg = replace(cfg, corpus_count=args.count)
    atlas = default_atlas()
    try:
        triplets = generate_corpus(cfg.corpus, atlas, cfg.corpus_count)
    except CapacityExceededError as exc:
        raise _config_error("capacity-exceeded", str(exc)) from exc
    write_corpus(args.out, cfg.corpus, triplets)
    echo_config(cfg, args.out)
    print(f"wrote {len(triplets)} records to {args.out}")
    return 0


def cmd_train(args):
    cfg = _load_run_config(args)
    tr = cfg.train
    if args.steps is not None:
        tr = replace(tr, total_steps=args.steps)
    if args.batch_size is not None:
        tr = replace(tr, batch_size=args.batch_size)
    if args.lr is not None:
        tr = replace(tr, learning_rate=args.lr)
    if args.seed is not None:
        tr = replace(tr, seed=args.seed)
    if args.save_every is not None:
        tr = replace(tr, save_every=args.save_every)
    cfg = replace(cfg, train=tr)
    try:
        corpus_cfg, triplets = read_corpus(args.corpus)
    except CorpusFormatError as exc:
        raise _config_error("corpus", str(exc)) from exc
    atlas = default_atlas()
    if args.resume:
        model, opt_state, start_step, corpus_seed = _load_model(args.resume)
    else:
        model = Model(cfg.model, seed=cfg.train.seed)
        opt_state, start_step, corpus_seed = None, 0, corpus_cfg.seed
    echo_config(cfg, args.out)
    try:
        final = run_training(model, triplets, cfg.train, args.out, vocab_for(atlas),
                             opt_state=opt_state, start_step=start_step,
                             corpus_seed=corpus_seed,
                             progress=_train_progress(args))
    except NonFiniteLossError as exc:
        raise _runtime_error("non-finite-loss", str(exc)) from exc
    print(f"checkpoint: {final}")
    return 0


def _train_progress(args):
    if args.quiet:
        return None

    def cb(rec):
        if rec["step"] % 100 == 0:
            print(f"step {rec['step']} loss {rec['total']:.4f}", flush=True)
    return cb


def cmd_gen(args):
    cfg = _load_run_config(args)
    icfg = cfg.integrate
    if args.steps is not None:
        icfg = replace(icfg, n_steps=args.steps)
    if args.guidance is not None:
        icfg = replace(icfg, guidance_scale=args.guidance)
    icfg = replace(icfg, seed=args.seed if args.seed is not None else icfg.seed)
    model, _, _, _ = _load_model(args.ckpt)
    atlas = default_atlas()
    sampler = Sampler(model, atlas)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.boxes:
        layout = _load_layout_file(args.boxes)
        try:
            res = sampler.generate_given_box(args.style, layout, icfg)
        except LayoutError as exc:
            raise _config_error("layout", str(exc)) from exc
    else:
        if args.prompt is None:
            raise _config_error("prompt", "either --prompt or --boxes is required")
        glyphs = _parse_prompt(args.prompt)
        for g in glyphs:
            if not 0 <= g < atlas.n_glyphs:
                raise _config_error("prompt", f"glyph id {g} outside the atlas")
        condition = sampler.bootstrap_condition(glyphs, icfg.seed)
        res = sampler.generate_cascaded(args.style, glyphs, condition, icfg)
        if res.decode_empty:
            print("warning: planning produced no decodable boxes", file=sys.stderr)
    save_png(out / "target.png", res.target)
    save_png(out / "condition.png", res.condition)
    save_png(out / "boxmap.png", res.boxmap)
    save_png(out / "boxmap_raw.png", res.boxmap_raw)
    (out / "layout.json").write_text(dumps_layout(res.layout))
    (out / "session.json").write_text(json.dumps({
        "style": args.style, "seed": icfg.seed, "n_steps": icfg.n_steps,
        "guidance_scale": icfg.guidance_scale,
        "glyphs": [b.glyph_id for b in res.layout.boxes],
    }, indent=2))
    echo_config(replace(cfg, integrate=icfg), out)
    print(f"wrote {out}/target.png")
    return 0


def cmd_edit(args):
    session_dir = Path(args.session)
    try:
        session = json.loads((session_dir / "session.json").read_text())
    except OSError as exc:
        raise _config_error("session", f"cannot read session: {exc}") from exc
    layout = _load_layout_file(args.layout)
    model, _, _, _ = _load_model(args.ckpt)
    sampler = Sampler(model, default_atlas())
    icfg = IntegratorConfig(n_steps=session["n_steps"],
                            guidance_scale=session["guidance_scale"],
                            seed=session["seed"])
    try:
        res = sampler.edit_regenerate(session["style"], layout, icfg)
    except LayoutError as exc:
        raise _config_error("layout", str(exc)) from exc
    save_png(session_dir / "target.png", res.target)
    save_png(session_dir / "condition.png", res.condition)
    save_png(session_dir / "boxmap.png", res.boxmap)
    (session_dir / "layout.json").write_text(dumps_layout(res.layout))
    session["glyphs"] = [b.glyph_id for b in res.layout.boxes]
    (session_dir / "session.json").write_text(json.dumps(session, indent=2))
    print(f"regenerated {session_dir}/target.png")
    return 0


def cmd_inpaint(args):
    model, _, _, _ = _load_model(args.ckpt)
    atlas = default_atlas()
    sampler = Sampler(model, atlas)
    image = load_png(args.image)
    mask = (load_png(args.mask) > 0).astype(np.uint8)
    glyphs = _parse_prompt(args.prompt) if args.prompt else []
    boxmap = None
    condition = load_png(args.condition) if args.condition else None
    if args.boxes:
        layout = _load_layout_file(args.boxes)
        from .layout import render_box_map
        boxmap = render_box_map(layout)
        from .corpus import render_condition
        if condition is None:
            condition = render_condition(atlas, layout)
        glyphs = [b.glyph_id for b in layout.boxes]
    task = InpaintTask(image=image, mask=mask, prompt_glyphs=tuple(glyphs),
                       style_id=args.style, condition=condition, boxmap=boxmap)
    try:
        task.validate()
    except ValueError as exc:
        raise _config_error("mask", str(exc)) from exc
    icfg = IntegratorConfig(n_steps=args.steps, guidance_scale=1.0, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = sampler.inpaint(task, icfg)
    save_png(out / "restored.png", result["image"])
    save_png(out / "restored_boxmap.png", result["boxmap"])
    print(f"wrote {out}/restored.png")
    return 0


def cmd_drs(args):
    model, _, _, _ = _load_model(args.ckpt)
    atlas = default_atlas()
    sampler = Sampler(model, atlas)
    image = load_png(args.image)
    glyphs = _parse_prompt(args.prompt) if args.prompt else []
    icfg = IntegratorConfig(guidance_scale=1.0, seed=args.seed)
    if args.boxes:
        layout = _load_layout_file(args.boxes)
        note = "given"
    else:
        from .layout import PALETTE, decode_box_map
        from .pixels import field_to_rgb
        field = sampler.plan_layout(args.style, glyphs, image, icfg)
        layout = decode_box_map(field_to_rgb(field), PALETTE, glyphs)
        if len(layout.boxes) > len(glyphs):
            layout = LayoutSpec(layout.canvas_size, layout.boxes[:len(glyphs)])
        note = "predicted"
    vel = model_velocity_fn(sampler, args.style,
                            [b.glyph_id for b in layout.boxes], layout)
    cfg = DRSConfig(trials=args.trials, seed=args.seed)
    report = drs_score(gray_to_field(image, model.cfg.np_dtype), cfg, vel)
    body = report.to_json()
    body["boxes"] = note
    text = json.dumps(body, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    if args.curve:
        Path(args.curve).write_text(report.to_csv())
    return 0


def cmd_serve(args):
    from .service import create_app
    sampler = None
    if args.ckpt:
        model, _, _, _ = _load_model(args.ckpt)
        sampler = Sampler(model, default_atlas())
    app = create_app(sampler, args.store_dir, workers=args.workers,
                     ui_dir=args.ui_dir)
    import uvicorn
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glyphflow",
        description="Layout-planned page synthesis: corpus, training, "
                    "sampling, editing, inpainting, scoring, serving.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_corpus = sub.add_parser("corpus", help="corpus operations")
    corpus_sub = p_corpus.add_subparsers(dest="corpus_command", required=True)
    p_make = corpus_sub.add_parser("make", help="generate a synthetic corpus")
    p_make.add_argument("--config", help="run config YAML (default: built-in defaults)")
    p_make.add_argument("--out", required=True, help="output corpus directory")
    p_make.add_argument("--count", type=int, default=None,
                        help="record count (default: config corpus.count)")
    p_make.add_argument("--seed", type=int, default=None,
                        help="corpus seed (default: config corpus.seed)")
    p_make.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="config override, repeatable (default: none)")
    p_make.set_defaults(func=cmd_corpus_make)

    p_train = sub.add_parser("train", help="train on a corpus directory")
    p_train.add_argument("--corpus", required=True, help="corpus directory")
    p_train.add_argument("--out", required=True, help="run output directory")
    p_train.add_argument("--config", help="run config YAML (default: built-in defaults)")
    p_train.add_argument("--steps", type=int, default=None,
                         help="total steps (default: config train.total_steps)")
    p_train.add_argument("--batch-size", type=int, default=None,
                         help="batch size (default: config train.batch_size)")
    p_train.add_argument("--lr", type=float, default=None,
                         help="learning rate (default: config train.learning_rate)")
    p_train.add_argument("--seed", type=int, default=None,
                         help="training seed (default: config train.seed)")
    p_train.add_argument("--save-every", type=int, default=None,
                         help="checkpoint cadence (default: config train.save_every)")
    p_train.add_argument("--resume", default=None,
                         help="checkpoint to resume from (default: fresh start)")
    p_train.add_argument("--quiet", action="store_true",
                         help="suppress progress lines (default: off)")
    p_train.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                         help="config override, repeatable (default: none)")
    p_train.set_defaults(func=cmd_train)

    p_gen = sub.add_parser("gen", help="generate a page")
    p_gen.add_argument("--ckpt", required=True, help="checkpoint file")
    p_gen.add_argument("--prompt", default=None,
                       help="glyph ids, e.g. '3 17 5' (default: none)")
    p_gen.add_argument("--style", type=int, default=0, help="style id (default: 0)")
    p_gen.add_argument("--boxes", default=None,
                       help="layout JSON: skip planning (default: plan boxes)")
    p_gen.add_argument("--out", required=True, help="output session directory")
    p_gen.add_argument("--seed", type=int, default=None,
                       help="sampling seed (default: config integrate.seed)")
    p_gen.add_argument("--steps", type=int, default=None,
                       help="solver steps (default: config integrate.n_steps)")
    p_gen.add_argument("--guidance", type=float, default=None,
                       help="guidance scale (default: config integrate.guidance_scale)")
    p_gen.add_argument("--config", help="run config YAML (default: built-in defaults)")
    p_gen.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="config override, repeatable (default: none)")
    p_gen.set_defaults(func=cmd_gen)

    p_edit = sub.add_parser("edit", help="regenerate a session with an edited layout")
    p_edit.add_argument("--ckpt", required=True, help="checkpoint file")
    p_edit.add_argument("--session", required=True, help="session directory from gen")
    p_edit.add_argument("--layout", required=True, help="edited layout JSON file")
    p_edit.set_defaults(func=cmd_edit)

    p_inp = sub.add_parser("inpaint", help="restore masked regions")
    p_inp.add_argument("--ckpt", required=True, help="checkpoint file")
    p_inp.add_argument("--image", required=True, help="corrupted page PNG")
    p_inp.add_argument("--mask", required=True, help="binary mask PNG (white = missing)")
    p_inp.add_argument("--prompt", default=None,
                       help="glyph ids (default: from --boxes)")
    p_inp.add_argument("--style", type=int, default=0, help="style id (default: 0)")
    p_inp.add_argument("--boxes", default=None,
                       help="ground-truth layout JSON (default: recover freely)")
    p_inp.add_argument("--condition", default=None,
                       help="condition PNG (default: render from --boxes, else joint)")
    p_inp.add_argument("--out", required=True, help="output directory")
    p_inp.add_argument("--seed", type=int, default=0, help="sampling seed (default: 0)")
    p_inp.add_argument("--steps", type=int, default=25, help="solver steps (default: 25)")
    p_inp.set_defaults(func=cmd_inpaint)

    p_drs = sub.add_parser("drs", help="reconstruction-error score")
    p_drs.add_argument("--ckpt", required=True, help="checkpoint file")
    p_drs.add_argument("--image", required=True, help="query page PNG")
    p_drs.add_argument("--prompt", default=None,
                       help="glyph ids (default: from --boxes)")
    p_drs.add_argument("--style", type=int, default=0, help="style id (default: 0)")
    p_drs.add_argument("--boxes", default=None,
                       help="layout JSON (default: plan from the query)")
    p_drs.add_argument("--trials", type=int, default=3,
                       help="trials per noise level (default: 3)")
    p_drs.add_argument("--seed", type=int, default=0, help="noise seed (default: 0)")
    p_drs.add_argument("--out", default=None,
                       help="report JSON path (default: stdout)")
    p_drs.add_argument("--curve", default=None,
                       help="per-level CSV path (default: not written)")
    p_drs.set_defaults(func=cmd_drs)

    # every serve flag falls back to a GLYPHFLOW_* environment variable
    env = os.environ.get
    p_serve = sub.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("--ckpt", default=env("GLYPHFLOW_CKPT"),
                         help="checkpoint file (default: $GLYPHFLOW_CKPT or none)")
    p_serve.add_argument("--port", type=int, default=int(env("GLYPHFLOW_PORT", "8787")),
                         help="port (default: $GLYPHFLOW_PORT or 8787)")
    p_serve.add_argument("--host", default=env("GLYPHFLOW_HOST", "127.0.0.1"),
                         help="bind address (default: $GLYPHFLOW_HOST or 127.0.0.1)")
    p_serve.add_argument("--workers", type=int,
                         default=int(env("GLYPHFLOW_WORKERS", "2")),
                         help="inference worker threads (default: $GLYPHFLOW_WORKERS or 2)")
    p_serve.add_argument("--store-dir",
                         default=env("GLYPHFLOW_STORE_DIR", "glyphflow-store"),
                         help="session store directory (default: $GLYPHFLOW_STORE_DIR "
                              "or glyphflow-store)")
    p_serve.add_argument("--ui-dir", default=env("GLYPHFLOW_UI_DIR"),
                         help="static UI assets to serve (default: $GLYPHFLOW_UI_DIR "
                              "or none)")
    p_serve.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (LayoutError, CorpusFormatError, CapacityExceededError) as exc:
        print(f"error: validation: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures
        print(f"error: runtime: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
