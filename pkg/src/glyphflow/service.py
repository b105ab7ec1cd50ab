"""HTTP facade for the interactive editing loop.

Sessions are file-backed: each regeneration writes a complete new version
directory, then an atomic pointer swap publishes it, so a crash mid-edit
never leaves a session with a mismatched layout/image pair. Long-running
work (generation, edits, inpainting) is job-based with polling; scoring
is synchronous. Inference runs on a bounded worker pool against
read-only weights; per-session mutations serialize on a session lock.
"""

from __future__ import annotations

import json
import os
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .forensics import DRSConfig, drs_score, model_velocity_fn
from .infer import IntegratorConfig, InpaintTask, Sampler
from .layout import (PALETTE, LayoutError, LayoutSpec, decode_box_map,
                     layout_from_json, layout_to_json)
from .pngio import png_b64, png_from_b64


class SessionCreate(BaseModel):
    prompt: list[int]
    style: int = 0
    seed: int | None = None


class LayoutBoxWire(BaseModel):
    glyph: int
    x: int
    y: int
    w: int
    h: int
    order: int


class LayoutWire(BaseModel):
    canvas: int
    boxes: list[LayoutBoxWire]


class InpaintRequest(BaseModel):
    image: str
    mask: str
    prompt: list[int]
    style: int = 0
    boxes: LayoutWire | None = None
    condition: str | None = None
    seed: int = 0


class DRSRequest(BaseModel):
    image: str
    prompt: list[int]
    style: int = 0
    boxes: LayoutWire | None = None
    seed: int = 0


class JobRegistry:
    def __init__(self):
        self._jobs: dict[str, dict] = {}
        self._lock = threading.Lock()

    def create(self) -> str:
        job_id = uuid.uuid4().hex
        with self._lock:
            self._jobs[job_id] = {"job_id": job_id, "state": "queued",
                                  "error": None, "result": None}
        return job_id

    def set_state(self, job_id, state, error=None, result=None):
        with self._lock:
            job = self._jobs[job_id]
            if job["state"] in ("done", "failed"):
                return
            job.update(state=state, error=error, result=result)

    def get(self, job_id):
        with self._lock:
            job = self._jobs.get(job_id)
            return dict(job) if job else None


class SessionStore:
    """One directory per session: meta.json + versioned artifact dirs
    published by an atomic CURRENT pointer swap."""

    def __init__(self, root):
        self.root = Path(root)
        (self.root / "sessions").mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def lock(self, session_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(session_id, threading.Lock())

    def _dir(self, session_id):
        return self.root / "sessions" / session_id

    def exists(self, session_id):
        return (self._dir(session_id) / "meta.json").exists()

    def create(self, session_id, meta: dict):
        d = self._dir(session_id)
        d.mkdir(parents=True, exist_ok=True)
        self._write_json(d / "meta.json", meta)

    def _write_json(self, path: Path, obj):
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(obj, indent=2))
        os.replace(tmp, path)

    def publish_version(self, session_id, images: dict, layout: LayoutSpec):
        """Write a complete version dir, then swap the pointer."""
        d = self._dir(session_id)
        meta = json.loads((d / "meta.json").read_text())
        version = meta.get("version", 0) + 1
        vdir = d / f"v{version}"
        vdir.mkdir(parents=True, exist_ok=True)
        from .pngio import save_png
        for name, arr in images.items():
            save_png(vdir / f"{name}.png", arr)
        self._write_json(vdir / "layout.json", layout_to_json(layout))
        meta["version"] = version
        meta["updated_at"] = time.time()
        self._write_json(d / "meta.json", meta)
        tmp = d / "CURRENT.tmp"
        tmp.write_text(str(version))
        os.replace(tmp, d / "CURRENT")

    def read(self, session_id):
        d = self._dir(session_id)
        meta = json.loads((d / "meta.json").read_text())
        current = d / "CURRENT"
        if not current.exists():
            return meta, None, None
        vdir = d / f"v{current.read_text().strip()}"
        from .pngio import load_png
        images = {name: load_png(vdir / f"{name}.png")
                  for name in ("target", "condition", "boxmap")}
        layout = layout_from_json(json.loads((vdir / "layout.json").read_text()))
        return meta, images, layout


def create_app(sampler: Sampler | None, store_dir, workers: int = 2,
               icfg: IntegratorConfig | None = None,
               drs_cfg: DRSConfig | None = None,
               ui_dir=None) -> FastAPI:
    app = FastAPI(title="glyphflow")
    store = SessionStore(store_dir)
    jobs = JobRegistry()
    executor = ThreadPoolExecutor(max_workers=max(1, workers))
    base_icfg = icfg or IntegratorConfig()
    base_drs = drs_cfg or DRSConfig()

    def need_sampler() -> Sampler:
        if sampler is None:
            raise HTTPException(status_code=503, detail="no checkpoint loaded")
        return sampler

    def validate_prompt(prompt: list[int], style: int):
        s = need_sampler()
        if not prompt:
            raise HTTPException(status_code=400,
                                detail={"field": "prompt", "message": "prompt is empty"})
        if len(prompt) + 1 > s.cfg.l_max:
            raise HTTPException(status_code=400, detail={
                "field": "prompt",
                "message": f"{len(prompt)} glyphs exceed the {s.cfg.l_max - 1} limit"})
        for i, g in enumerate(prompt):
            if not 0 <= g < s.atlas.n_glyphs:
                raise HTTPException(status_code=400, detail={
                    "field": f"prompt[{i}]", "message": f"unknown glyph id {g}"})
        if not 0 <= style < s.atlas.n_styles:
            raise HTTPException(status_code=400, detail={
                "field": "style", "message": f"unknown style id {style}"})

    def parse_layout_or_422(wire: LayoutWire, canvas: int) -> LayoutSpec:
        from .layout import parse_wire_layout
        s = need_sampler()
        try:
            layout = parse_wire_layout(json.loads(wire.model_dump_json()),
                                       s.atlas.n_glyphs - 1)
        except LayoutError as exc:
            raise HTTPException(status_code=422, detail={
                "box": exc.box_index, "message": str(exc)}) from exc
        if layout.canvas_size != canvas:
            raise HTTPException(status_code=422, detail={
                "box": None,
                "message": f"layout canvas {layout.canvas_size} != model canvas {canvas}"})
        return layout

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "checkpoint": sampler is not None}

    @app.post("/sessions", status_code=202)
    def create_session(req: SessionCreate):
        s = need_sampler()
        validate_prompt(req.prompt, req.style)
        seed = req.seed if req.seed is not None else int.from_bytes(os.urandom(4), "little")
        session_id = uuid.uuid4().hex
        store.create(session_id, {
            "session_id": session_id, "prompt": list(req.prompt),
            "style": req.style, "seed": seed, "version": 0,
            "created_at": time.time(), "updated_at": time.time(),
        })
        job_id = jobs.create()

        def work():
            jobs.set_state(job_id, "running")
            try:
                run_cfg = IntegratorConfig(
                    n_steps=base_icfg.n_steps, guidance_scale=base_icfg.guidance_scale,
                    seed=seed)
                res = s.generate_cascaded(req.style, req.prompt,
                                          s.bootstrap_condition(req.prompt, seed),
                                          run_cfg)
                with store.lock(session_id):
                    store.publish_version(session_id, {
                        "target": res.target, "condition": res.condition,
                        "boxmap": res.boxmap}, res.layout)
                jobs.set_state(job_id, "done",
                               result={"session_id": session_id,
                                       "decode_empty": res.decode_empty})
            except Exception as exc:  # surface, don't crash the worker
                jobs.set_state(job_id, "failed", error=str(exc))

        executor.submit(work)
        return {"session_id": session_id, "job_id": job_id}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        if not store.exists(session_id):
            raise HTTPException(status_code=404, detail="unknown session")
        meta, images, layout = store.read(session_id)
        body = dict(meta)
        if images is not None:
            body["images"] = {k: png_b64(v) for k, v in images.items()}
            body["layout"] = layout_to_json(layout)
        return body

    @app.put("/sessions/{session_id}/layout", status_code=202)
    def put_layout(session_id: str, wire: LayoutWire):
        s = need_sampler()
        if not store.exists(session_id):
            raise HTTPException(status_code=404, detail="unknown session")
        layout = parse_layout_or_422(wire, s.cfg.canvas_size)
        meta, _, _ = store.read(session_id)
        job_id = jobs.create()

        def work():
            jobs.set_state(job_id, "running")
            try:
                run_cfg = IntegratorConfig(
                    n_steps=base_icfg.n_steps, guidance_scale=base_icfg.guidance_scale,
                    seed=meta["seed"])
                res = s.edit_regenerate(meta["style"], layout, run_cfg)
                with store.lock(session_id):
                    store.publish_version(session_id, {
                        "target": res.target, "condition": res.condition,
                        "boxmap": res.boxmap}, res.layout)
                jobs.set_state(job_id, "done", result={"session_id": session_id})
            except Exception as exc:
                jobs.set_state(job_id, "failed", error=str(exc))

        executor.submit(work)
        return {"job_id": job_id}

    @app.post("/inpaint", status_code=202)
    def inpaint(req: InpaintRequest):
        s = need_sampler()
        validate_prompt(req.prompt, req.style)
        try:
            image = png_from_b64(req.image)
            mask_img = png_from_b64(req.mask)
        except Exception as exc:
            raise HTTPException(status_code=400,
                                detail=f"images must be base64 PNG: {exc}") from exc
        canvas = s.cfg.canvas_size
        if image.shape != (canvas, canvas):
            raise HTTPException(status_code=400,
                                detail=f"image is {image.shape}, model canvas is {canvas}")
        if mask_img.shape != (canvas, canvas):
            raise HTTPException(status_code=400,
                                detail=f"mask is {mask_img.shape}, model canvas is {canvas}")
        vals = np.unique(mask_img)
        if not np.all(np.isin(vals, (0, 1, 255))):
            raise HTTPException(status_code=422,
                                detail=f"mask values {vals.tolist()} are not binary")
        mask = (mask_img > 0).astype(np.uint8)
        boxmap = None
        condition = png_from_b64(req.condition) if req.condition else None
        if req.boxes is not None:
            layout = parse_layout_or_422(req.boxes, canvas)
            from .layout import render_box_map
            boxmap = render_box_map(layout, PALETTE)
            from .corpus import render_condition
            if condition is None:
                condition = render_condition(s.atlas, layout)
        task = InpaintTask(image=image, mask=mask, prompt_glyphs=tuple(req.prompt),
                           style_id=req.style, condition=condition, boxmap=boxmap)
        job_id = jobs.create()

        def work():
            jobs.set_state(job_id, "running")
            try:
                out = s.inpaint(task, IntegratorConfig(
                    n_steps=base_icfg.n_steps, guidance_scale=1.0, seed=req.seed))
                jobs.set_state(job_id, "done", result={
                    "image": png_b64(out["image"]), "boxmap": png_b64(out["boxmap"])})
            except Exception as exc:
                jobs.set_state(job_id, "failed", error=str(exc))

        executor.submit(work)
        return {"job_id": job_id}

    @app.post("/drs")
    def drs(req: DRSRequest):
        s = need_sampler()
        validate_prompt(req.prompt, req.style)
        try:
            image = png_from_b64(req.image)
        except Exception as exc:
            raise HTTPException(status_code=400,
                                detail=f"image must be base64 PNG: {exc}") from exc
        canvas = s.cfg.canvas_size
        if image.shape != (canvas, canvas):
            raise HTTPException(status_code=400,
                                detail=f"image is {image.shape}, model canvas is {canvas}")
        if req.boxes is not None:
            layout = parse_layout_or_422(req.boxes, canvas)
            boxes_note = "given"
        else:
            # no layout supplied: plan one, using the query page itself as
            # the structural reference for the planner
            run_cfg = IntegratorConfig(n_steps=base_icfg.n_steps,
                                       guidance_scale=1.0, seed=req.seed)
            field = s.plan_layout(req.style, req.prompt, image, run_cfg)
            from .pixels import field_to_rgb
            layout = decode_box_map(field_to_rgb(field), PALETTE, list(req.prompt))
            if len(layout.boxes) > len(req.prompt):
                layout = LayoutSpec(layout.canvas_size,
                                    layout.boxes[:len(req.prompt)])
            boxes_note = "predicted"
        from .pixels import gray_to_field
        vel = model_velocity_fn(s, req.style, [b.glyph_id for b in layout.boxes],
                                layout)
        cfg = DRSConfig(noise_levels=base_drs.noise_levels, weights=base_drs.weights,
                        trials=base_drs.trials, seed=req.seed)
        report = drs_score(gray_to_field(image, s.cfg.np_dtype), cfg, vel)
        body = report.to_json()
        body["boxes"] = boxes_note
        return body

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        job = jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail="unknown job")
        return job

    if ui_dir is not None:
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
