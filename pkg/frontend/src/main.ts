// Browser entry point: canvas box editor over the editing service.
// Drag to move, drag the corner handle to resize, Delete removes, double
// click inserts, the picker re-glyphs; Regenerate submits the layout and
// polls the job.

import { makeClient, ServiceError } from './api';
import { curveView, formatScore, polylinePath } from './drsPanel';
import {
  EditorState, applyGesture, applyRegenerated, initialState, loadSession,
  redo, undo,
} from './editorState';
import { paletteCss, validateLayout } from './layoutModel';
import { LayoutWire } from './types';

const SCALE = 6;   // screen pixels per model pixel
const HANDLE = 10;

const client = makeClient(window.location.origin);
let state: EditorState = initialState(64);
let dragging: { index: number; lastX: number; lastY: number; resize: boolean } | null = null;

const $ = <T extends HTMLElement>(id: string) => document.getElementById(id) as T;

function banner(message: string) {
  const el = $('banner');
  el.textContent = message;
  el.style.display = message ? 'block' : 'none';
}

function setBusy(busy: boolean) {
  ($('regenerate') as HTMLButtonElement).disabled = busy;
  ($('create') as HTMLButtonElement).disabled = busy;
}

function drawImage(canvasId: string, b64: string | null) {
  const canvas = $(canvasId) as unknown as HTMLCanvasElement;
  const ctx = canvas.getContext('2d')!;
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (!b64) return;
  const img = new Image();
  img.onload = () => ctx.drawImage(img, 0, 0, canvas.width, canvas.height);
  img.src = `data:image/png;base64,${b64}`;
}

function render() {
  const overlay = $('editor') as unknown as HTMLCanvasElement;
  const ctx = overlay.getContext('2d')!;
  ctx.clearRect(0, 0, overlay.width, overlay.height);
  state.layout.boxes.forEach((b, i) => {
    ctx.strokeStyle = paletteCss(i);
    ctx.lineWidth = i === state.selection ? 3 : 1.5;
    ctx.strokeRect(b.x * SCALE, b.y * SCALE, b.w * SCALE, b.h * SCALE);
    ctx.fillStyle = paletteCss(i);
    ctx.fillRect((b.x + b.w) * SCALE - HANDLE / 2, (b.y + b.h) * SCALE - HANDLE / 2,
                 HANDLE, HANDLE);
    ctx.font = '12px monospace';
    ctx.fillText(`g${b.glyph}`, b.x * SCALE + 2, b.y * SCALE + 12);
  });
  drawImage('target', state.images ? state.images.target : null);
  drawImage('previous', state.previousTarget);
  const err = validateLayout(state.layout);
  $('status').textContent = err
    ? `invalid: ${err.message}`
    : `${state.layout.boxes.length} boxes, session ${state.sessionId ?? '—'}`;
}

function hitTest(mx: number, my: number): { index: number; resize: boolean } | null {
  for (let i = state.layout.boxes.length - 1; i >= 0; i--) {
    const b = state.layout.boxes[i];
    const hx = (b.x + b.w) * SCALE;
    const hy = (b.y + b.h) * SCALE;
    if (Math.abs(mx - hx) <= HANDLE && Math.abs(my - hy) <= HANDLE) {
      return { index: i, resize: true };
    }
    if (mx >= b.x * SCALE && mx <= (b.x + b.w) * SCALE
        && my >= b.y * SCALE && my <= (b.y + b.h) * SCALE) {
      return { index: i, resize: false };
    }
  }
  return null;
}

async function refreshSession(sessionId: string) {
  const view = await client.getSession(sessionId);
  if (view.layout && view.images) {
    state = state.sessionId === sessionId
      ? applyRegenerated(state, view.layout, view.images)
      : loadSession(state, sessionId, view.layout, view.images);
    state = { ...state, sessionId };
  }
  render();
}

async function createSession() {
  banner('');
  setBusy(true);
  try {
    const prompt = ($('prompt') as HTMLInputElement).value
      .split(/[\s,]+/).filter(Boolean).map(Number);
    const style = Number(($('style') as HTMLInputElement).value) || 0;
    const seedText = ($('seed') as HTMLInputElement).value;
    const seed = seedText ? Number(seedText) : undefined;
    const res = await client.createSession(prompt, style, seed);
    const job = await client.waitJob(res.job_id);
    if (job.state === 'failed') throw new Error(job.error ?? 'generation failed');
    await refreshSession(res.session_id);
  } catch (err) {
    banner(err instanceof ServiceError ? err.message : String(err));
  } finally {
    setBusy(false);
  }
}

async function regenerate() {
  if (!state.sessionId) return;
  const problem = validateLayout(state.layout);
  if (problem) {
    banner(`layout invalid: ${problem.message}`);
    return;
  }
  banner('');
  setBusy(true);
  try {
    const res = await client.putLayout(state.sessionId, state.layout);
    const job = await client.waitJob(res.job_id);
    if (job.state === 'failed') throw new Error(job.error ?? 'regeneration failed');
    await refreshSession(state.sessionId);
  } catch (err) {
    banner(err instanceof ServiceError ? err.message : String(err));
  } finally {
    setBusy(false);
  }
}

async function scoreCurrent() {
  if (!state.images) return;
  banner('');
  try {
    const report = await client.drs(state.images.target,
                                    state.layout.boxes.map((b) => b.glyph),
                                    Number(($('style') as HTMLInputElement).value) || 0,
                                    state.layout);
    const view = curveView(report);
    $('score').textContent = `score ${formatScore(view)} (${report.boxes})`;
    const svgPath = polylinePath(view, 360, 120);
    $('curve').innerHTML =
      `<svg width="360" height="120"><path d="${svgPath}" fill="none" `
      + `stroke="#333" stroke-width="2"/></svg>`;
  } catch (err) {
    banner(err instanceof ServiceError ? err.message : String(err));
  }
}

function wireEvents() {
  const overlay = $('editor') as unknown as HTMLCanvasElement;
  overlay.addEventListener('mousedown', (ev) => {
    const hit = hitTest(ev.offsetX, ev.offsetY);
    state = { ...state, selection: hit ? hit.index : null };
    if (hit) dragging = { index: hit.index, lastX: ev.offsetX, lastY: ev.offsetY,
                          resize: hit.resize };
    render();
  });
  overlay.addEventListener('mousemove', (ev) => {
    if (!dragging) return;
    const dx = Math.round((ev.offsetX - dragging.lastX) / SCALE);
    const dy = Math.round((ev.offsetY - dragging.lastY) / SCALE);
    if (dx === 0 && dy === 0) return;
    const box = state.layout.boxes[dragging.index];
    state = dragging.resize
      ? applyGesture(state, { kind: 'resize-handle', index: dragging.index,
                              w: box.w + dx, h: box.h + dy })
      : applyGesture(state, { kind: 'drag', index: dragging.index, dx, dy });
    dragging.lastX += dx * SCALE;
    dragging.lastY += dy * SCALE;
    render();
  });
  window.addEventListener('mouseup', () => { dragging = null; });
  overlay.addEventListener('dblclick', (ev) => {
    const glyph = Number(($('glyph') as HTMLInputElement).value) || 0;
    state = applyGesture(state, {
      kind: 'insert-click', glyph,
      x: Math.round(ev.offsetX / SCALE) - 8, y: Math.round(ev.offsetY / SCALE) - 8,
      w: 16, h: 16,
    });
    render();
  });
  window.addEventListener('keydown', (ev) => {
    if (ev.key === 'Delete' && state.selection !== null) {
      state = applyGesture(state, { kind: 'delete-key', index: state.selection });
      state = { ...state, selection: null };
      render();
    }
  });
  $('create').addEventListener('click', createSession);
  $('regenerate').addEventListener('click', regenerate);
  $('undo').addEventListener('click', () => { state = undo(state); render(); });
  $('redo').addEventListener('click', () => { state = redo(state); render(); });
  $('drs').addEventListener('click', scoreCurrent);
  $('setglyph').addEventListener('click', () => {
    if (state.selection !== null) {
      const glyph = Number(($('glyph') as HTMLInputElement).value) || 0;
      state = applyGesture(state, { kind: 'glyph-picker', index: state.selection,
                                    glyph });
      render();
    }
  });
}

wireEvents();
render();
client.health().then((h) => {
  if (!h.checkpoint) banner('service has no checkpoint loaded');
}).catch(() => banner('service unreachable'));
