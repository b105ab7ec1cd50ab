// Layout rules mirrored from the service: a layout the editor accepts is
// exactly a layout the service accepts (shared fixture corpus keeps the
// two sides honest). Edits themselves clamp rather than reject.

import { BoxWire, LayoutWire } from './types';

export const MIN_BOX_EDGE = 4;
export const MAX_BOXES = 24;
export const MAX_GLYPH_ID = 31;

export interface ValidationError {
  box: number | null;
  message: string;
}

export function validateLayout(layout: LayoutWire): ValidationError | null {
  if (!Number.isInteger(layout.canvas) || layout.canvas <= 0) {
    return { box: null, message: `bad canvas ${layout.canvas}` };
  }
  if (layout.boxes.length > MAX_BOXES) {
    return { box: null, message: `${layout.boxes.length} boxes exceed ${MAX_BOXES}` };
  }
  for (let i = 0; i < layout.boxes.length; i++) {
    const b = layout.boxes[i];
    for (const field of ['glyph', 'x', 'y', 'w', 'h', 'order'] as const) {
      if (!Number.isInteger(b[field])) {
        return { box: i, message: `box ${i}: field ${field} is not an integer` };
      }
    }
    if (b.order !== i) {
      return { box: i, message: `box ${i} has order ${b.order}` };
    }
    if (b.glyph < 0 || b.glyph > MAX_GLYPH_ID) {
      return { box: i, message: `box ${i}: glyph ${b.glyph} outside the atlas` };
    }
    if (b.w < MIN_BOX_EDGE || b.h < MIN_BOX_EDGE) {
      return { box: i, message: `box ${i} is ${b.w}x${b.h}; minimum edge is ${MIN_BOX_EDGE}` };
    }
    if (b.x < 0 || b.y < 0 || b.x + b.w > layout.canvas || b.y + b.h > layout.canvas) {
      return { box: i, message: `box ${i} exceeds the canvas` };
    }
  }
  return null;
}

export function isValidLayout(layout: LayoutWire): boolean {
  return validateLayout(layout) === null;
}

/** Clamp a box into the canvas at minimum size (the editor's gesture
 * contract: invalid drags clamp, they never reject). */
export function clampBox(box: BoxWire, canvas: number): BoxWire {
  const w = Math.min(Math.max(box.w, MIN_BOX_EDGE), canvas);
  const h = Math.min(Math.max(box.h, MIN_BOX_EDGE), canvas);
  const x = Math.min(Math.max(box.x, 0), canvas - w);
  const y = Math.min(Math.max(box.y, 0), canvas - h);
  return { ...box, x, y, w, h };
}

export function renumber(boxes: BoxWire[]): BoxWire[] {
  return boxes.map((b, i) => ({ ...b, order: i }));
}

export function cloneLayout(layout: LayoutWire): LayoutWire {
  return { canvas: layout.canvas, boxes: layout.boxes.map((b) => ({ ...b })) };
}

export function layoutsEqual(a: LayoutWire, b: LayoutWire): boolean {
  if (a.canvas !== b.canvas || a.boxes.length !== b.boxes.length) return false;
  return a.boxes.every((box, i) => {
    const other = b.boxes[i];
    return box.glyph === other.glyph && box.x === other.x && box.y === other.y
      && box.w === other.w && box.h === other.h && box.order === other.order;
  });
}

// The service paints box-map colors from a deterministic palette (two
// saturated hue rings filtered for pairwise contrast); the editor draws
// its overlays with the same construction so they match the model's
// box-map exactly.

function hsvToRgb(h: number, s: number, v: number): [number, number, number] {
  const i = Math.floor(h * 6);
  const f = h * 6 - i;
  const p = v * (1 - s);
  const q = v * (1 - f * s);
  const t = v * (1 - (1 - f) * s);
  const pick = [
    [v, t, p], [q, v, p], [p, v, t], [p, q, v], [t, p, v], [v, p, q],
  ][i % 6];
  return [Math.round(pick[0] * 255), Math.round(pick[1] * 255), Math.round(pick[2] * 255)];
}

export function buildPalette(): Array<[number, number, number]> {
  const candidates: Array<[number, number, number]> = [];
  for (const [value, phase] of [[0.95, 0.0], [0.55, 0.5], [0.75, 0.25]] as const) {
    for (let i = 0; i < 12; i++) {
      const hue = ((i + phase) / 12) % 1.0;
      candidates.push(hsvToRgb(hue, 0.9, value));
    }
  }
  const chosen: Array<[number, number, number]> = [];
  for (const cand of candidates) {
    if (255 - Math.min(...cand) < 85) continue;
    const contrasts = chosen.every((prev) =>
      Math.max(...cand.map((c, k) => Math.abs(c - prev[k]))) >= 48);
    if (contrasts) chosen.push(cand);
    if (chosen.length === MAX_BOXES) break;
  }
  return chosen;
}

export const PALETTE = buildPalette();

export function paletteCss(index: number): string {
  const [r, g, b] = PALETTE[index % PALETTE.length];
  return `rgb(${r}, ${g}, ${b})`;
}
