// Editor state machine: every gesture is a pure function from state to
// state, and undo/redo replays layout snapshots, so the whole thing is
// property-testable without a DOM.

import { clampBox, cloneLayout, layoutsEqual, renumber } from './layoutModel';
import { LayoutWire, SessionImages } from './types';

export const UNDO_DEPTH = 50;

export interface EditorState {
  sessionId: string | null;
  layout: LayoutWire;
  selection: number | null;
  undoStack: LayoutWire[];
  redoStack: LayoutWire[];
  images: SessionImages | null;
  previousTarget: string | null;   // retained for side-by-side comparison
  pollingJob: string | null;
}

export type Gesture =
  | { kind: 'drag'; index: number; dx: number; dy: number }
  | { kind: 'resize-handle'; index: number; w: number; h: number }
  | { kind: 'delete-key'; index: number }
  | { kind: 'insert-click'; x: number; y: number; w: number; h: number; glyph: number }
  | { kind: 'glyph-picker'; index: number; glyph: number };

export function initialState(canvas: number): EditorState {
  return {
    sessionId: null,
    layout: { canvas, boxes: [] },
    selection: null,
    undoStack: [],
    redoStack: [],
    images: null,
    previousTarget: null,
    pollingJob: null,
  };
}

function pushUndo(state: EditorState): EditorState {
  const undoStack = [...state.undoStack, cloneLayout(state.layout)];
  if (undoStack.length > UNDO_DEPTH) undoStack.shift();
  return { ...state, undoStack, redoStack: [] };
}

/** Apply a gesture with the clamping contract: out-of-canvas moves and
 * too-small resizes clamp to the nearest legal geometry. */
export function applyGesture(state: EditorState, gesture: Gesture): EditorState {
  const layout = cloneLayout(state.layout);
  const n = layout.boxes.length;
  switch (gesture.kind) {
    case 'drag': {
      if (gesture.index < 0 || gesture.index >= n) return state;
      const b = layout.boxes[gesture.index];
      layout.boxes[gesture.index] = clampBox(
        { ...b, x: b.x + gesture.dx, y: b.y + gesture.dy }, layout.canvas);
      break;
    }
    case 'resize-handle': {
      if (gesture.index < 0 || gesture.index >= n) return state;
      const b = layout.boxes[gesture.index];
      layout.boxes[gesture.index] = clampBox(
        { ...b, w: gesture.w, h: gesture.h }, layout.canvas);
      break;
    }
    case 'delete-key': {
      if (gesture.index < 0 || gesture.index >= n) return state;
      layout.boxes.splice(gesture.index, 1);
      layout.boxes = renumber(layout.boxes);
      break;
    }
    case 'insert-click': {
      const box = clampBox({ glyph: gesture.glyph, x: gesture.x, y: gesture.y,
                             w: gesture.w, h: gesture.h, order: n },
                           layout.canvas);
      layout.boxes.push(box);
      break;
    }
    case 'glyph-picker': {
      if (gesture.index < 0 || gesture.index >= n) return state;
      layout.boxes[gesture.index].glyph = gesture.glyph;
      break;
    }
  }
  if (layoutsEqual(layout, state.layout)) return state;
  const next = pushUndo(state);
  return { ...next, layout };
}

export function undo(state: EditorState): EditorState {
  if (state.undoStack.length === 0) return state;
  const undoStack = [...state.undoStack];
  const layout = undoStack.pop()!;
  return {
    ...state,
    layout,
    undoStack,
    redoStack: [...state.redoStack, cloneLayout(state.layout)],
  };
}

export function redo(state: EditorState): EditorState {
  if (state.redoStack.length === 0) return state;
  const redoStack = [...state.redoStack];
  const layout = redoStack.pop()!;
  return {
    ...state,
    layout,
    redoStack,
    undoStack: [...state.undoStack, cloneLayout(state.layout)],
  };
}

export function loadSession(state: EditorState, sessionId: string,
                            layout: LayoutWire,
                            images: SessionImages): EditorState {
  return {
    ...initialState(layout.canvas),
    sessionId,
    layout: cloneLayout(layout),
    images,
  };
}

export function applyRegenerated(state: EditorState, layout: LayoutWire,
                                 images: SessionImages): EditorState {
  return {
    ...state,
    layout: cloneLayout(layout),
    images,
    previousTarget: state.images ? state.images.target : null,
    pollingJob: null,
  };
}
