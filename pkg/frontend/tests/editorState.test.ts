import { describe, expect, it } from 'vitest';

import {
  applyGesture, EditorState, Gesture, initialState, redo, undo,
} from '../src/editorState';
import { isValidLayout, layoutsEqual } from '../src/layoutModel';
import { LayoutWire } from '../src/types';

function seeded(seed: number) {
  // deterministic LCG so the property test is reproducible
  let s = seed >>> 0;
  return () => {
    s = (s * 1664525 + 1013904223) >>> 0;
    return s / 2 ** 32;
  };
}

function withBoxes(): EditorState {
  let state = initialState(64);
  state = applyGesture(state, { kind: 'insert-click', x: 4, y: 4, w: 12, h: 12, glyph: 3 });
  state = applyGesture(state, { kind: 'insert-click', x: 30, y: 30, w: 10, h: 10, glyph: 7 });
  return state;
}

describe('gestures', () => {
  it('drag moves the layout JSON by the delta', () => {
    let state = withBoxes();
    const before = state.layout.boxes[0].x;
    state = applyGesture(state, { kind: 'drag', index: 0, dx: 8, dy: 0 });
    expect(state.layout.boxes[0].x).toBe(before + 8);
  });

  it('out-of-canvas drags clamp instead of rejecting', () => {
    let state = withBoxes();
    state = applyGesture(state, { kind: 'drag', index: 0, dx: -500, dy: 500 });
    expect(state.layout.boxes[0].x).toBe(0);
    expect(state.layout.boxes[0].y).toBe(64 - state.layout.boxes[0].h);
    expect(isValidLayout(state.layout)).toBe(true);
  });

  it('resize below 4x4 clamps to 4x4', () => {
    let state = withBoxes();
    state = applyGesture(state, { kind: 'resize-handle', index: 1, w: 1, h: 2 });
    expect(state.layout.boxes[1].w).toBe(4);
    expect(state.layout.boxes[1].h).toBe(4);
  });

  it('delete renumbers the remaining boxes', () => {
    let state = withBoxes();
    state = applyGesture(state, { kind: 'delete-key', index: 0 });
    expect(state.layout.boxes.length).toBe(1);
    expect(state.layout.boxes[0].order).toBe(0);
    expect(state.layout.boxes[0].glyph).toBe(7);
  });

  it('glyph picker rewrites only the glyph', () => {
    let state = withBoxes();
    const geometry = { ...state.layout.boxes[1] };
    state = applyGesture(state, { kind: 'glyph-picker', index: 1, glyph: 21 });
    expect(state.layout.boxes[1].glyph).toBe(21);
    expect(state.layout.boxes[1].x).toBe(geometry.x);
  });
});

describe('undo/redo', () => {
  it('undo after delete restores the original layout exactly', () => {
    let state = withBoxes();
    const before = JSON.stringify(state.layout);
    state = applyGesture(state, { kind: 'delete-key', index: 0 });
    state = undo(state);
    expect(JSON.stringify(state.layout)).toBe(before);
  });

  it('redo replays the undone gesture', () => {
    let state = withBoxes();
    state = applyGesture(state, { kind: 'drag', index: 0, dx: 5, dy: 5 });
    const after = JSON.stringify(state.layout);
    state = undo(state);
    state = redo(state);
    expect(JSON.stringify(state.layout)).toBe(after);
  });

  it('is a pure function of the snapshot stack over random gestures', () => {
    const rand = seeded(99);
    let state = withBoxes();
    const snapshots: LayoutWire[] = [state.layout];
    const gestureCount = 120;
    for (let i = 0; i < gestureCount; i++) {
      const n = state.layout.boxes.length;
      const kinds: Gesture[] = [
        { kind: 'drag', index: Math.floor(rand() * (n || 1)),
          dx: Math.floor(rand() * 21) - 10, dy: Math.floor(rand() * 21) - 10 },
        { kind: 'resize-handle', index: Math.floor(rand() * (n || 1)),
          w: Math.floor(rand() * 30), h: Math.floor(rand() * 30) },
        { kind: 'delete-key', index: Math.floor(rand() * (n || 1)) },
        { kind: 'insert-click', x: Math.floor(rand() * 64), y: Math.floor(rand() * 64),
          w: 8 + Math.floor(rand() * 12), h: 8 + Math.floor(rand() * 12),
          glyph: Math.floor(rand() * 32) },
        { kind: 'glyph-picker', index: Math.floor(rand() * (n || 1)),
          glyph: Math.floor(rand() * 32) },
      ];
      const g = kinds[Math.floor(rand() * kinds.length)];
      const prev = state;
      state = applyGesture(state, g);
      expect(isValidLayout(state.layout), `gesture ${i}`).toBe(true);
      if (state !== prev) snapshots.push(state.layout);
    }
    // unwind everything: each undo must reproduce the snapshot trail
    let cursor = snapshots.length - 1;
    while (state.undoStack.length > 0) {
      state = undo(state);
      cursor -= 1;
      const wantIdx = Math.max(cursor, snapshots.length - 1 - 50); // UNDO_DEPTH
      expect(layoutsEqual(state.layout, snapshots[cursor])).toBe(true);
    }
  });
});
