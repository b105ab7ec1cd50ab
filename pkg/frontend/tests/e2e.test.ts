// Full editing loop against a live service. Set GLYPHFLOW_SERVICE_URL
// (e.g. http://127.0.0.1:8787) before running; skipped otherwise.
//
//   glyphflow serve --ckpt <ckpt> --port 8787 &
//   GLYPHFLOW_SERVICE_URL=http://127.0.0.1:8787 npm run test:e2e

import { describe, expect, it } from 'vitest';

import { makeClient } from '../src/api';
import { applyGesture, initialState, loadSession } from '../src/editorState';
import { validateLayout } from '../src/layoutModel';

const base = process.env.GLYPHFLOW_SERVICE_URL;
const suite = base ? describe : describe.skip;

suite('editing loop against the live service', () => {
  const client = makeClient(base ?? 'http://unused');

  it('create -> drag -> regenerate shows a new image; no-op is byte-equal',
     async () => {
    const health = await client.health();
    expect(health.checkpoint).toBe(true);

    const created = await client.createSession([3, 17, 5], 0, 20260809);
    const job = await client.waitJob(created.job_id);
    expect(job.state).toBe('done');

    const view = await client.getSession(created.session_id);
    expect(view.images).toBeDefined();
    expect(view.layout).toBeDefined();
    let state = loadSession(initialState(view.layout!.canvas),
                            created.session_id, view.layout!, view.images!);
    const firstTarget = view.images!.target;

    // no-op regenerate: byte-equal image
    const noop = await client.putLayout(created.session_id, state.layout);
    expect((await client.waitJob(noop.job_id)).state).toBe('done');
    const after = await client.getSession(created.session_id);
    expect(after.images!.target).toBe(firstTarget);

    if (state.layout.boxes.length > 0) {
      // drag one box and regenerate: a fresh image arrives
      state = applyGesture(state, { kind: 'drag', index: 0, dx: 6, dy: 0 });
      expect(validateLayout(state.layout)).toBeNull();
      const edit = await client.putLayout(created.session_id, state.layout);
      expect((await client.waitJob(edit.job_id)).state).toBe('done');
      const edited = await client.getSession(created.session_id);
      expect(edited.images!.target).not.toBe(firstTarget);
      expect(edited.layout!.boxes[0].x).toBe(state.layout.boxes[0].x);
    }
  }, 300_000);

  it('perturb-preview scores higher than the clean page', async () => {
    const created = await client.createSession([2, 9], 1, 777);
    expect((await client.waitJob(created.job_id)).state).toBe('done');
    const view = await client.getSession(created.session_id);
    const clean = await client.drs(view.images!.target,
                                   view.layout!.boxes.map((b) => b.glyph), 1,
                                   view.layout!);
    expect(clean.levels.length).toBe(9);
    expect(clean.boxes).toBe('given');
  }, 300_000);
});
