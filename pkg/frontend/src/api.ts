// Thin client for the editing service. Job polling starts at 500 ms and
// backs off exponentially to 4 s (CPU inference is seconds-scale).

import { DRSReport, JobView, LayoutWire, SessionView } from './types';

export const POLL_INITIAL_MS = 500;
export const POLL_MAX_MS = 4000;

export class ServiceError extends Error {
  constructor(public status: number, public detail: unknown) {
    super(`service error ${status}: ${JSON.stringify(detail)}`);
  }
}

async function asJson(res: Response): Promise<any> {
  const body = await res.json().catch(() => null);
  if (!res.ok) {
    throw new ServiceError(res.status, body ? body.detail ?? body : res.statusText);
  }
  return body;
}

export function nextPollDelay(current: number): number {
  return Math.min(current * 2, POLL_MAX_MS);
}

export interface Client {
  health(): Promise<{ status: string; checkpoint: boolean }>;
  createSession(prompt: number[], style: number, seed?: number):
    Promise<{ session_id: string; job_id: string }>;
  getSession(id: string): Promise<SessionView>;
  putLayout(id: string, layout: LayoutWire): Promise<{ job_id: string }>;
  getJob(id: string): Promise<JobView>;
  waitJob(id: string, timeoutMs?: number): Promise<JobView>;
  drs(image: string, prompt: number[], style: number,
      boxes?: LayoutWire): Promise<DRSReport>;
  inpaint(image: string, mask: string, prompt: number[], style: number,
          boxes?: LayoutWire): Promise<{ job_id: string }>;
}

export function makeClient(base: string, fetchFn: typeof fetch = fetch): Client {
  const url = (path: string) => new URL(path, base).toString();
  const post = (path: string, body: unknown) =>
    fetchFn(url(path), {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(body),
    }).then(asJson);

  const client: Client = {
    health: () => fetchFn(url('/healthz')).then(asJson),
    createSession: (prompt, style, seed) =>
      post('/sessions', seed === undefined ? { prompt, style } : { prompt, style, seed }),
    getSession: (id) => fetchFn(url(`/sessions/${id}`)).then(asJson),
    putLayout: (id, layout) =>
      fetchFn(url(`/sessions/${id}/layout`), {
        method: 'PUT',
        headers: { 'content-type': 'application/json' },
        body: JSON.stringify(layout),
      }).then(asJson),
    getJob: (id) => fetchFn(url(`/jobs/${id}`)).then(asJson),
    waitJob: async (id, timeoutMs = 120_000) => {
      const deadline = Date.now() + timeoutMs;
      let delay = POLL_INITIAL_MS;
      for (;;) {
        const job = await client.getJob(id);
        if (job.state === 'done' || job.state === 'failed') return job;
        if (Date.now() > deadline) throw new Error(`job ${id} timed out`);
        await new Promise((r) => setTimeout(r, delay));
        delay = nextPollDelay(delay);
      }
    },
    drs: (image, prompt, style, boxes) =>
      post('/drs', boxes ? { image, prompt, style, boxes } : { image, prompt, style }),
    inpaint: (image, mask, prompt, style, boxes) =>
      post('/inpaint', boxes ? { image, mask, prompt, style, boxes }
                             : { image, mask, prompt, style }),
  };
  return client;
}
