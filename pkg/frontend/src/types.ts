export interface BoxWire {
  glyph: number;
  x: number;
  y: number;
  w: number;
  h: number;
  order: number;
}

export interface LayoutWire {
  canvas: number;
  boxes: BoxWire[];
}

export interface SessionImages {
  target: string;     // base64 PNG
  condition: string;
  boxmap: string;
}

export interface SessionView {
  session_id: string;
  prompt: number[];
  style: number;
  seed: number;
  version: number;
  layout?: LayoutWire;
  images?: SessionImages;
}

export interface JobView {
  job_id: string;
  state: 'queued' | 'running' | 'done' | 'failed';
  error: string | null;
  result: Record<string, unknown> | null;
}

export interface DRSLevel {
  t: number;
  mean_error: number;
  trials: number[];
}

export interface DRSReport {
  score: number;
  levels: DRSLevel[];
  boxes?: 'given' | 'predicted';
}
