// Per-level score curve as pure geometry; the DOM layer just draws the
// polyline it gets back.

import { DRSReport } from './types';

export interface CurvePoint {
  t: number;
  error: number;
  px: number;   // normalized [0,1] plot coordinates
  py: number;
}

export interface CurveView {
  score: number;
  points: CurvePoint[];
  maxError: number;
}

export function curveView(report: DRSReport): CurveView {
  const maxError = Math.max(...report.levels.map((l) => l.mean_error), 1e-12);
  const points = report.levels.map((l) => ({
    t: l.t,
    error: l.mean_error,
    px: l.t,
    py: 1 - l.mean_error / maxError,
  }));
  return { score: report.score, points, maxError };
}

export function polylinePath(view: CurveView, width: number, height: number): string {
  return view.points
    .map((p, i) => `${i === 0 ? 'M' : 'L'}${(p.px * width).toFixed(1)},`
      + `${(p.py * height).toFixed(1)}`)
    .join(' ');
}

export function formatScore(view: CurveView): string {
  return view.score.toFixed(4);
}
