// Heatmap color scale with fixed per-metric bounds so the same uncertainty
// value always renders the same color, regardless of which case is open.

export const LN2 = Math.log(2);

// Upper bound of each per-pixel metric for binary outputs: variance-family
// metrics peak at 0.25, entropy-family metrics at ln 2 nats.
export const METRIC_MAX: Record<string, number> = {
  aleatoric: 0.25,
  epistemic: 0.25,
  combined: 0.25,
  entropy: LN2,
  "mutual-information": LN2,
};

export const METRICS = Object.keys(METRIC_MAX);

export function metricMax(metric: string): number {
  const max = METRIC_MAX[metric];
  if (max === undefined) throw new Error(`unknown metric ${JSON.stringify(metric)}`);
  return max;
}

// Dark blue -> magenta -> yellow ramp, anchored at fixed stops.
const STOPS: Array<[number, [number, number, number]]> = [
  [0.0, [13, 8, 135]],
  [0.35, [156, 23, 158]],
  [0.7, [237, 121, 83]],
  [1.0, [240, 249, 33]],
];

function lerp(a: number, b: number, t: number): number {
  return a + (b - a) * t;
}

/* Returns [r, g, b, alpha] with alpha scaled by intensity so low
   uncertainty stays see-through over the base image. */
export function heatColor(value: number, max: number): [number, number, number, number] {
  const v = Math.min(1, Math.max(0, max > 0 ? value / max : 0));
  let lo = STOPS[0];
  let hi = STOPS[STOPS.length - 1];
  for (let i = 0; i + 1 < STOPS.length; i++) {
    if (v >= STOPS[i][0] && v <= STOPS[i + 1][0]) {
      lo = STOPS[i];
      hi = STOPS[i + 1];
      break;
    }
  }
  const span = hi[0] - lo[0];
  const t = span > 0 ? (v - lo[0]) / span : 0;
  return [
    Math.round(lerp(lo[1][0], hi[1][0], t)),
    Math.round(lerp(lo[1][1], hi[1][1], t)),
    Math.round(lerp(lo[1][2], hi[1][2], t)),
    Math.round(40 + 200 * v),
  ];
}

/* Display rounding used everywhere a raw metric value is shown. */
export function formatValue(value: number): string {
  if (!Number.isFinite(value)) return String(value);
  if (value === 0) return "0.0000";
  return value.toPrecision(4);
}
