// Referral tradeoff chart. Series assembly is pure and copies the preview
// values verbatim; only the draw step touches a canvas.

import { ReportRow } from "./api.js";

export interface ChartSeries {
  taus: number[];
  referralRate: number[];
  accuracy: Array<number | null>;
  precision: Array<number | null>;
  recall: Array<number | null>;
  auroc: Array<number | null>;
}

export function assembleSeries(rows: ReportRow[]): ChartSeries {
  const sorted = [...rows].sort((a, b) => a.tau - b.tau);
  return {
    taus: sorted.map((r) => r.tau),
    referralRate: sorted.map((r) => r.referral_rate),
    accuracy: sorted.map((r) => r.accuracy),
    precision: sorted.map((r) => r.precision),
    recall: sorted.map((r) => r.recall),
    auroc: sorted.map((r) => r.auroc),
  };
}

const SERIES_COLORS: Array<[keyof ChartSeries, string]> = [
  ["referralRate", "#d62728"],
  ["accuracy", "#1f77b4"],
  ["precision", "#2ca02c"],
  ["recall", "#ff7f0e"],
  ["auroc", "#9467bd"],
];

export function drawChart(canvas: HTMLCanvasElement, series: ChartSeries): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const w = canvas.width;
  const h = canvas.height;
  const pad = 28;
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#888";
  ctx.strokeRect(pad, pad / 2, w - pad * 1.5, h - pad * 1.5);
  if (series.taus.length === 0) return;
  const tauMin = series.taus[0];
  const tauMax = series.taus[series.taus.length - 1];
  const span = tauMax - tauMin || 1;
  const px = (tau: number) => pad + ((tau - tauMin) / span) * (w - pad * 1.5);
  const py = (v: number) => pad / 2 + (1 - Math.min(1, Math.max(0, v))) * (h - pad * 1.5);
  for (const [key, color] of SERIES_COLORS) {
    if (key === "taus") continue;
    const values = series[key] as Array<number | null>;
    ctx.strokeStyle = color;
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    let started = false;
    for (let i = 0; i < values.length; i++) {
      const v = values[i];
      if (v === null) {
        started = false;
        continue;
      }
      if (started) {
        ctx.lineTo(px(series.taus[i]), py(v));
      } else {
        ctx.moveTo(px(series.taus[i]), py(v));
        started = true;
      }
    }
    ctx.stroke();
  }
  ctx.fillStyle = "#555";
  ctx.font = "10px sans-serif";
  ctx.fillText(tauMin.toFixed(2), pad, h - 4);
  ctx.fillText(tauMax.toFixed(2), w - pad, h - 4);
}
