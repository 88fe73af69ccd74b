// Layer compositing for the case viewer. Compositing is a pure function on
// tensors so it can be verified without a canvas; the DOM side just blits
// the composed buffer at an integer zoom with smoothing disabled.

import { Tensor, tensorAt } from "./tns.js";
import { heatColor, metricMax, formatValue } from "./colormap.js";

export type LayerName = "pred" | "gt" | "heatmap";

export interface ProbeResult {
  x: number;
  y: number;
  value: number;
  display: string;
  metric: string;
}

export interface Composite {
  width: number;
  height: number;
  rgba: Uint8ClampedArray;
}

const PRED_COLOR = [66, 135, 245];
const GT_COLOR = [52, 199, 89];

function imageDims(image: Tensor): [number, number] {
  if (image.dims.length === 3 && image.dims[0] === 1) {
    return [image.dims[1], image.dims[2]];
  }
  if (image.dims.length === 2) {
    return [image.dims[0], image.dims[1]];
  }
  throw new Error(`expected a [1,H,W] or [H,W] image, got dims ${JSON.stringify(image.dims)}`);
}

export class OverlayState {
  readonly height: number;
  readonly width: number;
  private image: Tensor;
  private predMask: Tensor | null = null;
  private gtMask: Tensor | null = null;
  private maps = new Map<string, Tensor>();
  private activeMetric: string | null = null;
  private visible = new Set<LayerName>(["pred", "heatmap"]);

  constructor(image: Tensor) {
    [this.height, this.width] = imageDims(image);
    this.image = image;
  }

  private checkPlane(name: string, t: Tensor): void {
    if (t.dims.length !== 2 || t.dims[0] !== this.height || t.dims[1] !== this.width) {
      throw new Error(
        `${name} dims ${JSON.stringify(t.dims)} do not match image ` +
          `${this.height}x${this.width}`,
      );
    }
  }

  setPredMask(t: Tensor): void {
    this.checkPlane("pred_mask", t);
    this.predMask = t;
  }

  setGtMask(t: Tensor): void {
    this.checkPlane("gt_mask", t);
    this.gtMask = t;
  }

  setMap(metric: string, t: Tensor): void {
    metricMax(metric); // validates the name
    this.checkPlane(`map_${metric}`, t);
    this.maps.set(metric, t);
    if (this.activeMetric === null) this.activeMetric = metric;
  }

  /* Only one uncertainty layer can be active; selecting a metric swaps it. */
  selectMetric(metric: string): void {
    if (!this.maps.has(metric)) {
      throw new Error(`no map loaded for metric ${JSON.stringify(metric)}`);
    }
    this.activeMetric = metric;
    this.visible.add("heatmap");
  }

  get metric(): string | null {
    return this.activeMetric;
  }

  layerVisible(name: LayerName): boolean {
    return this.visible.has(name);
  }

  toggleLayer(name: LayerName): boolean {
    if (this.visible.has(name)) {
      this.visible.delete(name);
    } else {
      this.visible.add(name);
    }
    return this.visible.has(name);
  }

  /* Raw metric value under the cursor, straight from the tensor. */
  probe(x: number, y: number): ProbeResult | null {
    if (this.activeMetric === null) return null;
    if (x < 0 || y < 0 || x >= this.width || y >= this.height) return null;
    const map = this.maps.get(this.activeMetric);
    if (!map) return null;
    const value = tensorAt(map, y, x);
    return {
      x,
      y,
      value,
      display: formatValue(value),
      metric: this.activeMetric,
    };
  }

  private imageAt(y: number, x: number): number {
    return this.image.dims.length === 3
      ? tensorAt(this.image, 0, y, x)
      : tensorAt(this.image, y, x);
  }

  composite(): Composite {
    const { width, height } = this;
    const rgba = new Uint8ClampedArray(width * height * 4);
    const heat =
      this.visible.has("heatmap") && this.activeMetric !== null
        ? this.maps.get(this.activeMetric) ?? null
        : null;
    const max = heat && this.activeMetric !== null ? metricMax(this.activeMetric) : 1;
    const pred = this.visible.has("pred") ? this.predMask : null;
    const gt = this.visible.has("gt") ? this.gtMask : null;
    for (let y = 0; y < height; y++) {
      for (let x = 0; x < width; x++) {
        const base = Math.round(255 * Math.min(1, Math.max(0, this.imageAt(y, x))));
        let r = base;
        let g = base;
        let b = base;
        if (pred && tensorAt(pred, y, x) > 0.5) {
          r = (r + PRED_COLOR[0]) >> 1;
          g = (g + PRED_COLOR[1]) >> 1;
          b = (b + PRED_COLOR[2]) >> 1;
        }
        if (gt && tensorAt(gt, y, x) > 0.5) {
          r = (r + GT_COLOR[0]) >> 1;
          g = (g + GT_COLOR[1]) >> 1;
          b = (b + GT_COLOR[2]) >> 1;
        }
        if (heat) {
          const [hr, hg, hb, ha] = heatColor(tensorAt(heat, y, x), max);
          const a = ha / 255;
          r = Math.round(r * (1 - a) + hr * a);
          g = Math.round(g * (1 - a) + hg * a);
          b = Math.round(b * (1 - a) + hb * a);
        }
        const off = (y * width + x) * 4;
        rgba[off] = r;
        rgba[off + 1] = g;
        rgba[off + 2] = b;
        rgba[off + 3] = 255;
      }
    }
    return { width, height, rgba };
  }
}

/* Blit a composite onto a canvas at an integer zoom, nearest neighbor. */
export function drawComposite(
  canvas: HTMLCanvasElement,
  comp: Composite,
  zoom: number,
): void {
  const scale = Math.max(1, Math.floor(zoom));
  canvas.width = comp.width * scale;
  canvas.height = comp.height * scale;
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const image = ctx.createImageData(comp.width, comp.height);
  image.data.set(comp.rgba);
  if (scale === 1) {
    ctx.putImageData(image, 0, 0);
    return;
  }
  // Draw 1:1 into a staging canvas, then scale without smoothing.
  const stage = document.createElement("canvas");
  stage.width = comp.width;
  stage.height = comp.height;
  const sctx = stage.getContext("2d");
  if (!sctx) return;
  sctx.putImageData(image, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(stage, 0, 0, canvas.width, canvas.height);
}

/* Canvas-space -> pixel-space for probe and brush hit testing. */
export function canvasToPixel(
  canvas: HTMLCanvasElement,
  clientX: number,
  clientY: number,
  width: number,
  height: number,
): { x: number; y: number } | null {
  const rect = canvas.getBoundingClientRect();
  const x = Math.floor(((clientX - rect.left) / rect.width) * width);
  const y = Math.floor(((clientY - rect.top) / rect.height) * height);
  if (x < 0 || y < 0 || x >= width || y >= height) return null;
  return { x, y };
}
