// Mask correction editor: paints single pixels on a copy of the predicted
// mask and keeps an undo stack of whole strokes.

import { Tensor } from "./tns.js";

interface Dab {
  x: number;
  y: number;
  prev: number;
}

export class BrushEditor {
  readonly height: number;
  readonly width: number;
  private mask: Float32Array;
  private strokes: Dab[][] = [];
  private current: Dab[] | null = null;

  constructor(seed: Tensor) {
    if (seed.dims.length !== 2) {
      throw new Error(`mask must be rank 2, got dims ${JSON.stringify(seed.dims)}`);
    }
    [this.height, this.width] = seed.dims;
    // binarize defensively; stored masks are exact 0/1 floats
    this.mask = Float32Array.from(seed.data, (v) => (v > 0.5 ? 1 : 0));
  }

  beginStroke(): void {
    this.current = [];
  }

  paint(x: number, y: number, value: 0 | 1): void {
    if (x < 0 || y < 0 || x >= this.width || y >= this.height) return;
    const off = y * this.width + x;
    if (this.mask[off] === value) return;
    const dab = { x, y, prev: this.mask[off] };
    this.mask[off] = value;
    if (this.current) {
      this.current.push(dab);
    } else {
      this.strokes.push([dab]);
    }
  }

  endStroke(): void {
    if (this.current && this.current.length > 0) {
      this.strokes.push(this.current);
    }
    this.current = null;
  }

  /* Reverts the most recent stroke; returns false when nothing to undo. */
  undo(): boolean {
    const stroke = this.strokes.pop();
    if (!stroke) return false;
    for (let i = stroke.length - 1; i >= 0; i--) {
      const dab = stroke[i];
      this.mask[dab.y * this.width + dab.x] = dab.prev;
    }
    return true;
  }

  get undoDepth(): number {
    return this.strokes.length;
  }

  at(x: number, y: number): number {
    return this.mask[y * this.width + x];
  }

  /* Count of pixels that differ from another mask of the same shape. */
  diffCount(other: Tensor): number {
    let n = 0;
    for (let i = 0; i < this.mask.length; i++) {
      const want = other.data[i] > 0.5 ? 1 : 0;
      if (this.mask[i] !== want) n++;
    }
    return n;
  }

  toTensor(): Tensor {
    return { dims: [this.height, this.width], data: Float32Array.from(this.mask) };
  }
}
