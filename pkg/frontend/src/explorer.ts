// Threshold exploration. Dragging the slider only ever issues GET /whatif
// previews, debounced and with stale requests aborted; nothing is written
// until the user explicitly applies, which is the single PUT /config call.

import { ApiClient, ThresholdConfigDto, WhatifResponse } from "./api.js";

export interface ExplorerOptions {
  debounceMs?: number;
  onUpdate?: (row: WhatifResponse) => void;
  onError?: (err: unknown) => void;
}

export class ThresholdExplorer {
  private api: ApiClient;
  private debounceMs: number;
  private onUpdate: (row: WhatifResponse) => void;
  private onError: (err: unknown) => void;
  private results = new Map<number, WhatifResponse>();
  private timer: ReturnType<typeof setTimeout> | null = null;
  private controller: AbortController | null = null;
  private inflight: Promise<void> = Promise.resolve();
  private generation = 0;
  private config: ThresholdConfigDto | null = null;
  tau = 0.5;

  constructor(api: ApiClient, opts: ExplorerOptions = {}) {
    this.api = api;
    this.debounceMs = opts.debounceMs ?? 150;
    this.onUpdate = opts.onUpdate ?? (() => {});
    this.onError = opts.onError ?? (() => {});
  }

  /* Seeds the slider from the service's active configuration. */
  async loadConfig(): Promise<ThresholdConfigDto> {
    this.config = await this.api.getConfig();
    this.tau = this.config.tau;
    return this.config;
  }

  get activeConfig(): ThresholdConfigDto | null {
    return this.config;
  }

  /* Called on every slider movement; coalesces into one preview request. */
  slide(tau: number): void {
    this.tau = tau;
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = setTimeout(() => {
      this.timer = null;
      this.fire(tau);
    }, this.debounceMs);
  }

  private fire(tau: number): void {
    if (this.controller) this.controller.abort();
    const controller = new AbortController();
    this.controller = controller;
    const gen = ++this.generation;
    this.inflight = this.inflight
      .catch(() => {})
      .then(async () => {
        try {
          const row = await this.api.whatif({ tau }, controller.signal);
          // A newer slide may have landed while this one was in flight.
          if (gen !== this.generation) return;
          this.results.set(tau, row);
          this.onUpdate(row);
        } catch (err) {
          if (gen !== this.generation) return;
          if (err instanceof Error && err.name === "AbortError") return;
          this.onError(err);
        }
      });
  }

  /* Test hook: resolves once the current preview request settles. */
  idle(): Promise<void> {
    return this.inflight.catch(() => {});
  }

  row(tau: number): WhatifResponse | undefined {
    return this.results.get(tau);
  }

  /* All previews gathered so far, ascending by threshold. */
  rows(): WhatifResponse[] {
    return [...this.results.values()].sort((a, b) => a.tau - b.tau);
  }

  /* The one mutating action: persist the current slider position. */
  async apply(): Promise<ThresholdConfigDto> {
    this.config = await this.api.putConfig({ tau: this.tau });
    this.results.clear();
    return this.config;
  }
}
