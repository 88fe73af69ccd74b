// Application wiring: queue on the left, case viewer center, threshold
// explorer at the bottom. All state lives in the models; this file only
// moves data between them and the DOM.

import { ApiClient, ApiError, CaseSummary } from "./api.js";
import { Tensor } from "./tns.js";
import { METRICS, formatValue } from "./colormap.js";
import { OverlayState, drawComposite, canvasToPixel, LayerName } from "./overlay.js";
import { QueueModel, renderQueue } from "./queue.js";
import { BrushEditor } from "./brush.js";
import { ThresholdExplorer } from "./explorer.js";
import { assembleSeries, drawChart } from "./chart.js";

const ZOOM = 4;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id} in page layout`);
  return node as T;
}

function apiBase(): string {
  const override = new URLSearchParams(window.location.search).get("api");
  if (override) return override;
  if (window.location.protocol.startsWith("http")) return window.location.origin;
  return "http://localhost:8000";
}

class App {
  api = new ApiClient(apiBase());
  queue = new QueueModel(this.api);
  explorer: ThresholdExplorer;
  overlay: OverlayState | null = null;
  brush: BrushEditor | null = null;
  current: CaseSummary | null = null;
  painting = false;
  paintValue: 0 | 1 = 1;

  viewer = el<HTMLCanvasElement>("viewer");
  chartCanvas = el<HTMLCanvasElement>("chart");
  queueBox = el<HTMLElement>("queue");
  probeBox = el<HTMLElement>("probe");
  caseBox = el<HTMLElement>("case-info");
  message = el<HTMLElement>("message");
  metricSelect = el<HTMLSelectElement>("metric");
  slider = el<HTMLInputElement>("tau-slider");
  sliderValue = el<HTMLElement>("tau-value");
  whatifBox = el<HTMLElement>("whatif");

  constructor() {
    this.explorer = new ThresholdExplorer(this.api, {
      onUpdate: () => this.renderExplorer(),
      onError: (err) => this.showError(err),
    });
  }

  showError(err: unknown): void {
    const text =
      err instanceof ApiError && err.status === 409
        ? `${err.message} (state changed; refreshing)`
        : err instanceof Error
          ? err.message
          : String(err);
    this.message.textContent = text;
    this.message.classList.add("error");
    if (err instanceof ApiError && err.status === 409) {
      void this.refreshQueue();
      if (this.current) void this.openCase(this.current.case_id);
    }
  }

  note(text: string): void {
    this.message.textContent = text;
    this.message.classList.remove("error");
  }

  async refreshQueue(): Promise<void> {
    const rows = await this.queue.refresh();
    renderQueue(this.queueBox, rows, this.queue.selectedId, (id) => {
      void this.openCase(id);
    });
  }

  async fetchMask(name: string): Promise<Tensor | null> {
    if (!this.current || !this.current.artifacts.includes(name)) return null;
    return this.api.tensor(this.current.case_id, name);
  }

  async openCase(caseId: string): Promise<void> {
    try {
      this.current = await this.api.getCase(caseId);
      try {
        this.queue.select(caseId);
      } catch {
        // case may have left the queue; still viewable
      }
      const image = await this.api.tensor(caseId, "image");
      this.overlay = new OverlayState(image);
      const pred = await this.fetchMask("pred_mask");
      if (pred) this.overlay.setPredMask(pred);
      const gt = await this.fetchMask("gt_mask");
      if (gt) this.overlay.setGtMask(gt);
      this.brush = pred ? new BrushEditor(pred) : null;
      await this.loadMetric(this.metricSelect.value);
      this.renderCaseInfo();
      await this.refreshQueue();
      this.note(`opened ${caseId}`);
    } catch (err) {
      this.showError(err);
    }
  }

  async loadMetric(metric: string): Promise<void> {
    if (!this.overlay || !this.current) return;
    const name = `map_${metric}`;
    if (this.current.artifacts.includes(name)) {
      this.overlay.setMap(metric, await this.api.tensor(this.current.case_id, name));
      this.overlay.selectMetric(metric);
    }
    this.redraw();
  }

  redraw(): void {
    if (!this.overlay) return;
    drawComposite(this.viewer, this.overlay.composite(), ZOOM);
  }

  renderCaseInfo(): void {
    if (!this.current) {
      this.caseBox.textContent = "No case open.";
      return;
    }
    const c = this.current;
    const score =
      c.normalized_score === null ? "-" : formatValue(c.normalized_score);
    const verdict = c.verdict ? ` verdict=${c.verdict["verdict"]}` : "";
    this.caseBox.textContent =
      `${c.case_id}  status=${c.status}  score=${score}` +
      `  gt=${c.has_gt ? "yes" : "no"}${verdict}`;
  }

  renderExplorer(): void {
    drawChart(this.chartCanvas, assembleSeries(this.explorer.rows()));
    const row = this.explorer.row(this.explorer.tau);
    if (row) {
      const acc = row.accuracy === null ? "-" : formatValue(row.accuracy);
      this.whatifBox.textContent =
        `tau=${row.tau}  referred=${row.referred}/${row.referred + row.retained}` +
        `  rate=${formatValue(row.referral_rate)}  accuracy=${acc}`;
    }
  }

  async submitVerdict(verdict: "accept" | "override"): Promise<void> {
    if (!this.current) return;
    try {
      let mask: Tensor | undefined;
      if (verdict === "override") {
        if (!this.brush) {
          this.note("no predicted mask to correct");
          return;
        }
        mask = this.brush.toTensor();
      }
      const result = await this.api.review(this.current.case_id, verdict, { mask });
      this.current = result;
      this.renderCaseInfo();
      await this.refreshQueue();
      this.note(
        result.applied
          ? `${verdict} recorded for ${result.case_id}`
          : `verdict for ${result.case_id} was already recorded`,
      );
    } catch (err) {
      this.showError(err);
    }
  }

  bindViewer(): void {
    this.viewer.addEventListener("mousemove", (ev) => {
      if (!this.overlay) return;
      const pt = canvasToPixel(this.viewer, ev.clientX, ev.clientY,
                               this.overlay.width, this.overlay.height);
      if (!pt) {
        this.probeBox.textContent = "";
        return;
      }
      const hit = this.overlay.probe(pt.x, pt.y);
      this.probeBox.textContent = hit
        ? `(${hit.x}, ${hit.y}) ${hit.metric} = ${hit.display}`
        : `(${pt.x}, ${pt.y})`;
      if (this.painting && this.brush) {
        this.brush.paint(pt.x, pt.y, this.paintValue);
      }
    });
    this.viewer.addEventListener("mousedown", (ev) => {
      if (!this.brush || !this.overlay) return;
      this.painting = true;
      this.paintValue = ev.shiftKey ? 0 : 1;
      this.brush.beginStroke();
      const pt = canvasToPixel(this.viewer, ev.clientX, ev.clientY,
                               this.overlay.width, this.overlay.height);
      if (pt) this.brush.paint(pt.x, pt.y, this.paintValue);
    });
    window.addEventListener("mouseup", () => {
      if (this.painting && this.brush) {
        this.brush.endStroke();
        this.note(`mask edits: ${this.brush.undoDepth} strokes`);
      }
      this.painting = false;
    });
  }

  bindControls(): void {
    for (const metric of METRICS) {
      const opt = document.createElement("option");
      opt.value = metric;
      opt.textContent = metric;
      this.metricSelect.appendChild(opt);
    }
    this.metricSelect.value = "epistemic";
    this.metricSelect.addEventListener("change", () => {
      void this.loadMetric(this.metricSelect.value);
    });
    for (const layer of ["pred", "gt", "heatmap"] as LayerName[]) {
      el<HTMLInputElement>(`layer-${layer}`).addEventListener("change", () => {
        if (this.overlay) {
          this.overlay.toggleLayer(layer);
          this.redraw();
        }
      });
    }
    el<HTMLButtonElement>("accept").addEventListener("click", () => {
      void this.submitVerdict("accept");
    });
    el<HTMLButtonElement>("override").addEventListener("click", () => {
      void this.submitVerdict("override");
    });
    el<HTMLButtonElement>("undo").addEventListener("click", () => {
      if (this.brush && this.brush.undo()) {
        this.note(`undid stroke; ${this.brush.undoDepth} remain`);
      }
    });
    el<HTMLButtonElement>("refresh").addEventListener("click", () => {
      void this.refreshQueue();
    });
    this.slider.addEventListener("input", () => {
      const tau = Number(this.slider.value);
      this.sliderValue.textContent = tau.toFixed(2);
      this.explorer.slide(tau);
    });
    el<HTMLButtonElement>("apply-tau").addEventListener("click", () => {
      void this.explorer
        .apply()
        .then((cfg) => {
          this.note(`threshold ${cfg.tau} is now active`);
          return this.refreshQueue();
        })
        .catch((err) => this.showError(err));
    });
  }

  async start(): Promise<void> {
    this.bindControls();
    this.bindViewer();
    try {
      const cfg = await this.explorer.loadConfig();
      this.slider.value = String(cfg.tau);
      this.sliderValue.textContent = cfg.tau.toFixed(2);
      await this.refreshQueue();
      this.note(`connected; active metric ${cfg.metric}, tau ${cfg.tau}`);
    } catch (err) {
      this.showError(err);
    }
  }
}

if (typeof document !== "undefined" && document.getElementById("viewer")) {
  void new App().start();
}
