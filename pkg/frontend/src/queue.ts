// Review queue model. The server defines the work order; this module keeps
// rows exactly as returned and never re-sorts them client side.

import { ApiClient, CaseSummary } from "./api.js";
import { formatValue } from "./colormap.js";

export interface QueueRow {
  caseId: string;
  status: string;
  normalized: number | null;
  display: string;
  hasGt: boolean;
}

export function toRows(cases: CaseSummary[]): QueueRow[] {
  return cases.map((c) => ({
    caseId: c.case_id,
    status: c.status,
    normalized: c.normalized_score,
    display: c.normalized_score === null ? "-" : formatValue(c.normalized_score),
    hasGt: c.has_gt,
  }));
}

export class QueueModel {
  private api: ApiClient;
  private rows: QueueRow[] = [];
  private selected: string | null = null;

  constructor(api: ApiClient) {
    this.api = api;
  }

  async refresh(status = "referred"): Promise<QueueRow[]> {
    this.rows = toRows(await this.api.queue(status));
    if (this.selected !== null && !this.rows.some((r) => r.caseId === this.selected)) {
      this.selected = null;
    }
    return this.rows;
  }

  list(): QueueRow[] {
    return this.rows;
  }

  select(caseId: string): void {
    if (!this.rows.some((r) => r.caseId === caseId)) {
      throw new Error(`case ${caseId} is not in the queue`);
    }
    this.selected = caseId;
  }

  get selectedId(): string | null {
    return this.selected;
  }
}

export function renderQueue(
  container: HTMLElement,
  rows: QueueRow[],
  selected: string | null,
  onSelect: (caseId: string) => void,
): void {
  container.textContent = "";
  if (rows.length === 0) {
    const empty = document.createElement("p");
    empty.className = "queue-empty";
    empty.textContent = "Queue is empty.";
    container.appendChild(empty);
    return;
  }
  const list = document.createElement("ul");
  list.className = "queue-list";
  for (const row of rows) {
    const item = document.createElement("li");
    item.className = "queue-item" + (row.caseId === selected ? " selected" : "");
    item.dataset.caseId = row.caseId;
    const id = document.createElement("span");
    id.className = "queue-id";
    id.textContent = row.caseId;
    const score = document.createElement("span");
    score.className = "queue-score";
    score.textContent = row.display;
    item.appendChild(id);
    item.appendChild(score);
    item.addEventListener("click", () => onSelect(row.caseId));
    list.appendChild(item);
  }
  container.appendChild(list);
}
