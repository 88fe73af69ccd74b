// Typed client for the triage service HTTP API. Every method goes through
// the injected fetch implementation so tests can swap in a fake service.

import { Tensor, parseTns, serializeTns, bytesToBase64 } from "./tns.js";

export interface ThresholdConfigDto {
  metric: string;
  reduction: string;
  tau: number;
  normalization: string;
}

export interface CaseSummary {
  case_id: string;
  status: string;
  has_gt: boolean;
  scores: Record<string, number>;
  normalized_score: number | null;
  infer_params: Record<string, unknown> | null;
  decision_config: ThresholdConfigDto | null;
  verdict: Record<string, unknown> | null;
  artifacts: string[];
}

export interface ReportRow {
  tau: number;
  metric: string;
  retained: number;
  referred: number;
  referral_rate: number;
  accuracy: number | null;
  precision: number | null;
  recall: number | null;
  auroc: number | null;
  all_referred: boolean;
}

export interface WhatifResponse extends ReportRow {
  cases: number;
  config: ThresholdConfigDto;
}

export interface ReportResponse {
  grid: number[];
  metric: string;
  reduction: string;
  normalization: string;
  reports: ReportRow[];
}

export interface HealthResponse {
  status: string;
  cases: number;
  model_loaded: boolean;
  digest: string;
}

export interface ReviewResult extends CaseSummary {
  applied: boolean;
}

export interface WhatifParams {
  tau?: number;
  metric?: string;
  reduction?: string;
  normalization?: string;
}

export class ApiError extends Error {
  status: number;

  constructor(status: number, detail: string) {
    super(`HTTP ${status}: ${detail}`);
    this.status = status;
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

async function errorDetail(resp: Response): Promise<string> {
  try {
    const body = await resp.json();
    if (body && typeof body.detail === "string") return body.detail;
    return JSON.stringify(body);
  } catch {
    return resp.statusText || "request failed";
  }
}

export class ApiClient {
  private base: string;
  private fetchImpl: FetchLike;

  constructor(baseUrl: string, fetchImpl?: FetchLike) {
    this.base = baseUrl.replace(/\/+$/, "");
    // Bind so a bare window.fetch keeps its receiver.
    this.fetchImpl = fetchImpl ?? ((input, init) => fetch(input, init));
  }

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const resp = await this.fetchImpl(this.base + path, init);
    if (!resp.ok) {
      throw new ApiError(resp.status, await errorDetail(resp));
    }
    return resp;
  }

  private async getJson<T>(path: string, signal?: AbortSignal): Promise<T> {
    const resp = await this.request(path, { method: "GET", signal });
    return (await resp.json()) as T;
  }

  private async sendJson<T>(method: string, path: string, body: unknown): Promise<T> {
    const resp = await this.request(path, {
      method,
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    return (await resp.json()) as T;
  }

  health(): Promise<HealthResponse> {
    return this.getJson("/health");
  }

  async listCases(): Promise<CaseSummary[]> {
    const body = await this.getJson<{ cases: CaseSummary[] }>("/cases");
    return body.cases;
  }

  getCase(caseId: string): Promise<CaseSummary> {
    return this.getJson(`/cases/${encodeURIComponent(caseId)}`);
  }

  /* Queue order is the server's contract; callers must not re-sort it. */
  async queue(status = "referred"): Promise<CaseSummary[]> {
    const body = await this.getJson<{ status: string; cases: CaseSummary[] }>(
      `/queue?status=${encodeURIComponent(status)}`,
    );
    return body.cases;
  }

  infer(caseId: string, params: { T?: number; seed?: number; dropout_p?: number } = {}) {
    return this.sendJson<CaseSummary & { decision: string }>(
      "POST",
      `/cases/${encodeURIComponent(caseId)}/infer`,
      params,
    );
  }

  review(
    caseId: string,
    verdict: "accept" | "override",
    opts: { reviewer?: string; mask?: Tensor } = {},
  ): Promise<ReviewResult> {
    const body: Record<string, unknown> = { verdict };
    if (opts.reviewer !== undefined) body.reviewer = opts.reviewer;
    if (opts.mask !== undefined) {
      body.corrected_mask_b64 = bytesToBase64(new Uint8Array(serializeTns(opts.mask)));
    }
    return this.sendJson("POST", `/cases/${encodeURIComponent(caseId)}/review`, body);
  }

  whatif(params: WhatifParams = {}, signal?: AbortSignal): Promise<WhatifResponse> {
    const query = new URLSearchParams();
    if (params.tau !== undefined) query.set("tau", String(params.tau));
    if (params.metric !== undefined) query.set("metric", params.metric);
    if (params.reduction !== undefined) query.set("reduction", params.reduction);
    if (params.normalization !== undefined) query.set("normalization", params.normalization);
    const qs = query.toString();
    return this.getJson(`/whatif${qs ? "?" + qs : ""}`, signal);
  }

  report(grid?: string): Promise<ReportResponse> {
    const qs = grid === undefined ? "" : `?grid=${encodeURIComponent(grid)}`;
    return this.getJson(`/report${qs}`);
  }

  getConfig(): Promise<ThresholdConfigDto> {
    return this.getJson("/config");
  }

  putConfig(patch: Partial<ThresholdConfigDto>): Promise<ThresholdConfigDto> {
    return this.sendJson("PUT", "/config", patch);
  }

  async tensor(caseId: string, name: string): Promise<Tensor> {
    const resp = await this.request(
      `/cases/${encodeURIComponent(caseId)}/tensor/${encodeURIComponent(name)}`,
      { method: "GET" },
    );
    return parseTns(await resp.arrayBuffer());
  }
}
