/**
 * api.ts - typed client for the analysis service.
 *
 * Every endpoint lives under /api/ and returns JSON; the shapes here
 * mirror the schemas committed under docs/api/ in the backend repo. The
 * client never caches and never mutates responses: the service is the
 * single source of truth, and every displayed number originates from one
 * of these payloads.
 */

export type RankMode = "outlier" | "severity";

export interface Finding {
  property_id: string;
  detector: string;
  outlier_score: number;
  threshold: number;
  violated_signature: string | null;
  deviant_features: [string, string, string][];
  problem_type: string;
  severity: number | null;
  rank: number | null;
}

export interface FindingsPage {
  generation: number;
  rank: RankMode;
  offset: number;
  limit: number;
  total: number;
  findings: Finding[];
}

export interface Provenance {
  device: string;
  kind: string;
  name: string;
  source_path: string;
  source_lines: [number, number];
  raw_text: string;
}

export interface FindingDetail {
  generation: number;
  finding: Finding & { provenance: Provenance };
}

export interface SignatureReportRow {
  signature_id: string;
  kind: string;
  member_count: number;
  threshold: number;
  whitelist_size: number;
  suppressed_count: number;
  top_deviant_features: string[];
}

export interface SignaturesResponse {
  generation: number;
  report: SignatureReportRow[];
  signatures: unknown[];
}

export interface SankeyNode {
  id: string;
  label: string;
  layer: 0 | 1 | 2;
}

export interface SankeyLink {
  source: string;
  target: string;
  value: number;
}

export interface SankeyDoc {
  generation: number;
  nodes: SankeyNode[];
  links: SankeyLink[];
}

export interface Metrics {
  generation: number;
  tp: number;
  fp: number;
  fn: number;
  emitted_findings: number;
  precision: number | null;
  recall: number | null;
}

export type RetuneAction =
  | {
      kind: "suppress_finding";
      base_generation: number;
      signature_id: string;
      property_id: string;
    }
  | {
      kind: "adjust_threshold";
      base_generation: number;
      signature_id: string;
      new_threshold: number;
    }
  | {
      kind: "whitelist_value";
      base_generation: number;
      signature_id: string;
      feature: string;
      value: string;
    };

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

/** Non-2xx response, carrying the status and the server's error body. */
export class ApiError extends Error {
  readonly status: number;
  /** Live generation from a 409 body; lets the caller rebase. */
  readonly generation: number | null;

  constructor(status: number, detail: string, generation: number | null) {
    super(detail);
    this.name = "ApiError";
    this.status = status;
    this.generation = generation;
  }
}

export class ApiClient {
  private readonly fetchFn: FetchLike;
  private readonly base: string;

  constructor(fetchFn: FetchLike, base = "") {
    this.fetchFn = fetchFn;
    this.base = base;
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(this.base + path, init);
    const body = await response.json();
    if (!response.ok) {
      const detail = typeof body?.detail === "string" ? body.detail : response.statusText;
      const generation = typeof body?.generation === "number" ? body.generation : null;
      throw new ApiError(response.status, detail, generation);
    }
    return body as T;
  }

  generation(): Promise<{ generation: number }> {
    return this.request("/api/generation");
  }

  findings(rank: RankMode, offset: number, limit: number): Promise<FindingsPage> {
    const query = new URLSearchParams({
      rank,
      offset: String(offset),
      limit: String(limit),
    });
    return this.request(`/api/findings?${query}`);
  }

  findingDetail(propertyId: string): Promise<FindingDetail> {
    return this.request(`/api/findings/${propertyId}`);
  }

  signatures(): Promise<SignaturesResponse> {
    return this.request("/api/signatures");
  }

  sankey(): Promise<SankeyDoc> {
    return this.request("/api/sankey");
  }

  /** Resolves null when the state was analyzed without truth labels (404). */
  async metrics(): Promise<Metrics | null> {
    try {
      return await this.request<Metrics>("/api/metrics");
    } catch (err) {
      if (err instanceof ApiError && err.status === 404) return null;
      throw err;
    }
  }

  retune(action: RetuneAction): Promise<{ generation: number }> {
    return this.request("/api/retune", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(action),
    });
  }
}
