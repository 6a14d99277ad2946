/**
 * store.ts - view state and the actions that change it.
 *
 * The store holds exactly what the service last returned plus view
 * concerns (rank mode, page offset, selection, session history). It never
 * derives analysis numbers client-side; a reload after any mutation
 * re-fetches every panel so closing and reopening the page reproduces the
 * service state exactly.
 *
 * Concurrency contract: at most one mutation in flight, and a 409 reply
 * (another tab moved the generation) triggers a refresh and an explicit
 * re-prompt notice. The rejected action is never retried silently.
 */

import {
  ApiClient,
  ApiError,
  FindingDetail,
  FindingsPage,
  Metrics,
  RankMode,
  RetuneAction,
  SankeyDoc,
  SignaturesResponse,
} from "./api.js";

export const PAGE_SIZE = 10;

/** Omit distributed over a union, so each action keeps its own payload keys. */
type PendingAction = RetuneAction extends infer T
  ? T extends RetuneAction
    ? Omit<T, "base_generation">
    : never
  : never;

export interface HistoryEntry {
  action: RetuneAction;
  generation: number;
}

export interface AppState {
  generation: number;
  rank: RankMode;
  offset: number;
  page: FindingsPage | null;
  detail: FindingDetail | null;
  signatures: SignaturesResponse | null;
  sankey: SankeyDoc | null;
  metrics: Metrics | null;
  history: HistoryEntry[];
  /** Set after a 409: the user must review the refreshed list and re-apply. */
  staleNotice: string | null;
  /** Set when the service cannot be reached; nothing is mutated locally. */
  errorBanner: string | null;
  busy: boolean;
}

export class Store {
  private readonly api: ApiClient;
  private readonly listeners: (() => void)[] = [];
  readonly state: AppState;

  constructor(api: ApiClient) {
    this.api = api;
    this.state = {
      generation: 0,
      rank: "severity",
      offset: 0,
      page: null,
      detail: null,
      signatures: null,
      sankey: null,
      metrics: null,
      history: [],
      staleNotice: null,
      errorBanner: null,
      busy: false,
    };
  }

  subscribe(listener: () => void): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const listener of this.listeners) listener();
  }

  /** Fetch every panel from scratch; the only way state ever changes. */
  async refresh(): Promise<void> {
    try {
      const [page, signatures, sankey, metrics] = await Promise.all([
        this.api.findings(this.state.rank, this.state.offset, PAGE_SIZE),
        this.api.signatures(),
        this.api.sankey(),
        this.api.metrics(),
      ]);
      this.state.page = page;
      this.state.signatures = signatures;
      this.state.sankey = sankey;
      this.state.metrics = metrics;
      this.state.generation = page.generation;
      this.state.errorBanner = null;
      if (this.state.detail) {
        const id = this.state.detail.finding.property_id;
        try {
          this.state.detail = await this.api.findingDetail(id);
        } catch (err) {
          if (err instanceof ApiError && err.status === 404) {
            this.state.detail = null;
          } else {
            throw err;
          }
        }
      }
    } catch (err) {
      this.state.errorBanner =
        err instanceof ApiError ? err.message : "service unreachable";
    }
    this.emit();
  }

  async setRank(rank: RankMode): Promise<void> {
    this.state.rank = rank;
    this.state.offset = 0;
    await this.refresh();
  }

  async setPage(offset: number): Promise<void> {
    this.state.offset = Math.max(0, offset);
    await this.refresh();
  }

  async select(propertyId: string): Promise<void> {
    try {
      this.state.detail = await this.api.findingDetail(propertyId);
      this.state.errorBanner = null;
    } catch (err) {
      this.state.errorBanner =
        err instanceof ApiError ? err.message : "service unreachable";
    }
    this.emit();
  }

  /**
   * Apply one retune action at the currently displayed generation.
   * Returns true when the service accepted it.
   */
  async applyRetune(action: PendingAction): Promise<boolean> {
    if (this.state.busy) return false;
    this.state.busy = true;
    this.state.staleNotice = null;
    this.emit();
    const payload = {
      ...action,
      base_generation: this.state.generation,
    } as RetuneAction;
    try {
      const result = await this.api.retune(payload);
      this.state.history.push({ action: payload, generation: result.generation });
      return true;
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        this.state.staleNotice =
          `another session moved the state to generation ${err.generation}; ` +
          "review the refreshed list and re-apply if still wanted";
        return false;
      }
      this.state.errorBanner =
        err instanceof ApiError ? err.message : "service unreachable";
      return false;
    } finally {
      this.state.busy = false;
      await this.refresh();
    }
  }

  suppress(signatureId: string, propertyId: string): Promise<boolean> {
    return this.applyRetune({
      kind: "suppress_finding",
      signature_id: signatureId,
      property_id: propertyId,
    });
  }

  /** Client-side guard mirrors the server: a threshold must be positive. */
  adjustThreshold(signatureId: string, newThreshold: number): Promise<boolean> {
    if (!(newThreshold > 0)) {
      this.state.errorBanner = "threshold must be > 0";
      this.emit();
      return Promise.resolve(false);
    }
    return this.applyRetune({
      kind: "adjust_threshold",
      signature_id: signatureId,
      new_threshold: newThreshold,
    });
  }

  whitelist(signatureId: string, feature: string, value: string): Promise<boolean> {
    return this.applyRetune({
      kind: "whitelist_value",
      signature_id: signatureId,
      feature,
      value,
    });
  }
}
