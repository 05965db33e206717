import type { AnnotationSet, KinematicsResponse, RunDetail, RunSummary } from './types.js';

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = 'ApiError';
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/** Thin typed client over the run-browsing API. Every server error body has
 * the shape {status, code, message}; anything else becomes code "http_error". */
export class Api {
  constructor(
    private readonly baseUrl: string = '',
    private readonly fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchFn(this.baseUrl + path, init);
    if (!resp.ok) {
      let code = 'http_error';
      let message = `HTTP ${resp.status}`;
      try {
        const body = (await resp.json()) as { code?: string; message?: string };
        if (typeof body.code === 'string') code = body.code;
        if (typeof body.message === 'string') message = body.message;
      } catch {
        // non-JSON error body; keep the generic message
      }
      throw new ApiError(resp.status, code, message);
    }
    return (await resp.json()) as T;
  }

  listRuns(): Promise<RunSummary[]> {
    return this.request<RunSummary[]>('/runs');
  }

  getRun(runId: string): Promise<RunDetail> {
    return this.request<RunDetail>(`/runs/${encodeURIComponent(runId)}`);
  }

  frameUrl(runId: string, view: string, index: number): string {
    return `${this.baseUrl}/runs/${encodeURIComponent(runId)}/frames/${encodeURIComponent(view)}/${index}`;
  }

  getKinematics(
    runId: string,
    stream: string,
    range?: { from?: number; to?: number },
  ): Promise<KinematicsResponse> {
    const params = new URLSearchParams({ stream });
    if (range?.from !== undefined) params.set('from', String(range.from));
    if (range?.to !== undefined) params.set('to', String(range.to));
    return this.request<KinematicsResponse>(
      `/runs/${encodeURIComponent(runId)}/kinematics?${params.toString()}`,
    );
  }

  getAnnotations(runId: string): Promise<AnnotationSet> {
    return this.request<AnnotationSet>(`/runs/${encodeURIComponent(runId)}/annotations`);
  }

  putAnnotations(runId: string, set: AnnotationSet): Promise<AnnotationSet> {
    return this.request<AnnotationSet>(`/runs/${encodeURIComponent(runId)}/annotations`, {
      method: 'PUT',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(set),
    });
  }
}
