/** Thin typed client for the retrieval service. No retries, no caching:
 * every render follows one confirmed response. */

import type { Overrides, ServiceInfo, TurnResponse, VideoMeta } from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }

  /** Session no longer usable: vanished (404) or expired (410). */
  get staleSession(): boolean {
    return this.status === 404 || this.status === 410;
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (...args) => fetch(...args),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(`${this.baseUrl}${path}`, init);
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const body = await response.json();
        if (typeof body?.detail === "string") detail = body.detail;
      } catch {
        /* non-JSON error body; keep the status text */
      }
      throw new ApiError(response.status, detail);
    }
    return (await response.json()) as T;
  }

  createSession(): Promise<{ session_id: string }> {
    return this.request("/v1/sessions", { method: "POST" });
  }

  postTurn(sessionId: string, query: string, overrides?: Overrides): Promise<TurnResponse> {
    const body: Record<string, unknown> = { query };
    if (overrides && Object.keys(overrides).length > 0) body.overrides = overrides;
    return this.request(`/v1/sessions/${sessionId}/turns`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  getVideo(videoId: string): Promise<VideoMeta> {
    return this.request(`/v1/videos/${videoId}`);
  }

  getConfig(): Promise<ServiceInfo> {
    return this.request("/v1/config");
  }
}
