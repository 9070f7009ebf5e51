import type {
  CanvasId, ProjectResponse, ReconstructResponse, SessionInfo, SessionState,
  StrokeSetPayload,
} from "./types";

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(`${status}: ${message}`);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

/** Typed client over the massing service HTTP API. */
export class ApiClient {
  constructor(
    private base: string = "",
    private fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchImpl(this.base + path, init);
    if (!res.ok) {
      let detail = res.statusText;
      try {
        const body = await res.json();
        detail = body.detail ?? JSON.stringify(body);
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(res.status, detail);
    }
    const type = res.headers.get("content-type") ?? "";
    if (type.includes("application/json")) return (await res.json()) as T;
    return (await res.text()) as unknown as T;
  }

  createSession(): Promise<SessionInfo> {
    return this.request("/sessions", { method: "POST" });
  }

  getSession(id: string): Promise<SessionState> {
    return this.request(`/sessions/${id}`);
  }

  deleteSession(id: string): Promise<unknown> {
    return this.request(`/sessions/${id}`, { method: "DELETE" });
  }

  putStrokes(id: string, canvas: CanvasId, payload: StrokeSetPayload): Promise<unknown> {
    return this.request(`/sessions/${id}/strokes/${canvas}`, {
      method: "PUT",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  project(id: string, view = 0): Promise<ProjectResponse> {
    return this.request(`/sessions/${id}/project`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ view }),
    });
  }

  reconstruct(
    id: string,
    opts: { views?: number; seed?: number; steps?: number } = {},
  ): Promise<ReconstructResponse> {
    return this.request(`/sessions/${id}/reconstruct`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(opts),
    });
  }

  fetchMeshObj(id: string): Promise<string> {
    return this.request(`/sessions/${id}/mesh.obj`);
  }

  putUnderlay(id: string, canvas: CanvasId, png: Blob | ArrayBuffer): Promise<unknown> {
    return this.request(`/sessions/${id}/underlay/${canvas}`, {
      method: "PUT",
      headers: { "content-type": "image/png" },
      body: png as BodyInit,
    });
  }

  underlayUrl(id: string, canvas: CanvasId): string {
    return `${this.base}/sessions/${id}/underlay/${canvas}`;
  }
}
