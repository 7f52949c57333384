/**
 * Typed client for the local toy editing service. All JSON over HTTP;
 * images travel as base64 PNG strings.
 */

export interface FrameInfo {
  frame_id: string;
  intensities: number[];
}

export interface SubjectsResponse {
  test: number[];
  train: number[];
}

export interface FramesResponse {
  subject_id: number;
  split: string;
  frames: FrameInfo[];
}

export type EditMode = "edit" | "neutralize" | "transfer";

export interface EditRequest {
  source_frame_id?: string;
  source_image_b64?: string;
  target_intensities?: number[];
  target_frame_id?: string;
  target_image_b64?: string;
  mode: EditMode;
}

export interface EditResponse {
  edited_image_b64: string;
  neutral_image_b64: string;
  estimated_intensities: number[];
  latency_ms: number;
}

export interface HealthResponse {
  status: string;
  model_hash: string;
}

export class ServiceError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    if (!res.ok) {
      let detail = res.statusText;
      try {
        const body = await res.json();
        detail = body.message ?? JSON.stringify(body);
      } catch {
        /* not JSON */
      }
      throw new ServiceError(res.status, detail);
    }
    return (await res.json()) as T;
  }

  health(): Promise<HealthResponse> {
    return this.request<HealthResponse>("/health");
  }

  subjects(): Promise<SubjectsResponse> {
    return this.request<SubjectsResponse>("/subjects");
  }

  frames(subjectId: number): Promise<FramesResponse> {
    return this.request<FramesResponse>(`/frames/${subjectId}`);
  }

  imageUrl(frameId: string): string {
    return `${this.baseUrl}/image/${frameId}`;
  }

  edit(req: EditRequest): Promise<EditResponse> {
    return this.request<EditResponse>("/edit", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(req),
    });
  }
}
