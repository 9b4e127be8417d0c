/** Typed client for the segmentation service ("api/1" payloads). */

export interface SessionInfo {
  schema: string;
  session_id: string;
  volume_id: string;
  shape: [number, number, number];
  has_gt: boolean;
}

export interface PromptResponse {
  schema: string;
  session_id: string;
  prompt_count: number;
  foreground_voxels: number;
  changed_voxels: number;
  dsc?: number;
}

export interface SliceResponse {
  schema: string;
  axis: number;
  index: number;
  shape: [number, number];
  image_b64: string;
  mask_rle: number[];
  gt_rle?: number[];
}

export interface MaskResponse {
  schema: string;
  shape: [number, number, number];
  rle: number[];
  prompt_count: number;
}

export type Polarity = "positive" | "negative";

export interface PromptRecord {
  x: number;
  y: number;
  z: number;
  polarity: Polarity;
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetcher: FetchLike = (u, i) => fetch(u, i),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetcher(this.baseUrl + path, init);
    if (!resp.ok) {
      const body = await resp.text();
      throw new Error(`${init?.method ?? "GET"} ${path} -> ${resp.status}: ${body}`);
    }
    return (await resp.json()) as T;
  }

  createSession(volumeId: string, target?: string): Promise<SessionInfo> {
    return this.request<SessionInfo>("/sessions", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ volume_id: volumeId, target: target ?? null }),
    });
  }

  prompt(sessionId: string, p: PromptRecord): Promise<PromptResponse> {
    return this.request<PromptResponse>(`/sessions/${sessionId}/prompts`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(p),
    });
  }

  getSlice(sessionId: string, axis: number, index: number): Promise<SliceResponse> {
    return this.request<SliceResponse>(`/sessions/${sessionId}/slices/${axis}/${index}`);
  }

  getMask(sessionId: string): Promise<MaskResponse> {
    return this.request<MaskResponse>(`/sessions/${sessionId}/mask`);
  }

  deleteSession(sessionId: string): Promise<{ deleted: string }> {
    return this.request(`/sessions/${sessionId}`, { method: "DELETE" });
  }
}

/**
 * Replay a recorded click log against a fresh session and return the final
 * full-volume mask RLE. Used for end-to-end determinism checks.
 */
export async function replayClickLog(
  client: ApiClient,
  volumeId: string,
  log: PromptRecord[],
  target?: string,
): Promise<number[]> {
  const session = await client.createSession(volumeId, target);
  for (const p of log) {
    await client.prompt(session.session_id, p);
  }
  const mask = await client.getMask(session.session_id);
  return mask.rle;
}
