/**
 * Thin typed client over the segmentation service's HTTP/JSON API. The
 * fetch implementation is injectable so tests can run against recorded
 * fixture responses instead of a live server.
 */

export interface VolumeInfo {
  id: string;
  slices: number;
  height: number;
  width: number;
  spacing: number[];
  has_mask: boolean;
  split: string;
}

export interface SegmentRequest {
  volume_id: string;
  slice_index: number;
  click_x: number;
  click_y: number;
}

export interface SegmentResponse {
  mask_rle: number[];
  prob_map: string; // base64 PNG of the fused likelihood map
  dsc: number | null;
  latency_ms: number;
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public readonly status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

async function errorOf(resp: Response): Promise<ApiError> {
  let message = `HTTP ${resp.status}`;
  try {
    const body = await resp.json();
    if (body && typeof body.error === "string") message = body.error;
  } catch {
    // non-JSON error body: keep the status line
  }
  return new ApiError(resp.status, message);
}

export class ApiClient {
  private readonly fetchFn: FetchLike;

  constructor(public readonly baseUrl: string, fetchFn?: FetchLike) {
    this.fetchFn = fetchFn ?? ((input, init) => fetch(input, init));
  }

  async listVolumes(): Promise<VolumeInfo[]> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/volumes`);
    if (!resp.ok) throw await errorOf(resp);
    const body = await resp.json();
    return body.volumes as VolumeInfo[];
  }

  /** URL of the slice PNG; <img> elements load it directly (GET only). */
  sliceUrl(volumeId: string, sliceIndex: number): string {
    return `${this.baseUrl}/api/volumes/${encodeURIComponent(volumeId)}/slices/${sliceIndex}`;
  }

  async fetchGroundTruth(volumeId: string, sliceIndex: number): Promise<number[]> {
    const resp = await this.fetchFn(`${this.sliceUrl(volumeId, sliceIndex)}/mask`);
    if (!resp.ok) throw await errorOf(resp);
    const body = await resp.json();
    return body.mask_rle as number[];
  }

  async segment(req: SegmentRequest, signal?: AbortSignal): Promise<SegmentResponse> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/segment`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(req),
      signal,
    });
    if (!resp.ok) throw await errorOf(resp);
    return (await resp.json()) as SegmentResponse;
  }
}
