/**
 * View state and the click-to-segment control flow.
 *
 * Clicks are stored in image pixel space, independent of display zoom.
 * Only one segment request is ever in flight: a newer click aborts and
 * supersedes the pending one, and a stale response that loses the race is
 * dropped rather than applied.
 */

import { ApiClient, SegmentRequest, SegmentResponse, VolumeInfo } from "./api.js";

export interface OverlayToggles {
  mask: boolean;
  probability: boolean;
  groundTruth: boolean;
}

export interface ViewState {
  volumeId: string | null;
  sliceIndex: number;
  lastClick: { x: number; y: number } | null; // image pixel space
  overlay: OverlayToggles;
  lastResponse: SegmentResponse | null;
}

export function initialState(): ViewState {
  return {
    volumeId: null,
    sliceIndex: 0,
    lastClick: null,
    overlay: { mask: true, probability: false, groundTruth: true },
    lastResponse: null,
  };
}

/** Display pixels -> image pixels: at zoom 2x, display (200,100) is image (100,50). */
export function displayToImage(
  displayX: number,
  displayY: number,
  zoom: number,
): { x: number; y: number } {
  return { x: Math.floor(displayX / zoom), y: Math.floor(displayY / zoom) };
}

export function clickInBounds(x: number, y: number, width: number, height: number): boolean {
  return Number.isInteger(x) && Number.isInteger(y) && x >= 0 && x < width && y >= 0 && y < height;
}

/** The DSC readout shows the response field verbatim, no reformatting. */
export function dscLabel(response: SegmentResponse | null): string {
  if (response === null || response.dsc === null) return "n/a";
  const value = response.dsc;
  // the server writes integral doubles with a trailing .0 (0.0, 100.0)
  return Number.isInteger(value) ? value.toFixed(1) : String(value);
}

export type ClickOutcome = "rejected" | "superseded" | "done";

/** Serializes segment requests: at most one in flight, last click wins. */
export class SegmentDriver {
  private pending: AbortController | null = null;
  private ticket = 0;

  constructor(private readonly client: ApiClient) {}

  /** Resolves null when a later click superseded this one. */
  async submit(req: SegmentRequest): Promise<SegmentResponse | null> {
    this.pending?.abort();
    const controller = new AbortController();
    this.pending = controller;
    const ticket = ++this.ticket;
    try {
      const response = await this.client.segment(req, controller.signal);
      return ticket === this.ticket ? response : null;
    } catch (err) {
      if (controller.signal.aborted && ticket !== this.ticket) return null;
      throw err;
    } finally {
      if (this.pending === controller) this.pending = null;
    }
  }
}

/**
 * One user click: map display coordinates into the image, reject
 * out-of-bounds clicks before any network traffic, otherwise POST and
 * replace the previous result. API errors propagate to the caller with
 * the view state untouched.
 */
export async function clickToSegment(
  state: ViewState,
  volume: VolumeInfo,
  display: { x: number; y: number },
  zoom: number,
  driver: SegmentDriver,
): Promise<ClickOutcome> {
  const point = displayToImage(display.x, display.y, zoom);
  if (!clickInBounds(point.x, point.y, volume.width, volume.height)) {
    return "rejected";
  }
  state.lastClick = point;
  const response = await driver.submit({
    volume_id: volume.id,
    slice_index: state.sliceIndex,
    click_x: point.x,
    click_y: point.y,
  });
  if (response === null) return "superseded";
  state.lastResponse = response;
  return "done";
}
