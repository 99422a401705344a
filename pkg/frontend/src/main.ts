/**
 * Browser entry point. Wires the API client, view state, and canvas
 * renderer to the controls in index.html. Navigation uses GETs only;
 * segmentation happens exclusively on explicit clicks inside the image.
 */

import { ApiClient, ApiError, VolumeInfo } from "./api.js";
import {
  ViewState,
  initialState,
  clickToSegment,
  SegmentDriver,
  dscLabel,
} from "./state.js";
import { SliceAssets, renderSlice } from "./render.js";
import { rleDecode } from "./rle.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function loadImage(src: string): Promise<HTMLImageElement> {
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => resolve(img);
    img.onerror = () => reject(new Error(`failed to load ${src}`));
    img.src = src;
  });
}

async function start(): Promise<void> {
  const api = new ApiClient("");
  const driver = new SegmentDriver(api);
  const state: ViewState = initialState();

  const volumeSelect = el<HTMLSelectElement>("volume");
  const sliceSlider = el<HTMLInputElement>("slice");
  const sliceLabel = el<HTMLSpanElement>("slice-label");
  const zoomSelect = el<HTMLSelectElement>("zoom");
  const maskToggle = el<HTMLInputElement>("toggle-mask");
  const probToggle = el<HTMLInputElement>("toggle-prob");
  const gtToggle = el<HTMLInputElement>("toggle-gt");
  const status = el<HTMLSpanElement>("status");
  const banner = el<HTMLDivElement>("banner");
  const canvas = el<HTMLCanvasElement>("view");
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("canvas 2d context unavailable");

  maskToggle.checked = state.overlay.mask;
  probToggle.checked = state.overlay.probability;
  gtToggle.checked = state.overlay.groundTruth;

  let volumes: VolumeInfo[] = [];
  let current: VolumeInfo | null = null;
  const assets: SliceAssets = {
    base: null,
    probability: null,
    groundTruth: null,
    width: 0,
    height: 0,
  };

  const zoom = (): number => Number(zoomSelect.value);

  const showError = (message: string): void => {
    banner.textContent = message;
    banner.hidden = false;
  };
  const clearError = (): void => {
    banner.textContent = "";
    banner.hidden = true;
  };

  const redraw = (): void => {
    if (current) renderSlice(ctx, state, assets, zoom());
    const resp = state.lastResponse;
    status.textContent = resp
      ? `DSC: ${dscLabel(resp)}   latency: ${resp.latency_ms.toFixed(1)} ms`
      : "click inside the image to segment";
  };

  /** Fetch the base PNG and ground truth for the current slice (GETs only). */
  const loadSlice = async (): Promise<void> => {
    if (!current) return;
    state.volumeId = current.id;
    state.lastClick = null;
    state.lastResponse = null;
    assets.probability = null;
    assets.width = current.width;
    assets.height = current.height;
    sliceLabel.textContent = `${state.sliceIndex + 1} / ${current.slices}`;
    assets.base = await loadImage(api.sliceUrl(current.id, state.sliceIndex));
    assets.groundTruth = null;
    if (current.has_mask) {
      const rle = await api.fetchGroundTruth(current.id, state.sliceIndex);
      assets.groundTruth = rleDecode(rle, current.width, current.height);
    }
    redraw();
  };

  const selectVolume = async (id: string): Promise<void> => {
    current = volumes.find((v) => v.id === id) ?? null;
    if (!current) return;
    state.sliceIndex = Math.floor(current.slices / 2);
    sliceSlider.max = String(current.slices - 1);
    sliceSlider.value = String(state.sliceIndex);
    clearError();
    await loadSlice();
  };

  volumeSelect.addEventListener("change", () => {
    void selectVolume(volumeSelect.value).catch((err) => showError(String(err)));
  });
  sliceSlider.addEventListener("input", () => {
    state.sliceIndex = Number(sliceSlider.value);
    clearError();
    void loadSlice().catch((err) => showError(String(err)));
  });
  zoomSelect.addEventListener("change", redraw);
  maskToggle.addEventListener("change", () => {
    state.overlay.mask = maskToggle.checked;
    redraw();
  });
  probToggle.addEventListener("change", () => {
    state.overlay.probability = probToggle.checked;
    redraw();
  });
  gtToggle.addEventListener("change", () => {
    state.overlay.groundTruth = gtToggle.checked;
    redraw();
  });

  /** Redraw when the request settles; API errors surface in the banner
      without touching the last good view. */
  const redrawAfter = (work: Promise<void>): void => {
    work
      .catch((err) => {
        showError(err instanceof ApiError ? `server: ${err.message}` : String(err));
      })
      .finally(() => {
        const resp = state.lastResponse;
        if (resp && state.overlay.probability) {
          void loadImage("data:image/png;base64," + resp.prob_map)
            .then((img) => {
              assets.probability = img;
              redraw();
            })
            .catch(() => redraw());
        } else {
          redraw();
        }
      });
  };

  canvas.addEventListener("click", (event) => {
    if (!current) return;
    const volume = current;
    const rect = canvas.getBoundingClientRect();
    const display = {
      x: event.clientX - rect.left,
      y: event.clientY - rect.top,
    };
    clearError();
    status.textContent = "segmenting...";
    redrawAfter(
      clickToSegment(state, volume, display, zoom(), driver).then((outcome) => {
        if (outcome === "rejected") showError("click is outside the image");
      }),
    );
  });

  volumes = await api.listVolumes();
  for (const v of volumes) {
    const opt = document.createElement("option");
    opt.value = v.id;
    opt.textContent = `${v.id} (${v.split}, ${v.slices} slices)`;
    volumeSelect.appendChild(opt);
  }
  if (volumes.length) {
    volumeSelect.value = volumes[0]!.id;
    await selectVolume(volumes[0]!.id);
  } else {
    showError("server lists no volumes");
  }
}

void start().catch((err) => {
  const banner = document.getElementById("banner");
  if (banner) {
    banner.textContent = String(err);
    banner.hidden = false;
  }
});
