"""Click-to-segment HTTP service.

Endpoints:
    GET  /api/volumes                       manifest listing
    GET  /api/volumes/{id}/slices/{k}       8-bit grayscale PNG of one slice
    GET  /api/volumes/{id}/slices/{k}/mask  ground-truth RLE, if any
    POST /api/segment                       click -> RLE mask + probability PNG

The server is read-only: one checkpoint and the manifest volumes are
loaded at startup and never mutated, so concurrent requests are safe and
identical requests return identical bytes.  Masks travel as row-major
run-length encodings that alternate background/foreground and always start
with a background run (possibly of length zero).
"""

import base64
import io
import time

import numpy as np

from .errors import ShapeError
from .metrics import MaskPair, dsc
from .train import DEFAULT_NUM_RAYS, DEFAULT_SEQ_LEN, DEFAULT_STRIDE, Segmenter


def rle_encode(mask):
    """Run lengths of a binary mask, row-major, background first.

    An all-background 4x4 mask encodes to [16]; a mask whose first pixel
    is foreground gets a leading zero-length background run.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"rle_encode: mask must be 2-D, got shape {mask.shape}")
    flat = mask.ravel()
    if not np.isin(flat, (0, 1)).all():
        raise ShapeError("rle_encode: mask values must be 0 or 1")
    bounds = np.flatnonzero(np.diff(flat)) + 1
    runs = np.diff(np.concatenate(([0], bounds, [flat.size]))).tolist()
    if flat[0] == 1:
        runs.insert(0, 0)
    return runs


def rle_decode(runs, shape):
    """Inverse of rle_encode for a given (H, W) shape."""
    h, w = shape
    total = h * w
    if any(int(r) != r or r < 0 for r in runs):
        raise ShapeError("rle_decode: run lengths must be non-negative integers")
    if sum(runs) != total:
        raise ShapeError(
            f"rle_decode: runs sum to {sum(runs)}, expected {total} for {h}x{w}"
        )
    flat = np.zeros(total, np.uint8)
    pos = 0
    for i, run in enumerate(runs):
        if i % 2 == 1:
            flat[pos : pos + int(run)] = 1
        pos += int(run)
    return flat.reshape(h, w)


def _slice_png(image):
    """Min-max window a slice to 8-bit and return PNG bytes."""
    from PIL import Image

    arr = np.asarray(image, np.float64)
    lo, hi = arr.min(), arr.max()
    if hi > lo:
        arr = (arr - lo) / (hi - lo)
    else:
        arr = np.zeros_like(arr)
    png = Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L")
    buf = io.BytesIO()
    png.save(buf, format="PNG")
    return buf.getvalue()


def _prob_png_base64(prob):
    """Probability map in [0,1] -> base64 of an 8-bit PNG (prob * 255)."""
    from PIL import Image

    arr = np.round(np.asarray(prob, np.float64) * 255.0).astype(np.uint8)
    png = Image.fromarray(arr, mode="L")
    buf = io.BytesIO()
    png.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _volume_id(item, index, taken):
    stem = item.volume_path.replace("\\", "/").rsplit("/", 1)[-1]
    stem = stem.rsplit(".", 1)[0] if "." in stem else stem
    vid = stem if stem not in taken else f"{stem}-{index}"
    return vid


def create_app(checkpoint_path, manifest, num_rays=DEFAULT_NUM_RAYS,
               stride=DEFAULT_STRIDE, seq_len=DEFAULT_SEQ_LEN):
    """Build the FastAPI app around one checkpoint and one manifest."""
    from fastapi import FastAPI, Request
    from fastapi.exceptions import RequestValidationError
    from fastapi.middleware.cors import CORSMiddleware
    from fastapi.responses import JSONResponse, Response

    segmenter = Segmenter.from_checkpoint(
        checkpoint_path, num_rays=num_rays, stride=stride, seq_len=seq_len
    )
    volumes = {}
    listing = []
    for index, item in enumerate(manifest.items):
        vid = _volume_id(item, index, volumes)
        vol = manifest.load_volume(item)
        volumes[vid] = vol
        d, h, w = vol.dims
        listing.append(
            {
                "id": vid,
                "slices": d,
                "height": h,
                "width": w,
                "spacing": list(vol.spacing),
                "has_mask": vol.mask is not None,
                "split": item.split,
            }
        )

    app = FastAPI(title="seqseg click-to-segment service")
    # the browser UI is served from its own static origin; the API is
    # read-only, so blanket CORS is safe
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(RequestValidationError)
    async def malformed(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": str(exc.errors())})

    def not_found(what):
        return JSONResponse(status_code=404, content={"error": what})

    @app.get("/api/volumes")
    def list_volumes():
        return {"volumes": listing}

    @app.get("/api/volumes/{volume_id}/slices/{k}")
    def get_slice(volume_id: str, k: int):
        vol = volumes.get(volume_id)
        if vol is None:
            return not_found(f"unknown volume {volume_id!r}")
        if not 0 <= k < vol.dims[0]:
            return not_found(f"volume {volume_id!r} has no slice {k}")
        return Response(content=_slice_png(vol.data[k]), media_type="image/png")

    @app.get("/api/volumes/{volume_id}/slices/{k}/mask")
    def get_mask(volume_id: str, k: int):
        vol = volumes.get(volume_id)
        if vol is None:
            return not_found(f"unknown volume {volume_id!r}")
        if not 0 <= k < vol.dims[0]:
            return not_found(f"volume {volume_id!r} has no slice {k}")
        if vol.mask is None:
            return not_found(f"volume {volume_id!r} has no ground truth")
        return {"mask_rle": rle_encode(vol.mask[k])}

    def bad_request(message):
        return JSONResponse(status_code=400, content={"error": message})

    @app.post("/api/segment")
    async def segment(request: Request):
        # parsed by hand so every malformed shape maps to the documented 400
        try:
            body = await request.json()
        except Exception:
            return bad_request("request body is not valid JSON")
        if not isinstance(body, dict):
            return bad_request("request body must be a JSON object")
        volume_id = body.get("volume_id")
        if not isinstance(volume_id, str):
            return bad_request("volume_id must be a string")
        fields = {}
        for key in ("slice_index", "click_x", "click_y"):
            value = body.get(key)
            if isinstance(value, bool) or not isinstance(value, int):
                return bad_request(f"{key} must be an integer")
            fields[key] = value
        slice_index = fields["slice_index"]
        click_x, click_y = fields["click_x"], fields["click_y"]

        vol = volumes.get(volume_id)
        if vol is None:
            return not_found(f"unknown volume {volume_id!r}")
        if not 0 <= slice_index < vol.dims[0]:
            return not_found(f"volume {volume_id!r} has no slice {slice_index}")
        _, h, w = vol.dims
        if not (0 <= click_x < w and 0 <= click_y < h):
            return bad_request(
                f"click ({click_x}, {click_y}) outside {w}x{h} slice"
            )
        t0 = time.perf_counter()
        mask, lmap = segmenter.segment(vol.data[slice_index], (click_x, click_y))
        latency_ms = (time.perf_counter() - t0) * 1e3
        score = None
        if vol.mask is not None:
            score = dsc(MaskPair(mask, vol.mask[slice_index]))
        return {
            "mask_rle": rle_encode(mask),
            "prob_map": _prob_png_base64(lmap.fused()),
            "dsc": score,
            "latency_ms": latency_ms,
        }

    return app
