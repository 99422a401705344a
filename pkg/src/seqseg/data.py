"""Volumes on disk, dataset manifests, PNG ingestion, and synthetic data.

The native file format (SEGV1) stores one array per file, bit-exactly:

    magic "SGV1" | u8 version=1 | u8 dtype (0 = f32 intensities, 1 = u8
    mask) | u32 x3 little-endian dims D, H, W | f32 x3 little-endian
    spacing (x, y, z) mm | raw little-endian payload, W fastest

so the header is exactly 30 bytes.  A volume plus its mask is a pair of
files, referenced from a JSON manifest that also carries the train/test
split.

The synthetic generator stands in for clinical data: one bright target
object per slice on a constant background, with optional dimmer distractor
objects, Gaussian boundary blur, and additive Gaussian noise — the
ground-truth mask is always the pre-blur rasterization.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import FormatError, ShapeError

SEGV1_MAGIC = b"SGV1"
SEGV1_HEADER_BYTES = 30
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    mask: np.ndarray = None

    def __post_init__(self):
        self.data = np.asarray(self.data, np.float32)
        if self.data.ndim != 3:
            raise ShapeError(f"volume data must be (D, H, W), got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ShapeError(f"spacing must be 3 positive floats, got {self.spacing}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask)
            if self.mask.shape != self.data.shape:
                raise ShapeError(
                    f"mask shape {self.mask.shape} != volume shape {self.data.shape}"
                )
            vals = np.unique(self.mask)
            if not np.all(np.isin(vals, (0, 1))):
                raise ShapeError(f"mask values must be 0/1, found {vals[:8]}")
            self.mask = self.mask.astype(np.uint8)

    @property
    def dims(self):
        return self.data.shape

    def save(self, volume_path, mask_path=None):
        write_segv1(volume_path, self.data, self.spacing)
        if mask_path is not None:
            if self.mask is None:
                raise ShapeError("volume has no mask to save")
            write_segv1(mask_path, self.mask, self.spacing)

    @classmethod
    def load(cls, volume_path, mask_path=None):
        data, spacing = read_segv1(volume_path)
        if data.dtype != np.float32:
            raise FormatError(f"{volume_path} holds a mask payload, not intensities")
        mask = None
        if mask_path is not None:
            mask, mask_spacing = read_segv1(mask_path)
            if mask.dtype != np.uint8:
                raise FormatError(f"{mask_path} holds intensities, not a mask payload")
            if mask_spacing != spacing:
                raise FormatError(
                    f"mask spacing {mask_spacing} != volume spacing {spacing}"
                )
        return cls(data, spacing, mask)


def write_segv1(path, array, spacing):
    array = np.asarray(array)
    if array.ndim != 3:
        raise ShapeError(f"SEGV1 stores (D, H, W) arrays, got shape {array.shape}")
    if array.dtype not in _DTYPE_CODES:
        raise ShapeError(f"SEGV1 stores float32 or uint8, got {array.dtype}")
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ShapeError(f"spacing must be 3 positive floats, got {spacing}")
    code = _DTYPE_CODES[array.dtype]
    d, h, w = array.shape
    header = SEGV1_MAGIC + struct.pack("<BBIII fff", 1, code, d, h, w, *spacing)
    payload = np.ascontiguousarray(array, _DTYPES[code]).tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def read_segv1(path):
    """-> (array, spacing); rejects malformed input with its byte offset."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < SEGV1_HEADER_BYTES:
        raise FormatError(
            f"SEGV1 header needs {SEGV1_HEADER_BYTES} bytes, file has {len(blob)}",
            offset=len(blob),
        )
    if blob[:4] != SEGV1_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}", offset=0)
    version, code = blob[4], blob[5]
    if version != 1:
        raise FormatError(f"unsupported SEGV1 version {version}", offset=4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", offset=5)
    d, h, w = struct.unpack_from("<III", blob, 6)
    spacing = struct.unpack_from("<fff", blob, 18)
    dtype = _DTYPES[code]
    expected = SEGV1_HEADER_BYTES + d * h * w * dtype.itemsize
    if len(blob) != expected:
        raise FormatError(
            f"payload for dims ({d}, {h}, {w}) needs {expected} bytes total, "
            f"file has {len(blob)}",
            offset=min(len(blob), expected),
        )
    array = np.frombuffer(blob, dtype, count=d * h * w, offset=SEGV1_HEADER_BYTES)
    return array.reshape(d, h, w).copy(), tuple(float(s) for s in spacing)


# manifests -------------------------------------------------------------------


@dataclass
class ManifestItem:
    volume_path: str
    mask_path: str = None
    split: str = "train"
    center_overrides: dict = None  # slice index -> (x, y)


class Manifest:
    """Dataset listing: volume/mask paths with disjoint train/test splits."""

    def __init__(self, items, base_dir="."):
        self.base_dir = base_dir
        self.items = list(items)
        seen = {}
        for item in self.items:
            if item.split not in ("train", "test"):
                raise FormatError(f"split must be train or test, got {item.split!r}")
            prior = seen.setdefault(item.volume_path, item.split)
            if prior != item.split:
                raise FormatError(
                    f"{item.volume_path} appears in both train and test splits"
                )

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def split_items(self, split):
        return [i for i in self.items if i.split == split]

    def load_volume(self, item):
        mask = self.resolve(item.mask_path) if item.mask_path else None
        return Volume.load(self.resolve(item.volume_path), mask)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                doc = json.load(f)
        except (OSError, ValueError) as e:
            raise FormatError(f"cannot read manifest {path}: {e}") from e
        if not isinstance(doc, dict) or "items" not in doc:
            raise FormatError(f"manifest {path} must be a JSON object with 'items'")
        items = []
        for raw in doc["items"]:
            overrides = raw.get("center_overrides")
            if overrides is not None:
                overrides = {int(k): tuple(v) for k, v in overrides.items()}
            items.append(
                ManifestItem(
                    volume_path=raw["volume"],
                    mask_path=raw.get("mask"),
                    split=raw.get("split", "train"),
                    center_overrides=overrides,
                )
            )
        return cls(items, base_dir=os.path.dirname(os.path.abspath(path)))

    def save(self, path):
        doc = {"items": []}
        for item in self.items:
            raw = {"volume": item.volume_path, "split": item.split}
            if item.mask_path:
                raw["mask"] = item.mask_path
            if item.center_overrides:
                raw["center_overrides"] = {
                    str(k): list(v) for k, v in item.center_overrides.items()
                }
            doc["items"].append(raw)
        with open(path, "w") as f:
            json.dump(doc, f, indent=2)


# PNG ingestion ---------------------------------------------------------------


def ingest_png_stack(directory, spacing=(1.0, 1.0, 1.0)):
    """Lexicographically ordered grayscale PNGs -> Volume in [0, 1]."""
    from PIL import Image

    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".png"))
    if not names:
        raise FormatError(f"no PNG files in {directory}")
    slices = []
    shape = None
    for name in names:
        img = Image.open(os.path.join(directory, name))
        arr = np.asarray(img)
        if img.mode == "L":
            scale = 255.0
        elif img.mode in ("I;16", "I") and arr.dtype in (np.uint16, np.int32):
            scale = 65535.0
        else:
            raise FormatError(f"{name}: expected 8- or 16-bit grayscale, got mode {img.mode}")
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise FormatError(
                f"{name}: slice size {arr.shape} differs from first slice {shape}"
            )
        slices.append(arr.astype(np.float32) / scale)
    return Volume(np.stack(slices), spacing)


# synthetic data --------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    image_size: int = 128
    kind: str = "disk"
    radius_range: tuple = (15, 26)
    boundary_blur_sigma: float = 1.2
    contrast: float = 0.6
    noise_sigma: float = 0.04
    distractors: int = 2
    background: float = 0.15
    center_jitter: int = 8
    spacing: tuple = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("disk", "ellipse", "blob"):
            raise ShapeError(f"kind must be disk, ellipse or blob, got {self.kind!r}")
        lo, hi = self.radius_range
        if not 1 <= lo <= hi:
            raise ShapeError(f"bad radius range {self.radius_range}")
        if hi + self.center_jitter >= self.image_size // 2:
            raise ShapeError(
                "radius range plus center jitter must keep the object inside "
                f"the {self.image_size}px image"
            )
        if self.boundary_blur_sigma < 0 or self.noise_sigma < 0 or self.contrast <= 0:
            raise ShapeError("blur/noise must be >= 0 and contrast > 0")
        if self.distractors < 0:
            raise ShapeError("distractor count must be >= 0")


def _rasterize(spec, rng, cx, cy, radius, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if spec.kind == "disk":
        return (dx * dx + dy * dy) <= radius * radius
    if spec.kind == "ellipse":
        ry = radius * rng.uniform(0.55, 0.95)
        theta = rng.uniform(0.0, math.pi)
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        return (u / radius) ** 2 + (v / ry) ** 2 <= 1.0
    # star-convex blob: radius modulated by a few low harmonics
    amps = rng.uniform(0.04, 0.12, size=3)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=3)
    phi = np.arctan2(dy, dx)
    wobble = sum(a * np.cos((k + 2) * phi + p) for k, (a, p) in enumerate(zip(amps, phases)))
    return np.sqrt(dx * dx + dy * dy) <= radius * (1.0 + wobble)


def generate_synthetic(spec, n_slices):
    """Volume with ground-truth masks, fully determined by spec.seed."""
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    data = np.empty((n_slices, size, size), np.float32)
    masks = np.empty((n_slices, size, size), np.uint8)
    mid = size / 2.0
    for s in range(n_slices):
        cx = mid + rng.integers(-spec.center_jitter, spec.center_jitter + 1)
        cy = mid + rng.integers(-spec.center_jitter, spec.center_jitter + 1)
        radius = rng.uniform(*spec.radius_range)
        target = _rasterize(spec, rng, cx, cy, radius, size)
        field = target.astype(np.float64)
        if spec.boundary_blur_sigma > 0:
            field = gaussian_filter(field, spec.boundary_blur_sigma)
        image = spec.background + spec.contrast * field
        placed = []
        attempts = 0
        while len(placed) < spec.distractors and attempts < 50 * max(spec.distractors, 1):
            attempts += 1
            r = rng.uniform(5.0, 12.0)
            px = rng.uniform(r + 2, size - r - 2)
            py = rng.uniform(r + 2, size - r - 2)
            if math.hypot(px - cx, py - cy) < radius * 1.35 + r + 4:
                continue  # keep distractors clear of the target
            if any(math.hypot(px - qx, py - qy) < r + qr + 2 for qx, qy, qr in placed):
                continue  # and of each other, so they never stack brighter
            dfield = _rasterize(
                SynthSpec(
                    image_size=spec.image_size,
                    kind="disk",
                    radius_range=spec.radius_range,
                    center_jitter=spec.center_jitter,
                ),
                rng, px, py, r, size,
            ).astype(np.float64)
            if spec.boundary_blur_sigma > 0:
                dfield = gaussian_filter(dfield, spec.boundary_blur_sigma)
            image = image + 0.4 * spec.contrast * dfield
            placed.append((px, py, r))
        if spec.noise_sigma > 0:
            image = image + rng.normal(0.0, spec.noise_sigma, image.shape)
        data[s] = image.astype(np.float32)
        masks[s] = target.astype(np.uint8)
    return Volume(data, spec.spacing, masks)


# resampling ------------------------------------------------------------------


def resample_inplane(volume, target_xy):
    """Bilinear in-plane resample of every slice to square x/y spacing.

    Intensities are bilinearly interpolated with pixel-center alignment;
    the mask, when present, uses nearest-neighbor so it stays binary.
    """
    target_xy = float(target_xy)
    if target_xy <= 0:
        raise ShapeError(f"target spacing must be positive, got {target_xy}")
    sx, sy, sz = volume.spacing
    d, h, w = volume.data.shape
    nh = max(1, int(round(h * sy / target_xy)))
    nw = max(1, int(round(w * sx / target_xy)))
    if (nh, nw) == (h, w) and sx == sy == target_xy:
        return Volume(volume.data.copy(), volume.spacing,
                      None if volume.mask is None else volume.mask.copy())

    ys = (np.arange(nh) + 0.5) * (h / nh) - 0.5
    xs = (np.arange(nw) + 0.5) * (w / nw) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]

    out = np.empty((d, nh, nw), np.float32)
    for s in range(d):
        sl = volume.data[s].astype(np.float64)
        top = sl[y0][:, x0] * (1 - wx) + sl[y0][:, x1] * wx
        bot = sl[y1][:, x0] * (1 - wx) + sl[y1][:, x1] * wx
        out[s] = (top * (1 - wy) + bot * wy).astype(np.float32)
    mask = None
    if volume.mask is not None:
        yn = np.clip(np.round(ys).astype(int), 0, h - 1)
        xn = np.clip(np.round(xs).astype(int), 0, w - 1)
        mask = volume.mask[:, yn][:, :, xn]
    return Volume(out, (target_xy, target_xy, sz), mask)
