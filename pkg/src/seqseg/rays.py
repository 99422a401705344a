"""Between the clicked point and the network, and back.

A click becomes ``num_rays`` directions at angles 2*pi*i/num_rays (ray 0
along +x, angles counterclockwise with y pointing down).  Along each ray,
K axis-aligned patches of ``patch_size`` x ``patch_size`` are cropped at
integer-rounded centers spaced ``stride`` pixels apart, so consecutive
patches overlap; out-of-bounds pixels read zero.  Ground-truth label
patches, when a mask is supplied, use identical geometry.

Going back, per-patch probability maps are scattered into a slice-sized
accumulator; the fused probability at a pixel is the mean over every patch
that covered it, and thresholding at 0.5 (ties to foreground) yields the
final mask.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

PRESETS = {
    "kidney": {"seq_len": 15, "stride": 4},
    "promise12": {"seq_len": 12, "stride": 6},
}


def round_half_up(v):
    """Round to the nearest integer, halves away from the floor (0.5 -> 1)."""
    return int(math.floor(v + 0.5))


@dataclass(frozen=True)
class ExtractionConfig:
    center: tuple
    num_rays: int = 16
    stride: int = 4
    patch_size: int = 32
    seq_len: int = 15

    def __post_init__(self):
        cx, cy = self.center
        object.__setattr__(self, "center", (int(cx), int(cy)))
        if self.num_rays < 1:
            raise ShapeError(f"num_rays must be >= 1, got {self.num_rays}")
        if self.patch_size < 1:
            raise ShapeError(f"patch_size must be >= 1, got {self.patch_size}")
        if not 1 <= self.stride < self.patch_size:
            raise ShapeError(
                f"stride must be in [1, patch_size) so consecutive patches "
                f"overlap; got stride {self.stride}, patch_size {self.patch_size}"
            )
        if self.seq_len < 1:
            raise ShapeError(f"seq_len must be >= 1, got {self.seq_len}")

    @classmethod
    def preset(cls, name, center, **overrides):
        if name not in PRESETS:
            raise ShapeError(f"unknown preset {name!r}; valid: {sorted(PRESETS)}")
        kw = dict(PRESETS[name])
        kw.update(overrides)
        return cls(center=center, **kw)


@dataclass
class PatchSequence:
    ray_index: int
    angle: float
    patches: list
    patch_centers: list
    label_patches: list = None


class LikelihoodMap:
    """Per-pixel accumulated probability and hit count over one slice."""

    def __init__(self, shape):
        self.prob_sum = np.zeros(shape, np.float64)
        self.coverage = np.zeros(shape, np.int32)

    @property
    def shape(self):
        return self.prob_sum.shape

    def fused(self):
        """Mean probability over covering patches; 0 where nothing covered."""
        out = np.zeros(self.shape, np.float64)
        hit = self.coverage > 0
        out[hit] = self.prob_sum[hit] / self.coverage[hit]
        return out


def crop_patch(image, cx, cy, size):
    """Axis-aligned crop centered at (cx, cy); out-of-bounds pixels are zero.

    Rows span cy - size//2 .. cy + size//2 - 1 and likewise for columns.
    """
    h, w = image.shape
    half = size // 2
    out = np.zeros((size, size), image.dtype)
    r0, c0 = cy - half, cx - half
    rs, re = max(r0, 0), min(r0 + size, h)
    cs, ce = max(c0, 0), min(c0 + size, w)
    if rs < re and cs < ce:
        out[rs - r0 : re - r0, cs - c0 : ce - c0] = image[rs:re, cs:ce]
    return out


def ray_centers(config, ray_index):
    """Integer patch centers for one ray, click first."""
    cx, cy = config.center
    angle = 2.0 * math.pi * ray_index / config.num_rays
    dx, dy = math.cos(angle), math.sin(angle)
    return angle, [
        (round_half_up(cx + t * config.stride * dx), round_half_up(cy + t * config.stride * dy))
        for t in range(config.seq_len)
    ]


def extract_sequences(image, mask, config):
    """All per-ray patch sequences for one slice.

    image: 2-D grayscale array; mask: optional 2-D binary array of the same
    shape (label patches are cropped from it with identical geometry).
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError(f"extract_sequences: image must be 2-D, got shape {image.shape}")
    h, w = image.shape
    cx, cy = config.center
    if not (0 <= cx < w and 0 <= cy < h):
        raise ShapeError(
            f"extract_sequences: center ({cx}, {cy}) outside {w}x{h} image"
        )
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != image.shape:
            raise ShapeError(
                f"extract_sequences: mask shape {mask.shape} != image shape {image.shape}"
            )
        mask = (mask != 0).astype(np.uint8)
    sequences = []
    for i in range(config.num_rays):
        angle, centers = ray_centers(config, i)
        patches = [crop_patch(image, x, y, config.patch_size) for x, y in centers]
        labels = None
        if mask is not None:
            labels = [crop_patch(mask, x, y, config.patch_size) for x, y in centers]
        sequences.append(PatchSequence(i, angle, patches, centers, labels))
    return sequences


def training_center(mask):
    """Integer-rounded centroid (x, y) of the foreground pixels."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"training_center: mask must be 2-D, got shape {mask.shape}")
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise ShapeError("training_center: mask has no foreground pixels")
    return (round_half_up(xs.mean()), round_half_up(ys.mean()))


def fuse(predictions, slice_shape):
    """Scatter per-patch probability maps into a LikelihoodMap.

    predictions: iterable of (maps, centers) pairs, one per sequence, where
    maps is a list of (P, P) arrays in [0, 1] and centers the matching
    (x, y) patch centers.  Accumulation order follows the iteration order,
    so results are deterministic.
    """
    lmap = LikelihoodMap(slice_shape)
    h, w = slice_shape
    for maps, centers in predictions:
        if len(maps) != len(centers):
            raise ShapeError(
                f"fuse: {len(maps)} maps but {len(centers)} centers in one sequence"
            )
        for m, (cx, cy) in zip(maps, centers):
            m = np.asarray(m)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ShapeError(f"fuse: probability map must be square 2-D, got {m.shape}")
            if m.size and (m.min() < 0.0 or m.max() > 1.0):
                raise ShapeError("fuse: probabilities must lie in [0, 1]")
            size = m.shape[0]
            half = size // 2
            r0, c0 = cy - half, cx - half
            rs, re = max(r0, 0), min(r0 + size, h)
            cs, ce = max(c0, 0), min(c0 + size, w)
            if rs >= re or cs >= ce:
                continue
            lmap.prob_sum[rs:re, cs:ce] += m[rs - r0 : re - r0, cs - c0 : ce - c0]
            lmap.coverage[rs:re, cs:ce] += 1
    return lmap


def threshold(lmap, tau=0.5):
    """Binary mask from a LikelihoodMap: fused probability >= tau wins."""
    return (lmap.fused() >= tau).astype(np.uint8)


def normalize_slice(image):
    """Zero-mean, unit-variance float32 copy (std floored at 1e-6)."""
    image = np.asarray(image, np.float64)
    std = image.std()
    return ((image - image.mean()) / max(std, 1e-6)).astype(np.float32)


def export_sequences_debug(sequences, config, directory):
    """Dump sequences as PNG patches plus a JSON manifest (debug exchange).

    Patch intensities are min-max scaled per patch to use the 8-bit range;
    label patches map {0, 1} to {0, 255}.
    """
    from PIL import Image

    os.makedirs(directory, exist_ok=True)
    manifest = {
        "num_rays": config.num_rays,
        "stride": config.stride,
        "patch_size": config.patch_size,
        "seq_len": config.seq_len,
        "center": list(config.center),
        "sequences": [],
    }
    for seq in sequences:
        entry = {
            "ray_index": seq.ray_index,
            "angle": seq.angle,
            "centers": [list(c) for c in seq.patch_centers],
            "files": [],
            "label_files": [],
        }
        for t, patch in enumerate(seq.patches):
            name = f"ray{seq.ray_index:02d}_t{t:02d}.png"
            p = np.asarray(patch, np.float64)
            span = p.max() - p.min()
            scaled = (p - p.min()) / span if span > 0 else np.zeros_like(p)
            Image.fromarray((scaled * 255).astype(np.uint8)).save(
                os.path.join(directory, name)
            )
            entry["files"].append(name)
        if seq.label_patches is not None:
            for t, lab in enumerate(seq.label_patches):
                name = f"ray{seq.ray_index:02d}_t{t:02d}_label.png"
                Image.fromarray((np.asarray(lab) != 0).astype(np.uint8) * 255).save(
                    os.path.join(directory, name)
                )
                entry["label_files"].append(name)
        manifest["sequences"].append(entry)
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    return os.path.join(directory, "manifest.json")
