"""Segmentation quality metrics and the click-robustness sweep.

All metrics act on a :class:`MaskPair`: two binary arrays of identical
shape (a 2-D slice or a 3-D volume) plus the physical voxel spacing in mm,
given in (x, y, z) order.  Distances are Euclidean in physical space.

Boundary-based metrics extract the boundary as every foreground voxel with
at least one background face-neighbor (outside the array counts as
background), then pool the two directed nearest-boundary distance sets;
hd95 is the 95th percentile of the pooled set with linear interpolation,
abd its mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass
class MaskPair:
    prediction: np.ndarray
    ground_truth: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.prediction = np.asarray(self.prediction)
        self.ground_truth = np.asarray(self.ground_truth)
        if self.prediction.shape != self.ground_truth.shape:
            raise ShapeError(
                f"mask shapes differ: {self.prediction.shape} vs {self.ground_truth.shape}"
            )
        if self.prediction.ndim not in (2, 3):
            raise ShapeError(f"masks must be 2-D or 3-D, got {self.prediction.ndim}-D")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) == 2:
            spacing = spacing + (1.0,)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ShapeError(f"spacing must be 2 or 3 strictly positive values, got {self.spacing}")
        self.spacing = spacing
        self.prediction = (self.prediction != 0).astype(np.uint8)
        self.ground_truth = (self.ground_truth != 0).astype(np.uint8)

    def volumes(self):
        return int(self.prediction.sum()), int(self.ground_truth.sum())


def _as_3d(mask):
    return mask[None] if mask.ndim == 2 else mask


def dsc(pair):
    """Dice score in percent: 100 * 2|A n B| / (|A| + |B|); 100 if both empty."""
    a, b = pair.prediction, pair.ground_truth
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 100.0
    inter = int((a & b).sum())
    return 100.0 * 2.0 * inter / (na + nb)


def _centroid_xyz(mask):
    coords = np.argwhere(_as_3d(mask)).astype(np.float64)  # rows are (z, y, x)
    return coords.mean(axis=0)[::-1]


def centroid_distance(pair):
    """Per-axis |centroid difference| in mm, reported as (x, y, z)."""
    if pair.prediction.sum() == 0:
        raise ShapeError("centroid_distance: prediction mask is empty")
    if pair.ground_truth.sum() == 0:
        raise ShapeError("centroid_distance: ground-truth mask is empty")
    diff = np.abs(_centroid_xyz(pair.prediction) - _centroid_xyz(pair.ground_truth))
    return tuple(float(d * s) for d, s in zip(diff, pair.spacing))


def boundary_points(mask):
    """(n, 3) integer (z, y, x) coordinates of face-boundary foreground voxels.

    Face-connectivity follows the array rank: 4 neighbors for a 2-D slice,
    6 for a volume.  Outside the array counts as background.  2-D points
    come back with z = 0.
    """
    m = np.asarray(mask) != 0
    padded = np.pad(m, 1)
    all_neighbors = np.ones_like(m)
    for ax in range(m.ndim):
        lo = [slice(1, -1)] * m.ndim
        hi = [slice(1, -1)] * m.ndim
        lo[ax] = slice(0, -2)
        hi[ax] = slice(2, None)
        all_neighbors &= padded[tuple(lo)] & padded[tuple(hi)]
    pts = np.argwhere(m & ~all_neighbors)
    if m.ndim == 2:
        pts = np.hstack([np.zeros((len(pts), 1), pts.dtype), pts])
    return pts


def _directed_min_distances(pts_a, pts_b):
    """For each point of a, the distance to the nearest point of b."""
    out = np.empty(len(pts_a))
    # chunk the (n x m) distance matrix to bound memory at large boundaries
    step = max(1, 2_000_000 // max(len(pts_b), 1))
    for i in range(0, len(pts_a), step):
        chunk = pts_a[i : i + step]
        d2 = ((chunk[:, None, :] - pts_b[None, :, :]) ** 2).sum(axis=2)
        out[i : i + step] = np.sqrt(d2.min(axis=1))
    return out


def boundary_metrics(pair):
    """{'hd95': mm, 'abd': mm} from pooled symmetric boundary distances."""
    if pair.prediction.sum() == 0:
        raise ShapeError("boundary_metrics: prediction mask is empty")
    if pair.ground_truth.sum() == 0:
        raise ShapeError("boundary_metrics: ground-truth mask is empty")
    scale = np.array(pair.spacing[::-1])  # points are (z, y, x)
    pa = boundary_points(pair.prediction) * scale
    pb = boundary_points(pair.ground_truth) * scale
    pooled = np.concatenate(
        [_directed_min_distances(pa, pb), _directed_min_distances(pb, pa)]
    )
    return {
        "hd95": float(np.percentile(pooled, 95)),
        "abd": float(pooled.mean()),
    }


def arvd(pair):
    """Absolute relative volume difference in percent of the ground truth."""
    va, vb = pair.volumes()
    if vb == 0:
        raise ShapeError("arvd: ground-truth mask is empty")
    return 100.0 * abs(va - vb) / vb


def metric_report(pair):
    """Every metric in one dict: dsc, cd, hd95, abd, arvd."""
    report = {"dsc": dsc(pair), "arvd": arvd(pair)}
    report["cd"] = centroid_distance(pair)
    report.update(boundary_metrics(pair))
    return report


def click_sweep(image, mask, segment, offsets):
    """DSC under click displacement: a robustness grid over offset pairs.

    ``segment(image, (cx, cy)) -> binary mask`` is run once per offset pair
    (dx, dy) drawn from ``offsets`` x ``offsets``, displacing the mask
    centroid click.  Returns a (len(offsets), len(offsets)) float matrix
    with rows indexed by dy and columns by dx; offsets that push the click
    outside the image leave NaN in their cell and the sweep continues.
    """
    from .rays import training_center

    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.ndim != 2 or image.shape != mask.shape:
        raise ShapeError(
            f"click_sweep: image and mask must be matching 2-D arrays, "
            f"got {image.shape} and {mask.shape}"
        )
    offsets = [int(o) for o in offsets]
    cx, cy = training_center(mask)
    h, w = image.shape
    grid = np.full((len(offsets), len(offsets)), np.nan)
    for j, dy in enumerate(offsets):
        for i, dx in enumerate(offsets):
            x, y = cx + dx, cy + dy
            if not (0 <= x < w and 0 <= y < h):
                continue
            pred = segment(image, (x, y))
            grid[j, i] = dsc(MaskPair(pred, mask))
    return grid
