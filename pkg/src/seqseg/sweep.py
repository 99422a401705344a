"""Click-sweep aggregation and report files.

The offset-grid DSC matrix itself comes from metrics.click_sweep; this
module wraps it for Segmenter objects, averages matrices across slices,
and reads/writes the CSV-plus-heatmap report emitted by the sweep CLI.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .metrics import click_sweep


@dataclass(frozen=True)
class SweepResult:
    """DSC matrix over click offsets.

    ``matrix[iy, ix]`` is the DSC percent for a click displaced by
    (offsets_x[ix], offsets_y[iy]) from the mask centroid; NaN marks a
    cell whose click fell outside the slice.
    """

    offsets_x: tuple
    offsets_y: tuple
    matrix: np.ndarray

    def cell(self, dx, dy):
        return float(
            self.matrix[self.offsets_y.index(dy), self.offsets_x.index(dx)]
        )

    def save_csv(self, path):
        """Matrix with a header row of dx values and a left column of dy."""
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["dy\\dx"] + [str(dx) for dx in self.offsets_x])
            for iy, dy in enumerate(self.offsets_y):
                writer.writerow([str(dy)] + [repr(float(v)) for v in self.matrix[iy]])

    def save_heatmap(self, path):
        """Grayscale DSC heatmap with offset tick labels."""
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 4.2))
        im = ax.imshow(self.matrix, cmap="gray", vmin=0.0, vmax=100.0)
        ax.set_xticks(range(len(self.offsets_x)), [str(v) for v in self.offsets_x])
        ax.set_yticks(range(len(self.offsets_y)), [str(v) for v in self.offsets_y])
        ax.set_xlabel("click offset dx (px)")
        ax.set_ylabel("click offset dy (px)")
        ax.set_title("DSC vs click offset")
        fig.colorbar(im, ax=ax, label="DSC (%)")
        fig.tight_layout()
        fig.savefig(path, dpi=110)
        plt.close(fig)


def sweep_slice(image, mask, segmenter, offsets):
    """Square offset-grid sweep of one slice with a Segmenter."""
    offsets = tuple(int(o) for o in offsets)
    if not offsets:
        raise ShapeError("sweep_slice: offset grid is empty")
    matrix = click_sweep(
        image, mask, lambda im, click: segmenter.segment(im, click)[0], offsets
    )
    return SweepResult(offsets, offsets, matrix)


def average_sweeps(results):
    """Cell-wise mean of sweeps sharing one offset grid, ignoring NaNs.

    A cell is NaN in the output only if it is NaN in every input.
    """
    results = list(results)
    if not results:
        raise ShapeError("average_sweeps: no results")
    first = results[0]
    for r in results[1:]:
        if r.offsets_x != first.offsets_x or r.offsets_y != first.offsets_y:
            raise ShapeError("average_sweeps: offset grids differ")
    stack = np.stack([r.matrix for r in results])
    with warnings.catch_warnings():
        # an all-NaN cell yields NaN, which is exactly the contract
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(stack, axis=0)
    return SweepResult(first.offsets_x, first.offsets_y, mean)


def load_csv(path):
    """Parse a file written by SweepResult.save_csv."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    offsets_x = tuple(int(v) for v in rows[0][1:])
    offsets_y = tuple(int(r[0]) for r in rows[1:])
    matrix = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return SweepResult(offsets_x, offsets_y, matrix)
