"""Domain types and geometry shared across the package.

Normalized head boxes, gaze targets, Gaussian gaze heatmaps, and the
IoU/GIoU box measures everything else is built on.  All coordinates are
fractions of image width/height so the same annotation applies at any
rendering resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

DEFAULT_HEATMAP_SIZE = 64
DEFAULT_HEATMAP_SIGMA = 3.0


@dataclass(frozen=True)
class HeadBox:
    """Axis-aligned head bounding box in normalized corner coordinates.

    Attributes:
        x_tl, y_tl: top-left corner, each in [0, 1].
        x_br, y_br: bottom-right corner; strictly greater than the
            top-left corner on both axes (zero-area boxes are rejected).
    """

    x_tl: float
    y_tl: float
    x_br: float
    y_br: float

    def __post_init__(self):
        c = (self.x_tl, self.y_tl, self.x_br, self.y_br)
        if not all(np.isfinite(v) for v in c):
            raise ValueError(f"box corners must be finite, got {c}")
        if not (0.0 <= self.x_tl < self.x_br <= 1.0 and 0.0 <= self.y_tl < self.y_br <= 1.0):
            raise ValueError(f"invalid box corners (need 0 <= tl < br <= 1): {c}")

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_tl + self.x_br) / 2.0, (self.y_tl + self.y_br) / 2.0)

    @property
    def width(self) -> float:
        return self.x_br - self.x_tl

    @property
    def height(self) -> float:
        return self.y_br - self.y_tl

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_tl, self.y_tl, self.x_br, self.y_br)


@dataclass(frozen=True)
class GazeTarget:
    """Where a person is looking.

    A normalized point when the target falls inside the frame, or no point
    at all when the person watches something outside of it.
    """

    point: Optional[tuple[float, float]]
    inside: bool

    def __post_init__(self):
        if self.inside:
            if self.point is None:
                raise ValueError("in-frame gaze target requires a point")
            x, y = self.point
            if not (np.isfinite(x) and np.isfinite(y) and 0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise ValueError(f"gaze point must lie in [0, 1]^2, got {self.point}")
        elif self.point is not None:
            raise ValueError("out-of-frame gaze target must not carry a point")


@dataclass
class GazeHeatmap:
    """Dense grid of gaze confidence, every cell in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.size == 0:
            raise ValueError(f"heatmap must be a non-empty 2-d grid, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("heatmap contains non-finite cells")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("heatmap cells must lie in [0, 1]")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class GazeInstance:
    """One person in a scene: head box, gaze target, and an optional cached
    rendering of the ground-truth gaze heatmap."""

    head: HeadBox
    gaze: GazeTarget
    heatmap: Optional[GazeHeatmap] = None


def _intersection_union(a: HeadBox, b: HeadBox) -> tuple[float, float]:
    iw = min(a.x_br, b.x_br) - max(a.x_tl, b.x_tl)
    ih = min(a.y_br, b.y_br) - max(a.y_tl, b.y_tl)
    inter = max(0.0, iw) * max(0.0, ih)
    return inter, a.area + b.area - inter


def box_iou(a: HeadBox, b: HeadBox) -> float:
    """Intersection-over-union of two boxes; 0 when they are disjoint."""
    inter, union = _intersection_union(a, b)
    return inter / union


def box_giou(a: HeadBox, b: HeadBox) -> float:
    """Generalized IoU.

    IoU minus the fraction of the smallest enclosing box not covered by
    the union; 1 only for identical boxes, negative for distant ones,
    always > -1.
    """
    inter, union = _intersection_union(a, b)
    enclose = (max(a.x_br, b.x_br) - min(a.x_tl, b.x_tl)) * (
        max(a.y_br, b.y_br) - min(a.y_tl, b.y_tl)
    )
    return inter / union - (enclose - union) / enclose


def box_center_form(box: HeadBox) -> tuple[float, float, float, float]:
    """(center_x, center_y, width, height) form of a corner box."""
    cx, cy = box.center
    return (cx, cy, box.width, box.height)


def box_from_center_form(cx: float, cy: float, w: float, h: float) -> HeadBox:
    """Inverse of :func:`box_center_form`.

    Rejects (via HeadBox validation) sizes that are non-positive or
    centers whose box would leave the unit square.
    """
    return HeadBox(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


def render_gaze_heatmap(
    target: GazeTarget,
    heatmap_h: int = DEFAULT_HEATMAP_SIZE,
    heatmap_w: int = DEFAULT_HEATMAP_SIZE,
    sigma: float = DEFAULT_HEATMAP_SIGMA,
) -> GazeHeatmap:
    """Render a gaze target as a peak-normalized isotropic Gaussian.

    The Gaussian is centered at the target's position on the output grid
    and evaluated at cell centers; `sigma` is measured in output pixels.
    Out-of-frame targets render as an all-zero grid.

    Args:
        target: the gaze target to render.
        heatmap_h, heatmap_w: output grid size, both >= 1.
        sigma: Gaussian standard deviation in output pixels, > 0.
    """
    if heatmap_h < 1 or heatmap_w < 1:
        raise ValueError(f"heatmap size must be positive, got {heatmap_h}x{heatmap_w}")
    if not (np.isfinite(sigma) and sigma > 0.0):
        raise ValueError(f"sigma must be a positive number, got {sigma}")
    if not target.inside:
        return GazeHeatmap(np.zeros((heatmap_h, heatmap_w)))
    px = target.point[0] * heatmap_w
    py = target.point[1] * heatmap_h
    cols = np.arange(heatmap_w, dtype=np.float64) + 0.5
    rows = np.arange(heatmap_h, dtype=np.float64) + 0.5
    d2 = (cols[None, :] - px) ** 2 + (rows[:, None] - py) ** 2
    g = np.exp(-d2 / (2.0 * sigma * sigma))
    return GazeHeatmap(g / g.max())


def heatmap_argmax(heatmap) -> tuple[float, float]:
    """Normalized center of the heatmap's maximum cell.

    Ties resolve to the first maximum in row-major order.  Accepts a
    GazeHeatmap or a bare 2-d array.
    """
    values = heatmap.values if isinstance(heatmap, GazeHeatmap) else np.asarray(heatmap)
    if values.ndim != 2 or values.size == 0:
        raise ValueError(f"expected a non-empty 2-d grid, got shape {values.shape}")
    h, w = values.shape
    row, col = divmod(int(np.argmax(values)), w)
    return ((col + 0.5) / w, (row + 0.5) / h)


def instance_heatmap(
    inst: GazeInstance,
    heatmap_h: int = DEFAULT_HEATMAP_SIZE,
    heatmap_w: int = DEFAULT_HEATMAP_SIZE,
    sigma: float = DEFAULT_HEATMAP_SIGMA,
) -> GazeHeatmap:
    """The instance's ground-truth heatmap, rendered (and cached) on demand.

    A cached rendering is reused only when its grid size matches.
    """
    hm = inst.heatmap
    if hm is not None and hm.values.shape == (heatmap_h, heatmap_w):
        return hm
    hm = render_gaze_heatmap(inst.gaze, heatmap_h, heatmap_w, sigma)
    inst.heatmap = hm
    return hm
