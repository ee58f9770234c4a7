"""Poses, BEV lattices, map warping, rotated-box IoU and greedy NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError
from .grid import GridMap

__all__ = [
    "BEVGridSpec",
    "Box3D",
    "Pose2D",
    "box_corners",
    "clip_polygon",
    "nms",
    "normalize_angle",
    "polygon_area",
    "rotated_iou",
    "warp_indices",
    "warp_map",
]

EDGE_EPS = 1e-9


def normalize_angle(theta):
    """Wrap an angle into (-pi, pi]."""
    t = math.remainder(theta, 2.0 * math.pi)
    return math.pi if t <= -math.pi else t


@dataclass(frozen=True)
class Pose2D:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.yaw)):
            raise ValueError("pose components must be finite")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    def to_world(self, px, py):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        px, py = np.asarray(px, dtype=float), np.asarray(py, dtype=float)
        return c * px - s * py + self.x, s * px + c * py + self.y

    def to_local(self, wx, wy):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx, dy = np.asarray(wx, dtype=float) - self.x, np.asarray(wy, dtype=float) - self.y
        return c * dx + s * dy, -s * dx + c * dy

    def relative_to(self, other):
        """This pose expressed in the frame of ``other``."""
        x, y = other.to_local(self.x, self.y)
        return Pose2D(float(x), float(y), self.yaw - other.yaw)


@dataclass(frozen=True)
class BEVGridSpec:
    """Axis-aligned lattice in an agent's local frame.  Row index follows y."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    cell: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min and self.cell > 0):
            raise ShapeError("grid extent must be non-empty and cell size positive")
        for span in (self.x_max - self.x_min, self.y_max - self.y_min):
            n = span / self.cell
            if abs(n - round(n)) > 1e-9:
                raise ShapeError(f"extent {span} is not a whole number of {self.cell} m cells")

    @property
    def height(self):
        return round((self.y_max - self.y_min) / self.cell)

    @property
    def width(self):
        return round((self.x_max - self.x_min) / self.cell)

    @property
    def shape(self):
        return self.height, self.width

    def cell_centers(self):
        """(xs, ys) arrays of shape (H, W) with each cell's center."""
        xs = self.x_min + (np.arange(self.width) + 0.5) * self.cell
        ys = self.y_min + (np.arange(self.height) + 0.5) * self.cell
        return np.meshgrid(xs, ys)

    def cell_of(self, x, y):
        """(row, col) integer index arrays; may fall outside the grid."""
        col = np.floor((np.asarray(x, dtype=float) - self.x_min) / self.cell).astype(int)
        row = np.floor((np.asarray(y, dtype=float) - self.y_min) / self.cell).astype(int)
        return row, col

    def contains(self, x, y):
        return (self.x_min <= x < self.x_max) and (self.y_min <= y < self.y_max)

    def as_dict(self):
        return {"x_min": self.x_min, "x_max": self.x_max, "y_min": self.y_min, "y_max": self.y_max, "cell": self.cell}


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float
    score: float = 1.0

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.l, self.w, self.h, self.yaw, self.score)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("box fields must be finite")
        if min(self.l, self.w, self.h) <= 0:
            raise ValueError(f"box dims must be positive, got {(self.l, self.w, self.h)}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        for f, v in zip(("x", "y", "z", "l", "w", "h", "yaw", "score"), vals):
            object.__setattr__(self, f, float(v))

    def as_tuple(self):
        return (self.x, self.y, self.z, self.l, self.w, self.h, self.yaw, self.score)

    def with_score(self, score):
        return replace(self, score=float(score))

    def transformed(self, src_pose, dst_pose):
        """Re-express a box given in ``src_pose``'s frame in ``dst_pose``'s frame."""
        wx, wy = src_pose.to_world(self.x, self.y)
        lx, ly = dst_pose.to_local(wx, wy)
        yaw = normalize_angle(self.yaw + src_pose.yaw - dst_pose.yaw)
        return replace(self, x=float(lx), y=float(ly), yaw=yaw)


# -- warping ---------------------------------------------------------------


def warp_indices(src_pose, dst_pose, grid):
    """Nearest-neighbour source (row, col) per destination cell and an in-range mask."""
    xs, ys = grid.cell_centers()
    wx, wy = dst_pose.to_world(xs, ys)
    sx, sy = src_pose.to_local(wx, wy)
    row, col = grid.cell_of(sx, sy)
    inside = (row >= 0) & (row < grid.height) & (col >= 0) & (col < grid.width)
    return np.where(inside, row, 0), np.where(inside, col, 0), inside


def warp_map(src, src_pose, dst_pose, grid):
    """Resample ``src`` (in ``src_pose``'s frame) into ``dst_pose``'s frame.

    Cells whose preimage is off-grid or on an invalid source cell become 0
    and invalid.
    """
    if (src.height, src.width) != grid.shape:
        raise ShapeError(f"map is {src.height}x{src.width}, grid is {grid.shape}")
    row, col, inside = warp_indices(src_pose, dst_pose, grid)
    valid = inside & src.validity[row, col]
    values = np.where(valid[None], src.values[:, row, col], 0.0)
    return GridMap(values, valid)


# -- rotated IoU -----------------------------------------------------------


def box_corners(box):
    """BEV footprint corners (4, 2), counter-clockwise."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = box.l / 2.0, box.w / 2.0
    local = ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    return np.array([(box.x + c * a - s * b, box.y + s * a + c * b) for a, b in local])


def polygon_area(poly):
    """Signed-area magnitude via the shoelace formula."""
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject, clipper):
    """Sutherland-Hodgman clip of ``subject`` by convex CCW ``clipper``."""
    output = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p, ax=ax, ay=ay, ex=ex, ey=ey):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, output = output, []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= -EDGE_EPS:
                if s_prev < -EDGE_EPS:
                    output.append(_intersect(prev, cur, s_prev, s_cur))
                output.append(cur)
            elif s_prev >= -EDGE_EPS:
                output.append(_intersect(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return output


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def _may_overlap(a, b):
    reach = 0.5 * (math.hypot(a.l, a.w) + math.hypot(b.l, b.w))
    return (a.x - b.x) ** 2 + (a.y - b.y) ** 2 <= reach * reach


def rotated_iou(a, b):
    """BEV IoU of two yaw-oriented footprints (height ignored)."""
    area_a, area_b = a.l * a.w, b.l * b.w
    if area_a <= 0 or area_b <= 0 or not _may_overlap(a, b):
        return 0.0
    inter = polygon_area(clip_polygon(box_corners(a), box_corners(b)))
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def nms(boxes, iou_threshold):
    """Greedy suppression by descending score.

    Ties in score are broken by ascending (x, y, yaw) so the result does not
    depend on input order.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold {iou_threshold} outside [0, 1]")
    ordered = sorted(boxes, key=lambda b: (-b.score, b.x, b.y, b.yaw))
    kept = []
    for box in ordered:
        if all(rotated_iou(box, k) < iou_threshold for k in kept):
            kept.append(box)
    return kept
