"""Anchor grid, ground-truth encoding and head-map decoding.

Channel layout: the classification map has one channel per anchor; the
regression map has seven per anchor, ordered (dx, dy, dz, dl, dw, dh, dyaw)
and grouped by anchor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ShapeError
from .geometry import BEVGridSpec, Box3D, box_corners, nms, rotated_iou, warp_indices
from .grid import GridMap

__all__ = [
    "REG_TARGETS",
    "AnchorGrid",
    "AnchorTemplate",
    "Encoded",
    "align_head_maps",
    "box_targets",
    "decode",
    "decode_candidates",
    "encode_gt",
    "footprint_cells",
]

REG_TARGETS = 7


@dataclass(frozen=True)
class AnchorTemplate:
    l: float
    w: float
    h: float
    yaw: float
    z: float

    def __post_init__(self):
        if min(self.l, self.w, self.h) <= 0:
            raise ValueError("anchor dims must be positive")

    @property
    def diagonal(self):
        return math.hypot(self.l, self.w)


@dataclass(frozen=True)
class AnchorGrid:
    """Per-cell anchor templates over a BEV grid.

    With ``wrap_yaw`` the yaw target is folded into [-pi/2, pi/2), which
    describes the same footprint; decoded yaw then matches the input only
    modulo pi.  Without it the target is the raw difference.
    """

    grid: BEVGridSpec
    templates: tuple
    wrap_yaw: bool = False

    def __post_init__(self):
        if len(self.templates) < 1:
            raise ValueError("need at least one anchor template")
        object.__setattr__(self, "templates", tuple(self.templates))

    @classmethod
    def default(cls, grid, l=4.5, w=2.0, h=1.6, z=0.8, wrap_yaw=False):
        """Two vehicle anchors per cell, yaw 0 and pi/2."""
        return cls(grid, (AnchorTemplate(l, w, h, 0.0, z), AnchorTemplate(l, w, h, math.pi / 2, z)), wrap_yaw)

    @property
    def num_anchors(self):
        return len(self.templates)

    @property
    def cls_channels(self):
        return self.num_anchors

    @property
    def reg_channels(self):
        return REG_TARGETS * self.num_anchors

    @property
    def head_channels(self):
        return self.cls_channels + self.reg_channels

    def template_arrays(self):
        t = self.templates
        return {k: np.array([getattr(a, k) for a in t]) for k in ("l", "w", "h", "yaw", "z")}

    def best_anchor(self, box):
        """Index of the template with the highest BEV IoU at the box center."""
        ious = [
            rotated_iou(box, Box3D(box.x, box.y, a.z, a.l, a.w, a.h, a.yaw)) for a in self.templates
        ]
        return int(np.argmax(ious))


class Encoded(NamedTuple):
    cls: GridMap
    reg: GridMap
    reg_mask: np.ndarray
    skipped: int


def wrap_half_turn(theta):
    """Fold an angle into [-pi/2, pi/2)."""
    return np.mod(theta + math.pi / 2, math.pi) - math.pi / 2


def box_targets(box, template, cx, cy, wrap_yaw=False):
    """Regression vector of ``box`` against ``template`` at cell center (cx, cy)."""
    d = template.diagonal
    dyaw = box.yaw - template.yaw
    return (
        (box.x - cx) / d,
        (box.y - cy) / d,
        (box.z - template.z) / template.h,
        math.log(box.l / template.l),
        math.log(box.w / template.w),
        math.log(box.h / template.h),
        float(wrap_half_turn(dyaw)) if wrap_yaw else dyaw,
    )


def footprint_cells(box, grid):
    """(rows, cols) of cells whose centers fall inside the box footprint."""
    corners = box_corners(box)
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    r0, c0 = grid.cell_of(lo[0], lo[1])
    r1, c1 = grid.cell_of(hi[0], hi[1])
    r0, c0 = max(int(r0), 0), max(int(c0), 0)
    r1, c1 = min(int(r1), grid.height - 1), min(int(c1), grid.width - 1)
    if r1 < r0 or c1 < c0:
        return np.empty(0, int), np.empty(0, int)
    rows, cols = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
    xs = grid.x_min + (cols + 0.5) * grid.cell
    ys = grid.y_min + (rows + 0.5) * grid.cell
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx, dy = xs - box.x, ys - box.y
    u, v = c * dx + s * dy, -s * dx + c * dy
    inside = (np.abs(u) <= box.l / 2) & (np.abs(v) <= box.w / 2)
    return rows[inside], cols[inside]


def encode_gt(boxes, anchors):
    """Encode ground-truth boxes into head maps.

    The classification channel of each box's best anchor is 1 at the cell
    holding the box center.  Regression targets for that anchor are written
    at every cell of the box footprint, each relative to its own cell, so
    offsets grow toward the object's edges.  Boxes whose center is outside
    the grid are skipped and counted in ``skipped``.
    """
    grid = anchors.grid
    H, W, A = grid.height, grid.width, anchors.num_anchors
    cls = np.zeros((A, H, W))
    reg = np.zeros((REG_TARGETS * A, H, W))
    mask = np.zeros((REG_TARGETS * A, H, W), dtype=bool)
    placed = []
    skipped = 0
    for box in boxes:
        if not grid.contains(box.x, box.y):
            skipped += 1
            continue
        placed.append((box, anchors.best_anchor(box)))

    def write(box, a, r, c):
        cx = grid.x_min + (c + 0.5) * grid.cell
        cy = grid.y_min + (r + 0.5) * grid.cell
        sl = slice(REG_TARGETS * a, REG_TARGETS * (a + 1))
        reg[sl, r, c] = box_targets(box, anchors.templates[a], cx, cy, anchors.wrap_yaw)
        mask[sl, r, c] = True

    for box, a in placed:
        rows, cols = footprint_cells(box, grid)
        for r, c in zip(rows.tolist(), cols.tolist()):
            write(box, a, r, c)
    # center cells last so a neighbour's footprint never overwrites them
    for box, a in placed:
        r, c = (int(i) for i in grid.cell_of(box.x, box.y))
        write(box, a, r, c)
        cls[a, r, c] = 1.0
    full = np.ones((H, W), dtype=bool)
    return Encoded(GridMap(cls, full), GridMap(reg, full), mask, skipped)


def _check_shapes(cls, reg, anchors):
    A = anchors.num_anchors
    grid_shape = anchors.grid.shape
    if cls.channels != A or reg.channels != REG_TARGETS * A:
        raise ShapeError(
            f"expected {A} classification and {REG_TARGETS * A} regression channels, "
            f"got {cls.channels} and {reg.channels}"
        )
    if (cls.height, cls.width) != grid_shape or (reg.height, reg.width) != grid_shape:
        raise ShapeError(f"head maps must be {grid_shape}")


def decode_candidates(cls, reg, anchors, score_threshold):
    """All boxes with score >= threshold on valid cells, before NMS."""
    _check_shapes(cls, reg, anchors)
    grid = anchors.grid
    t = anchors.template_arrays()
    scores = np.where(cls.validity[None], cls.values, -np.inf)
    a_idx, rows, cols = np.nonzero(scores >= score_threshold)
    if a_idx.size == 0:
        return []
    base = REG_TARGETS * a_idx
    d = np.stack([reg.values[base + k, rows, cols] for k in range(REG_TARGETS)])
    diag = np.hypot(t["l"], t["w"])[a_idx]
    cx = grid.x_min + (cols + 0.5) * grid.cell
    cy = grid.y_min + (rows + 0.5) * grid.cell
    x = cx + d[0] * diag
    y = cy + d[1] * diag
    z = t["z"][a_idx] + d[2] * t["h"][a_idx]
    # clamp log-size offsets so exp cannot overflow on garbage input
    l = t["l"][a_idx] * np.exp(np.clip(d[3], -20, 20))
    w = t["w"][a_idx] * np.exp(np.clip(d[4], -20, 20))
    h = t["h"][a_idx] * np.exp(np.clip(d[5], -20, 20))
    yaw = t["yaw"][a_idx] + d[6]
    s = np.clip(cls.values[a_idx, rows, cols], 0.0, 1.0)
    return [
        Box3D(*vals)
        for vals in zip(x.tolist(), y.tolist(), z.tolist(), l.tolist(), w.tolist(), h.tolist(), yaw.tolist(), s.tolist())
    ]


def decode(cls, reg, anchors, score_threshold, nms_iou):
    """Boxes scoring at least ``score_threshold``, deduplicated by NMS."""
    return nms(decode_candidates(cls, reg, anchors, score_threshold), nms_iou)


def _anchor_permutation(anchors, yaw_delta):
    """Map source anchor index -> destination anchor index after rotating by ``yaw_delta``."""
    yaws = [a.yaw for a in anchors.templates]

    def mod_pi_dist(a, b):
        d = math.remainder(a - b, math.pi)
        return abs(d)

    perm = [int(np.argmin([mod_pi_dist(ys + yaw_delta, yd) for yd in yaws])) for ys in yaws]
    if sorted(perm) != list(range(len(yaws))):
        return list(range(len(yaws)))
    return perm


def _best_template(yaws, yaw):
    return int(np.argmin([abs(math.remainder(yaw - t, math.pi)) for t in yaws]))


def align_head_maps(cls, reg, src_pose, dst_pose, anchors):
    """Bring a sender's head maps into the ego frame.

    Both maps are resampled with the same nearest-neighbour lookup as
    :func:`headfuse.geometry.warp_map`.  Each regression vector is decoded
    in the sender frame, moved rigidly and re-encoded against the ego cell it
    lands in, so offsets mean the same thing on both sides.  Anchor channels
    follow the decoded box: content moves to the ego template closest in yaw.
    Cells whose source regression group is all zero (no box there) stay zero
    and take the anchor permutation implied by the pose rotation alone.
    """
    _check_shapes(cls, reg, anchors)
    grid = anchors.grid
    row, col, inside = warp_indices(src_pose, dst_pose, grid)
    valid = inside & cls.validity[row, col] & reg.validity[row, col]
    yaw_delta = src_pose.yaw - dst_pose.yaw
    yaws = [t.yaw for t in anchors.templates]
    perm = _anchor_permutation(anchors, yaw_delta)

    xs, ys = grid.cell_centers()
    src_cx, src_cy = xs[row, col], ys[row, col]
    A = anchors.num_anchors
    H, W = grid.shape
    src_cls = np.where(valid[None], cls.values[:, row, col], 0.0)  # (A, H, W) in dst layout
    enc = np.zeros((A, REG_TARGETS, H, W))
    box_yaw = np.zeros((A, H, W))
    has_box = np.zeros((A, H, W), dtype=bool)
    for a_src in range(A):
        ts = anchors.templates[a_src]
        d = reg.values[REG_TARGETS * a_src : REG_TARGETS * (a_src + 1), row, col]
        has_box[a_src] = valid & np.any(d != 0.0, axis=0)
        bx = src_cx + d[0] * ts.diagonal
        by = src_cy + d[1] * ts.diagonal
        wx, wy = src_pose.to_world(bx, by)
        lx, ly = dst_pose.to_local(wx, wy)
        box_yaw[a_src] = ts.yaw + d[6] + yaw_delta
        # dims and height are stored relative to the destination template later
        enc[a_src] = np.stack([lx, ly, ts.z + d[2] * ts.h, np.log(ts.l) + d[3], np.log(ts.w) + d[4], np.log(ts.h) + d[5], box_yaw[a_src]])

    # destination channel per (source anchor, cell)
    dest = np.broadcast_to(np.array(perm)[:, None, None], (A, H, W)).copy()
    rr, cc = np.nonzero(has_box.any(axis=0))
    for r, c in zip(rr.tolist(), cc.tolist()):
        order = sorted(range(A), key=lambda a: (not has_box[a, r, c], -src_cls[a, r, c], a))
        free = list(range(A))
        for a in order:
            want = _best_template(yaws, box_yaw[a, r, c]) if has_box[a, r, c] else perm[a]
            pick = want if want in free else free[0]
            free.remove(pick)
            dest[a, r, c] = pick

    out_cls = np.zeros((A, H, W))
    out_reg = np.zeros((REG_TARGETS * A, H, W))
    for a_src in range(A):
        for a_dst in range(A):
            sel = (dest[a_src] == a_dst) & valid
            if not sel.any():
                continue
            td = anchors.templates[a_dst]
            e = enc[a_src]
            dyaw = wrap_half_turn(e[6] - td.yaw) if anchors.wrap_yaw else e[6] - td.yaw
            vals = np.stack(
                [
                    (e[0] - xs) / td.diagonal,
                    (e[1] - ys) / td.diagonal,
                    (e[2] - td.z) / td.h,
                    e[3] - math.log(td.l),
                    e[4] - math.log(td.w),
                    e[5] - math.log(td.h),
                    dyaw,
                ]
            )
            vals = np.where(has_box[a_src][None], vals, 0.0)
            block = out_reg[REG_TARGETS * a_dst : REG_TARGETS * (a_dst + 1)]
            block[:, sel] = vals[:, sel]
            out_cls[a_dst][sel] = src_cls[a_src][sel]
    return GridMap(out_cls, valid), GridMap(out_reg, valid)
