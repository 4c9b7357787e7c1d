"""Training objective for the recurrent localizer.

Three ingredients, combined per forward trace:

* a detection loss per refinement step: the ground-truth box is assigned to
  the single cheapest token (L1 + overlap + confidence cost, computed on
  values), then that token's box is regressed with a weighted L1/GIoU pair
  while every token's confidence is pushed toward a one-hot target;
* a map loss per refinement step: cross-entropy plus Dice between the token
  aggregation map and the ground-truth box rasterized onto the map grid;
* a segmentation loss on the query view: the same cross-entropy/Dice pair
  between the predicted query map and the object's footprint, block-averaged
  down to map resolution.

The map and segmentation terms enter the total through one shared weight so
they can be switched off together or separately for ablations.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Node

__all__ = [
    "GtBox",
    "LossBreakdown",
    "L1_WEIGHT",
    "GIOU_WEIGHT",
    "CONF_WEIGHT",
    "MAP_WEIGHT",
    "coerce_box",
    "bce_loss",
    "dice_loss",
    "box_mask",
    "downsample_mask",
    "giou",
    "giou_rows",
    "giou_values",
    "match_token",
    "l_det",
    "l_token",
    "l_sam",
    "total_loss",
]

# Matching and regression weights for the detection term.
L1_WEIGHT = 5.0
GIOU_WEIGHT = 2.0
CONF_WEIGHT = 1.0

# Weight on the auxiliary (map + segmentation) terms in the total.
MAP_WEIGHT = 1.0

# Probability floor inside log(): keeps the cross-entropy finite when a
# prediction saturates.
_EPS_LOG = 1e-7

# Additive smoothing in the Dice ratio; makes the empty/empty case exact zero.
_DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class GtBox:
    """Axis-aligned target box in normalized reference coordinates."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not (self.w > 0.0 and self.h > 0.0):
            raise ValueError(f"box size must be positive, got w={self.w} h={self.h}")
        x1, y1, x2, y2 = self.corners()
        if x1 < 0.0 or y1 < 0.0 or x2 > 1.0 or y2 > 1.0:
            raise ValueError(f"box must lie within the unit square, got corners "
                             f"({x1:.4f}, {y1:.4f}, {x2:.4f}, {y2:.4f})")

    def corners(self) -> tuple[float, float, float, float]:
        """(x1, y1, x2, y2) corner form."""
        return (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )

    def as_row(self) -> np.ndarray:
        return np.array([[self.cx, self.cy, self.w, self.h]], dtype=np.float64)


def coerce_box(box) -> GtBox:
    """Accept a GtBox or any (cx, cy, w, h) sequence."""
    if isinstance(box, GtBox):
        return box
    cx, cy, w, h = (float(v) for v in box)
    return GtBox(cx, cy, w, h)


# ------------------------------------------------------------- mask targets


def box_mask(gt: GtBox, h: int, w: int) -> np.ndarray:
    """Rasterize a box onto a ``(1, h, w)`` grid over the unit square.

    A cell counts as inside when its center falls within the closed box, so
    the result is exactly the indicator the map heads are trained against.
    """
    x1, y1, x2, y2 = gt.corners()
    ys = (np.arange(h, dtype=np.float64) + 0.5) / h
    xs = (np.arange(w, dtype=np.float64) + 0.5) / w
    inside_y = (ys >= y1) & (ys <= y2)
    inside_x = (xs >= x1) & (xs <= x2)
    mask = (inside_y[:, None] & inside_x[None, :]).astype(np.float64)
    if not mask.any():
        warnings.warn(f"box {gt} covers no cell center on a {h}x{w} grid",
                      stacklevel=2)
    return mask[None]


def downsample_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Block-average a pixel mask down to ``(h, w)``; sizes must divide."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise nm.ShapeError(f"mask must be 2-D, got {mask.shape}")
    mh, mw = mask.shape
    if mh % h or mw % w:
        raise nm.ShapeError(f"mask {mask.shape} does not tile onto ({h}, {w})")
    return mask.reshape(h, mh // h, w, mw // w).mean(axis=(1, 3))


# ------------------------------------------------------------ pixel losses


def bce_loss(pred: Node, target) -> Node:
    """Mean binary cross-entropy; predictions are clamped away from {0, 1}."""
    t = nm.lift(target)
    if t.shape != pred.shape:
        raise nm.ShapeError(f"target shape {t.shape} != prediction shape {pred.shape}")
    p = nm.clip(pred, _EPS_LOG, 1.0 - _EPS_LOG)
    ce = -(t * nm.log(p) + (1.0 - t) * nm.log(1.0 - p))
    return nm.mean_(ce)


def dice_loss(pred: Node, target) -> Node:
    """Soft Dice loss over all elements: 1 - (2*overlap + s) / (mass + s)."""
    t = nm.lift(target)
    if t.shape != pred.shape:
        raise nm.ShapeError(f"target shape {t.shape} != prediction shape {pred.shape}")
    overlap = nm.sum_(pred * t)
    mass = nm.sum_(pred) + nm.sum_(t)
    return 1.0 - (2.0 * overlap + _DICE_SMOOTH) / (mass + _DICE_SMOOTH)


def _mask_composite(pred: Node, target) -> Node:
    return bce_loss(pred, target) + dice_loss(pred, target)


def l_token(m_o, m_hat: Node) -> Node:
    """Aggregation-map loss: cross-entropy + Dice against the box raster."""
    return _mask_composite(m_hat, m_o)


def l_sam(m_teacher, m_hat: Node) -> Node:
    """Query-view segmentation loss against the (resized) teacher mask.

    Deliberately the same composite as :func:`l_token`; only the supervision
    source differs.
    """
    return _mask_composite(m_hat, m_teacher)


# -------------------------------------------------------------- box overlap


def _corner_split(boxes: Node) -> tuple[Node, Node, Node, Node, Node]:
    """Split (n, 4) center-form rows into corner columns plus the area."""
    cx = nm.narrow(boxes, 1, 0, 1)
    cy = nm.narrow(boxes, 1, 1, 1)
    w = nm.narrow(boxes, 1, 2, 1)
    h = nm.narrow(boxes, 1, 3, 1)
    x1 = cx - 0.5 * w
    y1 = cy - 0.5 * h
    x2 = cx + 0.5 * w
    y2 = cy + 0.5 * h
    return x1, y1, x2, y2, w * h


def giou_rows(boxes: Node, gt: GtBox) -> Node:
    """Generalized IoU of each (n, 4) center-form row against one target.

    Returns an (n, 1) column in [-1, 1]; differentiable through the boxes.
    Predicted widths/heights are assumed positive (the box head guarantees
    this), so union and hull areas stay strictly positive.
    """
    x1, y1, x2, y2, area = _corner_split(boxes)
    gx1, gy1, gx2, gy2 = gt.corners()
    g_area = gt.w * gt.h

    iw = nm.relu(nm.minimum(x2, gx2) - nm.maximum(x1, gx1))
    ih = nm.relu(nm.minimum(y2, gy2) - nm.maximum(y1, gy1))
    inter = iw * ih
    union = area + g_area - inter

    hw = nm.maximum(x2, gx2) - nm.minimum(x1, gx1)
    hh = nm.maximum(y2, gy2) - nm.minimum(y1, gy1)
    hull = hw * hh
    return inter / union - (hull - union) / hull


def giou_values(boxes: np.ndarray, gt: GtBox) -> np.ndarray:
    """Plain-numpy mirror of :func:`giou_rows` for matching and metrics."""
    b = np.asarray(boxes, dtype=np.float64)
    x1 = b[:, 0] - 0.5 * b[:, 2]
    y1 = b[:, 1] - 0.5 * b[:, 3]
    x2 = b[:, 0] + 0.5 * b[:, 2]
    y2 = b[:, 1] + 0.5 * b[:, 3]
    gx1, gy1, gx2, gy2 = gt.corners()

    iw = np.maximum(np.minimum(x2, gx2) - np.maximum(x1, gx1), 0.0)
    ih = np.maximum(np.minimum(y2, gy2) - np.maximum(y1, gy1), 0.0)
    inter = iw * ih
    union = b[:, 2] * b[:, 3] + gt.w * gt.h - inter
    hull = (np.maximum(x2, gx2) - np.minimum(x1, gx1)) * (
        np.maximum(y2, gy2) - np.minimum(y1, gy1)
    )
    return inter / union - (hull - union) / hull


def giou(a, b) -> float:
    """Symmetric scalar generalized IoU of two center-form boxes."""
    a = coerce_box(a)
    b = coerce_box(b)
    return float(giou_values(a.as_row(), b)[0])


# ----------------------------------------------------------- detection loss


def match_token(boxes: np.ndarray, confidence: np.ndarray, gt: GtBox) -> int:
    """Index of the token assigned to the target (first argmin on ties).

    The assignment cost mirrors the regression weights and adds a negative
    log-confidence term so confident, accurate tokens win the match.  Costs
    are computed on detached values; the choice itself is not differentiated.
    """
    b = np.asarray(boxes, dtype=np.float64)
    c = np.asarray(confidence, dtype=np.float64).reshape(-1)
    if b.ndim != 2 or b.shape[1] != 4 or b.shape[0] != c.shape[0]:
        raise nm.ShapeError(f"bad matching shapes {b.shape} / {c.shape}")
    l1 = np.abs(b - gt.as_row()[0]).sum(axis=1)
    overlap = giou_values(b, gt)
    cost = (
        L1_WEIGHT * l1
        + GIOU_WEIGHT * (1.0 - overlap)
        - CONF_WEIGHT * np.log(np.clip(c, _EPS_LOG, 1.0))
    )
    return int(np.argmin(cost))


def l_det(step, gt: GtBox) -> Node:
    """Single-target detection loss over one step's token set.

    ``step`` carries the token boxes (n, 4) and confidences (n, 1).  The
    matched token's box receives the weighted L1 + GIoU regression; all
    confidences receive mean cross-entropy against the one-hot assignment.
    """
    boxes: Node = step.boxes
    confidence: Node = step.confidence
    n = boxes.shape[0]
    j = match_token(boxes.array, confidence.array, gt)

    matched = nm.narrow(boxes, 0, j, 1)
    target = nm.constant(gt.as_row())
    reg_l1 = nm.sum_(nm.abs_(matched - target))
    reg_giou = 1.0 - nm.sum_(giou_rows(matched, gt))

    onehot = np.zeros((n, 1), dtype=np.float64)
    onehot[j, 0] = 1.0
    conf_ce = bce_loss(confidence, onehot)

    return L1_WEIGHT * reg_l1 + GIOU_WEIGHT * reg_giou + CONF_WEIGHT * conf_ce


# ------------------------------------------------------------- composition


@dataclass
class LossBreakdown:
    """Scalar loss node plus per-term values for logging and checks."""

    node: Node
    total: float
    l_det_per_step: list[float]
    l_token_per_step: list[float]
    l_sam: float
    alpha: float

    @property
    def det(self) -> float:
        return float(sum(self.l_det_per_step))

    @property
    def token(self) -> float:
        return float(sum(self.l_token_per_step))


def total_loss(
    trace,
    sample,
    alpha: float = MAP_WEIGHT,
    *,
    include_token: bool = True,
    include_sam: bool = True,
) -> LossBreakdown:
    """Combine per-step detection/map losses and the segmentation loss.

    total = sum_i det_i + alpha * (sum_i token_i + sam)

    ``sample`` provides the ground-truth box and the query-frame object mask
    (full pixel resolution; block-averaged down to the predicted map's grid).
    Every component is evaluated so the breakdown is always complete; the
    ``include_*`` switches only control which terms feed the returned node
    (and therefore the gradients), which is what the ablations toggle.
    """
    gt = coerce_box(sample.gt_box)
    det_nodes = [l_det(s, gt) for s in trace.steps]

    token_nodes = []
    for s in trace.steps:
        _, h, w = s.agg_map.shape
        token_nodes.append(l_token(box_mask(gt, h, w), s.agg_map))

    _, sh, sw = trace.seg_map.shape
    teacher = downsample_mask(np.asarray(sample.oracle_mask), sh, sw)[None]
    sam_node = l_sam(teacher, trace.seg_map)

    node = det_nodes[0]
    for d in det_nodes[1:]:
        node = node + d
    aux: Node | None = None
    if include_token:
        aux = token_nodes[0]
        for t in token_nodes[1:]:
            aux = aux + t
    if include_sam:
        aux = sam_node if aux is None else aux + sam_node
    if aux is not None:
        node = node + alpha * aux

    return LossBreakdown(
        node=node,
        total=node.item(),
        l_det_per_step=[d.item() for d in det_nodes],
        l_token_per_step=[t.item() for t in token_nodes],
        l_sam=sam_node.item(),
        alpha=float(alpha),
    )
