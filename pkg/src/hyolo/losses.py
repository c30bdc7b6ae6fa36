"""Hierarchy-aware detection loss.

Per level ``l`` the classification term is ``w_cls * BCE`` and, for ``l >= 1``,
``w_cls * (BCE + alpha * sum_i (1 - child_i) * conf_i)`` where ``child_i`` says
whether class ``i`` is a child of the chosen parent at level ``l - 1`` and
``conf_i = sigmoid(logit_i)``.  The regression term ``w_box * CIoU + w_dfl * DFL``
comes from the single box branch shared by all levels.  Level losses are
averaged (or summed) into the total.

CIoU and DFL follow their usual published definitions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (ConfigError, DegenerateBox, EmptyLevels, IndexOutOfRange, LevelOutOfRange,
                     ShapeMismatch, TargetOutOfRange)
from .taxonomy import Taxonomy
from .tensor import (
    Tensor,
    _make,
    _sigmoid_np,
    as_tensor,
    atan,
    clamp_min,
    concat,
    log_softmax,
    maximum,
    minimum,
    no_grad,
    sigmoid,
    softmax,
)

CIOU_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    w_box: float = 7.5
    w_dfl: float = 1.5
    w_cls: float = 2.0
    alpha: float = 0.0
    level_agg: str = "mean"
    parent_source: str = "predicted"
    reg_max: int = 8

    def __post_init__(self):
        for key in ("w_box", "w_dfl", "w_cls", "alpha"):
            if not getattr(self, key) >= 0:
                raise ConfigError(f"{key} must be >= 0, got {getattr(self, key)}")
        if self.level_agg not in ("mean", "sum"):
            raise ConfigError(f"level_agg must be 'mean' or 'sum', got {self.level_agg!r}")
        if self.parent_source not in ("predicted", "ground_truth"):
            raise ConfigError(f"parent_source must be 'predicted' or 'ground_truth', got {self.parent_source!r}")
        if self.reg_max < 2:
            raise ConfigError(f"reg_max must be >= 2, got {self.reg_max}")


@dataclass
class LevelLossBreakdown:
    """Loss terms of one level; ``cls_total`` and ``reg_total`` keep the graph."""

    level: int
    bce: Tensor
    penalty: Tensor
    ciou: Tensor
    dfl: Tensor
    cls_total: Tensor
    reg_total: Tensor

    def values(self) -> dict[str, float]:
        return {
            "bce": self.bce.item(),
            "penalty": self.penalty.item(),
            "ciou": self.ciou.item(),
            "dfl": self.dfl.item(),
            "cls_total": self.cls_total.item(),
            "reg_total": self.reg_total.item(),
            "total": self.cls_total.item() + self.reg_total.item(),
        }


# -- elementary losses ------------------------------------------------------

def bce_with_logits(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy on logits, ``max(z,0) - z*t + log1p(exp(-|z|))`` per element."""
    logits = as_tensor(logits)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeMismatch(f"bce_with_logits: logits {logits.shape} vs targets {t.shape}")
    z = logits.data
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    if reduction == "mean":
        scale = 1.0 / max(z.size, 1)
    elif reduction == "sum":
        scale = 1.0
    else:
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    value = np.asarray(per.sum() * scale)

    def bw(g):
        return ((_sigmoid_np(z) - t) * (g * scale),)

    return _make(value, (logits,), bw, "bce_with_logits")


def _box_columns(box) -> list[Tensor]:
    b = as_tensor(box)
    if b.ndim == 1:
        if b.shape != (4,):
            raise ShapeMismatch(f"box must have 4 values, got {b.shape}")
        b = b.reshape(1, 4)
    if b.ndim != 2 or b.shape[1] != 4:
        raise ShapeMismatch(f"boxes must be (N, 4), got {b.shape}")
    return [b[:, i] for i in range(4)]


def ciou_per_box(pred_box, gt_box) -> Tensor:
    """CIoU loss per row of ``(N, 4)`` ``cx, cy, w, h`` boxes; differentiable w.r.t. ``pred_box``."""
    px, py, pw, ph = _box_columns(pred_box)
    gx, gy, gw, gh = _box_columns(gt_box)
    if px.shape != gx.shape:
        raise ShapeMismatch(f"ciou: {px.shape[0]} predicted vs {gx.shape[0]} ground-truth boxes")
    if (pw.data <= 0).any() or (ph.data <= 0).any() or (gw.data <= 0).any() or (gh.data <= 0).any():
        raise DegenerateBox("box width and height must be positive")
    p_x1, p_x2 = px - pw * 0.5, px + pw * 0.5
    p_y1, p_y2 = py - ph * 0.5, py + ph * 0.5
    g_x1, g_x2 = gx - gw * 0.5, gx + gw * 0.5
    g_y1, g_y2 = gy - gh * 0.5, gy + gh * 0.5
    iw = clamp_min(minimum(p_x2, g_x2) - maximum(p_x1, g_x1), 0.0)
    ih = clamp_min(minimum(p_y2, g_y2) - maximum(p_y1, g_y1), 0.0)
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    iou = inter / union
    cw = maximum(p_x2, g_x2) - minimum(p_x1, g_x1)
    ch = maximum(p_y2, g_y2) - minimum(p_y1, g_y1)
    c2 = cw * cw + ch * ch + CIOU_EPS
    rho2 = (px - gx) * (px - gx) + (py - gy) * (py - gy)
    dv = atan(gw / gh) - atan(pw / ph)
    v = dv * dv * (4.0 / math.pi ** 2)
    alpha_v = v / (v - iou + (1.0 + CIOU_EPS))
    return 1.0 - iou + rho2 / c2 + alpha_v * v


def ciou_loss(pred_box, gt_box) -> Tensor:
    """Mean CIoU loss; a single ``(4,)`` box pair gives that pair's loss."""
    return ciou_per_box(pred_box, gt_box).mean()


def dfl_loss(side_logits, target_offset) -> Tensor:
    """Distribution focal loss over ``reg_max`` bins, averaged over rows.

    ``side_logits`` is ``(R,)`` or ``(N, R)``; ``target_offset`` a scalar or ``(N,)``
    with values in ``[0, R - 1]``.
    """
    logits = as_tensor(side_logits)
    if logits.ndim == 1:
        logits = logits.reshape(1, logits.shape[0])
    n, bins = logits.shape
    y = np.asarray(target_offset, dtype=np.float64).reshape(-1)
    if y.shape[0] != n:
        raise ShapeMismatch(f"dfl: {n} rows of logits vs {y.shape[0]} targets")
    if (y < 0).any() or (y > bins - 1).any():
        raise TargetOutOfRange(f"dfl target outside [0, {bins - 1}]: {y.min()}..{y.max()}")
    lo = np.floor(y).astype(np.int64)
    hi = lo + 1
    w_lo = hi - y
    w_hi = y - lo
    top = hi >= bins  # integer target on the last bin: one-sided
    hi = np.where(top, bins - 1, hi)
    w_hi = np.where(top, 0.0, w_hi)
    logp = log_softmax(logits, axis=-1)
    rows = np.arange(n)
    picked = logp[rows, lo] * Tensor(w_lo) + logp[rows, hi] * Tensor(w_hi)
    return -(picked.mean())


# -- classification per level ----------------------------------------------

def hierarchy_penalty(conf: Tensor, parents: Sequence[int], level: int, tax: Taxonomy,
                      normalizer: float | None = None) -> Tensor:
    """Sum of confidences of classes that are not children of each row's parent.

    ``conf`` is ``(N, S_level)``.  Rows are averaged, or summed and divided by
    ``normalizer`` when given.
    """
    conf = as_tensor(conf)
    if conf.ndim == 1:
        conf = conf.reshape(1, conf.shape[0])
    parents = np.asarray(parents, dtype=np.int64).reshape(-1)
    if level < 1 or level >= tax.depth:
        raise LevelOutOfRange(f"penalty needs 1 <= level < {tax.depth}, got {level}")
    mask = tax.child_mask[level]
    if conf.shape != (parents.shape[0], mask.shape[1]):
        raise ShapeMismatch(f"penalty: conf {conf.shape} vs {parents.shape[0]} parents x {mask.shape[1]} classes")
    if parents.size and ((parents < 0).any() or (parents >= mask.shape[0]).any()):
        raise IndexOutOfRange(f"parent index out of range at level {level - 1}")
    violating = 1.0 - mask[parents].astype(np.float64)
    total = (conf * Tensor(violating)).sum()
    denom = normalizer if normalizer is not None else max(parents.shape[0], 1)
    return total / float(denom)


def cls_loss_level0(logits, targets, cfg: LossConfig, normalizer: float | None = None) -> Tensor:
    """``w_cls * BCE``; level 0 has no parent so no penalty."""
    return cfg.w_cls * _bce(logits, targets, normalizer)


def _bce(logits, targets, normalizer):
    if normalizer is None:
        return bce_with_logits(logits, targets, "mean")
    return bce_with_logits(logits, targets, "sum") / float(normalizer)


def cls_loss_level(
    level: int,
    logits,
    targets,
    parent_class_prev,
    tax: Taxonomy,
    cfg: LossConfig,
    rows: np.ndarray | None = None,
    normalizer: float | None = None,
) -> tuple[Tensor, Tensor]:
    """Classification loss at ``level`` and the penalty term that went into it.

    ``logits``/``targets`` are ``(S,)`` or ``(N, S)``.  The penalty is taken over
    ``rows`` (all rows by default), each paired with an entry of
    ``parent_class_prev``.  Level 0, or ``alpha == 0``, reduces to ``w_cls * BCE``;
    the penalty is still returned for logging.
    """
    loss, _, penalty = _cls_terms(level, logits, targets, parent_class_prev, tax, cfg, rows, normalizer)
    return loss, penalty


def _cls_terms(level, logits, targets, parents, tax, cfg, rows, normalizer):
    logits = as_tensor(logits)
    if logits.ndim == 1:
        logits = logits.reshape(1, logits.shape[0])
        targets = np.asarray(targets, dtype=np.float64).reshape(1, -1)
    bce = _bce(logits, targets, normalizer)
    if level == 0:
        return cfg.w_cls * bce, bce, Tensor(0.0)
    sel = logits if rows is None else logits[np.asarray(rows, dtype=np.int64)]
    penalty = hierarchy_penalty(sigmoid(sel), parents, level, tax, normalizer)
    if cfg.alpha == 0:
        return cfg.w_cls * bce, bce, penalty
    return cfg.w_cls * (bce + cfg.alpha * penalty), bce, penalty


def total_loss(breakdowns: Sequence[LevelLossBreakdown], cfg: LossConfig) -> Tensor:
    if not breakdowns:
        raise EmptyLevels("total_loss needs at least one level")
    per_level = concat([(b.reg_total + b.cls_total).reshape(1) for b in breakdowns])
    return per_level.mean() if cfg.level_agg == "mean" else per_level.sum()


# -- detection composition --------------------------------------------------

@dataclass
class AssignedTargets:
    """Ground truth mapped onto grid cells (one box per cell, centre-cell rule)."""

    rows: np.ndarray        # flat cell index b*h*w + y*w + x, shape (n,)
    paths: np.ndarray       # per-level class indices, (n, L)
    boxes: np.ndarray       # normalized cx, cy, w, h, (n, 4)
    ltrb: np.ndarray        # distances to box sides in stride units, clipped for DFL, (n, 4)
    anchors: np.ndarray     # cell centres in pixels, (n, 2)
    grid: tuple[int, int, int]
    stride: int
    image_size: tuple[int, int]

    @property
    def n(self) -> int:
        return int(self.rows.shape[0])


def assign_targets(labels_per_image, grid_hw: tuple[int, int], stride: int, reg_max: int,
                   neighbors: bool = False) -> AssignedTargets:
    """Assign every box to the cell containing its centre.

    With ``neighbors`` the box also claims the horizontally and vertically
    adjacent cells closest to its centre, provided their anchor lies inside
    the box.  A centre claim always beats a neighbour claim; among claims of
    the same kind the smallest box wins (ties: first listed).
    ``labels_per_image`` holds sequences of ``(path, (cx, cy, w, h))`` with
    normalized coordinates.
    """
    gh, gw = grid_hw
    img_h, img_w = gh * stride, gw * stride
    chosen: dict[int, tuple[int, float, int, tuple, tuple]] = {}

    def claim(b, row, col, rank, k, path, box):
        flat = (b * gh + row) * gw + col
        key = (rank, box[2] * box[3], k)
        if flat not in chosen or key < chosen[flat][:3]:
            chosen[flat] = key + (tuple(path), tuple(box))

    for b, labels in enumerate(labels_per_image):
        for k, (path, box) in enumerate(labels):
            cx, cy, w, h = box
            x, y = cx * img_w, cy * img_h
            col = min(int(x // stride), gw - 1)
            row = min(int(y // stride), gh - 1)
            claim(b, row, col, 0, k, path, box)
            if not neighbors:
                continue
            dc = -1 if x - col * stride < stride / 2 else 1
            dr = -1 if y - row * stride < stride / 2 else 1
            for r, c in ((row, col + dc), (row + dr, col)):
                if not (0 <= r < gh and 0 <= c < gw):
                    continue
                ax, ay = (c + 0.5) * stride, (r + 0.5) * stride
                if abs(ax - x) < w * img_w / 2 and abs(ay - y) < h * img_h / 2:
                    claim(b, r, c, 1, k, path, box)
    rows = np.array(sorted(chosen), dtype=np.int64)
    n = rows.shape[0]
    depth = len(next(iter(chosen.values()))[3]) if n else 0
    paths = np.array([chosen[r][3] for r in rows], dtype=np.int64).reshape(n, depth)
    boxes = np.array([chosen[r][4] for r in rows], dtype=np.float64).reshape(n, 4)
    cell = rows % (gh * gw)
    anchors = np.stack([(cell % gw + 0.5) * stride, (cell // gw + 0.5) * stride], axis=1).astype(np.float64)
    px = boxes * np.array([img_w, img_h, img_w, img_h])
    sides = np.stack([
        anchors[:, 0] - (px[:, 0] - px[:, 2] / 2),
        anchors[:, 1] - (px[:, 1] - px[:, 3] / 2),
        (px[:, 0] + px[:, 2] / 2) - anchors[:, 0],
        (px[:, 1] + px[:, 3] / 2) - anchors[:, 1],
    ], axis=1) / stride if n else np.zeros((0, 4))
    ltrb = np.clip(sides, 0.0, reg_max - 1 - 0.01)
    return AssignedTargets(rows, paths, boxes, ltrb, anchors, (len(labels_per_image), gh, gw),
                           stride, (img_h, img_w))


def flatten_cells(t: Tensor) -> Tensor:
    """(B, C, H, W) -> (B*H*W, C)."""
    b, c, h, w = t.shape
    return t.transpose(0, 2, 3, 1).reshape(b * h * w, c)


def box_distribution(box_map: Tensor, reg_max: int) -> Tensor:
    """(B, 4*R, H, W) -> (B*H*W, 4, R)."""
    flat = flatten_cells(box_map)
    return flat.reshape(flat.shape[0], 4, reg_max)


def expected_sides(dist_logits: Tensor) -> Tensor:
    """Softmax expectation over bins: (N, 4, R) -> (N, 4) distances in stride units."""
    n, four, bins = dist_logits.shape
    probs = softmax(dist_logits, axis=-1)
    bin_idx = Tensor(np.broadcast_to(np.arange(bins, dtype=np.float64), probs.shape).copy())
    return (probs * bin_idx).sum(axis=-1)


def sides_to_boxes(sides: Tensor, anchors: np.ndarray, stride: int, image_size: tuple[int, int]) -> Tensor:
    """Distances (l, t, r, b) from anchors -> normalized (cx, cy, w, h), shape (N, 4)."""
    img_h, img_w = image_size
    l, t, r, b = (sides[:, i] for i in range(4))
    s = float(stride)
    cx = (Tensor(anchors[:, 0]) + (r - l) * (0.5 * s)) * (1.0 / img_w)
    cy = (Tensor(anchors[:, 1]) + (b - t) * (0.5 * s)) * (1.0 / img_h)
    w = (l + r) * (s / img_w)
    h = (t + b) * (s / img_h)
    n = sides.shape[0]
    return concat([cx.reshape(n, 1), cy.reshape(n, 1), w.reshape(n, 1), h.reshape(n, 1)], axis=1)


def detection_loss(
    level_logits: Sequence[Tensor],
    box_map: Tensor,
    targets: AssignedTargets,
    tax: Taxonomy,
    cfg: LossConfig,
) -> tuple[Tensor, list[LevelLossBreakdown]]:
    """Total loss and per-level breakdown for one batch of head outputs.

    BCE is summed over all cells and classes and divided by the number of
    assigned cells; the penalty is taken on assigned cells only.
    """
    if len(level_logits) != tax.depth:
        raise ShapeMismatch(f"{len(level_logits)} logit maps for a depth-{tax.depth} taxonomy")
    n_fg = targets.n
    norm = float(max(n_fg, 1))
    zero = Tensor(0.0)
    if n_fg:
        dist = box_distribution(box_map, cfg.reg_max)[targets.rows]
        sides = expected_sides(dist)
        pred_boxes = sides_to_boxes(sides, targets.anchors, targets.stride, targets.image_size)
        ciou = ciou_loss(pred_boxes, targets.boxes)
        dfl = dfl_loss(dist.reshape(n_fg * 4, cfg.reg_max), targets.ltrb.reshape(-1))
    else:
        ciou = dfl = zero
    reg_total = cfg.w_box * ciou + cfg.w_dfl * dfl

    breakdowns = []
    prev_flat = None
    for level, logits in enumerate(level_logits):
        flat = flatten_cells(logits)
        cls_t = np.zeros(flat.shape)
        if n_fg:
            cls_t[targets.rows, targets.paths[:, level]] = 1.0
        if level == 0 or n_fg == 0:
            bce = _bce(flat, cls_t, norm)
            cls_total, penalty = cfg.w_cls * bce, zero
        else:
            if cfg.parent_source == "predicted":
                parents = prev_flat.data[targets.rows].argmax(axis=1)
            else:
                parents = targets.paths[:, level - 1]
            cls_total, bce, penalty = _cls_terms(level, flat, cls_t, parents, tax, cfg,
                                                 targets.rows, norm)
        breakdowns.append(LevelLossBreakdown(level, bce, penalty, ciou, dfl, cls_total, reg_total))
        prev_flat = flat
    return total_loss(breakdowns, cfg), breakdowns
