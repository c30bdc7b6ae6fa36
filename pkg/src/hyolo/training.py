"""Training loop, batched prediction and split evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .errors import DatasetEmpty, DepthMismatch, NonFiniteLoss, NonFiniteValue
from .evalkit import DetectionPrediction, EvaluationReport, evaluate, match, nms
from .losses import LossConfig, assign_targets, detection_loss
from .model import STRIDE, HierModel, ModelSpec, build_model, decode
from .synthdata import Dataset, Split
from .taxonomy import Taxonomy, example_taxonomy
from .tensor import SGD, Tensor, gradcheck, no_grad

log = logging.getLogger(__name__)

GRAD_CLIP = 10.0
LOSS_COLUMNS = ("epoch", "level", "bce", "penalty", "ciou", "dfl", "total")


def loss_config(cfg: RunConfig) -> LossConfig:
    return LossConfig(w_box=cfg.box, w_dfl=cfg.dfl, w_cls=cfg.cls, alpha=cfg.alpha,
                      level_agg=cfg.level_agg, parent_source=cfg.parent_source, reg_max=cfg.reg_max)


def model_for(cfg: RunConfig, tax) -> HierModel:
    spec = ModelSpec(width=cfg.width, head_width=cfg.head_width, reg_max=cfg.reg_max, residual=cfg.residual,
                     norm=cfg.norm)
    return build_model(cfg.variant, tax, spec, seed=cfg.seed, depth=cfg.hier_depth)


def predict(model: HierModel, images: np.ndarray, conf: float = 0.25, iou: float = 0.7,
            batch: int = 16) -> list[list[DetectionPrediction]]:
    """Decoded, NMS-filtered detections for every image."""
    out: list[list[DetectionPrediction]] = []
    with no_grad():
        for start in range(0, len(images), batch):
            head = model(Tensor(images[start : start + batch]))
            out.extend(nms(dets, iou) for dets in decode(head, conf, model.tax))
    return out


def evaluate_split(model: HierModel, split: Split, cfg: RunConfig,
                   detections: Sequence[Sequence[DetectionPrediction]] | None = None) -> EvaluationReport:
    if detections is None:
        detections = predict(model, split.images, cfg.conf, cfg.iou)
    results = [match(d, t, cfg.match_iou) for d, t in zip(detections, split.labels)]
    return evaluate(results, model.tax, mode=cfg.metric_mode)


@dataclass
class TrainResult:
    model: HierModel
    loss_rows: list[dict] = field(default_factory=list)
    val_f1: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_f1: float = -1.0
    stopped_early: bool = False

    def loss_csv(self) -> str:
        lines = [",".join(LOSS_COLUMNS)]
        for r in self.loss_rows:
            lines.append(",".join([str(r["epoch"]), str(r["level"])] +
                                  [f"{r[k]:.6f}" for k in LOSS_COLUMNS[2:]]))
        return "\n".join(lines) + "\n"


def augment(images: np.ndarray, labels: Sequence[Sequence[tuple]], rng: np.random.Generator,
            fliplr: float = 0.5, translate: float = 0.1, fill: float = 0.5,
            min_visible: float = 0.5) -> tuple[np.ndarray, list[list[tuple]]]:
    """Random horizontal flip and integer translation of NCHW ``images``.

    Translated boxes are clipped to the frame; a box keeping less than
    ``min_visible`` of its area is dropped.  Uncovered pixels get ``fill``.
    """
    n, _, h, w = images.shape
    out = np.full_like(images, fill)
    new_labels = []
    for i in range(n):
        img = images[i]
        boxes = [(path, tuple(box)) for path, box in labels[i]]
        if rng.random() < fliplr:
            img = img[:, :, ::-1]
            boxes = [(path, (1.0 - cx, cy, bw, bh)) for path, (cx, cy, bw, bh) in boxes]
        dx = int(rng.integers(-int(translate * w), int(translate * w) + 1)) if translate else 0
        dy = int(rng.integers(-int(translate * h), int(translate * h) + 1)) if translate else 0
        out[i, :, max(dy, 0) : h + min(dy, 0), max(dx, 0) : w + min(dx, 0)] = \
            img[:, max(-dy, 0) : h - max(dy, 0), max(-dx, 0) : w - max(dx, 0)]
        kept = []
        for path, (cx, cy, bw, bh) in boxes:
            x1 = min(max(cx - bw / 2 + dx / w, 0.0), 1.0)
            x2 = min(max(cx + bw / 2 + dx / w, 0.0), 1.0)
            y1 = min(max(cy - bh / 2 + dy / h, 0.0), 1.0)
            y2 = min(max(cy + bh / 2 + dy / h, 0.0), 1.0)
            if (x2 - x1) * (y2 - y1) >= min_visible * bw * bh:
                kept.append((path, ((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)))
        new_labels.append(kept)
    return out, new_labels


def _check_consistent(model: HierModel, dataset: Dataset, cfg: RunConfig) -> None:
    if model.tax != dataset.tax:
        raise DepthMismatch("model and dataset use different taxonomies")
    if cfg.hier_depth != dataset.tax.depth:
        raise DepthMismatch(f"hier_depth={cfg.hier_depth} but the dataset taxonomy has depth {dataset.tax.depth}")
    if "train" not in dataset.splits or len(dataset["train"]) == 0:
        raise DatasetEmpty("training split is empty")


def train(model: HierModel, dataset: Dataset, cfg: RunConfig,
          on_epoch: Callable[[int, list[dict], float], None] | None = None) -> TrainResult:
    """SGD with momentum and a linear learning-rate ramp from ``lr0`` to ``lr0 * lrf``.

    The first ``warmup_epochs`` worth of steps ramp the rate up linearly from 0.

    After every epoch the model is scored on the ``val`` split (deepest-level
    flat F1); the best-scoring weights are restored at the end.  Training stops
    early once that score has not improved for ``patience`` epochs
    (``patience=0`` disables early stopping).  Batch order comes from
    ``cfg.seed`` so the whole run is deterministic.
    """
    _check_consistent(model, dataset, cfg)
    train_split = dataset["train"]
    val_split = dataset.splits.get("val")
    lcfg = loss_config(cfg)
    names = list(model.params)
    opt = SGD(model.parameters(), lr=cfg.lr0, momentum=cfg.momentum, max_norm=GRAD_CLIP,
              weight_decay=cfg.weight_decay, decay=[n.endswith(".weight") and ".bn." not in n for n in names])
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    aug_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    n = len(train_split)
    h, w = train_split.images.shape[2:]
    grid = (h // STRIDE, w // STRIDE)
    steps_per_epoch = -(-n // cfg.batch)
    warmup_steps = int(round(cfg.warmup_epochs * steps_per_epoch))
    result = TrainResult(model)
    best_state = model.state_dict()
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        frac = (epoch - 1) / max(cfg.epochs - 1, 1)
        opt.lr = cfg.lr0 * (1.0 - frac * (1.0 - cfg.lrf))
        base_lr = opt.lr
        order = rng.permutation(n)
        sums = np.zeros((model.depth, len(LOSS_COLUMNS) - 2))
        batches = 0
        for start in range(0, n, cfg.batch):
            idx = order[start : start + cfg.batch]
            step = (epoch - 1) * steps_per_epoch + start // cfg.batch
            if step < warmup_steps:
                opt.lr = base_lr * (step + 1) / warmup_steps
            else:
                opt.lr = base_lr
            try:
                images, labels = augment(train_split.images[idx], train_split.label_pairs(idx), aug_rng,
                                         cfg.fliplr, cfg.translate)
                model.training = True
                head = model(Tensor(images))
                model.training = False
                targets = assign_targets(labels, grid, STRIDE, cfg.reg_max, cfg.assign == "neighbors")
                loss, parts = detection_loss(head.level_logits, head.box_map, targets, model.tax, lcfg)
                opt.zero_grad()
                loss.backward()
            except NonFiniteValue as exc:
                model.training = False
                raise NonFiniteLoss(f"epoch {epoch}, batch starting at {start}: {exc}") from None
            if not np.isfinite(loss.item()):
                raise NonFiniteLoss(f"epoch {epoch}, batch starting at {start}: loss {loss.item()}")
            opt.step()
            for b in parts:
                v = b.values()
                sums[b.level] += [v["bce"], v["penalty"], v["ciou"], v["dfl"], v["total"]]
            batches += 1
        rows = []
        for level in range(model.depth):
            avg = sums[level] / batches
            rows.append(dict(zip(LOSS_COLUMNS, [epoch, level, *avg.tolist()])))
        result.loss_rows.extend(rows)

        f1 = evaluate_split(model, val_split, cfg).levels[-1].f1 if val_split is not None else 0.0
        result.val_f1.append(f1)
        if f1 > result.best_f1:
            result.best_f1, result.best_epoch, stale = f1, epoch, 0
            best_state = model.state_dict()
        else:
            stale += 1
        log.info("epoch %d lr %.5f loss %.4f val_f1 %.4f", epoch, opt.lr,
                 float(np.mean([r["total"] for r in rows])), f1)
        if on_epoch is not None:
            on_epoch(epoch, rows, f1)
        if cfg.patience and stale >= cfg.patience:
            result.stopped_early = True
            break
    model.load_state_dict(best_state)
    return result


def composite_gradcheck(variant: str = "V4", size: int = 16, width: int = 4, alpha: float = 25.0,
                        seed: int = 0, max_coords: int | None = None, tax: Taxonomy | None = None,
                        step: float = 1e-3) -> float:
    """Max relative error of the full detection loss (BCE + penalty + CIoU + DFL).

    Builds a tiny model on ``tax`` (the three-level example tree by default),
    one random ``size`` x ``size`` image and a few random labelled boxes, then
    compares autodiff gradients with central differences for every parameter
    (or ``max_coords`` random coordinates per parameter tensor).

    With predicted parents the loss jumps wherever a previous-level argmax
    flips, so a seed whose weights sit next to such a tie reports a large
    error that says nothing about the gradients.
    """
    tax = tax or example_taxonomy()
    rng = np.random.default_rng(seed)
    model = build_model(variant, tax, ModelSpec(width=width, head_width=width), seed=seed)
    image = Tensor(rng.uniform(0.0, 1.0, (1, 3, size, size)))
    labels = []
    for leaf in rng.choice(len(tax.leaves), size=2, replace=False):
        cx, cy = rng.uniform(0.25, 0.75, 2)
        w, h = rng.uniform(0.2, 0.4, 2)
        labels.append((tax.leaf_path(tax.leaves[leaf]), (cx, cy, w, h)))
    grid = (size // STRIDE, size // STRIDE)
    lcfg = LossConfig(alpha=alpha)
    targets = assign_targets([labels], grid, STRIDE, lcfg.reg_max)
    params = model.parameters()

    model.training = True   # batch statistics, so normalisation is differentiated too

    def f(*_):
        head = model(image)
        return detection_loss(head.level_logits, head.box_map, targets, tax, lcfg)[0]

    coords = None
    if max_coords:
        coords = {i: rng.choice(p.size, size=min(p.size, max_coords), replace=False)
                  for i, p in enumerate(params)}
    return gradcheck(f, params, step=step, coords=coords)
