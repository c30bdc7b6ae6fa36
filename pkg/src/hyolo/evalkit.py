"""Detection post-processing and per-level evaluation.

Pipeline: class-agnostic NMS per image, greedy IoU matching against ground
truth, then :func:`evaluate` over all images of a split.  Boxes everywhere are
normalized ``(cx, cy, w, h)``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import EmptySplit, MalformedLine
from .hiermetrics import HierReport, aggregate_scores
from .taxonomy import Taxonomy

ISOLATED_IOU = 0.1


@dataclass(frozen=True)
class DetectionPrediction:
    box: tuple[float, float, float, float]
    classes: tuple[int, ...]
    confs: tuple[float, ...]

    @property
    def conf(self) -> float:
        """Primary confidence: the deepest-level score."""
        return self.confs[-1]


def to_xyxy(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2,
                     b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2], axis=1)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two sets of ``cx, cy, w, h`` boxes."""
    xa, xb = to_xyxy(a), to_xyxy(b)
    iw = np.clip(np.minimum(xa[:, None, 2], xb[None, :, 2]) - np.maximum(xa[:, None, 0], xb[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(xa[:, None, 3], xb[None, :, 3]) - np.maximum(xa[:, None, 1], xb[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (xa[:, 2] - xa[:, 0]) * (xa[:, 3] - xa[:, 1])
    area_b = (xb[:, 2] - xb[:, 0]) * (xb[:, 3] - xb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def iou(a, b) -> float:
    return float(iou_matrix([a], [b])[0, 0])


def nms(detections: Sequence[DetectionPrediction], iou_threshold: float = 0.7) -> list[DetectionPrediction]:
    """Class-agnostic greedy NMS; a box is dropped when its IoU with a kept one exceeds the threshold."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    if not detections:
        return []
    conf = np.array([d.conf for d in detections])
    order = np.argsort(-conf, kind="stable")
    xyxy = to_xyxy([d.box for d in detections])
    keep = _kernels.nms_indices(xyxy[:, 0], xyxy[:, 1], xyxy[:, 2], xyxy[:, 3], order, iou_threshold)
    return [detections[i] for i in keep]


@dataclass
class MatchResult:
    """Matching outcome for one image.

    ``pairs`` holds ``(pred_idx, truth_idx, iou)``; ``best`` maps every
    unmatched prediction to ``(truth_idx, iou)`` of its highest-IoU truth
    (``(-1, 0.0)`` when the image has no truths).
    """

    preds: list[DetectionPrediction]
    truths: list
    pairs: list[tuple[int, int, float]]
    fp: list[int]
    fn: list[int]
    best: dict[int, tuple[int, float]] = field(default_factory=dict)


def match(preds: Sequence[DetectionPrediction], truths: Sequence, iou_threshold: float = 0.5) -> MatchResult:
    """Greedy one-to-one matching by descending confidence.

    ``truths`` need ``.classes`` and ``.box`` attributes (see ``synthdata.HierLabel``).
    """
    preds, truths = list(preds), list(truths)
    if preds and truths:
        ious = iou_matrix([p.box for p in preds], [t.box for t in truths])
    else:
        ious = np.zeros((len(preds), len(truths)))
    order = np.argsort(-np.array([p.conf for p in preds]), kind="stable")
    taken = np.zeros(len(truths), dtype=bool)
    pairs, fp, best = [], [], {}
    for i in order:
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand)) if truths else -1
        if j >= 0 and cand[j] >= iou_threshold:
            taken[j] = True
            pairs.append((int(i), j, float(ious[i, j])))
        else:
            fp.append(int(i))
            if truths:
                k = int(np.argmax(ious[i]))
                best[int(i)] = (k, float(ious[i, k]))
            else:
                best[int(i)] = (-1, 0.0)
    fn = [j for j in range(len(truths)) if not taken[j]]
    return MatchResult(preds, truths, pairs, sorted(fp), fn, best)


# -- evaluation -------------------------------------------------------------

def _safe(num: float, den: float) -> float:
    return num / den if den else 0.0


def _f1(p: float, r: float) -> float:
    return _safe(2 * p * r, p + r)


@dataclass
class ClassRow:
    level: int
    name: str
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tp_conf: list = field(default_factory=list)
    fp_conf: list = field(default_factory=list)

    @property
    def precision(self) -> float:
        return _safe(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _safe(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        return _f1(self.precision, self.recall)


@dataclass
class LevelReport:
    level: int
    tp: int
    fp: int
    fn: int
    classes: list[ClassRow]
    tp_conf: float          # mean over classes of per-class TP-confidence means
    fp_conf: float
    tp_conf_global: float   # mean over all TP detections
    fp_conf_global: float
    n_tp_conf: int
    n_fp_conf: int

    @property
    def precision(self) -> float:
        return _safe(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _safe(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        return _f1(self.precision, self.recall)


@dataclass
class EvaluationReport:
    levels: list[LevelReport]
    hier: HierReport | None
    n_images: int
    n_preds: int
    n_truths: int
    n_matched: int
    consistent_paths: int
    fp_same_subgraph: int
    fp_subgraph_total: int
    fp_isolated: int

    @property
    def consistency(self) -> float:
        """Fraction of predictions whose per-level argmax path follows child edges."""
        return _safe(self.consistent_paths, self.n_preds)

    @property
    def fp_same_subgraph_fraction(self) -> float:
        return _safe(self.fp_same_subgraph, self.fp_subgraph_total)

    def hier_level(self, level: int):
        if self.hier is None:
            return None
        for lv in self.hier.levels:
            if lv.level == level:
                return lv
        return None

    def summary(self) -> dict[str, float | int]:
        out: dict[str, float | int] = {
            "images": self.n_images, "predictions": self.n_preds, "truths": self.n_truths,
            "matched": self.n_matched,
        }
        for lv in self.levels:
            h = self.hier_level(lv.level)
            l = lv.level
            out.update({
                f"l{l}.tp": lv.tp, f"l{l}.fp": lv.fp, f"l{l}.fn": lv.fn,
                f"l{l}.flat_precision": lv.precision, f"l{l}.flat_recall": lv.recall,
                f"l{l}.flat_f1": lv.f1,
                f"l{l}.hier_precision": float(h.precision) if h else 0.0,
                f"l{l}.hier_recall": float(h.recall) if h else 0.0,
                f"l{l}.hier_f1": float(h.fbeta) if h else 0.0,
                f"l{l}.tp_conf": lv.tp_conf, f"l{l}.fp_conf": lv.fp_conf,
                f"l{l}.tp_conf_global": lv.tp_conf_global, f"l{l}.fp_conf_global": lv.fp_conf_global,
                f"l{l}.tp_conf_n": lv.n_tp_conf, f"l{l}.fp_conf_n": lv.n_fp_conf,
            })
        deepest = self.levels[-1]
        h = self.hier_level(deepest.level)
        out.update({
            "flat_f1": deepest.f1,
            "hier_f1": float(h.fbeta) if h else 0.0,
            "hier_f1_worst": float(h.worst.fbeta) if h and h.worst else 0.0,
            "hier_worst_class": h.worst.name if h and h.worst else "",
            "tp_conf": deepest.tp_conf,
            "fp_conf": deepest.fp_conf,
            "path_consistency": self.consistency,
            "fp_same_subgraph": self.fp_same_subgraph_fraction,
            "fp_same_subgraph_n": self.fp_same_subgraph,
            "fp_subgraph_total": self.fp_subgraph_total,
            "fp_isolated": self.fp_isolated,
        })
        return out

    def summary_text(self) -> str:
        lines = []
        for k, v in self.summary().items():
            lines.append(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")
        return "\n".join(lines) + "\n"

    def to_csv(self, digits: int = 4) -> str:
        """One row per (level, class) plus a ``*`` row per level."""
        fmt = lambda v: f"{float(v):.{digits}f}"
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "class", "tp", "fp", "fn", "precision", "recall", "f1",
                    "tp_conf", "n_tp", "fp_conf", "n_fp", "hier_precision", "hier_recall", "hier_f1"])
        for lv in self.levels:
            h = self.hier_level(lv.level)
            for c in lv.classes:
                hc = h.classes.get(c.name) if h else None
                w.writerow([lv.level, c.name, c.tp, c.fp, c.fn, fmt(c.precision), fmt(c.recall), fmt(c.f1),
                            fmt(_mean(c.tp_conf)), len(c.tp_conf), fmt(_mean(c.fp_conf)), len(c.fp_conf),
                            fmt(hc.precision) if hc else "", fmt(hc.recall) if hc else "",
                            fmt(hc.fbeta) if hc else ""])
            w.writerow([lv.level, "*", lv.tp, lv.fp, lv.fn, fmt(lv.precision), fmt(lv.recall), fmt(lv.f1),
                        fmt(lv.tp_conf), lv.n_tp_conf, fmt(lv.fp_conf), lv.n_fp_conf,
                        fmt(h.precision) if h else fmt(0), fmt(h.recall) if h else fmt(0),
                        fmt(h.fbeta) if h else fmt(0)])
        return buf.getvalue()


def _mean(values) -> float:
    return float(np.mean(values)) if len(values) else 0.0


def _same_subgraph(pred_leaf: str, truth_leaf: str, tax: Taxonomy, rule: str) -> bool:
    if rule == "parent":
        return tax.parent[pred_leaf] == tax.parent[truth_leaf] and tax.depth > 1
    return bool(tax.ancestors(pred_leaf) & tax.ancestors(truth_leaf))


def evaluate(results: Sequence[MatchResult], tax: Taxonomy, beta: float = 1.0, mode: str = "macro",
             subgraph: str = "ancestor") -> EvaluationReport:
    """Aggregate per-image matches into flat, hierarchical and confidence statistics.

    At level ``l`` a matched pair is a true positive when the predicted index
    equals the truth index; a wrong-class match counts as one FP and one FN.
    Hierarchical scores are computed over matched pairs, filed by truth class.
    ``subgraph`` is ``"ancestor"`` (share any non-root ancestor) or ``"parent"``.
    """
    if not results:
        raise EmptySplit("evaluate needs at least one image")
    if subgraph not in ("ancestor", "parent"):
        raise ValueError(f"subgraph must be 'ancestor' or 'parent', got {subgraph!r}")
    depth = tax.depth
    rows = [[ClassRow(l, n) for n in tax.levels[l]] for l in range(depth)]
    hier_pairs = []
    n_preds = n_truths = n_matched = consistent = 0
    same = total_fp = isolated = 0
    for res in results:
        n_preds += len(res.preds)
        n_truths += len(res.truths)
        n_matched += len(res.pairs)
        consistent += sum(tax.is_valid_path(p.classes) for p in res.preds)
        matched_truths = set()
        for pi, ti, _ in res.pairs:
            p, t = res.preds[pi], res.truths[ti]
            matched_truths.add(ti)
            hier_pairs.append((tax.path_names(p.classes), tax.path_names(t.classes)))
            for l in range(depth):
                pc, tc = int(p.classes[l]), int(t.classes[l])
                if pc == tc:
                    rows[l][pc].tp += 1
                    rows[l][pc].tp_conf.append(p.confs[l])
                else:
                    rows[l][pc].fp += 1
                    rows[l][pc].fp_conf.append(p.confs[l])
                    rows[l][tc].fn += 1
            if p.classes[-1] != t.classes[-1]:
                total_fp += 1
                same += _same_subgraph(tax.name_at(depth - 1, p.classes[-1]),
                                       tax.name_at(depth - 1, t.classes[-1]), tax, subgraph)
        for pi in res.fp:
            p = res.preds[pi]
            for l in range(depth):
                rows[l][int(p.classes[l])].fp += 1
                rows[l][int(p.classes[l])].fp_conf.append(p.confs[l])
            ti, best_iou = res.best.get(pi, (-1, 0.0))
            if ti < 0 or best_iou < ISOLATED_IOU:
                isolated += 1
                continue
            total_fp += 1
            same += _same_subgraph(tax.name_at(depth - 1, p.classes[-1]),
                                   tax.name_at(depth - 1, res.truths[ti].classes[-1]), tax, subgraph)
        for ti in res.fn:
            t = res.truths[ti]
            for l in range(depth):
                rows[l][int(t.classes[l])].fn += 1

    levels = []
    for l in range(depth):
        cls = rows[l]
        tp_means = [_mean(c.tp_conf) for c in cls if c.tp_conf]
        fp_means = [_mean(c.fp_conf) for c in cls if c.fp_conf]
        all_tp = [v for c in cls for v in c.tp_conf]
        all_fp = [v for c in cls for v in c.fp_conf]
        levels.append(LevelReport(
            l, sum(c.tp for c in cls), sum(c.fp for c in cls), sum(c.fn for c in cls), cls,
            _mean(tp_means), _mean(fp_means), _mean(all_tp), _mean(all_fp), len(all_tp), len(all_fp)))
    hier = aggregate_scores(hier_pairs, tax, beta, mode) if hier_pairs else None
    return EvaluationReport(levels, hier, len(results), n_preds, n_truths, n_matched, consistent,
                            same, total_fp, isolated)


# -- detection dumps --------------------------------------------------------

def format_detection(d: DetectionPrediction) -> str:
    parts = [repr(float(d.conf))]
    for c, p in zip(d.classes, d.confs):
        parts += [str(int(c)), repr(float(p))]
    parts += [repr(float(v)) for v in d.box]
    return " ".join(parts)


def parse_detection(line: str, depth: int) -> DetectionPrediction:
    tok = line.split()
    if len(tok) != 1 + 2 * depth + 4:
        raise MalformedLine(f"expected {1 + 2 * depth + 4} fields for depth {depth}, got {len(tok)}: {line!r}")
    try:
        classes = tuple(int(tok[1 + 2 * l]) for l in range(depth))
        confs = tuple(float(tok[2 + 2 * l]) for l in range(depth))
        box = tuple(float(v) for v in tok[1 + 2 * depth:])
    except ValueError as exc:
        raise MalformedLine(f"{exc}: {line!r}") from None
    return DetectionPrediction(box, classes, confs)


def write_detections(path, detections: Sequence[DetectionPrediction]) -> None:
    Path(path).write_text("".join(format_detection(d) + "\n" for d in detections))


def read_detections(path, depth: int) -> list[DetectionPrediction]:
    return [parse_detection(line, depth) for line in Path(path).read_text().splitlines() if line.strip()]
