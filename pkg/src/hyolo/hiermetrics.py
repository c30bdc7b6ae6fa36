"""Hierarchical precision, recall and F-beta over ancestor sets.

Scores are kept as :class:`fractions.Fraction` while they are being combined
and only turned into floats for reporting, so aggregated values are exact.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Rational, Real
from typing import Iterable, Sequence

from .errors import EmptyInput
from .taxonomy import Taxonomy

Ratio = Fraction | float


@dataclass(frozen=True)
class HierPair:
    """One prediction/ground-truth pair.

    ``predicted`` and ``truth`` are either single node names or per-level name
    paths.  A path may be hierarchically inconsistent (the detector predicts
    each level independently); each level is scored on its own node.
    """

    predicted: str | tuple[str, ...]
    truth: str | tuple[str, ...]


@dataclass(frozen=True)
class HierScore:
    precision: Ratio
    recall: Ratio
    fbeta: Ratio
    beta: float = 1.0


def _common(pred: str, truth: str, tax: Taxonomy) -> tuple[int, int, int]:
    a_p = tax.ancestors(pred)
    a_t = tax.ancestors(truth)
    return len(a_p & a_t), len(a_p), len(a_t)


def hier_precision(predicted: str, truth: str, tax: Taxonomy) -> Fraction:
    common, n_pred, _ = _common(predicted, truth, tax)
    return Fraction(common, n_pred)


def hier_recall(predicted: str, truth: str, tax: Taxonomy) -> Fraction:
    common, _, n_truth = _common(predicted, truth, tax)
    return Fraction(common, n_truth)


def hier_fbeta(precision: Ratio, recall: Ratio, beta: Real = 1) -> Ratio:
    """Weighted harmonic mean of ``precision`` and ``recall``; 0 when both are 0.

    Stays a ``Fraction`` when the inputs and ``beta`` are rational.
    """
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    if isinstance(precision, Rational) and isinstance(recall, Rational) and not isinstance(beta, Rational):
        beta = Fraction(beta)  # exact for any finite float, so the result stays rational
    b2 = beta * beta
    denom = b2 * precision + recall
    if denom == 0:
        return Fraction(0) if isinstance(precision * recall * b2, Rational) else 0.0
    return (b2 + 1) * precision * recall / denom


def score_pair(predicted: str, truth: str, tax: Taxonomy, beta: Real = 1) -> HierScore:
    common, n_pred, n_truth = _common(predicted, truth, tax)
    p = Fraction(common, n_pred)
    r = Fraction(common, n_truth)
    return HierScore(p, r, hier_fbeta(p, r, beta), float(beta))


# -- aggregation ----------------------------------------------------------

@dataclass
class ClassScore:
    name: str
    precision: Ratio
    recall: Ratio
    fbeta: Ratio
    n: int


@dataclass
class LevelScore:
    level: int
    classes: dict[str, ClassScore]
    precision: Ratio
    recall: Ratio
    fbeta: Ratio
    worst: ClassScore | None
    n: int


@dataclass
class HierReport:
    levels: list[LevelScore]
    beta: float
    mode: str = "macro"
    extra: dict = field(default_factory=dict)

    @property
    def deepest(self) -> LevelScore:
        return self.levels[-1]

    @property
    def worst(self) -> ClassScore | None:
        return self.deepest.worst

    def to_csv(self, digits: int = 4) -> str:
        """``level,class,precision,recall,fbeta,n`` rows plus ``l,*`` and ``*,worst`` summaries."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        fmt = lambda v: f"{float(v):.{digits}f}"
        w.writerow(["level", "class", "precision", "recall", "fbeta", "n"])
        for lv in self.levels:
            for cs in lv.classes.values():
                w.writerow([lv.level, cs.name, fmt(cs.precision), fmt(cs.recall), fmt(cs.fbeta), cs.n])
            w.writerow([lv.level, "*", fmt(lv.precision), fmt(lv.recall), fmt(lv.fbeta), lv.n])
        worst = self.worst
        if worst is not None:
            w.writerow(["*", "worst", fmt(worst.precision), fmt(worst.recall), fmt(worst.fbeta), worst.n])
        return buf.getvalue()


def _as_path(node: str | Sequence[str], tax: Taxonomy) -> tuple[str, ...]:
    if isinstance(node, str):
        return tuple(tax.path(node))
    return tuple(node)


def _mean(values: list) -> Ratio:
    return sum(values, Fraction(0)) / len(values)


def aggregate_scores(
    pairs: Iterable[HierPair | tuple],
    tax: Taxonomy,
    beta: Real = 1,
    mode: str = "macro",
) -> HierReport:
    """Per-class, per-level and worst-class hierarchical scores.

    At level ``l`` each pair contributes the score of its level-``l`` predicted
    node against its level-``l`` truth node and is filed under the truth class.
    A class score is the mean of its pair scores.  ``mode="macro"`` averages
    classes to get the level figure, ``mode="micro"`` averages pairs.
    Pairs whose paths are shorter than ``l + 1`` are skipped at that level.
    """
    if mode not in ("macro", "micro"):
        raise ValueError(f"mode must be 'macro' or 'micro', got {mode!r}")
    paths = []
    for pair in pairs:
        pred, truth = (pair.predicted, pair.truth) if isinstance(pair, HierPair) else pair
        paths.append((_as_path(pred, tax), _as_path(truth, tax)))
    if not paths:
        raise EmptyInput("aggregate_scores needs at least one pair")

    levels = []
    for level in range(tax.depth):
        per_class: dict[str, list[HierScore]] = {}
        for pred, truth in paths:
            if len(pred) <= level or len(truth) <= level:
                continue
            s = score_pair(pred[level], truth[level], tax, beta)
            per_class.setdefault(truth[level], []).append(s)
        if not per_class:
            continue
        order = {n: i for i, n in enumerate(tax.levels[level])}
        classes = {}
        for name in sorted(per_class, key=order.__getitem__):
            scores = per_class[name]
            classes[name] = ClassScore(
                name,
                _mean([s.precision for s in scores]),
                _mean([s.recall for s in scores]),
                _mean([s.fbeta for s in scores]),
                len(scores),
            )
        n = sum(c.n for c in classes.values())
        if mode == "macro":
            vals = list(classes.values())
            p, r, f = (_mean([getattr(c, k) for c in vals]) for k in ("precision", "recall", "fbeta"))
        else:
            everything = [s for scores in per_class.values() for s in scores]
            p, r, f = (_mean([getattr(s, k) for s in everything]) for k in ("precision", "recall", "fbeta"))
        worst = min(classes.values(), key=lambda c: (c.fbeta, order[c.name]))
        levels.append(LevelScore(level, classes, p, r, f, worst, n))
    return HierReport(levels, float(beta), mode)
