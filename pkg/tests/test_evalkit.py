from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyolo import _kernels
from hyolo.errors import EmptySplit, MalformedLine
from hyolo.evalkit import (DetectionPrediction, evaluate, iou, match, nms, parse_detection,
                           read_detections, write_detections)
from hyolo.synthdata import HierLabel
from hyolo.taxonomy import example_taxonomy

TAX = example_taxonomy()
BACKENDS = ["numpy"] + (["numba"] if _kernels.HAVE_NUMBA else [])


def det(box, leaf=None, conf=0.9, classes=None):
    classes = classes if classes is not None else TAX.leaf_path(leaf)
    return DetectionPrediction(tuple(box), tuple(classes), tuple([conf] * len(classes)))


def truth(box, leaf):
    return HierLabel(TAX.leaf_path(leaf), tuple(box))


def scalar_iou(a, b):
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    inter = max(0.0, min(ax2, bx2) - max(ax1, bx1)) * max(0.0, min(ay2, by2) - max(ay1, by1))
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def brute_nms(dets, thr):
    order = sorted(range(len(dets)), key=lambda i: -dets[i].conf)
    kept = []
    for i in order:
        if all(scalar_iou(dets[i].box, dets[k].box) <= thr for k in kept):
            kept.append(i)
    return kept


def random_dets(rng, n):
    out = []
    for _ in range(n):
        cx, cy = rng.uniform(0.1, 0.9, 2)
        w, h = rng.uniform(0.05, 0.3, 2)
        out.append(det((cx, cy, w, h), "L", conf=float(rng.uniform())))
    return out


# -- NMS -------------------------------------------------------------------

def test_nms_examples():
    a = det((0.5, 0.5, 0.2, 0.2), "L", 0.9)
    b = det((0.5, 0.5, 0.2, 0.2), "M", 0.8)
    assert nms([b, a]) == [a]
    c = det((0.1, 0.1, 0.1, 0.1), "L", 0.5)
    assert nms([a, c]) == [a, c]
    assert nms([]) == []


@pytest.mark.parametrize("backend", BACKENDS)
def test_nms_matches_brute_force(backend):
    prev = _kernels.set_backend(backend)
    try:
        rng = np.random.default_rng(0)
        for _ in range(100):
            dets = random_dets(rng, 200)
            thr = float(rng.choice([0.3, 0.5, 0.7]))
            assert nms(dets, thr) == [dets[i] for i in brute_nms(dets, thr)]
    finally:
        _kernels.set_backend(prev)


# -- matching --------------------------------------------------------------

def test_match_perfect_and_empty():
    truths = [truth((0.3, 0.3, 0.2, 0.2), "L"), truth((0.7, 0.7, 0.2, 0.2), "I")]
    res = match([det(t.box, classes=t.classes) for t in truths], truths)
    assert res.fp == [] and res.fn == [] and len(res.pairs) == 2
    empty = match([], truths)
    assert empty.fn == [0, 1] and empty.pairs == []


def test_match_picks_higher_iou_truth():
    truths = [truth((0.42, 0.5, 0.2, 0.2), "L"), truth((0.46, 0.5, 0.2, 0.2), "M")]
    p = det((0.48, 0.5, 0.2, 0.2), "M")
    assert iou(p.box, truths[1].box) > iou(p.box, truths[0].box) >= 0.5
    res = match([p], truths)
    assert [(pi, ti) for pi, ti, _ in res.pairs] == [(0, 1)]
    assert res.fn == [0]


def test_match_confidence_order():
    t = [truth((0.5, 0.5, 0.2, 0.2), "L")]
    low, high = det((0.5, 0.5, 0.2, 0.2), "L", 0.3), det((0.51, 0.5, 0.2, 0.2), "L", 0.9)
    res = match([low, high], t)
    assert res.pairs[0][0] == 1 and res.fp == [0]


# -- evaluate --------------------------------------------------------------

def test_evaluate_all_correct():
    truths = [truth((0.25 + 0.5 * (i % 2), 0.25 + 0.5 * (i // 2), 0.2, 0.2), leaf)
              for i, leaf in enumerate(["I", "L", "N", "O"])]
    res = match([det(t.box, classes=t.classes, conf=0.9) for t in truths], truths)
    rep = evaluate([res], TAX)
    for lv in rep.levels:
        assert lv.f1 == 1.0
        assert lv.tp_conf == pytest.approx(0.9)
        assert lv.fp_conf == 0.0 and lv.n_fp_conf == 0
    assert rep.summary()["hier_f1"] == 1.0
    assert rep.consistency == 1.0


@pytest.mark.parametrize("pred, expected", [("M", Fraction(2, 3)), ("N", Fraction(1, 3)), ("P", 0)])
def test_evaluate_example_scenarios(pred, expected):
    box = (0.5, 0.5, 0.3, 0.3)
    rep = evaluate([match([det(box, pred)], [truth(box, "L")])], TAX)
    assert rep.hier.deepest.fbeta == expected
    assert rep.levels[-1].f1 == 0.0


def test_evaluate_planted_errors_hand_tally():
    A, B = (0.25, 0.25, 0.2, 0.2), (0.75, 0.25, 0.2, 0.2)
    far = (0.75, 0.8, 0.1, 0.1)
    inconsistent = (TAX.index_of("C"), TAX.index_of("F"), TAX.index_of("O"))
    img1 = match(
        [det(A, "M", 0.9), det(B, "I", 0.8), det(far, classes=inconsistent, conf=0.7)],
        [truth(A, "L"), truth(B, "I")])
    img2 = match([det((0.6, 0.5, 0.2, 0.2), "N", 0.6)], [truth((0.5, 0.5, 0.2, 0.2), "N")])
    rep = evaluate([img1, img2], TAX)
    tally = [(lv.tp, lv.fp, lv.fn) for lv in rep.levels]
    assert tally == [(2, 2, 1), (2, 2, 1), (1, 3, 2)]
    assert rep.n_preds == 4 and rep.n_truths == 3 and rep.n_matched == 2
    assert rep.consistent_paths == 3
    assert (rep.fp_same_subgraph, rep.fp_subgraph_total, rep.fp_isolated) == (2, 2, 1)
    assert rep.hier.deepest.fbeta == Fraction(5, 6)
    s = rep.summary()
    assert s["l2.fp_conf_global"] == pytest.approx((0.9 + 0.7 + 0.6) / 3)
    assert s["l2.tp_conf_global"] == pytest.approx(0.8)


def test_same_subgraph_parent_rule():
    box = (0.5, 0.5, 0.3, 0.3)
    res = [match([det(box, "N")], [truth(box, "L")])]
    assert evaluate(res, TAX).fp_same_subgraph_fraction == 1.0
    assert evaluate(res, TAX, subgraph="parent").fp_same_subgraph_fraction == 0.0


def test_evaluate_empty():
    with pytest.raises(EmptySplit):
        evaluate([], TAX)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_flat_f1_not_above_hier_f1_in_micro_mode(seed):
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(3):
        truths, preds = [], []
        for k in range(int(rng.integers(1, 5))):
            box = (0.1 + 0.2 * k, 0.5, 0.1, 0.1)
            truths.append(truth(box, TAX.leaves[rng.integers(len(TAX.leaves))]))
            if rng.uniform() < 0.8:
                preds.append(det(box, TAX.leaves[rng.integers(len(TAX.leaves))], float(rng.uniform(0.3, 1))))
        if rng.uniform() < 0.5:
            preds.append(det((0.5, 0.9, 0.1, 0.1), "P", 0.4))
        results.append(match(preds, truths))
    rep = evaluate(results, TAX, mode="micro")
    if rep.hier is not None:
        assert rep.levels[-1].f1 <= float(rep.hier.deepest.fbeta) + 1e-12
    assert 0.0 <= rep.fp_same_subgraph_fraction <= 1.0


# -- dumps -----------------------------------------------------------------

def test_dump_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    dets = [DetectionPrediction(tuple(rng.uniform(0, 1, 4)), (0, 1, 3), tuple(rng.uniform(0, 1, 3)))
            for _ in range(20)]
    write_detections(tmp_path / "d.txt", dets)
    back = read_detections(tmp_path / "d.txt", 3)
    assert back == dets
    # confidences are recomputable from the dump exactly
    rep = evaluate([match(back, [])], TAX)
    assert rep.levels[-1].fp_conf_global == np.mean([d.conf for d in dets])


def test_dump_malformed():
    with pytest.raises(MalformedLine):
        parse_detection("0.9 1 0.9 0.5 0.5 0.1", 1)
    with pytest.raises(MalformedLine):
        parse_detection("0.9 x 0.9 0.5 0.5 0.1 0.1", 1)
