"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line (printed in the terminal summary under
"acceptance criteria") with the measured value and the time taken, then
asserts.  The two training criteria take a few minutes between them.
"""
import random
import time
from fractions import Fraction

import numpy as np
import pytest

from hyolo.config import RunConfig
from hyolo.evalkit import nms
from hyolo.hiermetrics import hier_precision, hier_recall, score_pair
from hyolo.losses import LossConfig, bce_with_logits, cls_loss_level, hierarchy_penalty
from hyolo.model import VARIANTS, ModelSpec, build_model, concat_edges
from hyolo.synthdata import GenConfig, generate_dataset, generate_scenes, load_dataset
from hyolo.taxonomy import example_taxonomy
from hyolo.tensor import Tensor, gradcheck
from hyolo.training import composite_gradcheck, evaluate_split, model_for, train

from test_evalkit import brute_nms, random_dets
from test_hiermetrics import ancestor_list, random_uniform_tree
from test_model import EXPECTED_EDGES
from test_synthdata import later_cover_fraction

TAX = example_taxonomy()

# Training recipe for the desk-scale criteria; everything not listed is a RunConfig default.
RECIPE = dict(variant="V4", epochs=60, batch=2, assign="neighbors", residual=2, weight_decay=0.005, seed=0)


class Clock:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.s = time.perf_counter() - self.t0


def test_c01_metric_fidelity(criterion):
    with Clock() as clk:
        got = {pred: score_pair(pred, "L", TAX) for pred in ("M", "N", "P")}
    want = {"M": Fraction(2, 3), "N": Fraction(1, 3), "P": Fraction(0)}
    ok = all(s.precision == s.recall == s.fbeta == want[p] for p, s in got.items()) and clk.s < 1
    criterion(1, ok, f"hier F1 M/N/P = {', '.join(str(got[p].fbeta) for p in 'MNP')} ({clk.s:.3f}s)")
    assert ok


def test_c02_metric_oracle(criterion):
    rng = random.Random(7)
    mismatches = 0
    with Clock() as clk:
        for _ in range(1000):
            tax, _ = random_uniform_tree(rng)
            edges = tax.edges()
            p, t = rng.choice(tax.nodes), rng.choice(tax.nodes)
            ap, at = ancestor_list(edges, p), ancestor_list(edges, t)
            common = sum(1 for n in ap if n in at)
            if (hier_precision(p, t, tax), hier_recall(p, t, tax)) != (
                    Fraction(common, len(ap)), Fraction(common, len(at))):
                mismatches += 1
    ok = mismatches == 0 and clk.s < 10
    criterion(2, ok, f"{mismatches} mismatches in 1000 random trees ({clk.s:.2f}s)")
    assert ok


def test_c03_alpha_zero_is_bce(criterion):
    rng = np.random.default_rng(3)
    cfg = LossConfig(w_cls=2.0, alpha=0.0)
    same = 0
    with Clock() as clk:
        for _ in range(100):
            level = int(rng.integers(1, 3))
            rows, n = int(rng.integers(1, 6)), TAX.level_sizes[level]
            z = rng.normal(scale=4, size=(rows, n))
            t = (rng.uniform(size=(rows, n)) < 0.3).astype(float)
            parents = rng.integers(0, TAX.level_sizes[level - 1], rows)
            loss, _ = cls_loss_level(level, Tensor(z), t, parents, TAX, cfg)
            same += loss.data.tobytes() == (cfg.w_cls * bce_with_logits(Tensor(z), t)).data.tobytes()
    ok = same == 100 and clk.s < 1
    criterion(3, ok, f"{same}/100 bitwise equal ({clk.s:.3f}s)")
    assert ok


def test_c04_penalty_linearity(criterion):
    rng = np.random.default_rng(4)
    cfg = LossConfig(w_cls=2.0, alpha=25.0)
    worst_analytic, worst_fd = 0.0, 0.0
    with Clock() as clk:
        for _ in range(20):
            level = int(rng.integers(1, 3))
            rows = int(rng.integers(1, 4))
            parents = rng.integers(0, TAX.level_sizes[level - 1], rows)
            conf = Tensor(rng.uniform(0.05, 0.95, (rows, TAX.level_sizes[level])), requires_grad=True)

            def f(c):
                return cfg.w_cls * cfg.alpha * hierarchy_penalty(c, parents, level, TAX, normalizer=1.0)

            f(conf).backward()
            expected = np.where(TAX.child_mask[level][parents], 0.0, cfg.w_cls * cfg.alpha)
            err = np.abs(conf.grad - expected) / np.maximum(np.abs(expected), 1.0)
            worst_analytic = max(worst_analytic, float(err.max()))
            conf.grad = None
            worst_fd = max(worst_fd, gradcheck(f, [conf], step=1e-4))
    ok = worst_analytic < 1e-6 and worst_fd < 1e-6 and clk.s < 10
    criterion(4, ok, f"dL/dconf vs w_cls*alpha rel err {worst_analytic:.1e}, gradcheck {worst_fd:.1e} ({clk.s:.2f}s)")
    assert ok


def test_c05_composite_gradcheck(criterion):
    with Clock() as clk:
        err = composite_gradcheck("V4", size=16, width=4, alpha=25.0, seed=0)
    ok = err < 1e-4 and clk.s < 120
    criterion(5, ok, f"V4 16x16, every parameter: max rel err {err:.2e} ({clk.s:.1f}s)")
    assert ok


def test_c06_architecture_wiring(criterion):
    spec = ModelSpec(width=8, head_width=8)
    x = np.random.default_rng(6).uniform(size=(1, 3, 32, 32))
    bad = []
    with Clock() as clk:
        for v in ("V1", "V2", "V3", "V4", "V5", "V6"):
            if concat_edges(v, 3) != EXPECTED_EDGES[v]:
                bad.append(f"{v}:edges")
            model = build_model(v, TAX, spec, seed=1)
            base, cut = model(x), model(x, ablate={0})
            if not np.array_equal(base.level_logits[0].data, cut.level_logits[0].data):
                bad.append(f"{v}:level0")
            if np.array_equal(base.level_logits[1].data, cut.level_logits[1].data):
                bad.append(f"{v}:flow")
    ok = not bad and clk.s < 60
    criterion(6, ok, f"V1-V6 edge sets and ablation probes, failures {bad or 'none'} ({clk.s:.2f}s)")
    assert ok


def test_c07_box_branch_invariance(criterion):
    rng = np.random.default_rng(7)
    differing = 0
    for v in VARIANTS:
        out = build_model(v, TAX, ModelSpec(width=8, head_width=8), seed=int(rng.integers(100)))(
            rng.uniform(size=(2, 3, 32, 32)))
        ref = out.level_boxes(0).tobytes()
        differing += sum(out.level_boxes(level).tobytes() != ref for level in range(1, TAX.depth))
    ok = differing == 0
    criterion(7, ok, f"{differing} level box maps differ from level 0 across {len(VARIANTS)} variants")
    assert ok


# -- desk-scale training -----------------------------------------------------

@pytest.fixture(scope="module")
def desk_dataset(tmp_path_factory):
    root = generate_dataset(GenConfig(depth=3, train=200, val=50, test=50, seed=0),
                            tmp_path_factory.mktemp("desk") / "data")
    return load_dataset(root)


@pytest.fixture(scope="module")
def desk_runs(desk_dataset):
    """Train the recipe at alpha=25 and alpha=0; returns {alpha: (summary, seconds)}."""
    out = {}
    for alpha in (25.0, 0.0):
        cfg = RunConfig(alpha=alpha, **RECIPE)
        model = model_for(cfg, desk_dataset.tax)
        t0 = time.perf_counter()
        train(model, desk_dataset, cfg)
        secs = time.perf_counter() - t0
        out[alpha] = (evaluate_split(model, desk_dataset["test"], cfg).summary(), secs)
    return out


@pytest.mark.slow
def test_c08_desk_scale_training(desk_runs, criterion):
    s, secs = desk_runs[25.0]
    flat0, hier = s["l0.flat_f1"], s["hier_f1"]
    ok = flat0 >= 0.90 and hier >= 0.70 and secs <= 900
    criterion(8, ok, f"V4 alpha=25, test split: level-0 flat F1 {flat0:.3f} (>= 0.90), "
                     f"deepest hier F1 {hier:.3f} (>= 0.70), {secs:.0f}s for 60 epochs")
    assert ok


@pytest.mark.slow
def test_c09_consistency_trend(desk_runs, criterion):
    with_pen, without = desk_runs[25.0][0]["path_consistency"], desk_runs[0.0][0]["path_consistency"]
    ok = with_pen >= without - 0.02
    criterion(9, ok, f"path consistency alpha=25 {with_pen:.3f} vs alpha=0 {without:.3f} (tolerance 0.02)")
    assert ok


def test_c10_not_reproducible(criterion):
    criterion(10, True, "published tables need the proprietary grocery dataset; "
                        "`hyolo report` reproduces their layout on synthetic runs", status="SKIP")
    pytest.skip("absolute values from the proprietary dataset are not reproducible")


def test_c11_generator_contract(criterion):
    with Clock() as clk:
        scenes = generate_scenes(GenConfig(depth=3, train=200, val=1, test=1, seed=11), "train")
        worst, ordered = 0.0, True
        for scene in scenes:
            masks = [p.mask for p in scene.placements]
            worst = max(worst, max(later_cover_fraction(masks)))
            areas = [int(m.sum()) for m in masks]
            ordered &= areas == sorted(areas, reverse=True)
    ok = worst <= 0.70 and ordered and clk.s < 30
    criterion(11, ok, f"200 scenes: max pixel occlusion {worst:.3f}, area order held {ordered} ({clk.s:.1f}s)")
    assert ok


def test_c12_nms_oracle(criterion):
    rng = np.random.default_rng(12)
    cases = [(random_dets(rng, 200), float(rng.choice([0.3, 0.5, 0.7]))) for _ in range(100)]
    with Clock() as clk:
        kept = [nms(dets, thr) for dets, thr in cases]
    equal = sum(k == [d[i] for i in brute_nms(d, thr)] for k, (d, thr) in zip(kept, cases))
    ok = equal == 100 and clk.s < 5
    criterion(12, ok, f"{equal}/100 instances equal the O(n^2) reference; nms time {clk.s:.2f}s")
    assert ok
