import numpy as np
import pytest

from hyolo.errors import DepthMismatch, ShapeMismatch
from hyolo.losses import LossConfig, assign_targets, detection_loss
from hyolo.model import (STRIDE, VARIANTS, HierHeadOutput, ModelSpec, build_model, concat_edges,
                         decode)
from hyolo.taxonomy import example_taxonomy
from hyolo.tensor import SGD, Tensor

TAX = example_taxonomy()
SMALL = ModelSpec(width=8, head_width=8)
ALL = ("V1", "V2", "V3", "V4", "V5", "V6")

# Expected merge edges for a depth-3 tree, written out by hand from the wiring table:
# (source level, source point, destination level, destination point).
EXPECTED_EDGES = {
    "V1": {(0, "cls", 1, "input"), (1, "cls", 2, "input")},
    "V2": {(0, "cls", 1, "conv2"), (1, "cls", 2, "conv2")},
    "V3": {(0, "conv1", 1, "conv1"), (1, "conv1", 2, "conv1")},
    "V4": {(0, "cls", 1, "cls"), (1, "refine", 2, "cls")},
    "V5": {(0, "conv2", 1, "conv2"), (1, "conv2", 2, "conv2")},
    "V6": {(0, "cls", 1, "cls"), (1, "refine", 2, "cls"), (0, "cls", 2, "cls")},
    "FLAT": set(),
}


def conv_params(cin, cout, k=3):
    return cout * cin * k * k + cout


def hand_count(variant, spec, sizes):
    """Parameter count from the wiring table, independent of the model code."""
    w, h, r = spec.width, spec.head_width, spec.reg_max
    total = conv_params(3, w // 2) + conv_params(w // 2, w) + conv_params(w, w)
    total += 2 * spec.residual * conv_params(w, w)
    total += conv_params(w, h) + conv_params(h, h) + conv_params(h, 4 * r)
    concat_at = {"V1": "input", "V2": "conv2", "V3": "conv1", "V4": "cls", "V5": "conv2", "V6": "cls"}.get(variant)
    exported = []  # channels each level hands to the next
    for l, s in enumerate(sizes):
        srcs = [] if l == 0 or concat_at is None else [l - 1] + ([0] if variant == "V6" and l >= 2 else [])
        inc = sum(exported[j] for j in srcs)
        c1_in = w + (inc if concat_at == "input" else 0)
        c1_out = h + (inc if concat_at == "conv1" else 0)
        c2_out = h + (inc if concat_at == "conv2" else 0)
        total += conv_params(c1_in, h) + conv_params(c1_out, h) + conv_params(c2_out, s)
        if variant in ("V4", "V6") and l >= 1:
            total += conv_params(s + inc, s)
        exported.append({"V3": c1_out, "V5": c2_out}.get(variant, s))
    return total


def images(b=2, size=64, seed=0):
    return np.random.default_rng(seed).uniform(size=(b, 3, size, size))


def test_output_shapes():
    model = build_model("V4", TAX, SMALL)
    out = model(images())
    assert [t.shape for t in out.level_logits] == [(2, 3, 8, 8), (2, 4, 8, 8), (2, 7, 8, 8)]
    assert out.box_map.shape == (2, 4 * SMALL.reg_max, 8, 8)
    assert model.layers["head.l2.refine"].out_channels == 7


def test_forward_shape_errors():
    model = build_model("V1", TAX, SMALL)
    with pytest.raises(ShapeMismatch):
        model(np.zeros((1, 1, 16, 16)))
    with pytest.raises(ShapeMismatch):
        model(np.zeros((1, 3, 20, 16)))
    with pytest.raises(ShapeMismatch):
        model(np.zeros((3, 16, 16)))


def test_depth_mismatch():
    with pytest.raises(DepthMismatch):
        build_model("V4", TAX, SMALL, depth=2)


@pytest.mark.parametrize("variant", list(EXPECTED_EDGES))
def test_concat_edges(variant):
    assert concat_edges(variant, 3) == EXPECTED_EDGES[variant]


@pytest.mark.parametrize("variant", list(VARIANTS))
@pytest.mark.parametrize("residual", [0, 2])
def test_parameter_count_matches_hand_count(variant, residual):
    spec = ModelSpec(width=8, head_width=8, residual=residual)
    model = build_model(variant, TAX, spec)
    assert model.num_parameters() == hand_count(variant, spec, TAX.level_sizes)


def test_v1_v4_share_backbone():
    a, b = build_model("V1", TAX, SMALL, seed=3), build_model("V4", TAX, SMALL, seed=3)
    for name in a.params:
        if name.startswith(("backbone", "box")):
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
    assert a.num_parameters("head") != b.num_parameters("head")
    assert not any(k.startswith("head.l0.refine") for k in b.params)
    assert "head.l1.refine.weight" in b.params and "head.l1.refine.weight" not in a.params


@pytest.mark.parametrize("variant", list(VARIANTS))
def test_ablation_probe(variant):
    model = build_model(variant, TAX, SMALL, seed=1)
    x = images(1, 32)
    base = model(x)
    cut = model(x, ablate={0})
    np.testing.assert_array_equal(base.level_logits[0].data, cut.level_logits[0].data)
    changed = not np.array_equal(base.level_logits[1].data, cut.level_logits[1].data)
    assert changed == (variant != "FLAT")
    if variant == "V6":
        # level 2 still sees level 0 directly, so ablating level 1 alone does not isolate it
        only1 = model(x, ablate={1})
        both = model(x, ablate={0, 1})
        assert not np.array_equal(only1.level_logits[2].data, both.level_logits[2].data)


@pytest.mark.parametrize("variant", list(VARIANTS))
def test_level0_ignores_deeper_parameters(variant):
    model = build_model(variant, TAX, SMALL, seed=2)
    x = images(1, 32)
    before = model(x).level_logits[0].data.copy()
    for name, t in model.params.items():
        if name.startswith(("head.l1", "head.l2")):
            t.data = t.data + 1.0
    np.testing.assert_array_equal(model(x).level_logits[0].data, before)


@pytest.mark.parametrize("variant", ALL)
def test_boxes_identical_across_levels(variant):
    out = build_model(variant, TAX, SMALL, seed=4)(images(2, 32, seed=5))
    ref = out.level_boxes(0)
    for level in range(1, TAX.depth):
        assert out.level_boxes(level).tobytes() == ref.tobytes()


def test_decode_empty_when_all_logits_low():
    logits = [Tensor(np.full((1, s, 2, 2), -20.0)) for s in TAX.level_sizes]
    out = HierHeadOutput(logits, Tensor(np.zeros((1, 32, 2, 2))), 8)
    assert decode(out, 0.25) == [[]]


def test_decode_deterministic_and_threshold():
    out = build_model("V4", TAX, SMALL, seed=6)(images(2, 32))
    a, b = decode(out, 0.0), decode(out, 0.0)
    assert a == b
    assert sum(len(d) for d in a) == 2 * 4 * 4
    assert decode(out, 1.0) == [[], []]


def test_state_dict_round_trip_and_mismatch():
    a = build_model("V4", TAX, SMALL, seed=0)
    b = build_model("V4", TAX, SMALL, seed=9)
    b.load_state_dict(a.state_dict())
    x = images(1, 16)
    np.testing.assert_array_equal(a(x).level_logits[2].data, b(x).level_logits[2].data)
    with pytest.raises(ShapeMismatch):
        build_model("V1", TAX, SMALL).load_state_dict(a.state_dict())


def test_overfit_single_image_decodes_target_path():
    model = build_model("V4", TAX, ModelSpec(width=8, head_width=8), seed=0)
    x = images(1, 32, seed=7)
    leaf = "M"
    path = TAX.leaf_path(leaf)
    targets = assign_targets([[(path, (0.4, 0.6, 0.3, 0.3))]], (4, 4), STRIDE, 8)
    opt = SGD(model.parameters(), lr=0.02, momentum=0.9, max_norm=10.0)
    cfg = LossConfig(alpha=25.0)
    for _ in range(150):
        out = model(x)
        loss, _ = detection_loss(out.level_logits, out.box_map, targets, TAX, cfg)
        model.zero_grad()
        loss.backward()
        opt.step()
    dets = decode(model(x), 0.5)[0]
    assert len(dets) == 1
    assert dets[0].classes == path


def test_batch_norm_modes_and_state():
    spec = ModelSpec(width=8, head_width=8, norm=True)
    model = build_model("V4", TAX, spec, seed=0)
    assert "backbone.0.bn.weight" in model.params and "head.l0.cls.bn.weight" not in model.params
    assert model.num_parameters() == hand_count("V4", spec, TAX.level_sizes) + 2 * sum(
        s.out_channels for n, s in model.layers.items() if f"{n}.bn.weight" in model.params)
    x = images(2, 32)
    eval_out = model(x).level_logits[0].data
    model.training = True
    train_out = model(x).level_logits[0].data
    model.training = False
    assert not np.array_equal(eval_out, train_out)
    # one training-mode pass moved the running statistics, so eval output changed too
    assert not np.array_equal(model(x).level_logits[0].data, eval_out)
    clone = build_model("V4", TAX, spec, seed=5)
    clone.load_state_dict(model.state_dict())
    np.testing.assert_array_equal(clone(x).level_logits[2].data, model(x).level_logits[2].data)
