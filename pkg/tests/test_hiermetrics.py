import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyolo.errors import EmptyInput, UnknownNode
from hyolo.hiermetrics import (HierPair, aggregate_scores, hier_fbeta, hier_precision, hier_recall,
                               score_pair)
from hyolo.taxonomy import ROOT, build_taxonomy, example_taxonomy, pad_to_uniform_depth

TAX = example_taxonomy()


def random_uniform_tree(rng, max_depth=6, max_nodes=100):
    """Random tree padded to uniform depth; redrawn until it has <= max_nodes nodes."""
    while True:
        edges, depth = [], {ROOT: 0}
        nodes = [ROOT]
        for i in range(rng.randint(1, max_nodes // 2)):
            parent = rng.choice([n for n in nodes if depth[n] < max_depth])
            edges.append((parent, f"c{i}"))
            depth[f"c{i}"] = depth[parent] + 1
            nodes.append(f"c{i}")
        tax = pad_to_uniform_depth(edges)
        if len(tax) <= max_nodes:
            return tax, edges


def ancestor_list(edges, node):
    """Explicit list of ancestors by walking the raw edge list (node included)."""
    up = {c: p for p, c in edges}
    out = []
    while node != ROOT:
        out.append(node)
        node = up[node]
    return out


@pytest.mark.parametrize("pred, expected", [("M", Fraction(2, 3)), ("N", Fraction(1, 3)), ("P", 0)])
def test_example_scenarios(pred, expected):
    s = score_pair(pred, "L", TAX)
    assert s.precision == s.recall == s.fbeta == expected


def test_identity_scores_one():
    for node in TAX.nodes:
        assert hier_precision(node, node, TAX) == 1
        assert hier_recall(node, node, TAX) == 1


def test_unknown_node():
    with pytest.raises(UnknownNode):
        hier_precision("Q", "L", TAX)


def test_fbeta_values():
    assert hier_fbeta(Fraction(2, 3), Fraction(2, 3), 1) == Fraction(2, 3)
    for beta in (0, 0.5, 1, 3):
        assert hier_fbeta(1, 1, beta) == 1
    assert hier_fbeta(0.5, 1.0, 2) == pytest.approx(5 * 0.5 / (4 * 0.5 + 1), abs=1e-15)
    assert hier_fbeta(Fraction(0), Fraction(0), 1) == 0
    with pytest.raises(ValueError):
        hier_fbeta(1, 1, -1)


def test_fbeta_zero_iff_product_zero():
    for p in (Fraction(0), Fraction(1, 3), Fraction(1)):
        for r in (Fraction(0), Fraction(1, 2), Fraction(1)):
            assert (hier_fbeta(p, r, 1) == 0) == (p * r == 0)


def test_aggregate_all_correct():
    rep = aggregate_scores([(leaf, leaf) for leaf in TAX.leaves], TAX)
    for lv in rep.levels:
        assert lv.precision == lv.recall == lv.fbeta == 1
    assert rep.worst.fbeta == 1


def test_aggregate_single_class_mean():
    rep = aggregate_scores([HierPair("L", "L"), HierPair("M", "L")], TAX)
    assert rep.deepest.classes["L"].fbeta == Fraction(5, 6)
    assert rep.worst.name == "L" and rep.worst.fbeta == Fraction(5, 6)


def test_aggregate_perfect_and_zero_classes():
    rep = aggregate_scores([("L", "L"), ("P", "I")], TAX)
    assert rep.deepest.fbeta == Fraction(1, 2)
    assert rep.worst.fbeta == 0 and rep.worst.name == "I"


def test_aggregate_micro_vs_macro():
    pairs = [("L", "L")] * 3 + [("P", "I")]
    assert aggregate_scores(pairs, TAX, mode="macro").deepest.fbeta == Fraction(1, 2)
    assert aggregate_scores(pairs, TAX, mode="micro").deepest.fbeta == Fraction(3, 4)


def test_aggregate_per_level_uses_level_nodes():
    # path-valued pairs: level 0 right, level 1 wrong, level 2 wrong
    rep = aggregate_scores([(("B", "G", "N"), ("B", "F", "L"))], TAX)
    assert [lv.fbeta for lv in rep.levels] == [1, Fraction(1, 2), Fraction(1, 3)]


def test_aggregate_empty():
    with pytest.raises(EmptyInput):
        aggregate_scores([], TAX)


def test_csv_layout():
    text = aggregate_scores([("L", "L"), ("M", "L")], TAX).to_csv()
    lines = text.splitlines()
    assert lines[0] == "level,class,precision,recall,fbeta,n"
    assert "2,L,0.8333,0.8333,0.8333,2" in lines
    assert lines[-1].startswith("*,worst,")


def test_monotone_in_shared_prefix():
    tax = build_taxonomy([(ROOT, "a"), (ROOT, "b"), ("a", "a1"), ("a", "a2"), ("b", "b1"),
                          ("a1", "x"), ("a1", "y"), ("a2", "z"), ("b1", "w")])
    # predictions at the leaf level sharing 0, 1 and 2 ancestors with truth "x"
    scores = [score_pair(p, "x", tax) for p in ("w", "z", "y")]
    assert [s.precision for s in scores] == sorted(s.precision for s in scores)
    assert [s.recall for s in scores] == sorted(s.recall for s in scores)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_symmetry(seed):
    rng = random.Random(seed)
    tax, _ = random_uniform_tree(rng)
    nodes = tax.nodes
    a, b = rng.choice(nodes), rng.choice(nodes)
    assert hier_precision(a, b, tax) == hier_recall(b, a, tax)
    s = score_pair(a, b, tax)
    assert 0 <= s.precision <= 1 and 0 <= s.recall <= 1 and 0 <= s.fbeta <= 1
    assert (s.fbeta == 0) == (tax.path(a)[0] != tax.path(b)[0])


def test_random_trees_match_set_oracle():
    rng = random.Random(2024)
    for _ in range(1000):
        tax, _ = random_uniform_tree(rng)
        edges = tax.edges()
        assert tax.depth <= 6 and len(tax) <= 100
        p, t = rng.choice(tax.nodes), rng.choice(tax.nodes)
        ap, at = ancestor_list(edges, p), ancestor_list(edges, t)
        common = sum(1 for n in ap if n in at)
        assert hier_precision(p, t, tax) == Fraction(common, len(ap))
        assert hier_recall(p, t, tax) == Fraction(common, len(at))
