import re

import numpy as np
import pytest

from conftest import affine_net, random_tail
from mmlens.concepts import partition_dataset, prune_empty
from mmlens.minmax import AffineFunction, ExpansionConfig, MinMaxExpr, Node, build_minmax, leaf
from mmlens.viz import FigureLayout, OverlaySpec, choose_samples, render_factor_heat, render_hierarchy, render_overlay

POLY = re.compile(r"<polyline [^>]*>")


def waves(n, seed=0, length=30):
    rng = np.random.default_rng(seed)
    X = np.sin(np.linspace(0, 3, length))[None, :] + 0.05 * rng.standard_normal((n, length))
    return X, rng.integers(0, 2, n)


def test_single_template_one_polyline_at_alpha():
    X, y = waves(1)
    svg = render_overlay(X, y, OverlaySpec(alpha=0.005, r_index=5))
    lines = POLY.findall(svg)
    assert len(lines) == 1
    assert 'stroke-opacity="0.005"' in lines[0]
    assert len(lines[0].split('points="')[1].split()) == 30


def test_colors_follow_labels():
    X, _ = waves(2)
    svg = render_overlay(X, np.array([1, 0]), OverlaySpec(r_index=5))
    lines = POLY.findall(svg)
    assert OverlaySpec().positive_color in lines[0] and OverlaySpec().negative_color in lines[1]


def test_cap_limits_polylines():
    X, y = waves(10_000, length=12)
    svg = render_overlay(X, y, OverlaySpec(sample_cap=4000, r_index=3))
    assert len(POLY.findall(svg)) == 4000


def test_under_cap_draws_each_once():
    assert choose_samples(7, OverlaySpec(sample_cap=10)).tolist() == list(range(7))


def test_same_seed_same_bytes():
    X, y = waves(500, length=12)
    spec = OverlaySpec(sample_cap=100, r_index=3, rng_seed=4)
    assert render_overlay(X, y, spec) == render_overlay(X, y, OverlaySpec(sample_cap=100, r_index=3, rng_seed=4))
    assert render_overlay(X, y, spec) != render_overlay(X, y, OverlaySpec(sample_cap=100, r_index=3, rng_seed=5))


def test_empty_overlay_is_placeholder():
    svg = render_overlay(np.zeros((0, 10)), np.zeros(0))
    assert "n = 0" in svg and not POLY.findall(svg)


@pytest.mark.parametrize("alpha", [0.0, 0.01, 0.5])
def test_alpha_out_of_range_rejected(alpha):
    with pytest.raises(ValueError):
        OverlaySpec(alpha=alpha)


def three_way_tree():
    # embedding z in R^1, three leaves; every sample lands on exactly one of them
    net = affine_net([(np.array([[1.0]]), np.zeros(1)), (np.array([[1.0]]), np.zeros(1))], 1)
    expr = MinMaxExpr(Node("min", [leaf([1.0], 0.0), leaf([0.5], 0.5), leaf([2.0], -1.0)]))
    Z = np.linspace(0.05, 3, 60)[:, None]
    return partition_dataset(expr, net, Z, (Z[:, 0] > 1).astype(int)), Z


def test_hierarchy_depth_one_three_children():
    tree, Z = three_way_tree()
    layout = FigureLayout.from_tree(tree)
    assert [len(r) for r in layout.rows] == [1, 3]
    layout.check_conservation()
    X = np.tile(Z, (1, 10))
    svg = render_hierarchy(layout, X, tree.labels, OverlaySpec(r_index=2))
    assert svg.count("<!-- panel ") == 4
    assert ">Min</text>" in svg
    assert len(POLY.findall(svg)) == 2 * 60


def test_single_node_tree_one_panel():
    net = affine_net([(np.array([[1.0]]), np.zeros(1)), (np.array([[1.0]]), np.zeros(1))], 1)
    expr = MinMaxExpr(Node("min", [leaf([1.0], 0.0)]))
    X = np.ones((5, 1))
    tree = prune_empty(partition_dataset(expr, net, X, np.ones(5)))
    svg = render_hierarchy(tree, np.ones((5, 8)), np.ones(5), OverlaySpec(r_index=2), max_depth=0)
    assert svg.count("<!-- panel ") == 1


def test_layout_conservation_on_expanded_tree():
    rng = np.random.default_rng(3)
    net = random_tail(rng, [3, 4, 4, 1])
    expr = build_minmax(net, cfg=ExpansionConfig(full_enumeration=True, expansion_depth=2))
    X = rng.standard_normal((300, 3))
    tree = prune_empty(partition_dataset(expr, net, X, rng.integers(0, 2, 300)))
    layout = FigureLayout.from_tree(tree)
    assert len(layout.rows) == 5
    layout.check_conservation()
    # corrupt: drop a sample from one row
    layout.rows[2][0].members = layout.rows[2][0].members[1:]
    with pytest.raises(AssertionError):
        layout.check_conservation()


def test_hierarchy_is_deterministic():
    tree, Z = three_way_tree()
    X = np.tile(Z, (1, 10))
    spec = OverlaySpec(r_index=2, sample_cap=10, rng_seed=1)
    assert render_hierarchy(tree, X, tree.labels, spec) == render_hierarchy(tree, X, tree.labels, spec)


def bar_values(svg):
    return [float(v) for v in re.findall(r'data-value="([^"]+)"', svg)]


def test_factor_heat_zero_leaf():
    svg = render_factor_heat(AffineFunction(np.zeros(4), 0.0))
    assert bar_values(svg) == [0.0] * 5
    assert set(re.findall(r'class="bar"[^>]*height="([^"]+)"', svg)) == {"0.0"}


def test_factor_heat_unit_bar():
    svg = render_factor_heat(AffineFunction(np.array([1.0, 0, 0, 0, 0]), 0.0))
    assert bar_values(svg) == [1.0, 0, 0, 0, 0, 0]
    heights = [float(h) for h in re.findall(r'class="bar"[^>]*height="([^"]+)"', svg)]
    assert heights[0] > 0 and heights[1:] == [0.0] * 5
