import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgrestore.relaxations import (
    EssHull,
    build_polygon,
    cc_violation,
    hull_contains,
    line_range_bound,
    polygon_constraints,
    row_satisfied,
)


def test_single_side_is_nonnegativity():
    poly = build_polygon(1, 1.0)
    assert poly.sides == [(0.0, 0.0)]
    rows = polygon_constraints(poly, "P", "Q", "l")
    assert len(rows) == 1
    assert rows[0].coeffs == {"l": 1.0} and rows[0].relation == ">=" and rows[0].rhs == 0.0


def test_tangent_at_one_is_exact():
    poly = build_polygon(3, 1.0)
    g, s = poly.sides[2]
    assert (g, s) == (2.0, -1.0)
    assert g * 1.0 + s == 1.0


def test_five_sides_grid_error():
    poly = build_polygon(5, 1.0)
    xs = np.linspace(-1, 1, 100001)
    err = np.max(xs**2 - poly.evaluate(xs))
    assert err == pytest.approx(0.0625, abs=1e-8)
    assert poly.max_error() == pytest.approx(0.0625)


def test_row_counts_by_pairing():
    poly = build_polygon(2, 1.0)
    assert len(polygon_constraints(poly, "P", "Q", "l")) == 4
    assert len(polygon_constraints(poly, "P", "Q", "l", pairing="shared")) == 2
    with pytest.raises(ValueError):
        polygon_constraints(poly, "P", "Q", "l", pairing="diagonal")


@pytest.mark.parametrize("sides", [1, 2, 3, 5, 9])
def test_exact_point_satisfies_all_rows(sides):
    poly = build_polygon(sides, 0.5)
    point = {"P": 0.1, "Q": 0.0, "l": 0.01}
    assert all(row_satisfied(r, point) for r in polygon_constraints(poly, "P", "Q", "l"))


def test_range_bound():
    assert line_range_bound(0.25, 1.05) == pytest.approx(0.525)


@pytest.mark.parametrize("sides", [1, 2, 4, 5, 11])
def test_under_approximation_on_grid(sides):
    poly = build_polygon(sides, 0.7)
    xs = np.linspace(-0.7, 0.7, 1000)
    vals = np.multiply.outer(xs, poly.gamma) + np.asarray(poly.psi)
    assert np.all(vals <= (xs**2)[:, None] + 1e-12)


def _feasible(k, point):
    return all(row_satisfied(r, point) for r in polygon_constraints(build_polygon(k, 1.0), "P", "Q", "l"))


@settings(max_examples=300, deadline=None)
@given(st.sampled_from([1, 2, 3]), st.floats(-1, 1), st.floats(-1, 1), st.floats(0, 2))
def test_finer_polygon_is_tighter_when_breakpoints_nest(k, p, q, l):
    point = {"P": p, "Q": q, "l": l}
    if _feasible(k + 2, point):
        assert _feasible(k, point)


def test_non_nested_refinement_is_not_a_subset():
    # 4 sides touch f^2 at 1/3, 6 sides do not, so a point just below the parabola there separates them
    point = {"P": 1 / 3, "Q": 1 / 3, "l": 0.2}
    assert _feasible(6, point)
    assert not _feasible(4, point)
    assert build_polygon(6, 1.0).max_error() < build_polygon(4, 1.0).max_error()


def test_refinement_containment_when_nested():
    # breakpoints of 3 sides are a subset of 5 sides, so feasible(5) is inside feasible(3)
    rng = np.random.default_rng(0)
    pts = rng.uniform([-1, -1, 0], [1, 1, 2], size=(5000, 3))
    r3 = polygon_constraints(build_polygon(3, 1.0), "P", "Q", "l")
    r5 = polygon_constraints(build_polygon(5, 1.0), "P", "Q", "l")
    for p, q, l in pts:
        pt = {"P": p, "Q": q, "l": l}
        if all(row_satisfied(r, pt) for r in r5):
            assert all(row_satisfied(r, pt) for r in r3)


def test_hull_examples():
    h = EssHull(0.2, 0.15)
    assert hull_contains(h, 0.0, 0.0)
    assert hull_contains(h, 0.2, 0.0)
    assert not hull_contains(h, 0.1, 0.1)
    assert not hull_contains(h, -0.01, 0.0)
    with pytest.raises(ValueError):
        EssHull(0.0, 1.0)


def test_cc_violation():
    assert cc_violation(0.2, 0.0) == 0.0
    assert cc_violation(0.0, 0.15) == 0.0
    assert cc_violation(0.1, 0.05) == pytest.approx(0.005)


def test_hull_matches_convex_hull_of_exact_set():
    h = EssHull(0.2, 0.15)
    rng = np.random.default_rng(1)
    n = 100_000
    # exact set: charge only or discharge only, within bounds
    def exact(m):
        charging = rng.random(m) < 0.5
        ch = np.where(charging, rng.uniform(0, h.p_ch_max, m), 0.0)
        dis = np.where(charging, 0.0, rng.uniform(0, h.p_dis_max, m))
        return ch, dis
    a_ch, a_dis = exact(n)
    b_ch, b_dis = exact(n)
    w = rng.random(n)
    ch = w * a_ch + (1 - w) * b_ch
    dis = w * a_dis + (1 - w) * b_dis
    assert all(hull_contains(h, c, d) for c, d in zip(ch, dis))

    # converse: hull points have barycentric weights in [0, 1] over the three vertices
    pts = rng.uniform(0, [h.p_ch_max, h.p_dis_max], size=(20000, 2))
    inside = pts[pts[:, 0] / h.p_ch_max + pts[:, 1] / h.p_dis_max <= 1]
    V = h.vertices()
    M = np.array([V[1] - V[0], V[2] - V[0]]).T
    lam = np.linalg.solve(M, (inside - V[0]).T).T
    w0 = 1 - lam.sum(axis=1)
    weights = np.column_stack([w0, lam])
    assert np.all(weights >= -1e-12) and np.all(weights <= 1 + 1e-12)
    assert np.allclose(weights.sum(axis=1), 1.0)
