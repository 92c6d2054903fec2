import numpy as np
import pytest

from ibcm import _bezier as bz
from ibcm.errors import MalformedLoopError, UnsupportedConfigurationError
from ibcm.splines import KnotVector, NurbsCurve, arc, circle, line_segment, rectangle_patch
from ibcm.trimming import (CUT, FULL, INACTIVE, TrimmedDomain, TrimmingLoop, _loop_area,
                           _global_inside, _region_loops, classify_elements,
                           decompose_cut_element, fit_bezier_segment, split_segment_at_c0)


def polygon_loop(pts):
    pts = [np.asarray(p, float) for p in pts]
    return TrimmingLoop([line_segment(a, b) for a, b in zip(pts, pts[1:] + pts[:1])])


def shoelace(pts):
    x, y = np.asarray(pts, float).T
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def region_area(td, eid):
    cls = td.classification
    loops = _region_loops(cls.box(eid), cls.pieces[eid], _global_inside(cls), 1e-11)
    return sum(_loop_area(lp) for lp in loops)


# -- splitting and fitting -------------------------------------------------

def test_split_smooth_and_cornered():
    assert len(split_segment_at_c0(arc((0, 0), 1.0, 0, 0.5))) == 1
    kv = KnotVector([0, 0, 0, 0.5, 0.5, 1, 1, 1], 2)
    corner = NurbsCurve(kv, [[0, 0], [0.5, 0], [1, 0], [1, 0.5], [1, 1]])
    pieces = split_segment_at_c0(corner)
    assert pieces == [(0.0, 0.5), (0.5, 1.0)]
    kv3 = KnotVector([0, 0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 4], 2)
    P = np.array([[0, 0], [1, 0], [2, 0], [2, 1], [2, 2], [1, 2], [0, 2], [0, 3], [0, 4]], float)
    three = NurbsCurve(kv3, P)
    pcs = split_segment_at_c0(three)
    assert len(pcs) == 4
    assert pcs[0][0] == 0 and pcs[-1][1] == 4
    assert all(a[1] == b[0] for a, b in zip(pcs, pcs[1:]))


def test_fit_reproduces_quadratic_bezier():
    ctrl = np.array([[0.1, 0.2], [0.7, 1.3], [1.1, 0.4]])
    c = NurbsCurve(KnotVector([0, 0, 0, 1, 1, 1], 2), ctrl)
    fit, res = fit_bezier_segment(c, 0.0, 1.0, 2)
    assert np.max(np.abs(fit - ctrl)) < 1e-12
    assert res < 1e-12


def test_fit_straight_segment_collinear():
    c = line_segment((0, 0), (2, 1), degree=1)
    fit, _ = fit_bezier_segment(c, 0.2, 0.9, 2)
    d = fit[-1] - fit[0]
    off = (fit[:, 0] - fit[0, 0]) * d[1] - (fit[:, 1] - fit[0, 1]) * d[0]
    assert np.max(np.abs(off)) < 1e-14


@pytest.mark.parametrize("par", ["native", "chord"])
def test_fit_quarter_circle_residual(par):
    c = arc((0, 0), 1.0, 0.0, np.pi / 2)
    u = np.linspace(0, 1, 2001)
    errs = []
    for t1 in (1.0, 0.5):
        ctrl, _ = fit_bezier_segment(c, 0.0, t1, 2, parameterization=par)
        errs.append(np.max(np.abs(np.linalg.norm(bz.bez_eval(ctrl, u), axis=1) - 1)))
    chord = np.sqrt(2.0)
    assert errs[0] < 1e-2 * chord
    assert errs[0] / errs[1] > 3.5


# -- classification ----------------------------------------------------------

def test_circle_in_4x4_grid_counts_and_area():
    P = rectangle_patch(0, 4, 0, 4, 4, 4, degree=2)
    R = 0.8
    loop = TrimmingLoop.from_curve(circle((2, 2), R, ccw=False))
    td = TrimmedDomain(P, [loop], fit_tol=1e-6)
    counts = td.classification.counts()
    assert sum(counts.values()) == 16
    assert counts == {"inactive": 0, "full": 12, "cut": 4}
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 4, (1_000_000, 2))
    mc = 16 * np.mean(np.linalg.norm(pts - 2, axis=1) > R)
    assert abs(td.active_area() - mc) / mc < 1e-3
    assert abs(td.active_area() - (16 - np.pi * R * R)) / (16 - np.pi * R * R) < 1e-6


@pytest.mark.parametrize("ccw", [True, False])
def test_circle_area_fine_fitting(ccw):
    P = rectangle_patch(0, 1, 0, 1, 10, 10, degree=2)
    R = 0.31
    td = TrimmedDomain(P, [TrimmingLoop.from_curve(circle((0.47, 0.52), R, ccw=ccw))], fit_tol=1e-8)
    exact = np.pi * R * R if ccw else 1 - np.pi * R * R
    assert abs(td.active_area() - exact) / exact < 1e-6


def test_nested_circle_inside_one_element():
    P = rectangle_patch(0, 3, 0, 3, 3, 3, degree=2)
    R = 0.3
    td = TrimmedDomain(P, [TrimmingLoop.from_curve(circle((1.4, 1.55), R, ccw=False))], fit_tol=1e-7)
    tags = td.tags
    assert tags[1, 1] == CUT
    assert np.sum(tags == FULL) == 8
    assert abs(td.active_area() - (9 - np.pi * R * R)) < 1e-7
    inside = TrimmedDomain(P, [TrimmingLoop.from_curve(circle((1.4, 1.55), R))], fit_tol=1e-7)
    assert np.sum(inside.tags == INACTIVE) == 8
    assert abs(inside.active_area() - np.pi * R * R) < 1e-7


def test_full_and_inactive_elements():
    P = rectangle_patch(0, 4, 0, 4, 4, 4, degree=2)
    td = TrimmedDomain(P, [polygon_loop([(0.5, 0.5), (3.5, 0.5), (3.5, 3.5), (0.5, 3.5)])])
    assert td.tags[1, 1] == FULL and td.tags[2, 2] == FULL
    hole = TrimmedDomain(P, [polygon_loop([(0.5, 0.5), (0.5, 3.5), (3.5, 3.5), (3.5, 0.5)])])
    assert hole.tags[1, 1] == INACTIVE
    assert hole.tags[0, 0] == CUT


def test_chord_cut_matches_shoelace():
    P = rectangle_patch(0, 4, 0, 4, 4, 4, degree=2)
    pts = [(0.3, 0.5), (3.7, 0.6), (3.5, 3.3), (0.5, 3.4)]
    td = TrimmedDomain(P, [polygon_loop(pts)])
    assert abs(td.active_area() - shoelace(pts)) < 1e-10
    tri = [(0.2, 0.3), (3.9, 1.1), (1.3, 3.8)]
    td = TrimmedDomain(P, [polygon_loop(tri)])
    assert abs(td.active_area() - shoelace(tri)) < 1e-10


def test_arc_entering_and_leaving_one_side():
    P = rectangle_patch(-1, 2, -1, 2, 3, 3, degree=2)
    loop = TrimmingLoop.from_curve(circle((0.5, -0.1), 0.3, ccw=False))
    td = TrimmedDomain(P, [loop])
    eid = td.classification.element_id(1, 1)
    assert td.tags.flat[eid] == CUT
    cells = td.cells[eid]
    g = np.linspace(0.01, 0.99, 15)
    st = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    assert all(np.all(c.jacobian_det(st) > 0) for c in cells)
    assert abs(sum(c.area() for c in cells) - region_area(td, eid)) < 1e-10


def test_untrimmed_quadrant_is_single_affine_cell():
    box = ((0.0, 0.5), (0.0, 0.5))
    cells = decompose_cut_element(box, [], 2, lambda x: True)
    assert len(cells) == 1
    assert abs(cells[0].area() - 0.25) < 1e-15


def test_malformed_and_unsupported_loops():
    with pytest.raises(MalformedLoopError):
        TrimmingLoop([line_segment((0, 0), (1, 0)), line_segment((1, 0), (1, 1))])
    P = rectangle_patch(0, 1, 0, 1, 4, 4, degree=2)
    with pytest.raises(UnsupportedConfigurationError):
        classify_elements(P, [TrimmingLoop.from_curve(circle((0.5, 0.5), 0.5))])


# -- invariants --------------------------------------------------------------

def _random_case(rng):
    n = int(rng.integers(3, 16))
    R = rng.uniform(0.05, 0.4)
    c = rng.uniform(R + 0.03, 1 - R - 0.03, 2)
    ccw = bool(rng.integers(2))
    P = rectangle_patch(0, 1, 0, 1, n, n, degree=2)
    return TrimmedDomain(P, [TrimmingLoop.from_curve(circle(c, R, start=rng.uniform(0, 6), ccw=ccw))])


def test_area_conservation_and_orientation_random():
    rng = np.random.default_rng(11)
    x = 0.5 * (np.polynomial.legendre.leggauss(3)[0] + 1)
    st = np.stack(np.meshgrid(x, x, indexing="ij"), axis=-1).reshape(-1, 2)
    for _ in range(25):
        td = _random_case(rng)
        for eid, cells in td.cells.items():
            g = region_area(td, eid)
            a = sum(c.area() for c in cells)
            assert abs(a - g) <= 1e-8 * max(abs(g), 1e-14)
            assert all(np.all(c.jacobian_det(st) > 0) for c in cells)


def test_classification_idempotent_under_refinement():
    loop = TrimmingLoop.from_curve(circle((0.43, 0.55), 0.27, ccw=False))
    P = rectangle_patch(0, 1, 0, 1, 6, 6, degree=2)
    coarse = classify_elements(P, [loop]).tags
    fine = classify_elements(P.dyadic_refined(1), [loop]).tags
    for i in range(12):
        for j in range(12):
            parent = coarse[i // 2, j // 2]
            if parent == FULL:
                assert fine[i, j] != INACTIVE
            if parent == INACTIVE:
                assert fine[i, j] != FULL


def test_boundary_fidelity_rate():
    loop = TrimmingLoop.from_curve(circle((2.1, 1.93), 1.3, ccw=False))
    res = [classify_elements(rectangle_patch(0, 4, 0, 4, n, n, degree=2), [loop]).max_fit_residual
           for n in (16, 32, 64)]
    for a, b in zip(res, res[1:]):
        assert 6 <= a / b <= 10


def test_is_active_points():
    P = rectangle_patch(0, 1, 0, 1, 5, 5, degree=2)
    td = TrimmedDomain(P, [TrimmingLoop.from_curve(circle((0.5, 0.5), 0.25, ccw=False))])
    pts = np.array([[0.5, 0.5], [0.05, 0.05], [0.5, 0.74], [0.5, 0.76], [0.3, 0.5]])
    assert td.is_active(pts).tolist() == [False, True, False, True, False]


def test_fan_cell_with_tangential_apex_is_invalid():
    # positive at all 4x4 Gauss points, negative near the apex side of the curve
    from ibcm.trimming import QuadCell
    c = QuadCell(np.array([[[0.4071, 0.5], [0.4161, 0.5127], [0.4279, 0.5202]], [[0.5, 0.625]] * 3]))
    s = np.linspace(0, 1, 201)
    st = np.stack(np.meshgrid(s, s, indexing="ij"), axis=-1).reshape(-1, 2)
    assert c.jacobian_det(st).min() < 0
    assert not c.is_valid()
    ok = QuadCell(np.array([[[0.4, 0.5], [0.45, 0.48], [0.5, 0.5]], [[0.45, 0.625]] * 3]))
    assert ok.is_valid()


def test_bernstein_nonnegativity():
    assert bz.nonnegative(bz.product(np.array([1.0, -0.2, 1.0]), np.array([1.0, 1.0])))
    # (s - 0.5)^2 - 1e-4 dips below zero
    c = np.array([0.25, -0.25, 0.25]) - 1e-4
    assert not bz.nonnegative(c)
    assert bz.nonnegative(c + 1e-4)
