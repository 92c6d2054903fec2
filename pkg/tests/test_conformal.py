import numpy as np
import pytest

from ibcm.conformal import (build_layer, build_layer_loft, build_layer_ruled, check_bijectivity,
                            curvature, offset_curve, project_greville)
from ibcm.errors import IncompatibilityError, PreconditionError
from ibcm.splines import (KnotVector, NurbsCurve, circle, closed_quadratic, rectangle_patch,
                          refine_knots)

RNG = np.random.default_rng(5)


def flower(R0=1.0, A=0.25, k=5, m=60, center=(0.0, 0.0)):
    th = np.linspace(0, 2 * np.pi, m, endpoint=False)
    r = R0 + A * np.cos(k * th)
    return closed_quadratic(np.column_stack([center[0] + r * np.cos(th), center[1] + r * np.sin(th)]))


def rounded_square(h=1.0, m=12):
    # quadratic B-spline with a square control polygon: smooth, square-like
    s = np.linspace(-h, h, m, endpoint=False)
    pts = np.concatenate([np.column_stack([s, -h * np.ones(m)]), np.column_stack([h * np.ones(m), s]),
                          np.column_stack([-s, h * np.ones(m)]), np.column_stack([-h * np.ones(m), -s])])
    return closed_quadratic(pts)


def test_offset_circle_is_exact():
    c = circle((0, 0), 1.0)
    t, rep = offset_curve(c, 0.25)
    s = np.linspace(0, 1, 2000)
    assert np.max(np.abs(np.linalg.norm(t.curve.evaluate(s), axis=1) - 0.75)) < 1e-6
    assert rep.ok and not rep
    assert t.provenance == "offset"


def test_zero_offset_returns_gamma():
    c = circle((0.3, 0.1), 2.0)
    t, rep = offset_curve(c, 0.0)
    assert t.curve is c and rep.ok


def test_flower_offset_reports_defects():
    f = flower(A=0.3, k=5)
    s = np.linspace(0, 1, 4001)
    kappa = curvature(f, s)
    rho = 1.0 / kappa.max()
    _, rep = offset_curve(f, 1.5 * rho)
    assert rep
    _, ok = offset_curve(f, 0.3 * rho)
    assert not ok.local


def test_projection_concentric_and_square():
    c = circle((0, 0), 1.0)
    pr = project_greville(c, circle((0, 0), 0.5))
    G = c.greville_points()
    assert np.allclose(pr, 0.5 * G / np.linalg.norm(G, axis=1)[:, None], atol=1e-12)
    sq = rounded_square(1.0)
    pr = project_greville(sq, circle((0, 0), 0.5))
    assert np.max(np.abs(np.linalg.norm(pr, axis=1) - 0.5)) < 1e-9
    with pytest.raises(PreconditionError):
        project_greville(c, circle((0.8, 0), 0.5))


def test_ruled_layer_reproduces_gamma():
    c = circle((0, 0), 1.0)
    L = build_layer_ruled(c, project_greville(c, circle((0, 0), 0.6)))
    s = RNG.uniform(0, 1, 100)
    edge = L.patch.evaluate(np.column_stack([s, np.zeros_like(s)]))
    assert np.max(np.abs(edge - c.evaluate(s))) < 1e-14
    assert L.patch.kv_u == c.kv
    assert np.array_equal(L.patch.edge_curve("v0").control_points, c.control_points)
    assert check_bijectivity(L)[0] > 0


@pytest.mark.parametrize("frac", [0.2, 0.6, 1.0])
def test_plate_hole_layers(frac):
    R = 1.0
    hole = circle((0, 0), R, ccw=False)  # plate lies to the left
    L = build_layer(hole, thickness=frac * R)
    assert check_bijectivity(L)[0] > 0
    r = np.linalg.norm(L.target.evaluate(np.linspace(0, 1, 50)), axis=1)
    assert np.all(r > R)


@pytest.mark.parametrize("t", [0.1, 0.5, 0.9])
def test_annulus_bijective_for_t_below_radius(t):
    c = circle((0, 0), 1.0)
    L = build_layer(c, thickness=t).refined(2, 2)
    assert check_bijectivity(L)[0] > 0 and L.valid


def test_loft_matches_ruled_after_refinement():
    c = circle((0, 0), 1.0)
    inner = refine_knots(NurbsCurve(c.kv, 0.8 * c.control_points, c.weights), [0.1, 0.6])
    loft = build_layer_loft(c, inner)
    ruled = build_layer_ruled(c, 0.8 * c.control_points)
    ruled = ruled.patch.refined([0.1, 0.6], [])
    uv = RNG.uniform(0, 1, (200, 2))
    assert np.max(np.abs(loft.patch.evaluate(uv) - ruled.evaluate(uv))) < 1e-12
    s = RNG.uniform(0, 1, 100)
    assert np.max(np.abs(loft.patch.evaluate(np.column_stack([s, 0 * s])) - c.evaluate(s))) < 1e-14


def test_loft_rejects_degree_mismatch():
    c = circle((0, 0), 1.0)
    lin = NurbsCurve(KnotVector([0, 0, 0.5, 1, 1], 1), [[0.5, 0], [-0.5, 0.1], [0.5, 0]])
    with pytest.raises(IncompatibilityError):
        build_layer_loft(c, lin)


def test_flower_layers_offset_loft_and_circle_ruled():
    f = flower()
    t, rep = offset_curve(f, 0.2)
    assert rep.ok
    loft = build_layer_loft(f, t)
    ruled = build_layer_ruled(f, project_greville(f, circle((0, 0), 0.5)))
    assert check_bijectivity(loft)[0] > 0
    assert check_bijectivity(ruled)[0] > 0


def test_bijectivity_examples():
    c = circle((0, 0), 1.0)
    folded = build_layer_ruled(c, -0.5 * c.control_points)
    assert check_bijectivity(folded)[0] <= 0 and folded.valid is False
    ident = rectangle_patch(0, 1, 0, 1, 2, 2, degree=2)
    m, _ = check_bijectivity(ident)
    assert abs(m - 1) < 1e-14


def test_interface_type_layers_share_gamma():
    c = circle((0, 0), 1.0)
    inner = build_layer(c, thickness=0.3)
    outer = build_layer(c.reversed(), thickness=0.3)
    a = inner.patch.edge_curve("v0").control_points
    b = outer.patch.edge_curve("v0").control_points
    assert np.array_equal(a, b[::-1])
    assert check_bijectivity(inner)[0] > 0 and check_bijectivity(outer)[0] > 0
