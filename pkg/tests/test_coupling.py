import numpy as np
import pytest

from ibcm.conformal import build_layer, build_layer_ruled
from ibcm.coupling import (OUTWARD_SIGN, UnionModel, active_dof_map, build_boundary_type,
                           build_interface_type)
from ibcm.errors import EmptyDomainError, NonconformingInterfaceError, PreconditionError
from ibcm.splines import KnotVector, NurbsCurve, arc, circle, rectangle_patch
from ibcm.trimming import TrimmingLoop

from helpers import square_curve


def test_untrimmed_model_has_all_functions_active():
    P = rectangle_patch(0, 1, 0, 1, 3, 4)
    m = UnionModel()
    m.add_patch(P)
    dm = active_dof_map(m)
    assert dm.n == P.num_basis
    assert np.array_equal(np.sort(dm.local[0]), np.arange(P.num_basis))


def test_ring_seam_and_degenerate_edge_are_merged():
    ring = build_layer(circle((0, 0), 1.0), thickness=0.3).refined(2, 2)
    m = UnionModel()
    m.add_layer(ring)
    nu, nv = ring.patch.shape
    assert m.dofs().n == (nu - 1) * nv
    loc = m.dofs().local[0].reshape(nu, nv)
    assert np.array_equal(loc[0], loc[-1])
    fan = build_layer_ruled(arc((0, 0), 0.5, 0.0, 1.5 * np.pi), np.zeros((7, 2)))
    m2 = UnionModel()
    m2.add_layer(fan)
    nu, nv = fan.patch.shape
    assert m2.dofs().n == nu * (nv - 1) + 1


def test_hole_block_functions_excluded():
    # hole covering elements 1..3 in both directions of a 6x6 quadratic grid
    P = rectangle_patch(0, 6, 0, 6, 6, 6)
    hole = TrimmingLoop.from_curve(circle((2.5, 2.5), 2.2, ccw=False))
    m = UnionModel()
    m.add_trimmed_bottom(P, [], extra_loops=[hole])
    dm = m.dofs()
    inactive = np.flatnonzero(dm.local[0] < 0)
    # function (i, j) is supported on elements i-2..i x j-2..j; only (3, 3) lies inside the hole
    nb = P.shape[1]
    assert {(k // nb, k % nb) for k in inactive} == {(3, 3)}
    assert dm.n == P.num_basis - 1


def test_boundary_type_polygon_area_and_audit():
    G = square_curve(1.0)
    L = build_layer_ruled(G, 0.63 * G.control_points).refined(1, 2)
    bg = rectangle_patch(-1.05, 1.05, -1.05, 1.05, 7, 7)
    m = build_boundary_type(L, bg, keep="interior")
    assert m.audit()
    assert abs(m.area() - 4.0) < 1e-12
    assert [e.role for e in m.entries] == ["top", "bottom"]
    with pytest.raises(PreconditionError):
        build_boundary_type(L, bg, keep="exterior")


def test_circle_cover_area():
    L = build_layer(circle((0, 0), 1.0), thickness=0.3).refined(2, 2)
    m = build_boundary_type(L, rectangle_patch(-0.9, 0.9, -0.9, 0.9, 8, 8), fit_tol=1e-7)
    assert abs(m.area() - np.pi) / np.pi < 1e-6


def test_plate_exterior_cover_area():
    hole = circle((2, 2), 0.5, ccw=False)
    L = build_layer(hole, thickness=0.3).refined(2, 2)
    m = build_boundary_type(L, rectangle_patch(0, 4, 0, 4, 8, 8), keep="exterior", fit_tol=1e-7)
    assert abs(m.area() - (16 - np.pi / 4)) / 16 < 1e-6


def test_layer_covering_background_is_empty():
    L = build_layer(circle((0, 0), 1.0, ccw=False), thickness=0.3)
    with pytest.raises(EmptyDomainError):
        build_boundary_type(L, rectangle_patch(-0.5, 0.5, -0.5, 0.5, 4, 4))


def test_trimmed_top_rejected():
    G = square_curve(1.0)
    L = build_layer_ruled(G, 0.63 * G.control_points)
    m = build_boundary_type(L, rectangle_patch(-1.05, 1.05, -1.05, 1.05, 7, 7))
    with pytest.raises(PreconditionError):
        m.couple(1, "u0", 0)
    m.interfaces[0].flux_side = "bottom"
    with pytest.raises(PreconditionError):
        m.audit()


def test_interface_type_shares_unknowns():
    c = circle((0, 0), 1.0)
    l1 = build_layer(c, thickness=0.3).refined(2, 1)
    l2 = build_layer(c.reversed(), thickness=0.3).refined(2, 1)
    m = build_interface_type(l1, l2)
    n1 = (l1.patch.shape[0] - 1) * l1.patch.shape[1]
    n2 = (l2.patch.shape[0] - 1) * l2.patch.shape[1]
    n_edge = l1.patch.shape[0] - 1
    assert m.dofs().n == n1 + n2 - n_edge
    ce = [e for e in m.conforming if {e.a, e.b} == {0, 1}]
    assert ce and ce[0].reversed
    # the shared edge evaluates identically from both sides
    s = np.linspace(0, 1, 101)
    a = l1.patch.edge_curve("v0").evaluate(s)
    b = l2.patch.edge_curve("v0").evaluate(1 - s)
    assert np.max(np.abs(a - b)) < 1e-14
    g1 = m.dofs().local[0][l1.patch.edge_indices("v0")]
    g2 = m.dofs().local[1][l2.patch.edge_indices("v0")]
    assert np.array_equal(g1, g2[::-1])


def test_interface_type_rejects_different_curves():
    c = circle((0, 0), 1.0)
    l1 = build_layer(c, thickness=0.3)
    l2 = build_layer(circle((0, 0), 1.0 + 1e-6, ccw=False), thickness=0.3)
    with pytest.raises(NonconformingInterfaceError):
        build_interface_type(l1, l2)


def test_interface_normals_point_out_of_top():
    L = build_layer(circle((0, 0), 1.0), thickness=0.3).refined(2, 1)
    m = build_boundary_type(L, rectangle_patch(-0.9, 0.9, -0.9, 0.9, 6, 6))
    itf = m.interfaces[0]
    assert OUTWARD_SIGN[itf.edge] == -1
    for seg in itf.mesh.segments:
        # target circle of radius 0.7: the top (annulus) lies outside, so n points inward
        r = seg.x / np.linalg.norm(seg.x, axis=1)[:, None]
        assert np.allclose(seg.normal, -r, atol=1e-12)
        assert np.allclose(L.patch.evaluate(itf.top_uv(m, seg)), seg.x, atol=1e-13)
