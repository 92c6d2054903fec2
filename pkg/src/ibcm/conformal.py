"""Conformal layers: target curves, Greville projection, ruled and lofted layers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (IncompatibilityError, PreconditionError, ProjectionCollisionError,
                     RegularityError)
from .quadrature import gauss_rule, tensor_rule
from .splines import (KnotVector, NurbsCurve, NurbsPatch, basis_funs, greville_abscissae,
                      invert_point, merge_knot_vectors, refine_to)


@dataclass
class TargetCurve:
    curve: NurbsCurve
    provenance: str = "prescribed"  # "offset" or "prescribed"
    distance: float | None = None


@dataclass
class OffsetReport:
    """Defects found while offsetting.

    ``local`` holds curve parameters where the offset distance exceeds the
    local radius of curvature on the concave side; ``global_`` holds index
    pairs of non-adjacent sample segments of the offset that intersect.
    """

    local: list = field(default_factory=list)
    global_: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.local and not self.global_

    def __bool__(self) -> bool:  # truthy when defects were found
        return not self.ok


def _left_normals(D: np.ndarray) -> np.ndarray:
    T = D[:, 1]
    speed = np.linalg.norm(T, axis=1)
    if np.any(speed < 1e-12 * max(1.0, speed.max())):
        raise RegularityError("vanishing tangent on the boundary curve")
    return np.column_stack([-T[:, 1], T[:, 0]]) / speed[:, None]


def curvature(curve: NurbsCurve, s) -> np.ndarray:
    """Signed curvature (positive when turning left)."""
    D = curve.derivatives(np.atleast_1d(s), 2)
    d1, d2 = D[:, 1], D[:, 2]
    cross = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    return cross / np.linalg.norm(d1, axis=1) ** 3


def _span_samples(kv: KnotVector, per_span: int) -> np.ndarray:
    br = kv.breaks
    pts = [np.linspace(a, b, per_span, endpoint=False) for a, b in zip(br[:-1], br[1:])]
    return np.concatenate(pts + [[br[-1]]])


def _segments_intersect(P: np.ndarray, closed: bool):
    """Index pairs of non-adjacent intersecting segments of a polyline."""
    A, B = P[:-1], P[1:]
    n = len(A)
    d = B - A
    out = []
    for i in range(n - 2):
        j = np.arange(i + 2, n)
        if closed and i == 0:
            j = j[j != n - 1]
        if j.size == 0:
            continue
        r = d[i]
        s = d[j]
        qp = A[j] - A[i]
        den = r[0] * s[:, 1] - r[1] * s[:, 0]
        ok = np.abs(den) > 1e-300
        t = np.where(ok, (qp[:, 0] * s[:, 1] - qp[:, 1] * s[:, 0]) / np.where(ok, den, 1), -1)
        u = np.where(ok, (qp[:, 0] * r[1] - qp[:, 1] * r[0]) / np.where(ok, den, 1), -1)
        hit = ok & (t > 0) & (t < 1) & (u > 0) & (u < 1)
        out += [(i, int(k)) for k in j[hit]]
    return out


def offset_curve(gamma: NurbsCurve, d: float, samples: int | None = None):
    """Offset ``gamma`` by ``d`` to its left (negative ``d``: to the right).

    The offset is sampled along normals at ``samples`` points (default ten
    per control point) and fitted by least squares in the knot vector and
    weights of ``gamma``, so offsets of circles are reproduced exactly.
    Returns ``(TargetCurve, OffsetReport)``.
    """
    if d == 0:
        return TargetCurve(gamma, "offset", 0.0), OffsetReport()
    n = gamma.kv.n
    m = samples if samples is not None else 10 * n
    per_span = max(2, int(np.ceil(m / gamma.kv.num_elements)))
    s = _span_samples(gamma.kv, per_span)
    D = gamma.derivatives(s, 1)
    X = D[:, 0] + d * _left_normals(D)
    # linear least squares for control points with fixed weights
    first, N = basis_funs(gamma.kv, s, 0)
    p = gamma.degree
    w = gamma.weights
    A = np.zeros((len(s), n))
    idx = first[:, None] + np.arange(p + 1)
    Nw = N[:, 0] * w[idx]
    Nw /= Nw.sum(axis=1, keepdims=True)
    np.put_along_axis(A, idx, Nw, axis=1)
    P = np.empty((n, 2))
    P[0], P[-1] = X[0], X[-1]
    rhs = X - np.outer(A[:, 0], P[0]) - np.outer(A[:, -1], P[-1])
    P[1:-1] = np.linalg.lstsq(A[:, 1:-1], rhs, rcond=None)[0]
    target = NurbsCurve(gamma.kv, P, w)
    report = OffsetReport()
    kappa = curvature(gamma, s)
    report.local = [float(si) for si, k in zip(s, kappa) if d * k >= 1.0]
    dense = target.evaluate(_span_samples(gamma.kv, max(per_span, 8)))
    report.global_ = _segments_intersect(dense, gamma.is_closed)
    return TargetCurve(target, "offset", d), report


def curves_intersect(a: NurbsCurve, b: NurbsCurve, per_span: int = 24) -> bool:
    """Polyline test for a crossing between two curves."""
    P = a.evaluate(_span_samples(a.kv, per_span))
    Q = b.evaluate(_span_samples(b.kv, per_span))
    A0, A1 = P[:-1], P[1:]
    B0, B1 = Q[:-1], Q[1:]
    r = (A1 - A0)[:, None, :]
    s = (B1 - B0)[None, :, :]
    qp = B0[None, :, :] - A0[:, None, :]
    den = r[..., 0] * s[..., 1] - r[..., 1] * s[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (qp[..., 0] * s[..., 1] - qp[..., 1] * s[..., 0]) / den
        u = (qp[..., 0] * r[..., 1] - qp[..., 1] * r[..., 0]) / den
    hit = (den != 0) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
    return bool(np.any(hit))


def project_greville(gamma: NurbsCurve, target) -> np.ndarray:
    """Closest points on the target of the Greville points of ``gamma``."""
    tc = target.curve if isinstance(target, TargetCurve) else target
    if curves_intersect(gamma, tc):
        raise PreconditionError("target curve intersects the boundary curve")
    G = gamma.evaluate(greville_abscissae(gamma.kv))
    out = np.array([tc.evaluate(np.array([invert_point(tc, g)[0]]))[0] for g in G])
    scale = float(np.ptp(G, axis=0).max()) or 1.0
    n = len(out)
    for i in range(n):
        for j in range(i + 1, n):
            if gamma.is_closed and i == 0 and j == n - 1:
                continue
            if np.linalg.norm(out[i] - out[j]) < 1e-9 * scale:
                raise ProjectionCollisionError(f"Greville points {i} and {j} project to the same point")
    if gamma.is_closed:
        out[-1] = out[0]
    return out


@dataclass
class ConformalLayer:
    """Layer patches whose ``v0`` edge follows the boundary curve ``gamma``.

    ``v`` runs from ``gamma`` (v=0) to the target (v=1), so the layer lies
    on the left of ``gamma``.  ``closed`` marks a ring whose ``u0`` and
    ``u1`` edges coincide.
    """

    patch: NurbsPatch
    gamma: NurbsCurve
    target: NurbsCurve
    closed: bool = False
    valid: bool | None = None
    min_jacobian: float | None = None

    @property
    def patches(self) -> list[NurbsPatch]:
        return [self.patch]

    def refined(self, u_per_span: int = 1, v_elements: int = 1, degree_v: int | None = None,
                grading: float = 1.0) -> "ConformalLayer":
        """Elevate the transversal direction and refine both directions.

        ``u_per_span`` splits every circumferential span uniformly;
        ``v_elements`` transversal elements are created, geometrically
        graded towards ``gamma`` when ``grading > 1`` (ratio of the outer
        to the inner element size).
        """
        P = self.patch
        q = degree_v if degree_v is not None else P.kv_u.degree
        if P.kv_v.degree == 1 and P.kv_v.n == 2:
            P = P.elevate_linear_v(q)
        new_u = []
        br = P.kv_u.breaks
        for a, b in zip(br[:-1], br[1:]):
            new_u += list(a + (b - a) * np.arange(1, u_per_span) / u_per_span)
        if v_elements > 1:
            if grading == 1.0:
                x = np.arange(1, v_elements) / v_elements
            else:
                r = grading ** (1.0 / (v_elements - 1))
                h = np.cumsum(r ** np.arange(v_elements))
                x = h[:-1] / h[-1]
            new_v = list(x)
        else:
            new_v = []
        P = P.refined(new_u, new_v)
        return ConformalLayer(P, P.edge_curve("v0"), P.edge_curve("v1"), self.closed)


def build_layer_ruled(gamma: NurbsCurve, projected) -> ConformalLayer:
    projected = np.asarray(projected, float)
    if projected.shape != gamma.control_points.shape:
        raise ValueError("one projected point per control point of gamma is required")
    net = np.stack([gamma.control_points, projected], axis=1)
    w = np.stack([gamma.weights, gamma.weights], axis=1)
    v = KnotVector([0, 0, 1, 1], 1)
    patch = NurbsPatch(gamma.kv, v, net, w)
    target = NurbsCurve(gamma.kv, projected, gamma.weights)
    return ConformalLayer(patch, gamma, target, gamma.is_closed)


def build_layer_loft(gamma: NurbsCurve, target) -> ConformalLayer:
    tc = target.curve if isinstance(target, TargetCurve) else target
    if tc.degree != gamma.degree:
        raise IncompatibilityError("boundary and target curves must share the degree")
    a, b = gamma.domain
    tc = tc.reparameterized(a, b)
    kv = merge_knot_vectors(gamma.kv, tc.kv)
    g = refine_to(gamma, kv)
    t = refine_to(tc, kv)
    net = np.stack([g.control_points, t.control_points], axis=1)
    w = np.stack([g.weights, t.weights], axis=1)
    patch = NurbsPatch(kv, KnotVector([0, 0, 1, 1], 1), net, w)
    return ConformalLayer(patch, g, t, gamma.is_closed)


def check_bijectivity(layer, rule=None):
    """Minimum Jacobian determinant over Gauss points of every element.

    Returns ``(min_det, x_at_min)``; a layer object gets its ``valid`` and
    ``min_jacobian`` fields updated.
    """
    patches = layer.patches if hasattr(layer, "patches") else [layer]
    best, where = np.inf, None
    for P in patches:
        r = rule if rule is not None else gauss_rule(max(P.degrees) + 2)
        for e in P.elements():
            uv, _ = tensor_rule(r, e)
            x, J = P.eval_patch(uv)
            det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
            k = int(np.argmin(det))
            if det[k] < best:
                best, where = float(det[k]), x[k]
    if isinstance(layer, ConformalLayer):
        layer.min_jacobian = best
        layer.valid = best > 0
    return best, where


def build_layer(gamma: NurbsCurve, thickness: float | None = None, target=None,
                method: str | None = None, samples: int | None = None) -> ConformalLayer:
    """Target by offset (or given), then a loft or ruled layer.

    Offsets share the knots of ``gamma`` and are lofted by default; prescribed
    targets default to the ruled layer through projected Greville points.
    """
    if target is None:
        if thickness is None:
            raise ValueError("give a thickness or a target curve")
        target, report = offset_curve(gamma, thickness, samples)
        if report:
            raise RegularityError("offset curve has self-intersections; choose a smaller thickness")
        method = method or "loft"
    method = method or "ruled"
    if method == "ruled":
        layer = build_layer_ruled(gamma, project_greville(gamma, target))
    elif method == "loft":
        layer = build_layer_loft(gamma, target)
    else:
        raise ValueError(f"unknown layer method {method!r}")
    return layer
