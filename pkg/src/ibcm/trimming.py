"""Element classification against trimming loops and cut-cell decomposition.

All geometry here lives in the parametric space of a background patch.
Loops are oriented so that the active region lies to their left.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import _bezier as bz
from .errors import (DecompositionError, DegenerateCellError, FitError, InversionError,
                     MalformedLoopError, UnsupportedConfigurationError)
from .splines import NurbsCurve, NurbsPatch, invert_point, invert_points_on_patch

INACTIVE, FULL, CUT = 0, 1, 2


# ---------------------------------------------------------------------------
# trimming curves in parametric space
# ---------------------------------------------------------------------------

class PulledBackCurve:
    """Preimage of a physical curve under a (non-affine) patch map."""

    def __init__(self, curve: NurbsCurve, patch: NurbsPatch):
        self.curve = curve
        self.patch = patch
        self.kv = curve.kv
        self._cache: dict[float, np.ndarray] = {}
        s0 = curve.domain[0]
        self._seed_s, self._seed_uv = s0, self._invert(curve.evaluate(np.array([s0]))[0], None)

    @property
    def degree(self) -> int:
        return self.curve.degree

    @property
    def domain(self):
        return self.curve.domain

    def breakpoints(self):
        return self.curve.breakpoints()

    def _invert(self, x, seed):
        try:
            uv, d = invert_point(self.patch, x, seed=seed, tol=1e-14, max_iter=50)
        except InversionError:
            uv, d = invert_point(self.patch, x, seed=None, tol=1e-14, max_iter=80)
        if d > 1e-9 * max(1.0, float(np.abs(x).max())):
            raise InversionError(f"trimming curve leaves the background patch at {x}", (uv, d))
        return uv

    def evaluate(self, s) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, float))
        keys = [float(v) for v in s]
        new = sorted({k for k in keys if k not in self._cache})
        if new:
            X = self.curve.evaluate(np.array(new))
            seeds = np.tile(self._seed_uv, (len(new), 1)) if len(new) == 1 else None
            uv, d = invert_points_on_patch(self.patch, X, seeds=seeds, tol=1e-14)
            bad = d > 1e-9 * max(1.0, float(np.abs(X).max()))
            if np.any(bad):
                raise InversionError(f"trimming curve leaves the background patch at {X[np.argmax(bad)]}",
                                     (uv[np.argmax(bad)], float(d.max())))
            self._cache.update(zip(new, uv))
            self._seed_uv = uv[-1]
        return np.array([self._cache[k] for k in keys])

    __call__ = evaluate


def _to_parametric(curve: NurbsCurve, patch: NurbsPatch):
    aff = patch.affine_map()
    if aff is None:
        return PulledBackCurve(curve, patch)
    A, b = aff
    Ainv = np.linalg.inv(A)
    return curve.transformed(Ainv, -Ainv @ b)


@dataclass
class TrimmingLoop:
    """Ordered curve segments; active side on the left.

    ``open`` loops are chains whose two endpoints lie on the parametric
    boundary of the background patch (used to cut away a corner region).
    """

    segments: list
    open: bool = False

    def __post_init__(self):
        if not self.segments:
            raise MalformedLoopError("empty loop")
        ends = [(c.evaluate(np.array([c.domain[0]]))[0], c.evaluate(np.array([c.domain[1]]))[0])
                for c in self.segments]
        scale = max(1.0, max(float(np.abs(np.concatenate(e)).max()) for e in ends))
        tol = 1e-9 * scale
        for (a0, a1), (b0, b1) in zip(ends[:-1], ends[1:]):
            if np.linalg.norm(a1 - b0) > tol:
                raise MalformedLoopError("consecutive segment endpoints do not coincide")
        if not self.open and np.linalg.norm(ends[-1][1] - ends[0][0]) > tol:
            raise MalformedLoopError("loop is not closed")
        self.start = ends[0][0]
        self.end = ends[-1][1]

    @classmethod
    def from_curve(cls, curve, open: bool = False) -> "TrimmingLoop":
        return cls([curve], open=open)

    def reversed(self) -> "TrimmingLoop":
        return TrimmingLoop([c.reversed() for c in self.segments[::-1]], open=self.open)

    def in_parameter_space(self, patch: NurbsPatch) -> "TrimmingLoop":
        return TrimmingLoop([_to_parametric(c, patch) for c in self.segments], open=self.open)

    def sample(self, per_segment: int = 400) -> np.ndarray:
        pts = []
        for c in self.segments:
            a, b = c.domain
            br = np.unique(np.concatenate([[a, b], c.breakpoints()]))
            s = np.concatenate([np.linspace(x0, x1, max(8, per_segment // len(br)), endpoint=False)
                                for x0, x1 in zip(br[:-1], br[1:])] + [[b]])
            pts.append(c.evaluate(s))
        return np.concatenate(pts)


# ---------------------------------------------------------------------------
# piece splitting and fitting
# ---------------------------------------------------------------------------

def split_segment_at_c0(curve, t0: float | None = None, t1: float | None = None):
    """Parameter intervals of the smooth pieces of ``curve`` on ``[t0, t1]``."""
    a, b = curve.domain
    t0 = a if t0 is None else t0
    t1 = b if t1 is None else t1
    br = [t for t in curve.breakpoints() if t0 < t < t1]
    cuts = [t0, *br, t1]
    return list(zip(cuts[:-1], cuts[1:]))


def c2_breaks(curve, rtol: float = 1e-6) -> list[float]:
    """Interior knots where the second derivative jumps.

    A single Bézier piece fitted across such a knot is only second-order
    accurate, so pieces are split there as well.
    """
    base = getattr(curve, "curve", curve)
    a, b = base.domain
    knots = [t for t in base.kv.breaks if a < t < b]
    if not knots:
        return []
    d = 1e-9 * (b - a)
    t = np.array(knots)
    L = base.derivatives(t - d, 2)[:, 2]
    R = base.derivatives(t + d, 2)[:, 2]
    scale = np.maximum(np.linalg.norm(L, axis=1), np.linalg.norm(R, axis=1))
    scale = np.maximum(scale, 1e-300)
    jump = np.linalg.norm(R - L, axis=1) > rtol * scale + 1e-6 * np.linalg.norm(base.derivatives(t, 1)[:, 1], axis=1) / (b - a)
    return [float(x) for x, j in zip(t, jump) if j]


def fit_bezier_segment(curve, t0: float, t1: float, degree: int, samples: int | None = None,
                       parameterization: str = "native", p0=None, p1=None):
    """Least-squares Bézier fit of ``curve`` restricted to ``[t0, t1]``.

    The native curve parameter is used by default, so polynomial pieces of
    degree ``<= degree`` are reproduced exactly.  ``"chord"`` switches to
    chord-length parameters.  Returns ``(ctrl, max_residual)``.
    """
    m = samples if samples is not None else max(4 * (degree + 1), 16)
    s = np.linspace(t0, t1, m)
    X = curve.evaluate(s)
    if p0 is not None:
        X[0] = p0
    if p1 is not None:
        X[-1] = p1
    if parameterization == "chord":
        d = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(X, axis=0), axis=1))])
        if d[-1] <= 0:
            raise FitError("degenerate piece: zero length")
        u = d / d[-1]
    else:
        u = (s - t0) / (t1 - t0)
    ctrl, res = bz.fit_bezier(X, u, degree)
    # residual on a denser, offset sample set
    sd = t0 + (t1 - t0) * (np.arange(2 * m) + 0.5) / (2 * m)
    if parameterization == "native":
        ud = (sd - t0) / (t1 - t0)
        res = max(res, float(np.max(np.linalg.norm(bz.bez_eval(ctrl, ud) - curve.evaluate(sd), axis=1))))
    return ctrl, res


# ---------------------------------------------------------------------------
# winding numbers
# ---------------------------------------------------------------------------

def _polyline_winding(points: np.ndarray, poly: np.ndarray, chunk: int = 2_000_000) -> np.ndarray:
    """Winding numbers of ``points`` w.r.t. a closed polyline (vectorized)."""
    points = np.asarray(points, float)
    step = max(1, chunk // max(len(poly), 1))
    if len(points) > step:
        return np.concatenate([_polyline_winding(points[i:i + step], poly, chunk)
                               for i in range(0, len(points), step)])
    a = poly
    b = np.roll(poly, -1, axis=0)
    px = points[:, 0][:, None]
    py = points[:, 1][:, None]
    ay, by = a[:, 1][None, :], b[:, 1][None, :]
    up = (ay <= py) & (by > py)
    down = (by <= py) & (ay > py)
    dy = by - ay
    t = (py - ay) / np.where(dy == 0, 1.0, dy)
    xc = a[:, 0][None, :] + t * (b[:, 0] - a[:, 0])[None, :]
    right = xc > px
    return np.sum(np.where(up & right, 1, 0) - np.where(down & right, 1, 0), axis=1)


def bezier_winding(point, edges, _depth: int = 0) -> int:
    """Winding number of ``point`` w.r.t. a closed set of Bézier edges."""
    px, py = float(point[0]), float(point[1])
    w = 0
    for c in edges:
        lo, hi = bz.bbox(c)
        if hi[0] <= px or lo[1] > py or hi[1] < py:
            continue
        roots = bz.roots_1d(c[:, 1] - py)
        for t in roots:
            if t < 1e-9 or t > 1 - 1e-9:
                if _depth < 3:
                    span = float(np.ptp(np.concatenate([e for e in edges]), axis=0).max())
                    eps = span * 1.2345e-7 * (1 + _depth)
                    return bezier_winding((px, py + eps), edges, _depth + 1)
            x = bz.bez_eval(c, t)[0]
            if x[0] <= px:
                continue
            dy = bz.bez_tangent(c, t)[0, 1]
            if dy > 0:
                w += 1
            elif dy < 0:
                w -= 1
    return w


# ---------------------------------------------------------------------------
# quadrature cells
# ---------------------------------------------------------------------------

@dataclass
class QuadCell:
    """Ruled Bézier cell ``S(s,t) = (1-t) C0(s) + t C1(s)`` on ``[0,1]^2``.

    ``ctrl[0]`` and ``ctrl[1]`` hold the control points of ``C0`` and ``C1``.
    """

    ctrl: np.ndarray
    element: int = -1

    @property
    def degree(self) -> int:
        return self.ctrl.shape[1] - 1

    def map(self, st):
        st = np.atleast_2d(np.asarray(st, float))
        s, t = st[:, 0], st[:, 1]
        c0, c1 = bz.bez_eval(self.ctrl[0], s), bz.bez_eval(self.ctrl[1], s)
        d0 = bz.bez_eval(bz.bez_deriv(self.ctrl[0]), s)
        d1 = bz.bez_eval(bz.bez_deriv(self.ctrl[1]), s)
        x = (1 - t)[:, None] * c0 + t[:, None] * c1
        J = np.empty((len(s), 2, 2))
        J[:, :, 0] = (1 - t)[:, None] * d0 + t[:, None] * d1
        J[:, :, 1] = c1 - c0
        return x, J

    def jacobian_det(self, st) -> np.ndarray:
        _, J = self.map(st)
        return J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]

    def quadrature(self, rule):
        """Parametric points and weights (includes the cell Jacobian)."""
        x, w = rule.on_interval(0.0, 1.0)
        st = np.stack(np.meshgrid(x, x, indexing="ij"), axis=-1).reshape(-1, 2)
        ww = np.outer(w, w).ravel()
        uv, J = self.map(st)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        if np.any(det <= 0):
            raise DegenerateCellError("cell Jacobian is not positive")
        return uv, ww * det

    def area(self) -> float:
        from .quadrature import gauss_rule
        return float(self.quadrature(gauss_rule(self.degree + 2))[1].sum())

    def is_valid(self) -> bool:
        """Exact sign test of the Jacobian on the closed unit square.

        ``det J = (1 - t) f0(s) + t f1(s)`` with ``f_i = C_i' x (C1 - C0)``, so
        the cell is valid iff ``f0, f1 >= 0`` and ``det J > 0`` inside.
        """
        c0, c1 = self.ctrl
        d = c1 - c0
        scale = float(np.ptp(self.ctrl.reshape(-1, 2), axis=0).max()) ** 2
        tol = 1e-13 * scale
        f = []
        for c in (c0, c1):
            dc = bz.bez_deriv(c)
            f.append(bz.product(dc[:, 0], d[:, 1]) - bz.product(dc[:, 1], d[:, 0]))
        if not (bz.nonnegative(f[0], tol) and bz.nonnegative(f[1], tol)):
            return False
        # rule out cells that are flat along a whole line
        x = 0.5 * (np.polynomial.legendre.leggauss(self.degree + 2)[0] + 1)
        st = np.stack(np.meshgrid(x, x, indexing="ij"), axis=-1).reshape(-1, 2)
        return bool(np.all(self.jacobian_det(st) > 0))


def _box_cell(box, p: int, element: int) -> QuadCell:
    (x0, x1), (y0, y1) = box
    c0 = bz.elevate_line((x0, y0), (x1, y0), p)
    c1 = bz.elevate_line((x0, y1), (x1, y1), p)
    return QuadCell(np.stack([c0, c1]), element)


# ---------------------------------------------------------------------------
# region boundaries inside a box
# ---------------------------------------------------------------------------

@dataclass
class _Edge:
    ctrl: np.ndarray
    curve: bool  # True for trimming pieces, False for box boundary lines

    @property
    def a(self):
        return self.ctrl[0]

    @property
    def b(self):
        return self.ctrl[-1]


def _perimeter_pos(box, x) -> float:
    (x0, x1), (y0, y1) = box
    w, h = x1 - x0, y1 - y0
    d = [abs(x[1] - y0), abs(x[0] - x1), abs(x[1] - y1), abs(x[0] - x0)]
    k = int(np.argmin(d))
    if k == 0:
        return float(np.clip(x[0] - x0, 0, w))
    if k == 1:
        return w + float(np.clip(x[1] - y0, 0, h))
    if k == 2:
        return w + h + float(np.clip(x1 - x[0], 0, w))
    return 2 * w + h + float(np.clip(y1 - x[1], 0, h))


def _perimeter_point(box, tau: float) -> np.ndarray:
    (x0, x1), (y0, y1) = box
    w, h = x1 - x0, y1 - y0
    P = 2 * (w + h)
    tau = tau % P
    if tau <= w:
        return np.array([x0 + tau, y0])
    if tau <= w + h:
        return np.array([x1, y0 + tau - w])
    if tau <= 2 * w + h:
        return np.array([x1 - (tau - w - h), y1])
    return np.array([x0, y1 - (tau - 2 * w - h)])


def _perimeter_path(box, t0: float, t1: float) -> list[np.ndarray]:
    """Points from ``t0`` to ``t1`` travelling counter-clockwise, corners included."""
    (x0, x1), (y0, y1) = box
    w, h = x1 - x0, y1 - y0
    P = 2 * (w + h)
    corners = np.array([0.0, w, w + h, 2 * w + h])
    if t1 <= t0:
        t1 += P
    pts = [_perimeter_point(box, t0)]
    for base in (0.0, P):
        for c in corners + base:
            if t0 < c < t1:
                pts.append(_perimeter_point(box, c))
    pts.append(_perimeter_point(box, t1))
    return pts


def _on_boundary(box, x, tol) -> bool:
    (x0, x1), (y0, y1) = box
    inside = x0 - tol <= x[0] <= x1 + tol and y0 - tol <= x[1] <= y1 + tol
    d = min(abs(x[0] - x0), abs(x[0] - x1), abs(x[1] - y0), abs(x[1] - y1))
    return inside and d <= tol


def _clip_to_box(curves, box, tol):
    """Portions of Bézier ``curves`` inside ``box`` with endpoints snapped to its sides."""
    (x0, x1), (y0, y1) = box
    out = []
    for c in curves:
        lo, hi = bz.bbox(c)
        if hi[0] < x0 - tol or lo[0] > x1 + tol or hi[1] < y0 - tol or lo[1] > y1 + tol:
            continue
        if lo[0] >= x0 - tol and hi[0] <= x1 + tol and lo[1] >= y0 - tol and hi[1] <= y1 + tol:
            out.append(c)
            continue
        cuts = {}
        for axis, val in ((0, x0), (0, x1), (1, y0), (1, y1)):
            f = c[:, axis] - val
            for t in bz.roots_1d(f):
                if t <= 1e-12 or t >= 1 - 1e-12:
                    continue
                dt = 1e-7
                fa = bz.bez_eval(c, max(t - dt, 0.0))[0, axis] - val
                fb = bz.bez_eval(c, min(t + dt, 1.0))[0, axis] - val
                if fa * fb < 0:
                    cuts[float(t)] = (axis, val)
        ts = sorted(cuts)
        bounds = [0.0, *ts, 1.0]
        for ta, tb in zip(bounds[:-1], bounds[1:]):
            if tb - ta < 1e-14:
                continue
            mid = bz.bez_eval(c, 0.5 * (ta + tb))[0]
            if not (x0 - tol < mid[0] < x1 + tol and y0 - tol < mid[1] < y1 + tol):
                continue
            piece = bz.subsegment(c, ta, tb).copy()
            if ta in cuts:
                ax, v = cuts[ta]
                piece[0, ax] = v
            if tb in cuts:
                ax, v = cuts[tb]
                piece[-1, ax] = v
            out.append(piece)
    return out


class _Fail(Exception):
    """Base case not applicable; triggers a split."""


def _region_loops(box, curves, inside, tol):
    """Closed loops bounding the active part of ``box``.

    Returns a list of lists of :class:`_Edge`.
    """
    pieces = _clip_to_box(curves, box, tol)
    # junctions between kept pieces are not boundary events
    events = []
    for i, c in enumerate(pieces):
        for end, kind in ((c[0], "in"), (c[-1], "out")):
            if not _on_boundary(box, end, tol):
                continue
            other = [j for j, d in enumerate(pieces) if j != i and
                     np.linalg.norm((d[-1] if kind == "in" else d[0]) - end) <= tol]
            if other:
                continue
            events.append((_perimeter_pos(box, end), kind, end))
    edges = [_Edge(c, True) for c in pieces]
    if not events:
        if inside(np.array([box[0][0], box[1][0]])):
            corners = _perimeter_path(box, 0.0, 0.0)
            for a, b in zip(corners[:-1], corners[1:]):
                edges.append(_Edge(np.array([a, b]), False))
    else:
        events.sort(key=lambda e: (e[0], 0 if e[1] == "out" else 1))
        kinds = [e[1] for e in events]
        if len(kinds) % 2 or any(k1 == k2 for k1, k2 in zip(kinds, kinds[1:] + kinds[:1])):
            raise _Fail("inconsistent boundary events")
        n = len(events)
        for k, (tau, kind, pt) in enumerate(events):
            if kind != "out":
                continue
            tau2, _, pt2 = events[(k + 1) % n]
            path = _perimeter_path(box, tau, tau2)
            path[0], path[-1] = pt, pt2
            for a, b in zip(path[:-1], path[1:]):
                if np.linalg.norm(b - a) > tol:
                    edges.append(_Edge(np.array([a, b]), False))
    return _chain(edges, tol)


def _chain(edges, tol):
    loops = []
    unused = list(range(len(edges)))
    starts = np.array([e.a for e in edges]) if edges else np.zeros((0, 2))
    while unused:
        first = unused.pop(0)
        loop = [edges[first]]
        while True:
            end = loop[-1].b
            if np.linalg.norm(end - loop[0].a) <= 10 * tol and len(loop) > 0:
                # prefer continuing if another edge starts here and closes later
                cand = [j for j in unused if np.linalg.norm(starts[j] - end) <= 10 * tol]
                if not cand:
                    break
            cand = [j for j in unused if np.linalg.norm(starts[j] - end) <= 10 * tol]
            if not cand:
                raise _Fail("open region boundary")
            j = min(cand, key=lambda j: np.linalg.norm(starts[j] - end))
            unused.remove(j)
            e = edges[j]
            e.ctrl = e.ctrl.copy()
            e.ctrl[0] = end
            loop.append(e)
        loop[-1].ctrl = loop[-1].ctrl.copy()
        loop[-1].ctrl[-1] = loop[0].a
        loops.append(loop)
    return loops


def _loop_area(loop) -> float:
    return sum(bz.green_area(e.ctrl) for e in loop)


# ---------------------------------------------------------------------------
# base cases
# ---------------------------------------------------------------------------

def _ruled(c0, c1, p, element) -> QuadCell:
    cell = QuadCell(np.stack([bz.elevate(c0, p), bz.elevate(c1, p)]), element)
    if not cell.is_valid():
        raise _Fail("cell Jacobian changes sign")
    return cell


def _one_curve_cells(curve, lines, p, element):
    """Cells for a loop made of one curve A->B followed by lines B->...->A."""
    A = curve[0]
    corners = [ln[-1] for ln in lines[:-1]]
    k = len(corners)
    if k == 0:
        return [_ruled(curve, bz.elevate_line(A, curve[-1], p), p, element)]
    if k == 1:
        return [_ruled(curve, np.repeat(corners[0][None], p + 1, axis=0), p, element)]
    s = [bz.closest_param(curve, v) for v in corners]
    s = [1.0 if t >= 1 - 1e-9 else (0.0 if t <= 1e-9 else t) for t in s]
    # equal parameters give triangles with a curve point as apex
    for j in range(1, k):
        s[j] = min(s[j], s[j - 1])
    cells = []
    fan = [np.repeat(v[None], p + 1, axis=0) for v in corners]
    if s[0] < 1.0:
        cells.append(_ruled(bz.subsegment(curve, s[0], 1.0), fan[0], p, element))
    for j in range(k - 1):
        if s[j] - s[j + 1] <= 1e-12:
            piece = np.repeat(bz.bez_eval(curve, s[j]), p + 1, axis=0)
        else:
            piece = bz.subsegment(curve, s[j + 1], s[j])
        cells.append(_ruled(piece, bz.elevate_line(corners[j + 1], corners[j], p), p, element))
    if s[-1] > 0.0:
        cells.append(_ruled(bz.subsegment(curve, 0.0, s[-1]), fan[-1], p, element))
    return cells


def _base_case(loop, box, p, element, tol):
    curves = [i for i, e in enumerate(loop) if e.curve]
    if not curves:
        area = _loop_area(loop)
        full = (box[0][1] - box[0][0]) * (box[1][1] - box[1][0])
        if abs(area - full) > 1e-9 * full:
            raise _Fail("line-only loop is not the box")
        return [_box_cell(box, p, element)]
    r = curves[0]
    loop = loop[r:] + loop[:r]
    curves = [i for i, e in enumerate(loop) if e.curve]
    try:
        if len(curves) == 1:
            return _one_curve_cells(loop[0].ctrl, [e.ctrl for e in loop[1:]], p, element)
        if len(curves) == 2:
            j = curves[1]
            n1 = j - 1
            n2 = len(loop) - j - 1
            if n1 <= 1 and n2 <= 1:
                return [_ruled(loop[0].ctrl, loop[j].ctrl[::-1], p, element)]
    except _Fail:
        pass
    return _fan_cells(loop, p, element)


def _is_straight(ctrl) -> bool:
    d = ctrl[-1] - ctrl[0]
    L = np.linalg.norm(d)
    if L == 0:
        return False
    off = (ctrl[:, 0] - ctrl[0, 0]) * d[1] - (ctrl[:, 1] - ctrl[0, 1]) * d[0]
    return bool(np.all(np.abs(off) <= 1e-13 * L * L))


def _fan_cells(loop, p, element):
    """Triangle-like cells from one loop vertex to every non-incident edge."""
    n = len(loop)
    straight = [not e.curve or _is_straight(e.ctrl) for e in loop]
    for i in range(n):
        if not (straight[i] and straight[i - 1]):
            continue
        V = loop[i].a
        apex = np.repeat(V[None], p + 1, axis=0)
        try:
            cells = [_ruled(loop[j].ctrl, apex, p, element)
                     for j in range(n) if j != i and j != (i - 1) % n]
        except _Fail:
            continue
        return cells
    raise _Fail("no base case")


# ---------------------------------------------------------------------------
# divide and conquer
# ---------------------------------------------------------------------------

def _split_line(box, curve_edges, tol):
    """Axis and coordinate of the splitting line for ``box``."""
    (x0, x1), (y0, y1) = box
    lo_b = np.array([x0, y0])
    hi_b = np.array([x1, y1])
    size = hi_b - lo_b
    margin = 1e-3 * size
    boxes = [bz.tight_bbox(c) for c in curve_edges]
    # interior C0 junctions between two pieces: split through the one nearest the centre
    centre = 0.5 * (lo_b + hi_b)
    starts = np.array([c[0] for c in curve_edges]) if curve_edges else np.zeros((0, 2))
    pairs = []
    for c1 in curve_edges:
        J = c1[-1]
        if _on_boundary(box, J, 10 * tol):
            continue
        k = np.nonzero(np.linalg.norm(starts - J, axis=1) <= 10 * tol)[0]
        if k.size:
            pairs.append((c1, curve_edges[int(k[0])]))
    pairs.sort(key=lambda pr: float(np.max(np.abs(pr[0][-1] - centre) / size)))
    for c1, c2 in pairs:
        J = c1[-1]
        for ax in sorted((0, 1), key=lambda a: -abs(bz.bez_tangent(c1, 1.0)[0, a])):
            val = J[ax]
            if not lo_b[ax] + margin[ax] < val < hi_b[ax] - margin[ax]:
                continue
            clean = all(not np.any((r > 1e-9) & (r < 1 - 1e-9))
                        for r in (bz.roots_1d(c1[:, ax] - val), bz.roots_1d(c2[:, ax] - val)))
            if clean:
                return ax, val
    if len(boxes) >= 2:
        best = None
        for ax in (0, 1):
            iv = sorted((b[0][ax], b[1][ax]) for b in boxes)
            reach = iv[0][1]
            for a, b in iv[1:]:
                if a > reach:
                    mid = 0.5 * (a + reach)
                    gap = (a - reach) / size[ax]
                    if lo_b[ax] + margin[ax] < mid < hi_b[ax] - margin[ax] and (best is None or gap > best[0]):
                        best = (gap, ax, mid)
                reach = max(reach, b)
        if best is not None:
            return best[1], best[2]
    if boxes:
        areas = [np.prod(np.maximum(b[1] - b[0], 0)) for b in boxes]
        ext = [np.max(b[1] - b[0]) for b in boxes]
        i = min(range(len(boxes)), key=lambda i: (areas[i], ext[i]))
        lo, hi = boxes[i]
        ax = int(np.argmax(hi - lo))
        mid = 0.5 * (lo[ax] + hi[ax])
        c = curve_edges[i]
        ok = lo_b[ax] + margin[ax] < mid < hi_b[ax] - margin[ax]
        if ok and len(bz.roots_1d(c[:, ax] - mid)) == 1:
            return ax, mid
    ax = int(np.argmax(size))
    return ax, 0.5 * (lo_b[ax] + hi_b[ax])


def decompose_cut_element(box, pieces, degree: int, inside, element: int = -1,
                          tol: float | None = None, max_depth: int = 40):
    """Quadrature cells covering the active part of ``box``.

    ``pieces`` are degree-``degree`` Bézier control arrays of the trimming
    boundary inside the element (active side on their left).  ``inside``
    decides the status of box corners not reached by any piece.
    """
    size = max(box[0][1] - box[0][0], box[1][1] - box[1][0])
    tol = 1e-10 * size if tol is None else tol
    return _decompose(box, list(pieces), degree, inside, element, tol, 0, max_depth)


def _decompose(box, curves, p, inside, element, tol, depth, max_depth):
    diag = np.hypot(box[0][1] - box[0][0], box[1][1] - box[1][0])
    if diag < tol * 10:
        c = np.array([0.5 * sum(box[0]), 0.5 * sum(box[1])])
        return [_box_cell(box, p, element)] if inside(c) else []
    try:
        loops = _region_loops(box, curves, inside, tol)
    except _Fail:
        loops = None
    if loops is not None:
        loops = [lp for lp in loops if abs(_loop_area(lp)) > tol * tol]
        if not loops:
            return []
        try:
            if any(_loop_area(lp) < 0 for lp in loops):
                raise _Fail("hole")
            cells = []
            for lp in loops:
                cells += _base_case(lp, box, p, element, tol)
            return cells
        except _Fail:
            pass
    if depth >= max_depth:
        raise DecompositionError(f"decomposition did not terminate for element {element}", element)
    if loops is not None:
        edges = [e.ctrl for lp in loops for e in lp]
        curve_edges = [e.ctrl for lp in loops for e in lp if e.curve]

        def child_inside(x, _edges=edges):
            return bezier_winding(x, _edges) > 0
    else:
        curve_edges = _clip_to_box(curves, box, tol)
        child_inside = inside
    ax, c = _split_line(box, curve_edges, tol)
    b1 = [list(box[0]), list(box[1])]
    b2 = [list(box[0]), list(box[1])]
    b1[ax][1] = c
    b2[ax][0] = c
    cells = []
    for b in (b1, b2):
        bb = (tuple(b[0]), tuple(b[1]))
        cells += _decompose(bb, curve_edges, p, child_inside, element, tol, depth + 1, max_depth)
    return cells


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------

@dataclass
class ElementClassification:
    """Per-element tags and fitted boundary pieces of a trimmed patch."""

    breaks_u: np.ndarray
    breaks_v: np.ndarray
    tags: np.ndarray  # (ne_u, ne_v)
    pieces: dict = field(default_factory=dict)  # element id -> list of ctrl arrays
    max_fit_residual: float = 0.0
    closing_edges: list = field(default_factory=list)

    @property
    def shape(self):
        return self.tags.shape

    def element_id(self, i: int, j: int) -> int:
        return i * self.tags.shape[1] + j

    def element_ij(self, eid: int):
        return divmod(eid, self.tags.shape[1])

    def box(self, eid: int):
        i, j = self.element_ij(eid)
        return ((self.breaks_u[i], self.breaks_u[i + 1]), (self.breaks_v[j], self.breaks_v[j + 1]))

    def counts(self) -> dict:
        t = self.tags.ravel()
        return {"inactive": int(np.sum(t == INACTIVE)), "full": int(np.sum(t == FULL)),
                "cut": int(np.sum(t == CUT))}

    def all_pieces(self) -> list:
        return [c for v in self.pieces.values() for c in v]


def _crossings(curve, a, b, values, axis, n):
    if len(values) == 0:
        return []
    s = np.linspace(a, b, n + 1)
    f = curve.evaluate(s)[:, axis]
    out = []
    for c in values:
        g = f - c
        for k in np.nonzero(g[:-1] * g[1:] < 0)[0]:
            r = brentq(lambda t: curve.evaluate(np.array([t]))[0, axis] - c, s[k], s[k + 1],
                       xtol=1e-14, rtol=1e-15)
            out.append((r, axis, c))
        for k in np.nonzero(g[1:-1] == 0)[0] + 1:
            if g[k - 1] * g[k + 1] < 0:
                out.append((float(s[k]), axis, c))
    return out


def _closing_path(loop: TrimmingLoop, dom, margin):
    """Polyline outside the domain joining the end of an open loop to its start."""
    (u0, u1), (v0, v1) = dom
    big = ((u0 - margin, u1 + margin), (v0 - margin, v1 + margin))
    E, S = loop.end, loop.start

    def push(x):
        y = np.array(x, float)
        d = [abs(x[1] - v0), abs(x[0] - u1), abs(x[1] - v1), abs(x[0] - u0)]
        k = int(np.argmin(d))
        y[[1, 0, 1, 0][k]] = [v0 - margin, u1 + margin, v1 + margin, u0 - margin][k]
        return y

    Eo, So = push(E), push(S)
    path = [E] + _perimeter_path(big, _perimeter_pos(big, Eo), _perimeter_pos(big, So)) + [S]
    path[1], path[-2] = Eo, So
    return [np.array([a, b]) for a, b in zip(path[:-1], path[1:]) if np.linalg.norm(b - a) > 0]


def _fit_adaptive(seg, t0, t1, p, parameterization, P0, P1, fit_tol, depth=0):
    ctrl, res = fit_bezier_segment(seg, t0, t1, p, parameterization=parameterization, p0=P0, p1=P1)
    if fit_tol is None or res <= fit_tol or depth >= 12:
        return [(ctrl, res)]
    tm = 0.5 * (t0 + t1)
    Pm = seg.evaluate(np.array([tm]))[0]
    return (_fit_adaptive(seg, t0, tm, p, parameterization, P0, Pm, fit_tol, depth + 1)
            + _fit_adaptive(seg, tm, t1, p, parameterization, Pm, P1, fit_tol, depth + 1))


def classify_elements(patch: NurbsPatch, loops, degree: int | None = None,
                      parametric: bool = False, parameterization: str = "native",
                      samples_per_span: int = 24, fit_tol: float | None = None) -> ElementClassification:
    """Tag background elements and fit the trimming pieces of cut elements.

    With ``fit_tol`` set, pieces whose fitting residual exceeds it are
    bisected until the tolerance is met (finer boundary, same element).
    """
    p = degree if degree is not None else max(patch.degrees)
    if not parametric:
        loops = [lp.in_parameter_space(patch) for lp in loops]
    bu, bv = patch.kv_u.breaks, patch.kv_v.breaks
    dom = patch.domain
    (u0, u1), (v0, v1) = dom
    h = min(np.diff(bu).min(), np.diff(bv).min())
    tol = 1e-10 * h
    ne_u, ne_v = len(bu) - 1, len(bv) - 1
    pieces: dict[int, list] = {}
    max_res = 0.0
    closing = []
    poly_loops = []
    for lp in loops:
        pts = lp.sample(max(400, 40 * max(len(bu), len(bv))))
        inner = pts if lp.open else pts
        dist = np.minimum.reduce([inner[:, 0] - u0, u1 - inner[:, 0], inner[:, 1] - v0, v1 - inner[:, 1]])
        if lp.open:
            for e in (lp.start, lp.end):
                de = min(e[0] - u0, u1 - e[0], e[1] - v0, v1 - e[1])
                if abs(de) > 1e-9 * max(u1 - u0, v1 - v0):
                    raise MalformedLoopError("open trimming chain must end on the patch boundary")
            if np.any(dist[1:-1] < -1e-9):
                raise UnsupportedConfigurationError("trimming chain leaves the patch")
            margin = 0.1 * max(u1 - u0, v1 - v0)
            cl = _closing_path(lp, dom, margin)
            closing += cl
            poly = np.concatenate([pts] + [c[1:] for c in cl[:-1]])
        else:
            if np.all(dist < -tol) and _polyline_winding(np.array([[u0, v0]]), pts)[0] != 0:
                # loop around the whole patch: acts through the winding number only
                poly_loops.append(pts)
                continue
            if np.any(dist <= tol):
                raise UnsupportedConfigurationError("trimming loop touches the patch boundary")
            poly = pts
        poly_loops.append(poly)
        # pieces split at C0 points and knot lines
        loop_pieces = []
        for seg in lp.segments:
            a, b = seg.domain
            br = [(a, None, None), (b, None, None)] + [(t, None, None) for t in seg.breakpoints() if a < t < b]
            br += [(t, None, None) for t in c2_breaks(seg) if a < t < b]
            spans = np.unique(np.concatenate([[a, b], seg.kv.breaks]))
            for s0, s1 in zip(spans[:-1], spans[1:]):
                br += _crossings(seg, s0, s1, bu[1:-1], 0, samples_per_span)
                br += _crossings(seg, s0, s1, bv[1:-1], 1, samples_per_span)
            # curve knots lying on a knot line are crossings missed above
            inner = spans[1:-1]
            if inner.size:
                Xk = seg.evaluate(inner)
                for ax, lines in ((0, bu[1:-1]), (1, bv[1:-1])):
                    for t, xk in zip(inner, Xk[:, ax]):
                        hit = lines[np.abs(lines - xk) <= 1e-11 * (lines[-1] - lines[0] + 1.0)] if lines.size else []
                        br += [(float(t), ax, float(c)) for c in hit]
            br.sort(key=lambda x: x[0])
            merged = [br[0]]
            for item in br[1:]:
                if item[0] - merged[-1][0] <= 1e-12 * (b - a):
                    if merged[-1][1] is None or item[0] == b:
                        merged[-1] = (merged[-1][0], item[1], item[2]) if item[0] != b else (b, item[1], item[2])
                    continue
                merged.append(item)
            merged[0] = (a,) + merged[0][1:]
            merged[-1] = (b,) + merged[-1][1:]
            ts = np.array([m[0] for m in merged])
            X = seg.evaluate(ts)
            for k, (t, ax, c) in enumerate(merged):
                if ax is not None:
                    X[k, ax] = c
            for k in range(len(ts) - 1):
                loop_pieces.append((seg, ts[k], ts[k + 1], X[k].copy(), X[k + 1].copy()))
        # make consecutive pieces share endpoints exactly
        for k in range(1, len(loop_pieces)):
            prev = loop_pieces[k - 1]
            cur = loop_pieces[k]
            loop_pieces[k] = (cur[0], cur[1], cur[2], prev[4], cur[4])
        if not lp.open:
            first, last = loop_pieces[0], loop_pieces[-1]
            loop_pieces[-1] = (last[0], last[1], last[2], last[3], first[3])
        else:
            for idx in (0, -1):
                pc = loop_pieces[idx]
                P = pc[3] if idx == 0 else pc[4]
                Q = P.copy()
                Q[0] = u0 if abs(P[0] - u0) < 1e-9 else (u1 if abs(P[0] - u1) < 1e-9 else P[0])
                Q[1] = v0 if abs(P[1] - v0) < 1e-9 else (v1 if abs(P[1] - v1) < 1e-9 else P[1])
                loop_pieces[idx] = (pc[0], pc[1], pc[2], Q, pc[4]) if idx == 0 else (pc[0], pc[1], pc[2], pc[3], Q)
        for seg, t0, t1, P0, P1 in loop_pieces:
            if np.linalg.norm(P1 - P0) <= tol and t1 - t0 < 1e-9:
                continue
            mid = seg.evaluate(np.array([0.5 * (t0 + t1)]))[0]
            i = int(np.clip(np.searchsorted(bu, mid[0], side="right") - 1, 0, ne_u - 1))
            j = int(np.clip(np.searchsorted(bv, mid[1], side="right") - 1, 0, ne_v - 1))
            for ctrl, res in _fit_adaptive(seg, t0, t1, p, parameterization, P0, P1, fit_tol):
                max_res = max(max_res, res)
                pieces.setdefault(i * ne_v + j, []).append(ctrl)
    # element centres by winding number
    cu = 0.5 * (bu[:-1] + bu[1:])
    cv = 0.5 * (bv[:-1] + bv[1:])
    C = np.stack(np.meshgrid(cu, cv, indexing="ij"), axis=-1).reshape(-1, 2)
    w = np.zeros(len(C), dtype=int)
    area = 0.0
    for poly in poly_loops:
        w += _polyline_winding(C, poly)
        area += 0.5 * np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - np.roll(poly[:, 0], -1) * poly[:, 1])
    base = 1 if (loops and area < 0) else 0
    tags = np.where(w + base > 0, FULL, INACTIVE).reshape(ne_u, ne_v)
    for eid in pieces:
        tags.flat[eid] = CUT
    cls = ElementClassification(bu, bv, tags, pieces, max_res, closing)
    cls.base = base
    return cls


def _global_inside(cls: ElementClassification):
    edges = cls.all_pieces() + list(cls.closing_edges)
    base = getattr(cls, "base", 0)

    def inside(x):
        return bezier_winding(x, edges) + base > 0

    return inside


# ---------------------------------------------------------------------------
# trimmed domain
# ---------------------------------------------------------------------------

class TrimmedDomain:
    """A background patch restricted to the active side of its trimming loops."""

    def __init__(self, patch: NurbsPatch, loops=(), degree: int | None = None,
                 parameterization: str = "native", fit_tol: float | None = None):
        self.patch = patch
        self.degree = degree if degree is not None else max(patch.degrees)
        self.loops_physical = list(loops)
        self.classification = classify_elements(patch, self.loops_physical, self.degree,
                                                parameterization=parameterization, fit_tol=fit_tol)
        cls = self.classification
        inside = _global_inside(cls)
        self.cells: dict[int, list[QuadCell]] = {}
        for eid, pcs in cls.pieces.items():
            box = cls.box(eid)
            full = (box[0][1] - box[0][0]) * (box[1][1] - box[1][0])
            cells = decompose_cut_element(box, pcs, self.degree, inside, eid)
            a = sum(c.area() for c in cells)
            if a < 1e-12 * full:
                cls.tags.flat[eid] = INACTIVE
            elif a > (1 - 1e-12) * full and len(cells) == 1 and _is_box_cell(cells[0], box):
                cls.tags.flat[eid] = FULL
            else:
                self.cells[eid] = cells
        if not np.any(cls.tags != INACTIVE):
            from .errors import EmptyDomainError
            raise EmptyDomainError("trimming leaves no active element")
        self._region_edges: dict[int, list] = {}

    # -- queries -----------------------------------------------------------
    @property
    def tags(self) -> np.ndarray:
        return self.classification.tags

    def element_box(self, eid: int):
        return self.classification.box(eid)

    def active_elements(self) -> list[int]:
        return [int(e) for e in np.nonzero(self.tags.ravel() != INACTIVE)[0]]

    def regions(self):
        """``(element_id, region)`` pairs; region is a box or a :class:`QuadCell`."""
        out = []
        for eid in self.active_elements():
            if self.tags.flat[eid] == FULL:
                out.append((eid, self.element_box(eid)))
            else:
                out += [(eid, c) for c in self.cells[eid]]
        return out

    def active_area(self) -> float:
        return active_area(self.classification, self.cells)

    def physical_area(self, order: int | None = None) -> float:
        from .quadrature import element_quadrature, gauss_rule
        rule = gauss_rule(order if order is not None else self.degree + 2)
        return float(sum(element_quadrature(self.patch, r, rule)[1].sum() for _, r in self.regions()))

    def active_functions(self) -> np.ndarray:
        """Boolean mask over patch basis functions (index ``i*nv + j``)."""
        p, q = self.patch.degrees
        nu, nv = self.patch.shape
        mask = np.zeros((nu, nv), dtype=bool)
        bu, bv = self.classification.breaks_u, self.classification.breaks_v
        fu = self.patch.kv_u.find_span(0.5 * (bu[:-1] + bu[1:])) - p
        fv = self.patch.kv_v.find_span(0.5 * (bv[:-1] + bv[1:])) - q
        for i, j in zip(*np.nonzero(self.tags != INACTIVE)):
            mask[fu[i]:fu[i] + p + 1, fv[j]:fv[j] + q + 1] = True
        return mask.ravel()

    def is_active(self, uv) -> np.ndarray:
        uv = np.atleast_2d(np.asarray(uv, float))
        bu, bv = self.classification.breaks_u, self.classification.breaks_v
        ne_v = len(bv) - 1
        i = np.clip(np.searchsorted(bu, uv[:, 0], side="right") - 1, 0, len(bu) - 2)
        j = np.clip(np.searchsorted(bv, uv[:, 1], side="right") - 1, 0, ne_v - 1)
        inside_dom = ((uv[:, 0] >= bu[0]) & (uv[:, 0] <= bu[-1]) & (uv[:, 1] >= bv[0]) & (uv[:, 1] <= bv[-1]))
        out = np.zeros(len(uv), dtype=bool)
        for k in range(len(uv)):
            if not inside_dom[k]:
                continue
            eid = int(i[k] * ne_v + j[k])
            tag = self.tags.flat[eid]
            if tag == FULL:
                out[k] = True
            elif tag == CUT:
                out[k] = any(_point_in_cell(c, uv[k]) for c in self.cells[eid])
        return out


def _is_box_cell(cell: QuadCell, box) -> bool:
    ref = _box_cell(box, cell.degree, cell.element)
    return bool(np.allclose(cell.ctrl, ref.ctrl, atol=1e-12))


def _point_in_cell(cell: QuadCell, x) -> bool:
    """Newton inversion of the cell map; True when the preimage lies in [0,1]^2."""
    lo = cell.ctrl.reshape(-1, 2).min(axis=0)
    hi = cell.ctrl.reshape(-1, 2).max(axis=0)
    if np.any(x < lo - 1e-12) or np.any(x > hi + 1e-12):
        return False
    g = np.linspace(0.05, 0.95, 7)
    st0 = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    y, _ = cell.map(st0)
    st = st0[np.argmin(np.linalg.norm(y - x, axis=1))].copy()
    for _ in range(30):
        y, J = cell.map(st)
        r = y[0] - x
        try:
            d = np.linalg.solve(J[0], r)
        except np.linalg.LinAlgError:
            break
        st = np.clip(st - d, -0.5, 1.5)
        if np.linalg.norm(d) < 1e-14:
            break
    y, _ = cell.map(st)
    return bool(np.linalg.norm(y[0] - x) < 1e-9 and np.all(st >= -1e-9) and np.all(st <= 1 + 1e-9))


def active_area(classification: ElementClassification, cells: dict) -> float:
    """Sum of full-element areas and cut-cell areas (parametric)."""
    cls = classification
    total = 0.0
    for eid in np.nonzero(cls.tags.ravel() == FULL)[0]:
        (a, b), (c, d) = cls.box(int(eid))
        total += (b - a) * (d - c)
    for eid, cs in cells.items():
        if cls.tags.flat[eid] == CUT:
            total += sum(c.area() for c in cs)
    return float(total)


def trim(patch: NurbsPatch, loops, degree: int | None = None, **kw) -> TrimmedDomain:
    return TrimmedDomain(patch, loops, degree, **kw)
