"""Gauss rules, element/cell quadrature and interface quadrature meshes."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.optimize import brentq

from .errors import DegenerateCellError, InterfaceConstructionError, InversionError
from .splines import NurbsCurve, NurbsPatch, invert_point, invert_points_on_patch


@dataclass(frozen=True)
class GaussRule:
    """Gauss-Legendre rule on [-1, 1]."""

    order: int
    points: np.ndarray
    weights: np.ndarray

    def on_interval(self, a: float, b: float):
        """Points and weights mapped to ``[a, b]``."""
        h = 0.5 * (b - a)
        return h * self.points + 0.5 * (a + b), h * self.weights


@lru_cache(maxsize=None)
def gauss_rule(n: int) -> GaussRule:
    if not 1 <= n <= 16:
        raise ValueError("Gauss rule order must be in 1..16")
    x, w = leggauss(n)
    x.setflags(write=False)
    w.setflags(write=False)
    return GaussRule(n, x, w)


def tensor_rule(rule: GaussRule, box):
    """Tensor Gauss points/weights on ``((u0,u1),(v0,v1))``."""
    (u0, u1), (v0, v1) = box
    xu, wu = rule.on_interval(u0, u1)
    xv, wv = rule.on_interval(v0, v1)
    pts = np.stack(np.meshgrid(xu, xv, indexing="ij"), axis=-1).reshape(-1, 2)
    return pts, np.outer(wu, wv).ravel()


def element_quadrature(patch: NurbsPatch, region, rule: GaussRule):
    """Physical points and weights over an element box or a quadrature cell.

    ``region`` is either a box ``((u0,u1),(v0,v1))`` or an object with a
    ``quadrature(rule)`` method returning parametric points and weights
    (a :class:`~ibcm.trimming.QuadCell`).  Weights include the patch
    Jacobian determinant.
    """
    if hasattr(region, "quadrature"):
        uv, w = region.quadrature(rule)
    else:
        uv, w = tensor_rule(rule, region)
    x, J = patch.eval_patch(uv)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    if np.any(det <= 0) or np.any(w <= 0):
        raise DegenerateCellError("nonpositive Jacobian at a quadrature point")
    return x, w * det


# ---------------------------------------------------------------------------
# interface quadrature
# ---------------------------------------------------------------------------

@dataclass
class InterfaceSegment:
    t0: float
    t1: float
    t: np.ndarray  # curve parameters of the quadrature points
    x: np.ndarray  # physical points (q, 2)
    weights: np.ndarray  # arclength weights (q,)
    normal: np.ndarray  # outward unit normal of the owning side (q, 2)
    bottom_uv: np.ndarray | None  # bottom parametric points (q, 2)

    @property
    def length(self) -> float:
        return float(self.weights.sum())


@dataclass
class InterfaceQuadMesh:
    """1D quadrature mesh along a curve lying inside a bottom patch."""

    curve: NurbsCurve
    breakpoints: np.ndarray
    segments: list[InterfaceSegment] = field(default_factory=list)

    @property
    def length(self) -> float:
        return float(sum(s.length for s in self.segments))

    def all_points(self):
        return np.concatenate([s.x for s in self.segments])


def _knot_line_crossings(fun, a: float, b: float, values: np.ndarray, samples: int) -> list[float]:
    """Parameters in (a, b) where the scalar ``fun`` crosses any of ``values``."""
    if values.size == 0:
        return []
    s = np.linspace(a, b, samples + 1)
    f = fun(s)
    out = []
    for c in values:
        g = f - c
        sign = np.sign(g)
        for k in np.nonzero(sign[:-1] * sign[1:] < 0)[0]:
            h = lambda t: float(fun(np.array([t]))[0]) - c
            try:
                r = brentq(h, s[k], s[k + 1], xtol=1e-14, rtol=1e-14)
            except ValueError:
                # pointwise inversion disagrees with the sampled sign near the root
                r = float(s[k] if abs(g[k]) < abs(g[k + 1]) else s[k + 1])
            out.append(r)
        # exact zeros at interior samples count as crossings when the sign flips
        for k in np.nonzero(sign[1:-1] == 0)[0] + 1:
            if sign[k - 1] * sign[k + 1] < 0:
                out.append(float(s[k]))
    return out


class BottomMap:
    """Physical -> parametric map of a bottom patch (exact when affine)."""

    def __init__(self, patch: NurbsPatch):
        self.patch = patch
        self.affine = patch.affine_map()
        if self.affine is not None:
            A, b = self.affine
            self._Ainv = np.linalg.inv(A)
            self._b = b
        self._last = None

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        if self.affine is not None:
            return (x - self._b) @ self._Ainv.T
        seeds = np.tile(self._last, (len(x), 1)) if (self._last is not None and len(x) == 1) else None
        uv, d = invert_points_on_patch(self.patch, x, seeds=seeds, tol=1e-13)
        scale = max(1.0, float(np.abs(x).max()))
        if np.any(d > 1e-9 * scale):
            k = int(np.argmax(d))
            raise InversionError(f"point {x[k]} is not on the bottom patch (distance {d[k]:.2e})", (uv[k], d[k]))
        self._last = uv[-1]
        return uv


def build_interface_quadrature(curve: NurbsCurve, bottom: NurbsPatch | None = None,
                               order: int | None = None, normal_sign: float = 1.0,
                               extra_breaks=(), merge_tol: float = 1e-10,
                               bottom_map: BottomMap | None = None) -> InterfaceQuadMesh:
    """Quadrature mesh along ``curve`` split at its own knots and bottom knot lines.

    ``normal_sign`` selects the normal: ``+1`` gives the tangent rotated by
    -90 degrees (the outward normal of a region lying to the left of the
    curve).  When ``bottom`` is given, each quadrature point also carries its
    bottom parametric coordinates.
    """
    p = curve.degree
    q = order if order is not None else p + 2
    rule = gauss_rule(q)
    a, b = curve.domain
    breaks = list(curve.kv.breaks)
    breaks += [t for t in extra_breaks if a < t < b]
    bmap = None
    if bottom is not None:
        bmap = bottom_map if bottom_map is not None else BottomMap(bottom)
        ku, kv = bottom.kv_u.breaks, bottom.kv_v.breaks

        def comp(d):
            return lambda s: bmap(curve.evaluate(np.atleast_1d(s)))[:, d]

        try:
            for e0, e1 in curve.kv.elements():
                n = 16
                breaks += _knot_line_crossings(comp(0), e0, e1, ku, n)
                breaks += _knot_line_crossings(comp(1), e0, e1, kv, n)
        except InversionError as exc:
            raise InterfaceConstructionError(f"pullback failed: {exc}") from exc
    breaks = np.sort(np.array(breaks, dtype=float))
    scale = b - a
    keep = [breaks[0]]
    for t in breaks[1:]:
        if t - keep[-1] > merge_tol * scale:
            keep.append(t)
        else:
            # keep the exact knot/endpoint when merging a grazing crossing
            pass
    keep[-1] = b
    breaks = np.array(keep)
    mesh = InterfaceQuadMesh(curve=curve, breakpoints=breaks)
    for t0, t1 in zip(breaks[:-1], breaks[1:]):
        t, w = rule.on_interval(t0, t1)
        D = curve.derivatives(t, 1)
        tang = D[:, 1]
        speed = np.linalg.norm(tang, axis=1)
        nrm = normal_sign * np.column_stack([tang[:, 1], -tang[:, 0]]) / speed[:, None]
        buv = None
        if bmap is not None:
            try:
                buv = bmap(D[:, 0])
            except InversionError as exc:
                raise InterfaceConstructionError(f"pullback failed: {exc}") from exc
        mesh.segments.append(InterfaceSegment(t0, t1, t, D[:, 0], w * speed, nrm, buv))
    return mesh
