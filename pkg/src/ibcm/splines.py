"""B-spline and NURBS kernels: knot vectors, basis evaluation, curves, patches.

Everything here is immutable after construction and evaluation routines are
vectorized over parameter arrays.  Conventions:

* control nets of patches have shape ``(nu, nv, 2)`` with the first index
  running along ``u``;
* a patch Jacobian ``J[..., i, j]`` is ``d x_i / d xi_j``;
* basis functions of a patch are numbered ``i * nv + j``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DomainError,
    IncompatibilityError,
    InvalidRefinementError,
    InversionError,
    UnsupportedDegreeError,
)

__all__ = [
    "KnotVector",
    "NurbsCurve",
    "NurbsPatch",
    "basis_funs",
    "eval_basis",
    "greville_abscissae",
    "merge_knot_vectors",
    "refine_knots",
    "invert_point",
    "circle",
    "arc",
    "line_segment",
    "rectangle_patch",
    "annulus_patch",
    "uniform_knots",
]

_KNOT_TOL = 1e-12


class KnotVector:
    """Open (clamped) knot vector of degree ``p``."""

    def __init__(self, knots, degree: int):
        knots = np.array(knots, dtype=float)
        degree = int(degree)
        if knots.ndim != 1:
            raise ValueError("knots must be one-dimensional")
        if degree < 0:
            raise ValueError("degree must be nonnegative")
        if knots.size < 2 * (degree + 1):
            raise ValueError("need at least 2(p+1) knots")
        if np.any(np.diff(knots) < 0):
            raise ValueError("knots must be nondecreasing")
        if knots[-1] <= knots[0]:
            raise ValueError("knot vector spans an empty interval")
        p = degree
        if np.any(knots[: p + 1] != knots[0]) or np.any(knots[-p - 1 :] != knots[-1]):
            raise ValueError("only open knot vectors are supported")
        _, counts = np.unique(knots[p + 1 : knots.size - p - 1], return_counts=True)
        if counts.size and counts.max() > p + 1:
            raise ValueError("interior knot multiplicity exceeds p+1")
        knots.setflags(write=False)
        self.knots = knots
        self.degree = p

    # -- basic properties -------------------------------------------------
    @property
    def p(self) -> int:
        return self.degree

    @property
    def n(self) -> int:
        """Number of basis functions."""
        return self.knots.size - self.degree - 1

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.knots[0]), float(self.knots[-1])

    @property
    def breaks(self) -> np.ndarray:
        """Unique knot values (element boundaries)."""
        return np.unique(self.knots)

    @property
    def num_elements(self) -> int:
        return self.breaks.size - 1

    def elements(self) -> np.ndarray:
        b = self.breaks
        return np.column_stack([b[:-1], b[1:]])

    def multiplicity(self, x: float) -> int:
        return int(np.sum(np.abs(self.knots - x) <= _KNOT_TOL * self.scale))

    @property
    def scale(self) -> float:
        a, b = self.domain
        return max(abs(a), abs(b), b - a)

    def c0_breaks(self) -> np.ndarray:
        """Interior knots of multiplicity >= p (continuity C^0 or less)."""
        vals, counts = np.unique(self.knots, return_counts=True)
        inner = (counts >= self.degree) & (vals > self.knots[0]) & (vals < self.knots[-1])
        return vals[inner]

    def find_span(self, x) -> np.ndarray:
        """Index ``s`` with ``knots[s] <= x < knots[s+1]`` (last span closed)."""
        x = np.asarray(x, dtype=float)
        s = np.searchsorted(self.knots, x, side="right") - 1
        return np.clip(s, self.degree, self.n - 1)

    def element_index(self, x) -> np.ndarray:
        """Index of the (nonzero) element containing ``x``."""
        x = np.asarray(x, dtype=float)
        b = self.breaks
        e = np.searchsorted(b, x, side="right") - 1
        return np.clip(e, 0, b.size - 2)

    def check_inside(self, x, tol: float = 1e-10) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        a, b = self.domain
        eps = tol * (b - a)
        if np.any(x < a - eps) or np.any(x > b + eps) or np.any(~np.isfinite(x)):
            raise DomainError(f"parameter outside [{a}, {b}]")
        return np.clip(x, a, b)

    def greville(self) -> np.ndarray:
        return greville_abscissae(self)

    def __eq__(self, other):
        return (
            isinstance(other, KnotVector)
            and other.degree == self.degree
            and other.knots.shape == self.knots.shape
            and bool(np.all(other.knots == self.knots))
        )

    def __hash__(self):
        return hash((self.degree, self.knots.tobytes()))

    def __repr__(self):
        return f"KnotVector(p={self.degree}, knots={self.knots.tolist()})"

    def reversed(self) -> "KnotVector":
        a, b = self.domain
        return KnotVector((a + b) - self.knots[::-1], self.degree)

    def mapped(self, a: float, b: float) -> "KnotVector":
        """Affinely map the parameter range onto ``[a, b]``."""
        a0, b0 = self.domain
        t = (self.knots - a0) / (b0 - a0)
        k = a + (b - a) * t
        k[: self.degree + 1] = a
        k[-self.degree - 1 :] = b
        return KnotVector(k, self.degree)

    def dyadic_refinement(self, times: int = 1) -> np.ndarray:
        """Knots to insert for ``times`` rounds of uniform element bisection."""
        new = []
        b = self.breaks
        for _ in range(times):
            mids = 0.5 * (b[:-1] + b[1:])
            new.append(mids)
            b = np.sort(np.concatenate([b, mids]))
        return np.sort(np.concatenate(new)) if new else np.zeros(0)


def uniform_knots(num_elements: int, degree: int, a: float = 0.0, b: float = 1.0,
                  continuity: int | None = None) -> KnotVector:
    """Open uniform knot vector; interior knots repeated ``p - continuity`` times."""
    if continuity is None:
        continuity = degree - 1
    mult = degree - continuity
    inner = np.linspace(a, b, num_elements + 1)[1:-1]
    knots = np.concatenate([[a] * (degree + 1), np.repeat(inner, mult), [b] * (degree + 1)])
    return KnotVector(knots, degree)


# ---------------------------------------------------------------------------
# basis functions
# ---------------------------------------------------------------------------

def _basis_ders_spans(knots: np.ndarray, p: int, spans: np.ndarray, x: np.ndarray, nd: int):
    """Vectorized Cox-de Boor with derivatives (NURBS book A2.3).

    Returns an array ``(N, nd+1, p+1)`` of the nonzero basis functions and
    their derivatives at each point for the given spans.
    """
    N = x.size
    ndu = np.zeros((N, p + 1, p + 1))
    ndu[:, 0, 0] = 1.0
    left = np.zeros((N, p + 1))
    right = np.zeros((N, p + 1))
    for j in range(1, p + 1):
        left[:, j] = x - knots[spans + 1 - j]
        right[:, j] = knots[spans + j] - x
        saved = np.zeros(N)
        for r in range(j):
            ndu[:, j, r] = right[:, r + 1] + left[:, j - r]
            with np.errstate(divide="ignore", invalid="ignore"):
                temp = np.where(ndu[:, j, r] != 0.0, ndu[:, r, j - 1] / ndu[:, j, r], 0.0)
            ndu[:, r, j] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        ndu[:, j, j] = saved
    ders = np.zeros((N, nd + 1, p + 1))
    ders[:, 0, :] = ndu[:, :, p]
    if nd == 0:
        return ders
    a = np.zeros((N, 2, p + 1))
    for r in range(p + 1):
        s1, s2 = 0, 1
        a[:] = 0.0
        a[:, 0, 0] = 1.0
        for k in range(1, nd + 1):
            d = np.zeros(N)
            rk = r - k
            pk = p - k
            if r >= k:
                with np.errstate(divide="ignore", invalid="ignore"):
                    a[:, s2, 0] = np.where(ndu[:, pk + 1, rk] != 0, a[:, s1, 0] / ndu[:, pk + 1, rk], 0.0)
                d = a[:, s2, 0] * ndu[:, rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                with np.errstate(divide="ignore", invalid="ignore"):
                    a[:, s2, j] = np.where(
                        ndu[:, pk + 1, rk + j] != 0,
                        (a[:, s1, j] - a[:, s1, j - 1]) / ndu[:, pk + 1, rk + j],
                        0.0,
                    )
                d = d + a[:, s2, j] * ndu[:, rk + j, pk]
            if r <= pk:
                with np.errstate(divide="ignore", invalid="ignore"):
                    a[:, s2, k] = np.where(ndu[:, pk + 1, r] != 0, -a[:, s1, k - 1] / ndu[:, pk + 1, r], 0.0)
                d = d + a[:, s2, k] * ndu[:, r, pk]
            ders[:, k, r] = d
            s1, s2 = s2, s1
    fac = p
    for k in range(1, nd + 1):
        ders[:, k, :] *= fac
        fac *= p - k
    return ders


def basis_funs(kv: KnotVector, x, nd: int = 0, spans=None):
    """Nonzero basis functions at the points ``x``.

    Returns ``(first, ders)`` with ``first`` the index of the first nonzero
    function per point and ``ders`` of shape ``(N, nd+1, p+1)``.  ``spans``
    may be given to force evaluation from a particular knot span, which is
    how one-sided values at element boundaries are obtained.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x = kv.check_inside(x)
    if spans is None:
        spans = kv.find_span(x)
    spans = np.asarray(spans, dtype=int)
    if spans.ndim == 0:
        spans = np.full(x.shape, int(spans))
    nd_eff = min(nd, kv.degree)
    ders = _basis_ders_spans(kv.knots, kv.degree, spans, x, nd_eff)
    if nd > nd_eff:
        ders = np.concatenate([ders, np.zeros((x.size, nd - nd_eff, kv.degree + 1))], axis=1)
    return spans - kv.degree, ders


def eval_basis(kv: KnotVector, xi: float, nd: int = 0):
    """Scalar convenience wrapper around :func:`basis_funs`.

    Returns ``(values_and_derivatives (nd+1, p+1), first_active_index)``.
    """
    if nd > kv.degree:
        raise ValueError("derivative order exceeds degree")
    first, ders = basis_funs(kv, [xi], nd)
    return ders[0], int(first[0])


def greville_abscissae(kv: KnotVector) -> np.ndarray:
    p = kv.degree
    if p == 0:
        raise UnsupportedDegreeError("Greville abscissae need degree >= 1")
    t = kv.knots
    return np.array([t[i + 1 : i + p + 1].mean() for i in range(kv.n)])


def merge_knot_vectors(a: KnotVector, b: KnotVector, tol: float = 1e-12) -> KnotVector:
    """Union knot vector: each knot gets the larger of its two multiplicities."""
    if a.degree != b.degree:
        raise IncompatibilityError("knot vectors of different degree")
    if abs(a.domain[0] - b.domain[0]) > tol or abs(a.domain[1] - b.domain[1]) > tol:
        raise IncompatibilityError("knot vectors over different parameter ranges")
    va, ca = np.unique(a.knots, return_counts=True)
    vb, cb = np.unique(b.knots, return_counts=True)
    mult: dict[float, int] = {}
    for v, c in zip(va, ca):
        mult[float(v)] = int(c)
    for v, c in zip(vb, cb):
        hit = None
        for k in mult:
            if abs(k - v) <= tol:
                hit = k
                break
        if hit is None:
            mult[float(v)] = int(c)
        else:
            mult[hit] = max(mult[hit], int(c))
    knots = np.concatenate([[k] * m for k, m in sorted(mult.items())])
    return KnotVector(knots, a.degree)


def _missing_knots(coarse: KnotVector, fine: KnotVector, tol: float = 1e-12) -> np.ndarray:
    """Knots of ``fine`` not present in ``coarse`` (with multiplicity)."""
    out = []
    vals, counts = np.unique(fine.knots, return_counts=True)
    for v, c in zip(vals, counts):
        have = int(np.sum(np.abs(coarse.knots - v) <= tol))
        if have > c:
            raise IncompatibilityError("target knot vector is not a superset")
        out.extend([v] * (c - have))
    return np.array(out)


# ---------------------------------------------------------------------------
# knot insertion on homogeneous coordinates
# ---------------------------------------------------------------------------

def _refine_homogeneous(kv: KnotVector, Pw: np.ndarray, X) -> tuple[KnotVector, np.ndarray]:
    """Insert knots ``X`` (NURBS book A5.4), acting on axis 0 of ``Pw``."""
    X = np.sort(np.asarray(X, dtype=float))
    if X.size == 0:
        return kv, Pw.copy()
    p = kv.degree
    U = kv.knots
    a_, b_ = kv.domain
    if np.any(X <= a_) or np.any(X >= b_):
        raise InvalidRefinementError("inserted knots must lie strictly inside the domain")
    allk = np.sort(np.concatenate([U, X]))
    vals, counts = np.unique(allk[p + 1 : allk.size - p - 1], return_counts=True)
    if counts.size and counts.max() > p + 1:
        raise InvalidRefinementError("refinement would exceed multiplicity p+1")
    n = kv.n - 1
    m = n + p + 1
    r = X.size - 1
    a = int(np.searchsorted(U, X[0], side="right") - 1)
    b = int(np.searchsorted(U, X[r], side="right") - 1) + 1
    Qw = np.zeros((Pw.shape[0] + X.size,) + Pw.shape[1:])
    Ubar = np.zeros(U.size + X.size)
    Qw[: a - p + 1] = Pw[: a - p + 1]
    Qw[b + r : n + r + 2] = Pw[b - 1 : n + 1]
    Ubar[: a + 1] = U[: a + 1]
    Ubar[b + p + r + 1 : m + r + 2] = U[b + p : m + 1]
    i = b + p - 1
    k = b + p + r
    for j in range(r, -1, -1):
        while X[j] <= U[i] and i > a:
            Qw[k - p - 1] = Pw[i - p - 1]
            Ubar[k] = U[i]
            k -= 1
            i -= 1
        Qw[k - p - 1] = Qw[k - p]
        for l in range(1, p + 1):
            ind = k - p + l
            alfa = Ubar[k + l] - X[j]
            if abs(alfa) == 0.0:
                Qw[ind - 1] = Qw[ind]
            else:
                alfa = alfa / (Ubar[k + l] - U[i - p + l])
                Qw[ind - 1] = alfa * Qw[ind - 1] + (1.0 - alfa) * Qw[ind]
        Ubar[k] = X[j]
        k -= 1
    return KnotVector(Ubar, p), Qw


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------

class NurbsCurve:
    """Planar NURBS curve; ``weights`` all one means a plain B-spline."""

    def __init__(self, kv: KnotVector, control_points, weights=None):
        P = np.array(control_points, dtype=float)
        if P.ndim != 2 or P.shape[1] != 2:
            raise ValueError("control points must have shape (n, 2)")
        if P.shape[0] != kv.n:
            raise ValueError(f"expected {kv.n} control points, got {P.shape[0]}")
        w = np.ones(kv.n) if weights is None else np.array(weights, dtype=float)
        if w.shape != (kv.n,) or np.any(w <= 0):
            raise ValueError("weights must be positive, one per control point")
        P.setflags(write=False)
        w.setflags(write=False)
        self.kv = kv
        self.control_points = P
        self.weights = w

    @property
    def degree(self) -> int:
        return self.kv.degree

    @property
    def domain(self) -> tuple[float, float]:
        return self.kv.domain

    @property
    def is_rational(self) -> bool:
        return bool(np.any(self.weights != self.weights[0]))

    @property
    def is_closed(self) -> bool:
        return bool(np.allclose(self.control_points[0], self.control_points[-1], atol=1e-12, rtol=0))

    def breakpoints(self) -> np.ndarray:
        """Parameters where the curve is only C^0 (used to split pieces)."""
        return self.kv.c0_breaks()

    def derivatives(self, s, nd: int = 1) -> np.ndarray:
        """Points and derivatives ``(N, nd+1, 2)`` via the quotient rule."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        first, N = basis_funs(self.kv, s, nd)
        p = self.degree
        idx = first[:, None] + np.arange(p + 1)
        w = self.weights[idx]  # (M, p+1)
        Pw = self.control_points[idx] * w[..., None]
        A = np.einsum("mkj,mjd->mkd", N, Pw)  # (M, nd+1, 2)
        W = np.einsum("mkj,mj->mk", N, w)  # (M, nd+1)
        C = np.zeros_like(A)
        for k in range(nd + 1):
            v = A[:, k].copy()
            for i in range(1, k + 1):
                v -= math.comb(k, i) * W[:, i, None] * C[:, k - i]
            C[:, k] = v / W[:, 0, None]
        return C

    def __call__(self, s) -> np.ndarray:
        return self.evaluate(s)

    def evaluate(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        out = self.derivatives(np.atleast_1d(s), 0)[:, 0]
        return out[0] if s.ndim == 0 else out

    def tangent(self, s) -> np.ndarray:
        return self.derivatives(s, 1)[:, 1]

    def greville_points(self) -> np.ndarray:
        return self.evaluate(greville_abscissae(self.kv))

    def reversed(self) -> "NurbsCurve":
        return NurbsCurve(self.kv.reversed(), self.control_points[::-1], self.weights[::-1])

    def transformed(self, A=None, b=None) -> "NurbsCurve":
        """Image under the affine map ``x -> A x + b`` (exact for NURBS)."""
        A = np.eye(2) if A is None else np.asarray(A, float)
        b = np.zeros(2) if b is None else np.asarray(b, float)
        return NurbsCurve(self.kv, self.control_points @ A.T + b, self.weights)

    def reparameterized(self, a: float = 0.0, b: float = 1.0) -> "NurbsCurve":
        return NurbsCurve(self.kv.mapped(a, b), self.control_points, self.weights)

    def signed_area(self, n: int = 2000) -> float:
        """Area enclosed by a closed curve (positive when counter-clockwise)."""
        s = np.linspace(*self.domain, n + 1)
        x = self.evaluate(s)
        return 0.5 * float(np.sum(x[:-1, 0] * x[1:, 1] - x[1:, 0] * x[:-1, 1]))

    def length(self, n_per_span: int = 16) -> float:
        from numpy.polynomial.legendre import leggauss

        g, gw = leggauss(n_per_span)
        tot = 0.0
        for a, b in self.kv.elements():
            s = 0.5 * (b - a) * g + 0.5 * (a + b)
            d = self.tangent(s)
            tot += 0.5 * (b - a) * float(np.sum(gw * np.linalg.norm(d, axis=1)))
        return tot

    def to_dict(self) -> dict:
        return {
            "type": "curve",
            "degree": self.degree,
            "knots": self.kv.knots.tolist(),
            "control_points": self.control_points.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NurbsCurve":
        return cls(KnotVector(d["knots"], d["degree"]), d["control_points"], d.get("weights"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "NurbsCurve":
        return cls.from_dict(json.loads(s))

    def __repr__(self):
        return f"NurbsCurve(p={self.degree}, n={self.kv.n})"


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

@dataclass
class PatchBasis:
    """Basis values of a patch at a batch of points sharing one element."""

    index: np.ndarray  # (nloc,) local basis numbers i*nv + j
    R: np.ndarray  # (N, nloc)
    dR: np.ndarray  # (N, nloc, 2) physical gradients
    x: np.ndarray  # (N, 2) physical points
    J: np.ndarray  # (N, 2, 2)
    detJ: np.ndarray  # (N,)


class NurbsPatch:
    """Tensor-product NURBS surface ``F: [u0,u1] x [v0,v1] -> R^2``."""

    def __init__(self, kv_u: KnotVector, kv_v: KnotVector, control_net, weights=None):
        P = np.array(control_net, dtype=float)
        if P.shape != (kv_u.n, kv_v.n, 2):
            raise ValueError(f"control net must have shape {(kv_u.n, kv_v.n, 2)}, got {P.shape}")
        w = np.ones((kv_u.n, kv_v.n)) if weights is None else np.array(weights, dtype=float)
        if w.shape != (kv_u.n, kv_v.n) or np.any(w <= 0):
            raise ValueError("weights must be positive with the net's shape")
        P.setflags(write=False)
        w.setflags(write=False)
        self.kv_u = kv_u
        self.kv_v = kv_v
        self.control_net = P
        self.weights = w

    @property
    def degrees(self) -> tuple[int, int]:
        return self.kv_u.degree, self.kv_v.degree

    @property
    def shape(self) -> tuple[int, int]:
        return self.kv_u.n, self.kv_v.n

    @property
    def num_basis(self) -> int:
        return self.kv_u.n * self.kv_v.n

    @property
    def domain(self) -> tuple[tuple[float, float], tuple[float, float]]:
        return self.kv_u.domain, self.kv_v.domain

    @property
    def is_rational(self) -> bool:
        return bool(np.any(self.weights != self.weights.flat[0]))

    def elements(self):
        """Parametric mesh: list of ``((u0, u1), (v0, v1))`` nonzero elements."""
        eu = self.kv_u.elements()
        ev = self.kv_v.elements()
        return [((a, b), (c, d)) for (a, b) in eu for (c, d) in ev]

    def affine_map(self):
        """``(A, b)`` when ``F(xi) = A xi + b`` exactly, else ``None``."""
        (u0, u1), (v0, v1) = self.domain
        if self.is_rational:
            return None
        gu = greville_abscissae(self.kv_u) if self.kv_u.degree else None
        gv = greville_abscissae(self.kv_v) if self.kv_v.degree else None
        if gu is None or gv is None:
            return None
        P = self.control_net
        x00 = P[0, 0]
        du = (P[-1, 0] - P[0, 0]) / (gu[-1] - gu[0])
        dv = (P[0, -1] - P[0, 0]) / (gv[-1] - gv[0])
        A = np.column_stack([du, dv])
        b = x00 - A @ np.array([gu[0], gv[0]])
        G = np.stack(np.meshgrid(gu, gv, indexing="ij"), axis=-1)
        pred = G @ A.T + b
        scale = max(1.0, float(np.abs(P).max()))
        if np.allclose(pred, P, atol=1e-13 * scale, rtol=0):
            return A, b
        return None

    # -- evaluation -------------------------------------------------------
    def _homogeneous(self, uv, nd: int):
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        fu, Nu = basis_funs(self.kv_u, uv[:, 0], nd)
        fv, Nv = basis_funs(self.kv_v, uv[:, 1], nd)
        return uv, fu, Nu, fv, Nv

    def derivatives(self, uv, nd: int = 1) -> np.ndarray:
        """Rational derivatives ``S[m, k, l, :] = d^{k+l} F / du^k dv^l``."""
        uv, fu, Nu, fv, Nv = self._homogeneous(uv, nd)
        p, q = self.degrees
        iu = fu[:, None] + np.arange(p + 1)
        iv = fv[:, None] + np.arange(q + 1)
        w = self.weights[iu[:, :, None], iv[:, None, :]]  # (M, p+1, q+1)
        P = self.control_net[iu[:, :, None], iv[:, None, :]]  # (M, p+1, q+1, 2)
        Pw = P * w[..., None]
        A = np.einsum("mka,mlb,mabd->mkld", Nu, Nv, Pw)
        W = np.einsum("mka,mlb,mab->mkl", Nu, Nv, w)
        S = np.zeros_like(A)
        for k in range(nd + 1):
            for l in range(nd + 1 - k):
                v = A[:, k, l].copy()
                for j in range(1, l + 1):
                    v -= math.comb(l, j) * W[:, 0, j, None] * S[:, k, l - j]
                for i in range(1, k + 1):
                    v -= math.comb(k, i) * W[:, i, 0, None] * S[:, k - i, l]
                    v2 = np.zeros_like(v)
                    for j in range(1, l + 1):
                        v2 += math.comb(l, j) * W[:, i, j, None] * S[:, k - i, l - j]
                    v -= math.comb(k, i) * v2
                S[:, k, l] = v / W[:, 0, 0, None]
        return S

    def evaluate(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        out = self.derivatives(np.atleast_2d(uv), 0)[:, 0, 0]
        return out[0] if uv.ndim == 1 else out

    def __call__(self, uv) -> np.ndarray:
        return self.evaluate(uv)

    def jacobian(self, uv) -> np.ndarray:
        S = self.derivatives(uv, 1)
        return np.stack([S[:, 1, 0], S[:, 0, 1]], axis=-1)

    def eval_patch(self, uv, second: bool = False):
        """Point, Jacobian and (optionally) second derivatives.

        Second derivatives are returned as ``H[m, i, a, b] = d^2 x_i / dxi_a dxi_b``.
        """
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        S = self.derivatives(uv, 2 if second else 1)
        x = S[:, 0, 0]
        J = np.stack([S[:, 1, 0], S[:, 0, 1]], axis=-1)
        if not second:
            return x, J
        H = np.zeros((uv.shape[0], 2, 2, 2))
        H[:, :, 0, 0] = S[:, 2, 0]
        H[:, :, 1, 1] = S[:, 0, 2]
        H[:, :, 0, 1] = S[:, 1, 1]
        H[:, :, 1, 0] = S[:, 1, 1]
        return x, J, H

    def basis(self, uv, element=None, nd: int = 1) -> PatchBasis:
        """Rational basis functions with physical gradients at points ``uv``.

        All points must lie in the same element; ``element`` (the
        ``((u0,u1),(v0,v1))`` box) selects the knot span so that values on
        element boundaries are taken from the inside.
        """
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        p, q = self.degrees
        if element is None:
            su = int(self.kv_u.find_span(uv[:, 0].mean()))
            sv = int(self.kv_v.find_span(uv[:, 1].mean()))
        else:
            (u0, u1), (v0, v1) = element
            su = int(self.kv_u.find_span(0.5 * (u0 + u1)))
            sv = int(self.kv_v.find_span(0.5 * (v0 + v1)))
        fu, Nu = basis_funs(self.kv_u, uv[:, 0], 1, spans=su)
        fv, Nv = basis_funs(self.kv_v, uv[:, 1], 1, spans=sv)
        iu = fu[0] + np.arange(p + 1)
        iv = fv[0] + np.arange(q + 1)
        w = self.weights[np.ix_(iu, iv)].ravel()
        P = self.control_net[np.ix_(iu, iv)].reshape(-1, 2)
        B = (Nu[:, 0, :, None] * Nv[:, 0, None, :]).reshape(uv.shape[0], -1)
        Bu = (Nu[:, 1, :, None] * Nv[:, 0, None, :]).reshape(uv.shape[0], -1)
        Bv = (Nu[:, 0, :, None] * Nv[:, 1, None, :]).reshape(uv.shape[0], -1)
        Bw = B * w
        W = Bw.sum(axis=1)
        Wu = (Bu * w).sum(axis=1)
        Wv = (Bv * w).sum(axis=1)
        R = Bw / W[:, None]
        Ru = (Bu * w - R * Wu[:, None]) / W[:, None]
        Rv = (Bv * w - R * Wv[:, None]) / W[:, None]
        dRp = np.stack([Ru, Rv], axis=-1)  # (N, nloc, 2)
        x = R @ P
        J = np.einsum("nka,kd->nda", dRp, P)
        detJ = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            Jinv = np.empty_like(J)
            Jinv[:, 0, 0] = J[:, 1, 1] / detJ
            Jinv[:, 1, 1] = J[:, 0, 0] / detJ
            Jinv[:, 0, 1] = -J[:, 0, 1] / detJ
            Jinv[:, 1, 0] = -J[:, 1, 0] / detJ
        # grad_x R = J^{-T} grad_xi R
        dR = np.einsum("nak,nja->njk", Jinv, dRp)
        index = (iu[:, None] * self.kv_v.n + iv[None, :]).ravel()
        return PatchBasis(index=index, R=R, dR=dR, x=x, J=J, detJ=detJ)

    # -- edges --------------------------------------------------------------
    def edge_curve(self, edge: str) -> NurbsCurve:
        """Boundary curve; ``u0``/``u1`` run along ``v``, ``v0``/``v1`` along ``u``."""
        if edge == "v0":
            return NurbsCurve(self.kv_u, self.control_net[:, 0], self.weights[:, 0])
        if edge == "v1":
            return NurbsCurve(self.kv_u, self.control_net[:, -1], self.weights[:, -1])
        if edge == "u0":
            return NurbsCurve(self.kv_v, self.control_net[0, :], self.weights[0, :])
        if edge == "u1":
            return NurbsCurve(self.kv_v, self.control_net[-1, :], self.weights[-1, :])
        raise ValueError(f"unknown edge {edge!r}")

    def edge_indices(self, edge: str) -> np.ndarray:
        """Basis numbers of the functions that do not vanish on an edge."""
        nu, nv = self.shape
        if edge == "v0":
            return np.arange(nu) * nv
        if edge == "v1":
            return np.arange(nu) * nv + nv - 1
        if edge == "u0":
            return np.arange(nv)
        if edge == "u1":
            return (nu - 1) * nv + np.arange(nv)
        raise ValueError(f"unknown edge {edge!r}")

    def edge_param(self, edge: str, t) -> np.ndarray:
        """Map an edge-curve parameter to the patch parameter."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        (u0, u1), (v0, v1) = self.domain
        fixed = {"v0": v0, "v1": v1, "u0": u0, "u1": u1}[edge]
        if edge[0] == "v":
            return np.column_stack([t, np.full_like(t, fixed)])
        return np.column_stack([np.full_like(t, fixed), t])

    def edge_knots(self, edge: str) -> KnotVector:
        return self.kv_u if edge[0] == "v" else self.kv_v

    # -- modification -------------------------------------------------------
    def refined(self, new_u=(), new_v=()) -> "NurbsPatch":
        Pw = np.concatenate([self.control_net * self.weights[..., None], self.weights[..., None]], axis=-1)
        ku, Pw = _refine_homogeneous(self.kv_u, Pw, new_u)
        kv, Pw2 = _refine_homogeneous(self.kv_v, np.swapaxes(Pw, 0, 1), new_v)
        Pw = np.swapaxes(Pw2, 0, 1)
        w = Pw[..., 2]
        return NurbsPatch(ku, kv, Pw[..., :2] / w[..., None], w)

    def dyadic_refined(self, times: int = 1, directions=(True, True)) -> "NurbsPatch":
        nu = self.kv_u.dyadic_refinement(times) if directions[0] else ()
        nv = self.kv_v.dyadic_refinement(times) if directions[1] else ()
        return self.refined(nu, nv)

    def elevate_linear_v(self, degree: int) -> "NurbsPatch":
        """Raise a single-span degree-1 ``v`` direction to ``degree`` exactly."""
        if self.kv_v.degree != 1 or self.kv_v.n != 2:
            raise ValueError("only single-span linear directions can be elevated here")
        if degree == 1:
            return self
        v0, v1 = self.kv_v.domain
        t = np.linspace(0.0, 1.0, degree + 1)
        w0, w1 = self.weights[:, 0], self.weights[:, 1]
        H0 = self.control_net[:, 0] * w0[:, None]
        H1 = self.control_net[:, 1] * w1[:, None]
        w = (1 - t)[None, :] * w0[:, None] + t[None, :] * w1[:, None]
        H = (1 - t)[None, :, None] * H0[:, None] + t[None, :, None] * H1[:, None]
        P = H / w[..., None]
        P[:, 0] = self.control_net[:, 0]
        P[:, -1] = self.control_net[:, 1]
        kv = KnotVector([v0] * (degree + 1) + [v1] * (degree + 1), degree)
        return NurbsPatch(self.kv_u, kv, P, w)

    def to_dict(self) -> dict:
        return {
            "type": "patch",
            "degrees": list(self.degrees),
            "knots": [self.kv_u.knots.tolist(), self.kv_v.knots.tolist()],
            "control_points": self.control_net.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NurbsPatch":
        pu, pv = d["degrees"]
        return cls(KnotVector(d["knots"][0], pu), KnotVector(d["knots"][1], pv),
                   d["control_points"], d.get("weights"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "NurbsPatch":
        return cls.from_dict(json.loads(s))

    def __repr__(self):
        return f"NurbsPatch(degrees={self.degrees}, shape={self.shape})"


def refine_knots(geometry, new_knots):
    """Insert knots; for patches pass ``(new_u, new_v)``."""
    if isinstance(geometry, NurbsCurve):
        Pw = np.column_stack([geometry.control_points * geometry.weights[:, None], geometry.weights])
        kv, Qw = _refine_homogeneous(geometry.kv, Pw, new_knots)
        return NurbsCurve(kv, Qw[:, :2] / Qw[:, 2:], Qw[:, 2])
    if isinstance(geometry, NurbsPatch):
        new_u, new_v = new_knots
        return geometry.refined(new_u, new_v)
    raise TypeError("expected a NurbsCurve or NurbsPatch")


def refine_to(curve: NurbsCurve, kv: KnotVector) -> NurbsCurve:
    """Refine ``curve`` so that its knot vector equals ``kv`` (a superset)."""
    return refine_knots(curve, _missing_knots(curve.kv, kv))


# ---------------------------------------------------------------------------
# point inversion
# ---------------------------------------------------------------------------

def invert_point(geometry, x, seed=None, tol: float = 1e-10, max_iter: int = 30,
                 residual_tol: float | None = None, samples: int = 33):
    """Closest-point parameter by Newton iteration on the squared distance.

    Returns ``(parameter, distance)``.  Raises :class:`InversionError` when
    the iteration does not reach first-order optimality, or when
    ``residual_tol`` is given and the final distance exceeds it.
    """
    x = np.asarray(x, dtype=float)
    if isinstance(geometry, NurbsCurve):
        return _invert_curve(geometry, x, seed, tol, max_iter, residual_tol, samples)
    if isinstance(geometry, NurbsPatch):
        return _invert_patch(geometry, x, seed, tol, max_iter, residual_tol, samples)
    raise TypeError("expected a NurbsCurve or NurbsPatch")


def _invert_curve(c: NurbsCurve, x, seed, tol, max_iter, residual_tol, samples):
    best = _invert_curve_once(c, x, seed, tol, max_iter, None, samples)
    a, b = c.domain
    if c.is_closed and best[0] in (a, b):
        # a closed curve has no ends: retry from the other side of the seam
        other = _invert_curve_once(c, x, b if best[0] == a else a, tol, max_iter, None, samples)
        if other[1] < best[1] - 1e-14:
            best = other
    if residual_tol is not None and best[1] > residual_tol:
        raise InversionError(f"closest distance {best[1]:.3e} exceeds tolerance", best)
    return best


def _invert_curve_once(c: NurbsCurve, x, seed, tol, max_iter, residual_tol, samples):
    a, b = c.domain
    if seed is None:
        s = np.linspace(a, b, max(samples, 4 * c.kv.num_elements + 1))
        d = np.linalg.norm(c.evaluate(s) - x, axis=1)
        t = float(s[np.argmin(d)])
    else:
        t = float(np.clip(seed, a, b))
    best = (t, float(np.linalg.norm(c.evaluate(t) - x)))
    converged = False
    for _ in range(max_iter):
        D = c.derivatives([t], 2)[0]
        r = D[0] - x
        dist = float(np.linalg.norm(r))
        if dist < best[1]:
            best = (t, dist)
        g = float(D[1] @ r)
        h = float(D[2] @ r + D[1] @ D[1])
        speed = float(np.linalg.norm(D[1]))
        if dist <= tol or abs(g) <= tol * max(speed, 1e-300):
            converged = True
            break
        step = -g / h if h > 0 else -g / max(speed ** 2, 1e-300)
        tn = min(max(t + step, a), b)
        if abs(tn - t) <= 1e-15 * max(1.0, b - a):
            converged = True  # stuck at a domain end: constrained optimum
            t = tn
            break
        t = tn
    dist = float(np.linalg.norm(c.evaluate(t) - x))
    if dist < best[1]:
        best = (t, dist)
    if not converged:
        raise InversionError("curve inversion did not converge", best)
    if residual_tol is not None and best[1] > residual_tol:
        raise InversionError(f"closest distance {best[1]:.3e} exceeds tolerance", best)
    return best


def _invert_patch(S: NurbsPatch, x, seed, tol, max_iter, residual_tol, samples):
    (u0, u1), (v0, v1) = S.domain
    lo = np.array([u0, v0])
    hi = np.array([u1, v1])
    if seed is None:
        gu = np.linspace(u0, u1, samples)
        gv = np.linspace(v0, v1, samples)
        G = np.stack(np.meshgrid(gu, gv, indexing="ij"), axis=-1).reshape(-1, 2)
        d = np.linalg.norm(S.evaluate(G) - x, axis=1)
        t = G[np.argmin(d)].copy()
    else:
        t = np.clip(np.asarray(seed, dtype=float), lo, hi)
    best = (t.copy(), float(np.linalg.norm(S.evaluate(t) - x)))
    converged = False
    for _ in range(max_iter):
        F, J, H = S.eval_patch(t[None], second=True)
        r = F[0] - x
        J = J[0]
        dist = float(np.linalg.norm(r))
        if dist < best[1]:
            best = (t.copy(), dist)
        g = J.T @ r
        scale = max(float(np.linalg.norm(J)), 1e-300)
        # projected gradient: ignore components pushing against an active bound
        free = ~(((t <= lo) & (g > 0)) | ((t >= hi) & (g < 0)))
        if dist <= tol or np.all(np.abs(g[free]) <= tol * scale):
            converged = True
            break
        Hm = J.T @ J + np.einsum("i,iab->ab", r, H[0])
        try:
            step = -np.linalg.solve(Hm, g)
            if g @ step >= 0:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = -np.linalg.solve(J.T @ J + 1e-12 * scale ** 2 * np.eye(2), g)
        tn = np.clip(t + step, lo, hi)
        if np.all(np.abs(tn - t) <= 1e-15 * np.maximum(1.0, hi - lo)):
            converged = True
            t = tn
            break
        t = tn
    dist = float(np.linalg.norm(S.evaluate(t) - x))
    if dist < best[1]:
        best = (t.copy(), dist)
    if not converged:
        raise InversionError("patch inversion did not converge", best)
    if residual_tol is not None and best[1] > residual_tol:
        raise InversionError(f"closest distance {best[1]:.3e} exceeds tolerance", best)
    return best


def invert_points_on_patch(S: NurbsPatch, X, seeds=None, tol: float = 1e-13, max_iter: int = 30,
                           samples: int = 33):
    """Parameters of many points lying on a bijective patch.

    Batched Newton on ``F(uv) = x`` from grid (or given) seeds; points that
    do not converge are handed to :func:`invert_point`.  Returns
    ``(uv, dist)``.
    """
    X = np.atleast_2d(np.asarray(X, float))
    (u0, u1), (v0, v1) = S.domain
    lo, hi = np.array([u0, v0]), np.array([u1, v1])
    if seeds is None:
        gu, gv = np.linspace(u0, u1, samples), np.linspace(v0, v1, samples)
        G = np.stack(np.meshgrid(gu, gv, indexing="ij"), axis=-1).reshape(-1, 2)
        FG = S.evaluate(G)
        t = np.empty_like(X)
        for i in range(0, len(X), 512):
            d = np.sum((X[i:i + 512, None, :] - FG[None]) ** 2, axis=2)
            t[i:i + 512] = G[np.argmin(d, axis=1)]
    else:
        t = np.clip(np.asarray(seeds, float).reshape(X.shape), lo, hi)
    scale = max(1.0, float(np.abs(X).max()))
    todo = np.arange(len(X))
    dist = np.full(len(X), np.inf)
    for _ in range(max_iter):
        F, J = S.eval_patch(t[todo])
        r = F - X[todo]
        dist[todo] = np.linalg.norm(r, axis=1)
        done = dist[todo] <= tol * scale
        todo, r, J = todo[~done], r[~done], J[~done]
        if todo.size == 0:
            break
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        ok = np.abs(det) > 1e-300
        det = np.where(ok, det, 1.0)
        du = (J[:, 1, 1] * r[:, 0] - J[:, 0, 1] * r[:, 1]) / det
        dv = (-J[:, 1, 0] * r[:, 0] + J[:, 0, 0] * r[:, 1]) / det
        step = np.where(ok[:, None], np.column_stack([du, dv]), 0.0)
        t[todo] = np.clip(t[todo] - step, lo, hi)
    if todo.size:
        F = S.evaluate(t[todo])
        dist[todo] = np.linalg.norm(F - X[todo], axis=1)
        for i in todo[dist[todo] > tol * scale]:
            t[i], dist[i] = invert_point(S, X[i], seed=t[i], tol=tol)
    return t, dist


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------

def line_segment(a, b, degree: int = 1) -> NurbsCurve:
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    t = np.linspace(0, 1, degree + 1)[:, None]
    kv = KnotVector([0.0] * (degree + 1) + [1.0] * (degree + 1), degree)
    return NurbsCurve(kv, (1 - t) * a + t * b)


def arc(center, radius: float, theta0: float, theta1: float) -> NurbsCurve:
    """Quadratic NURBS circular arc, one rational segment per <= 90 degrees.

    Segments are joined with double knots; the parameter runs over [0, 1].
    Counter-clockwise when ``theta1 > theta0``.
    """
    c = np.asarray(center, float)
    sweep = theta1 - theta0
    nseg = max(1, int(math.ceil(abs(sweep) / (0.5 * math.pi) - 1e-12)))
    dth = sweep / nseg
    pts = []
    wts = []
    wm = math.cos(0.5 * dth)
    for k in range(nseg):
        a0 = theta0 + k * dth
        a1 = a0 + dth
        am = 0.5 * (a0 + a1)
        p0 = c + radius * np.array([math.cos(a0), math.sin(a0)])
        pm = c + radius / wm * np.array([math.cos(am), math.sin(am)])
        if k == 0:
            pts.append(p0)
            wts.append(1.0)
        pts.append(pm)
        wts.append(wm)
        pts.append(c + radius * np.array([math.cos(a1), math.sin(a1)]))
        wts.append(1.0)
    inner = []
    for k in range(1, nseg):
        inner += [k / nseg] * 2
    kv = KnotVector([0.0] * 3 + inner + [1.0] * 3, 2)
    return NurbsCurve(kv, pts, wts)


def circle(center=(0.0, 0.0), radius: float = 1.0, start: float = 0.0, ccw: bool = True) -> NurbsCurve:
    """Full circle as four quadratic rational arcs (exact)."""
    cur = arc(center, radius, start, start + 2 * math.pi)
    # snap the closing point so the loop is exactly closed
    P = cur.control_points.copy()
    P[-1] = P[0]
    cur = NurbsCurve(cur.kv, P, cur.weights)
    return cur if ccw else cur.reversed()


def rectangle_patch(x0: float, x1: float, y0: float, y1: float, nx: int, ny: int,
                    degree: int = 2, knots_x=None, knots_y=None) -> NurbsPatch:
    """Affine B-spline patch whose parameters equal physical coordinates.

    Control points sit at the Greville abscissae so that ``F`` is the
    identity map on ``[x0,x1] x [y0,y1]``.  Custom breakpoints may be given
    through ``knots_x`` / ``knots_y`` (strictly increasing, including ends).
    """
    def kvec(a, b, n, br):
        if br is None:
            return uniform_knots(n, degree, a, b)
        br = np.asarray(br, float)
        return KnotVector(np.concatenate([[br[0]] * degree, br, [br[-1]] * degree]), degree)

    ku = kvec(x0, x1, nx, knots_x)
    kv = kvec(y0, y1, ny, knots_y)
    gu = greville_abscissae(ku)
    gv = greville_abscissae(kv)
    net = np.stack(np.meshgrid(gu, gv, indexing="ij"), axis=-1)
    return NurbsPatch(ku, kv, net)


def annulus_patch(center, r_inner: float, r_outer: float, theta0: float = 0.0,
                  theta1: float = 2 * math.pi, radial_degree: int = 2) -> NurbsPatch:
    """Annular sector; ``u`` runs along the arc, ``v`` from outer to inner."""
    outer = arc(center, r_outer, theta0, theta1)
    inner = arc(center, r_inner, theta0, theta1)
    if abs(theta1 - theta0 - 2 * math.pi) < 1e-14:
        Po = outer.control_points.copy()
        Po[-1] = Po[0]
        Pi = inner.control_points.copy()
        Pi[-1] = Pi[0]
    else:
        Po, Pi = outer.control_points, inner.control_points
    net = np.stack([Po, Pi], axis=1)
    w = np.stack([outer.weights, inner.weights], axis=1)
    patch = NurbsPatch(outer.kv, KnotVector([0, 0, 1, 1], 1), net, w)
    return patch.elevate_linear_v(radial_degree)


def closed_quadratic(points) -> NurbsCurve:
    """Closed C^1 quadratic B-spline with the periodic control polygon ``points``.

    The periodic uniform spline is written in clamped form: the seam sits at
    the midpoint of the last and first polygon vertices.
    """
    P = np.asarray(points, float)
    m = len(P)
    if m < 3:
        raise ValueError("need at least three control points")
    mid = 0.5 * (P[-1] + P[0])
    Q = np.vstack([mid, P, mid])
    knots = np.concatenate([[0, 0], np.arange(m + 1), [m, m]]).astype(float) / m
    return NurbsCurve(KnotVector(knots, 2), Q)
