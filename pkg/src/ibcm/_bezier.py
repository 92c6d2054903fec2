"""Small Bézier toolkit used by the cut-cell machinery (control arrays (p+1, 2))."""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import comb

from .errors import FitError


@lru_cache(maxsize=None)
def _binom(p: int) -> np.ndarray:
    return comb(p, np.arange(p + 1))


def bernstein(p: int, t) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, float))[:, None]
    k = np.arange(p + 1)[None, :]
    return _binom(p)[None, :] * t**k * (1.0 - t) ** (p - k)


def bez_eval(ctrl: np.ndarray, t) -> np.ndarray:
    return bernstein(len(ctrl) - 1, t) @ ctrl


def bez_deriv(ctrl: np.ndarray) -> np.ndarray:
    p = len(ctrl) - 1
    if p == 0:
        return np.zeros((1, ctrl.shape[1]))
    return p * np.diff(ctrl, axis=0)


def bez_tangent(ctrl: np.ndarray, t) -> np.ndarray:
    return bez_eval(bez_deriv(ctrl), t)


def product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Bernstein coefficients of the product of two scalar Bezier polynomials."""
    m, n = len(a) - 1, len(b) - 1
    out = np.zeros(m + n + 1)
    ca, cb = _binom(m), _binom(n)
    for i in range(m + 1):
        out[i:i + n + 1] += ca[i] * cb * a[i] * b
    return out / _binom(m + n)


def nonnegative(coef: np.ndarray, tol: float = 0.0, depth: int = 12) -> bool:
    """Whether a scalar Bezier polynomial stays >= -tol on [0, 1] (subdivision test).

    Undecided intervals at the depth limit count as negative.
    """
    stack = [(np.asarray(coef, float)[:, None], 0)]
    while stack:
        c, d = stack.pop()
        if np.all(c >= -tol):
            continue
        if c[0, 0] < -tol or c[-1, 0] < -tol or d >= depth:
            return False
        left, right = split(c, 0.5)
        stack += [(left, d + 1), (right, d + 1)]
    return True


def split(ctrl: np.ndarray, t: float):
    """De Casteljau split at ``t``; returns (left, right)."""
    pts = np.array(ctrl, float)
    n = len(pts)
    left = [pts[0].copy()]
    right = [pts[-1].copy()]
    for _ in range(1, n):
        pts = (1.0 - t) * pts[:-1] + t * pts[1:]
        left.append(pts[0].copy())
        right.append(pts[-1].copy())
    return np.array(left), np.array(right[::-1])


def subsegment(ctrl: np.ndarray, t0: float, t1: float) -> np.ndarray:
    if t1 < 1.0:
        ctrl = split(ctrl, t1)[0]
    if t0 > 0.0:
        ctrl = split(ctrl, t0 / t1)[1]
    return ctrl


def elevate_line(a, b, p: int) -> np.ndarray:
    s = np.linspace(0.0, 1.0, p + 1)[:, None]
    return (1.0 - s) * np.asarray(a, float) + s * np.asarray(b, float)


def elevate(ctrl: np.ndarray, p: int) -> np.ndarray:
    """Degree elevation to ``p``."""
    ctrl = np.asarray(ctrl, float)
    while len(ctrl) - 1 < p:
        n = len(ctrl)
        new = np.empty((n + 1, ctrl.shape[1]))
        new[0], new[-1] = ctrl[0], ctrl[-1]
        for i in range(1, n):
            a = i / n
            new[i] = a * ctrl[i - 1] + (1 - a) * ctrl[i]
        ctrl = new
    return ctrl


@lru_cache(maxsize=None)
def _bern_to_power(p: int) -> np.ndarray:
    # M[j, k]: coefficient of t^j in B_k
    M = np.zeros((p + 1, p + 1))
    for k in range(p + 1):
        for j in range(k, p + 1):
            M[j, k] = comb(p, k) * comb(p - k, j - k) * (-1) ** (j - k)
    return M


def roots_1d(coef: np.ndarray, lo: float = 0.0, hi: float = 1.0, tol: float = 1e-9) -> np.ndarray:
    """Real roots in [lo, hi] of a scalar Bézier function with Bernstein ``coef``."""
    coef = np.asarray(coef, float)
    scale = np.abs(coef).max()
    if scale == 0.0:
        return np.array([])
    if np.all(coef > 0) or np.all(coef < 0):
        return np.array([])
    p = len(coef) - 1
    pw = _bern_to_power(p) @ coef
    pw = np.where(np.abs(pw) < 1e-15 * scale, 0.0, pw)
    nz = np.nonzero(pw)[0]
    if nz.size == 0:
        return np.array([])
    pw = pw[: nz[-1] + 1]
    if len(pw) == 1:
        return np.array([])
    r = np.roots(pw[::-1])
    r = r[np.abs(r.imag) < 1e-6].real
    dcoef = p * np.diff(coef)
    out = []
    for t in r:
        if t < lo - 1e-6 or t > hi + 1e-6:
            continue
        for _ in range(8):
            f = float((bernstein(p, t) @ coef)[0])
            d = float((bernstein(p - 1, t) @ dcoef)[0]) if p > 0 else 0.0
            if d == 0.0:
                break
            step = f / d
            t -= step
            if abs(step) < 1e-16:
                break
        if lo - tol <= t <= hi + tol and abs(float((bernstein(p, t) @ coef)[0])) <= 1e-9 * scale:
            out.append(min(max(t, lo), hi))
    out = np.sort(np.array(out))
    if out.size > 1:
        out = out[np.concatenate([[True], np.diff(out) > 1e-12])]
    return out


def closest_param(ctrl: np.ndarray, x, samples: int = 65) -> float:
    t = np.linspace(0, 1, samples)
    d = np.linalg.norm(bez_eval(ctrl, t) - x, axis=1)
    s = float(t[np.argmin(d)])
    dc = bez_deriv(ctrl)
    ddc = bez_deriv(dc)
    for _ in range(20):
        c = bez_eval(ctrl, s)[0] - x
        c1 = bez_eval(dc, s)[0]
        c2 = bez_eval(ddc, s)[0] if len(dc) > 1 else np.zeros(2)
        g = c @ c1
        h = c1 @ c1 + c @ c2
        if h <= 0:
            break
        step = g / h
        s = min(max(s - step, 0.0), 1.0)
        if abs(step) < 1e-15:
            break
    return s


def bbox(ctrl: np.ndarray):
    """Bounding box of the control polygon (contains the curve)."""
    return ctrl.min(axis=0), ctrl.max(axis=0)


def tight_bbox(ctrl: np.ndarray):
    """Exact curve bounding box from endpoint and derivative-root extrema."""
    pts = [ctrl[0], ctrl[-1]]
    d = bez_deriv(ctrl)
    for k in range(2):
        for t in roots_1d(d[:, k]):
            pts.append(bez_eval(ctrl, t)[0])
    pts = np.array(pts)
    return pts.min(axis=0), pts.max(axis=0)


def green_area(ctrl: np.ndarray) -> float:
    """Contribution of one edge to 0.5 * closed-integral of (x dy - y dx)."""
    p = len(ctrl) - 1
    x, w = np.polynomial.legendre.leggauss(max(p, 1) + 1)
    t = 0.5 * (x + 1.0)
    c = bez_eval(ctrl, t)
    dc = bez_eval(bez_deriv(ctrl), t)
    return float(0.25 * np.sum(w * (c[:, 0] * dc[:, 1] - c[:, 1] * dc[:, 0])))


def fit_bezier(points: np.ndarray, params: np.ndarray, p: int, p0=None, p1=None):
    """Least-squares Bézier of degree ``p`` with interpolated endpoints.

    Returns ``(ctrl, max_residual)``.  ``params`` lie in [0, 1].
    """
    points = np.asarray(points, float)
    a = points[0] if p0 is None else np.asarray(p0, float)
    b = points[-1] if p1 is None else np.asarray(p1, float)
    ctrl = np.empty((p + 1, 2))
    ctrl[0], ctrl[-1] = a, b
    B = bernstein(p, params)
    if p >= 2:
        rhs = points - np.outer(B[:, 0], a) - np.outer(B[:, -1], b)
        M = B[:, 1:-1]
        inner, _, rank, sv = np.linalg.lstsq(M, rhs, rcond=None)
        if rank < p - 1 or sv[-1] < 1e-12 * sv[0]:
            raise FitError("degenerate piece: rank-deficient least-squares system")
        ctrl[1:-1] = inner
    res = float(np.max(np.linalg.norm(B @ ctrl - points, axis=1)))
    return ctrl, res
