"""Weak forms, Nitsche interface terms, boundary data, solve and error norms."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import brentq

from .coupling import OUTWARD_SIGN, UnionModel
from .errors import InversionError, SolverError, SpecError, UnsupportedConfigurationError
from .quadrature import build_interface_quadrature, gauss_rule, tensor_rule
from .splines import NurbsCurve, NurbsPatch, basis_funs, invert_point

log = logging.getLogger(__name__)

KINDS = ("poisson", "elasticity", "advection_diffusion")


@dataclass(frozen=True)
class Material:
    """Isotropic material under plane strain."""

    E: float
    nu: float

    def __post_init__(self):
        if not self.E > 0 or not -1.0 < self.nu < 0.5:
            raise SpecError(f"invalid material E={self.E}, nu={self.nu}")

    @property
    def lam(self) -> float:
        return self.E * self.nu / ((1 + self.nu) * (1 - 2 * self.nu))

    @property
    def mu(self) -> float:
        return self.E / (2 * (1 + self.nu))

    def D(self) -> np.ndarray:
        l, m = self.lam, self.mu
        return np.array([[l + 2 * m, l, 0.0], [l, l + 2 * m, 0.0], [0.0, 0.0, m]])


@dataclass
class BoundaryPiece:
    """Part of the boundary: an untrimmed patch edge or a curve inside a trimmed patch.

    A curve must be oriented with the domain on its left.  ``g`` receives
    ``(x, n)`` for Neumann data and ``x`` for Dirichlet data.
    ``components`` restricts vector Dirichlet data to some directions.
    """

    patch: int
    edge: str | None = None
    curve: NurbsCurve | None = None
    g: Callable | float | None = None
    components: tuple | None = None


@dataclass
class ProblemSpec:
    kind: str
    f: Callable | float | None = 0.0
    dirichlet: list = field(default_factory=list)  # strong
    neumann: list = field(default_factory=list)
    weak_dirichlet: list = field(default_factory=list)  # penalty, poisson / advection-diffusion
    eps: float = 1.0
    velocity: tuple = (0.0, 0.0)
    beta: float | None = None  # overrides 6 p_max^2
    boundary_h: str = "local"  # element size in weak boundary penalties: "local" or "patch"
    order_extra: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown problem kind {self.kind!r}")
        if self.f is None:
            raise SpecError("a source term is required (use 0.0 for none)")
        if self.boundary_h not in ("local", "patch"):
            raise SpecError("boundary_h must be 'local' or 'patch'")


@dataclass
class LinearSystem:
    A: sp.csr_matrix
    b: np.ndarray
    model: UnionModel
    ncomp: int
    fixed: np.ndarray  # constrained global unknowns
    values: np.ndarray  # their values

    @property
    def symmetric_defect(self) -> float:
        d = abs(self.A - self.A.T).max()
        return float(d / max(abs(self.A).max(), 1e-300))


# ---------------------------------------------------------------------------
# small helpers
# ---------------------------------------------------------------------------

def _call(g, *args, n: int, shape):
    if callable(g):
        out = np.asarray(g(*args), float)
    else:
        out = np.asarray(0.0 if g is None else g, float)
    return np.broadcast_to(out, (n,) + shape).astype(float)


def _element_of(patch: NurbsPatch, uv: np.ndarray):
    m = uv.mean(axis=0)
    out = []
    for kv, x in ((patch.kv_u, m[0]), (patch.kv_v, m[1])):
        br = kv.breaks
        i = int(np.clip(np.searchsorted(br, x, side="right") - 1, 0, len(br) - 2))
        out.append((float(br[i]), float(br[i + 1])))
    return tuple(out)


def _region_points(region, box, rule):
    if hasattr(region, "quadrature"):
        return region.quadrature(rule)
    return tensor_rule(rule, box)


def _basis_batch(P: NurbsPatch, boxes, rule):
    """Basis data for many full elements at once.

    Returns ``(index (E, nloc), R (E, q, nloc), dR (E, q, nloc, 2), x (E, q, 2), wdet (E, q))``.
    """
    boxes = np.asarray(boxes, float)  # (E, 2, 2)
    E = len(boxes)
    r = rule.points
    w1 = rule.weights
    su = P.kv_u.find_span(boxes[:, 0].mean(axis=1))
    sv = P.kv_v.find_span(boxes[:, 1].mean(axis=1))
    hu = 0.5 * (boxes[:, 0, 1] - boxes[:, 0, 0])
    hv = 0.5 * (boxes[:, 1, 1] - boxes[:, 1, 0])
    u = boxes[:, 0].mean(axis=1)[:, None] + hu[:, None] * r[None, :]  # (E, nq)
    v = boxes[:, 1].mean(axis=1)[:, None] + hv[:, None] * r[None, :]
    nq = len(r)
    p, q = P.degrees
    fu, Nu = basis_funs(P.kv_u, u.ravel(), 1, spans=np.repeat(su, nq))
    fv, Nv = basis_funs(P.kv_v, v.ravel(), 1, spans=np.repeat(sv, nq))
    Nu = Nu.reshape(E, nq, 2, p + 1)
    Nv = Nv.reshape(E, nq, 2, q + 1)
    # tensor points: (E, nq_u, nq_v)
    B = np.einsum("eia,ejb->eijab", Nu[:, :, 0], Nv[:, :, 0]).reshape(E, nq * nq, -1)
    Bu = np.einsum("eia,ejb->eijab", Nu[:, :, 1], Nv[:, :, 0]).reshape(E, nq * nq, -1)
    Bv = np.einsum("eia,ejb->eijab", Nu[:, :, 0], Nv[:, :, 1]).reshape(E, nq * nq, -1)
    iu = (su - p)[:, None] + np.arange(p + 1)[None, :]
    iv = (sv - q)[:, None] + np.arange(q + 1)[None, :]
    index = (iu[:, :, None] * P.kv_v.n + iv[:, None, :]).reshape(E, -1)
    w = P.weights.ravel()[index]  # (E, nloc)
    X = P.control_net.reshape(-1, 2)[index]  # (E, nloc, 2)
    Bw = B * w[:, None, :]
    W = Bw.sum(axis=2)
    Wu = (Bu * w[:, None, :]).sum(axis=2)
    Wv = (Bv * w[:, None, :]).sum(axis=2)
    R = Bw / W[..., None]
    Ru = (Bu * w[:, None, :] - R * Wu[..., None]) / W[..., None]
    Rv = (Bv * w[:, None, :] - R * Wv[..., None]) / W[..., None]
    dRp = np.stack([Ru, Rv], axis=-1)  # (E, Q, nloc, 2)
    x = np.einsum("eqk,ekd->eqd", R, X)
    J = np.einsum("eqka,ekd->eqda", dRp, X)
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    Jinv = np.empty_like(J)
    Jinv[..., 0, 0] = J[..., 1, 1] / det
    Jinv[..., 1, 1] = J[..., 0, 0] / det
    Jinv[..., 0, 1] = -J[..., 0, 1] / det
    Jinv[..., 1, 0] = -J[..., 1, 0] / det
    dR = np.einsum("eqak,eqja->eqjk", Jinv, dRp)
    wq = (w1[:, None] * w1[None, :]).ravel()
    wdet = wq[None, :] * (hu * hv)[:, None] * det
    return index, R, dR, x, wdet


def _vec_dofs(g: np.ndarray, ncomp: int) -> np.ndarray:
    """Interleaved vector numbering ``ncomp * g + c`` (component fastest)."""
    return (ncomp * g[:, None] + np.arange(ncomp)[None, :]).ravel()


def _strain_matrix(dR: np.ndarray) -> np.ndarray:
    """Voigt strain (xx, yy, 2xy) of interleaved vector basis: (N, 3, 2*nloc)."""
    N, n, _ = dR.shape
    B = np.zeros((N, 3, 2 * n))
    B[:, 0, 0::2] = dR[:, :, 0]
    B[:, 1, 1::2] = dR[:, :, 1]
    B[:, 2, 0::2] = dR[:, :, 1]
    B[:, 2, 1::2] = dR[:, :, 0]
    return B


def _vec_values(R: np.ndarray) -> np.ndarray:
    """(N, 2, 2*nloc) values of interleaved vector basis."""
    N, n = R.shape
    V = np.zeros((N, 2, 2 * n))
    V[:, 0, 0::2] = R
    V[:, 1, 1::2] = R
    return V


def _traction_matrix(S: np.ndarray, nrm: np.ndarray) -> np.ndarray:
    """Traction sigma.n from Voigt stresses S (N, 3, m): (N, 2, m)."""
    T = np.empty((S.shape[0], 2, S.shape[2]))
    T[:, 0] = S[:, 0] * nrm[:, 0, None] + S[:, 2] * nrm[:, 1, None]
    T[:, 1] = S[:, 2] * nrm[:, 0, None] + S[:, 1] * nrm[:, 1, None]
    return T


class _Triplets:
    def __init__(self):
        self.r, self.c, self.v = [], [], []

    def add(self, rows, cols, M):
        keep_r = rows >= 0
        keep_c = cols >= 0
        if not keep_r.all() or not keep_c.all():
            M = M[np.ix_(keep_r, keep_c)]
            rows, cols = rows[keep_r], cols[keep_c]
        self.r.append(np.repeat(rows, len(cols)))
        self.c.append(np.tile(cols, len(rows)))
        self.v.append(M.ravel())

    def add_batch(self, rows, K):
        """Element matrices ``K (E, m, m)`` with row/column indices ``rows (E, m)``."""
        m = rows.shape[1]
        r = np.repeat(rows, m, axis=1).ravel()
        c = np.tile(rows, (1, m)).ravel()
        keep = (r >= 0) & (c >= 0)
        self.r.append(r[keep])
        self.c.append(c[keep])
        self.v.append(K.ravel()[keep])

    def matrix(self, n: int) -> sp.csr_matrix:
        if not self.r:
            return sp.csr_matrix((n, n))
        A = sp.coo_matrix((np.concatenate(self.v), (np.concatenate(self.r), np.concatenate(self.c))),
                          shape=(n, n))
        return A.tocsr()


def _add_vec(b: np.ndarray, rows: np.ndarray, vals: np.ndarray):
    keep = rows >= 0
    np.add.at(b, rows[keep], vals[keep])


def _pmax(model: UnionModel, *ks) -> int:
    return max(max(model.entries[k].patch.degrees) for k in ks)


def _material(model: UnionModel, k: int) -> Material:
    m = model.entries[k].material
    if not isinstance(m, Material):
        raise SpecError(f"patch {k} has no material")
    return m


# ---------------------------------------------------------------------------
# boundary quadrature
# ---------------------------------------------------------------------------

@dataclass
class BoundaryPoints:
    box: tuple
    uv: np.ndarray
    x: np.ndarray
    w: np.ndarray
    n: np.ndarray


def _sign_breaks(curve: NurbsCurve, sign: float, a: np.ndarray, per_span: int = 8) -> list[float]:
    """Curve parameters where a.n changes sign (bisection)."""
    def an(t):
        d = curve.derivatives(np.atleast_1d(t), 1)[:, 1]
        return float(sign * (a[0] * d[0, 1] - a[1] * d[0, 0]))

    out = []
    for t0, t1 in curve.kv.elements():
        s = np.linspace(t0, t1, per_span + 1)
        f = [an(t) for t in s]
        for i in range(per_span):
            if f[i] * f[i + 1] < 0:
                out.append(brentq(an, s[i], s[i + 1], xtol=1e-14))
    return out


def boundary_points(model: UnionModel, piece: BoundaryPiece, order: int,
                    velocity=None) -> list[BoundaryPoints]:
    """Quadrature on a boundary piece grouped by owning patch element.

    Segments are split where ``velocity . n`` changes sign when a velocity
    is given.  Points of partly trimmed edges that fall outside the active
    region are dropped.
    """
    E = model.entries[piece.patch]
    P = E.patch
    if piece.edge is not None:
        curve, sign = P.edge_curve(piece.edge), OUTWARD_SIGN[piece.edge]
        bottom = None
    elif piece.curve is not None:
        curve, sign, bottom = piece.curve, 1.0, P
    else:
        raise SpecError("boundary piece needs an edge or a curve")
    extra = _sign_breaks(curve, sign, np.asarray(velocity, float)) if velocity is not None \
        and np.any(velocity) else ()
    mesh = build_interface_quadrature(curve, bottom, order=order, normal_sign=sign, extra_breaks=extra)
    out = []
    for seg in mesh.segments:
        uv = P.edge_param(piece.edge, seg.t) if piece.edge is not None else seg.bottom_uv
        x, w, nrm = seg.x, seg.weights, seg.normal
        if E.trimmed and piece.edge is not None:
            keep = E.domain.is_active(uv)
            if not keep.any():
                continue
            uv, x, w, nrm = uv[keep], x[keep], w[keep], nrm[keep]
        out.append(BoundaryPoints(_element_of(P, uv), uv, x, w, nrm))
    return out


# ---------------------------------------------------------------------------
# strong Dirichlet data
# ---------------------------------------------------------------------------

def project_dirichlet(patch: NurbsPatch, edge: str, g, order: int | None = None) -> np.ndarray:
    """L2 projection of ``g(x)`` onto the spline trace space of an edge.

    Returns coefficients ``(n_edge, m)`` ordered like ``patch.edge_indices(edge)``.
    """
    curve = patch.edge_curve(edge)
    kv, w = curve.kv, curve.weights
    p = kv.degree
    rule = gauss_rule(order if order is not None else p + 3)
    n = kv.n
    M = np.zeros((n, n))
    rhs = None
    for a, b in kv.elements():
        t, wt = rule.on_interval(a, b)
        first, N = basis_funs(kv, t, 0)
        idx = first[0] + np.arange(p + 1)
        Nw = N[:, 0] * w[idx]
        R = Nw / Nw.sum(axis=1, keepdims=True)
        D = curve.derivatives(t, 1)
        ds = wt * np.linalg.norm(D[:, 1], axis=1)
        gv = np.asarray(g(D[:, 0]) if callable(g) else np.broadcast_to(g, (len(t),)), float)
        gv = gv.reshape(len(t), -1)
        if rhs is None:
            rhs = np.zeros((n, gv.shape[1]))
        M[np.ix_(idx, idx)] += (R * ds[:, None]).T @ R
        rhs[idx] += (R * ds[:, None]).T @ gv
    return sla.solve(M, rhs, assume_a="pos")


def _dirichlet_constraints(model: UnionModel, pieces, ncomp: int):
    dm = model.dofs()
    fixed = {}
    for pc in pieces:
        if pc.edge is None:
            raise UnsupportedConfigurationError("strong Dirichlet data only on untrimmed patch edges")
        P = model.entries[pc.patch].patch
        c = project_dirichlet(P, pc.edge, pc.g)
        gl = dm.local[pc.patch][P.edge_indices(pc.edge)]
        comps = pc.components if pc.components is not None else tuple(range(ncomp))
        if c.shape[1] == 1 and ncomp > 1:
            c = np.repeat(c, ncomp, axis=1)
        for i, gi in enumerate(gl):
            if gi < 0:
                continue
            for comp in comps:
                fixed[ncomp * int(gi) + comp] = float(c[i, comp if c.shape[1] > 1 else 0])
    idx = np.array(sorted(fixed), dtype=int)
    return idx, np.array([fixed[i] for i in idx], float)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _beta(model, spec, kt, kb) -> float:
    base = spec.beta if spec.beta is not None else 6.0 * _pmax(model, kt, kb) ** 2
    if spec.kind == "elasticity":
        mats = [_material(model, k) for k in (kt, kb)]
        lam = max(m.lam for m in mats)
        mu = max(m.mu for m in mats)
        return base * 8.0 * (3 * lam + 2 * mu)
    return base


def _element_batches(E, rule, chunk: int = 1024):
    """Yield ``(index, R, dR, x, wdet)`` arrays with a leading element axis."""
    P = E.patch
    boxes, cells = [], []
    for _, box, region in E.regions():
        (cells if hasattr(region, "quadrature") else boxes).append((box, region))
    for i in range(0, len(boxes), chunk):
        yield _basis_batch(P, [b for b, _ in boxes[i:i + chunk]], rule)
    for box, cell in cells:
        uv, w = cell.quadrature(rule)
        B = P.basis(uv, element=box)
        yield B.index[None], B.R[None], B.dR[None], B.x[None], (w * B.detJ)[None]


def _volume(model: UnionModel, spec: ProblemSpec, T: _Triplets, b: np.ndarray):
    dm = model.dofs()
    a = np.asarray(spec.velocity, float)
    for k, E in enumerate(model.entries):
        rule = gauss_rule(max(E.patch.degrees) + 1)
        D = _material(model, k).D() if spec.kind == "elasticity" else None
        for index, R, dR, x, wt in _element_batches(E, rule):
            g = dm.local[k][index]
            ne, nq = wt.shape
            xf = x.reshape(-1, 2)
            if D is not None:
                S = _strain_matrix(dR.reshape(ne * nq, *dR.shape[2:])).reshape(ne, nq, 3, -1)
                K = np.einsum("eq,eqai,ab,eqbj->eij", wt, S, D, S)
                rows = np.stack([_vec_dofs(gi, 2) for gi in g])
                fx = _call(spec.f, xf, n=len(xf), shape=(2,)).reshape(ne, nq, 2)
                F = np.einsum("eq,eqi,eqc->eic", wt, R, fx).reshape(ne, -1)
            else:
                eps = spec.eps if spec.kind == "advection_diffusion" else 1.0
                K = eps * np.einsum("eq,eqia,eqja->eij", wt, dR, dR)
                if spec.kind == "advection_diffusion" and np.any(a):
                    # -(u, a.grad v): rows test, columns trial
                    K -= np.einsum("eq,eqi,eqj->eij", wt, dR @ a, R)
                rows = g
                fx = _call(spec.f, xf, n=len(xf), shape=()).reshape(ne, nq)
                F = np.einsum("eq,eqi->ei", wt * fx, R)
            T.add_batch(rows, K)
            _add_vec(b, rows.ravel(), F.ravel())


def _interfaces(model: UnionModel, spec: ProblemSpec, T: _Triplets):
    dm = model.dofs()
    a = np.asarray(spec.velocity, float)
    vec = spec.kind == "elasticity"
    scale = spec.eps if spec.kind == "advection_diffusion" else 1.0
    for itf in model.interfaces:
        kt, kb = itf.top, itf.bottom
        Pt, Pb = model.entries[kt].patch, model.entries[kb].patch
        gamma = _beta(model, spec, kt, kb) * (1.0 / model.entries[kt].h + 1.0 / model.entries[kb].h)
        Dt = _material(model, kt).D() if vec else None
        for seg in itf.mesh.segments:
            uvt = itf.top_uv(model, seg)
            Bt = Pt.basis(uvt, element=_element_of(Pt, uvt))
            Bb = Pb.basis(seg.bottom_uv, element=_element_of(Pb, seg.bottom_uv))
            w, nrm = seg.weights, seg.normal
            gt, gb = dm.local[kt][Bt.index], dm.local[kb][Bb.index]
            if vec:
                rows = np.concatenate([_vec_dofs(gt, 2), _vec_dofs(gb, 2)])
                J = np.concatenate([_vec_values(Bt.R), -_vec_values(Bb.R)], axis=2)  # (q, 2, m)
                St = np.einsum("ab,qbj->qaj", Dt, _strain_matrix(Bt.dR))
                Ft = _traction_matrix(St, nrm)
                F = np.concatenate([Ft, np.zeros((len(w), 2, J.shape[2] - Ft.shape[2]))], axis=2)
                K = (-np.einsum("q,qci,qcj->ij", w, J, F) - np.einsum("q,qci,qcj->ij", w, F, J)
                     + gamma * np.einsum("q,qci,qcj->ij", w, J, J))
            else:
                rows = np.concatenate([gt, gb])
                J = np.concatenate([Bt.R, -Bb.R], axis=1)
                F = np.concatenate([np.einsum("qia,qa->qi", Bt.dR, nrm), np.zeros_like(Bb.R)], axis=1)
                K = scale * (-np.einsum("q,qi,qj->ij", w, J, F) - np.einsum("q,qi,qj->ij", w, F, J)
                             + gamma * np.einsum("q,qi,qj->ij", w, J, J))
                if spec.kind == "advection_diffusion" and np.any(a):
                    an = nrm @ a
                    up_top = an >= 0
                    U = np.concatenate([Bt.R * up_top[:, None], Bb.R * (~up_top)[:, None]], axis=1)
                    K += np.einsum("q,qi,qj->ij", w * an, J, U)
            T.add(rows, rows, K)


def _neumann(model: UnionModel, spec: ProblemSpec, b: np.ndarray):
    dm = model.dofs()
    vec = spec.kind == "elasticity"
    for pc in spec.neumann:
        P = model.entries[pc.patch].patch
        for bp in boundary_points(model, pc, max(P.degrees) + spec.order_extra):
            B = P.basis(bp.uv, element=bp.box)
            g = dm.local[pc.patch][B.index]
            if vec:
                t = _call(pc.g, bp.x, bp.n, n=len(bp.w), shape=(2,))
                _add_vec(b, _vec_dofs(g, 2), np.einsum("q,qci,qc->i", bp.w, _vec_values(B.R), t))
            else:
                t = _call(pc.g, bp.x, bp.n, n=len(bp.w), shape=())
                _add_vec(b, g, (bp.w * t) @ B.R)


def _weak_dirichlet(model: UnionModel, spec: ProblemSpec, T: _Triplets, b: np.ndarray):
    if not spec.weak_dirichlet:
        return
    if spec.kind == "elasticity":
        raise UnsupportedConfigurationError("weak Dirichlet data is provided for scalar problems only")
    dm = model.dofs()
    a = np.asarray(spec.velocity, float)
    eps = spec.eps if spec.kind == "advection_diffusion" else 1.0
    adv = spec.kind == "advection_diffusion" and np.any(a)
    for pc in spec.weak_dirichlet:
        E = model.entries[pc.patch]
        P = E.patch
        beta = spec.beta if spec.beta is not None else 6.0 * max(P.degrees) ** 2
        for bp in boundary_points(model, pc, max(P.degrees) + spec.order_extra, a if adv else None):
            B = P.basis(bp.uv, element=bp.box)
            if spec.boundary_h == "local":
                # smaller mapped extent of the owning element at each point
                ext = np.array([bp.box[0][1] - bp.box[0][0], bp.box[1][1] - bp.box[1][0]])
                h = np.min(np.linalg.norm(B.J, axis=1) * ext, axis=1)
            else:
                h = E.h
            pen = eps * beta / h
            g = dm.local[pc.patch][B.index]
            gd = _call(pc.g, bp.x, n=len(bp.w), shape=())
            wk = pen * bp.w
            rhs = wk * gd
            if adv:
                an = bp.n @ a
                out = an >= 0
                wk = wk + np.where(out, an, 0.0) * bp.w
                rhs = rhs - np.where(out, 0.0, an) * bp.w * gd
            T.add(g, g, np.einsum("q,qi,qj->ij", wk, B.R, B.R))
            _add_vec(b, g, rhs @ B.R)


def assemble(model: UnionModel, spec: ProblemSpec) -> LinearSystem:
    model.audit()
    if spec.kind == "advection_diffusion" and not spec.eps > 0:
        raise UnsupportedConfigurationError("advection-diffusion requires a positive diffusivity")
    ncomp = 2 if spec.kind == "elasticity" else 1
    n = model.dofs().n * ncomp
    T = _Triplets()
    b = np.zeros(n)
    _volume(model, spec, T, b)
    _interfaces(model, spec, T)
    _neumann(model, spec, b)
    _weak_dirichlet(model, spec, T, b)
    fixed, values = _dirichlet_constraints(model, spec.dirichlet, ncomp)
    return LinearSystem(T.matrix(n), b, model, ncomp, fixed, values)


def assemble_poisson(model: UnionModel, spec: ProblemSpec) -> LinearSystem:
    if spec.kind != "poisson":
        raise SpecError("expected a poisson problem")
    return assemble(model, spec)


def assemble_elasticity(model: UnionModel, spec: ProblemSpec, materials=None) -> LinearSystem:
    if spec.kind != "elasticity":
        raise SpecError("expected an elasticity problem")
    if materials is not None:
        for E, m in zip(model.entries, materials):
            E.material = m
    return assemble(model, spec)


def assemble_advection_diffusion(model: UnionModel, spec: ProblemSpec) -> LinearSystem:
    if spec.kind != "advection_diffusion":
        raise SpecError("expected an advection-diffusion problem")
    if spec.dirichlet:
        raise SpecError("advection-diffusion takes its Dirichlet data weakly")
    return assemble(model, spec)


# ---------------------------------------------------------------------------
# solve and post-processing
# ---------------------------------------------------------------------------

class Solution:
    """Coefficients over the global unknowns with per-patch evaluation."""

    def __init__(self, system: LinearSystem, x: np.ndarray, residual: float):
        self.system = system
        self.model = system.model
        self.ncomp = system.ncomp
        self.x = x
        self.residual = residual

    def patch_coefficients(self, k: int) -> np.ndarray:
        g = self.model.dofs().local[k]
        c = np.zeros((len(g), self.ncomp))
        act = g >= 0
        c[act] = self.x.reshape(-1, self.ncomp)[g[act]]
        return c

    def evaluate(self, k: int, uv, element=None):
        """Value (N, ncomp) and gradient (N, ncomp, 2) at points of one element of patch ``k``."""
        P = self.model.entries[k].patch
        uv = np.atleast_2d(np.asarray(uv, float))
        B = P.basis(uv, element=element if element is not None else _element_of(P, uv))
        c = self.patch_coefficients(k)[B.index]
        return B.R @ c, np.einsum("qia,ic->qca", B.dR, c), B

    def stress(self, k: int, uv, element=None) -> np.ndarray:
        """Voigt stresses (xx, yy, xy) of an elasticity solution."""
        _, G, _ = self.evaluate(k, uv, element)
        eps = np.stack([G[:, 0, 0], G[:, 1, 1], G[:, 0, 1] + G[:, 1, 0]], axis=1)
        return eps @ _material(self.model, k).D().T

    def locate(self, x):
        """``(patch, uv)`` owning each physical point; tops take precedence."""
        x = np.atleast_2d(np.asarray(x, float))
        order = sorted(range(len(self.model.entries)), key=lambda k: self.model.entries[k].trimmed)
        out = []
        for xi in x:
            found = None
            for k in order:
                E = self.model.entries[k]
                (u0, u1), (v0, v1) = E.patch.domain
                try:
                    uv, d = invert_point(E.patch, xi, residual_tol=1e-9 * max(1.0, np.abs(xi).max()))
                except InversionError:
                    continue
                uv = np.asarray(uv, float)
                tol = 1e-12
                if not (u0 - tol <= uv[0] <= u1 + tol and v0 - tol <= uv[1] <= v1 + tol):
                    continue
                if E.trimmed and not E.domain.is_active(uv)[0]:
                    continue
                found = (k, uv)
                break
            out.append(found)
        return out

    def at_points(self, x, what: str = "value"):
        """Sample value, gradient or stress at physical points (NaN outside)."""
        res = []
        for loc in self.locate(x):
            if loc is None:
                res.append(None)
                continue
            k, uv = loc
            if what == "stress":
                res.append(self.stress(k, uv[None])[0])
            else:
                v, G, _ = self.evaluate(k, uv[None])
                res.append(v[0] if what == "value" else G[0])
        shape = next((np.shape(r) for r in res if r is not None), (self.ncomp,))
        return np.array([np.full(shape, np.nan) if r is None else r for r in res])


def solve(system: LinearSystem) -> Solution:
    """Direct sparse solve with strong constraints eliminated."""
    A, b = system.A, system.b
    n = A.shape[0]
    x = np.zeros(n)
    x[system.fixed] = system.values
    free = np.setdiff1d(np.arange(n), system.fixed)
    if free.size == 0:
        return Solution(system, x, 0.0)
    Aff = A[free][:, free].tocsc()
    rhs = b[free] - A[free][:, system.fixed] @ system.values
    # symmetric diagonal scaling: functions with tiny active support have tiny diagonals
    d = np.abs(Aff.diagonal())
    s = 1.0 / np.sqrt(np.where(d > 0, d, 1.0))
    Ds = sp.diags(s)
    As = (Ds @ Aff @ Ds).tocsc()
    try:
        lu = spla.splu(As)
    except RuntimeError as exc:
        diag = np.abs(Aff.diagonal())
        raise SolverError(f"factorization failed ({exc}); smallest diagonal {diag.min():.3e} "
                          f"at unknown {int(free[np.argmin(diag)])}") from exc
    piv = np.abs(lu.U.diagonal())
    if not piv.min() > 1e-13 * piv.max():
        j = int(np.argmin(piv))
        raise SolverError(f"singular system: pivot ratio {piv.min() / piv.max():.3e} "
                          f"at unknown {int(free[lu.perm_c[j]])}")
    xf = s * lu.solve(s * rhs)
    for _ in range(3):  # iterative refinement
        r = rhs - Aff @ xf
        if not np.all(np.isfinite(r)) or np.linalg.norm(r) <= 1e-14 * np.linalg.norm(rhs):
            break
        xf = xf + s * lu.solve(s * r)
    if not np.all(np.isfinite(xf)):
        raise SolverError("non-finite solution; the system is singular")
    x[free] = xf
    nb = np.linalg.norm(rhs)
    res = float(np.linalg.norm(Aff @ xf - rhs) / (nb if nb > 0 else 1.0))
    if res > 1e-10:
        log.warning("relative residual %.3e exceeds 1e-10", res)
    return Solution(system, x, res)


def error_norms(solution: Solution, exact_u, exact_grad, extra: int = 2):
    """(L2 error, H1 seminorm error) with the assembly quadrature raised by ``extra``."""
    model = solution.model
    e0 = e1 = 0.0
    for k, E in enumerate(model.entries):
        P = E.patch
        rule = gauss_rule(max(P.degrees) + 1 + extra)
        c = solution.patch_coefficients(k)
        for index, R, dR, x, wt in _element_batches(E, rule):
            cc = c[index]  # (E, nloc, ncomp)
            uh = np.einsum("eqi,eic->eqc", R, cc)
            gh = np.einsum("eqia,eic->eqca", dR, cc)
            xf = x.reshape(-1, 2)
            u = np.asarray(exact_u(xf), float).reshape(uh.shape)
            g = np.asarray(exact_grad(xf), float).reshape(gh.shape)
            e0 += float(np.sum(wt * np.sum((u - uh) ** 2, axis=2)))
            e1 += float(np.sum(wt * np.sum((g - gh) ** 2, axis=(2, 3))))
    return np.sqrt(e0), np.sqrt(e1)
