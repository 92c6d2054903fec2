"""Benchmark cases: exact solutions, geometry builders, convergence driver, field export."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .assembly import (BoundaryPiece, Material, ProblemSpec, Solution, assemble, error_norms,
                       solve)
from .conformal import (build_layer, build_layer_loft, build_layer_ruled, offset_curve,
                        project_greville)
from .coupling import UnionModel, build_boundary_type, build_interface_type
from .errors import DomainError, IBCMError, PreconditionError, SpecError
from .splines import (KnotVector, NurbsPatch, arc, circle, closed_quadratic, line_segment,
                      rectangle_patch)
from .trimming import TrimmingLoop

log = logging.getLogger(__name__)

CASES = ("plate_hole", "l_shape", "flower", "bimaterial_disk", "fiber_composite", "advdiff_plate_hole")
PLATE_THICKNESS_SWEEP = (0.2, 0.6, 1.0)


class SingularPointError(DomainError):
    """Evaluation at the singular point of a field."""


# ---------------------------------------------------------------------------
# exact solutions
# ---------------------------------------------------------------------------

def _kirsch_displacement(x, y, T, R, mu, kappa):
    # algebraic in (x, y) so that complex steps give exact derivatives
    r2 = x * x + y * y
    r = np.sqrt(r2)
    c2, s2 = (x * x - y * y) / r2, 2 * x * y / r2
    ur = T / (4 * mu) * (r * ((kappa - 1) / 2 + c2) + R**2 / r * (1 + (1 + kappa) * c2) - R**4 / r**3 * c2)
    ut = T / (4 * mu) * ((1 - kappa) * R**2 / r - r - R**4 / r**3) * s2
    c, s = x / r, y / r
    return ur * c - ut * s, ur * s + ut * c


def exact_plate_hole(x, T: float = 10.0, R: float = 1.0, E: float = 1000.0, nu: float = 0.3,
                     tol: float = 1e-12):
    """Kirsch field of an infinite plane-strain plate with a hole under tension ``T`` along x.

    Returns a dict with ``stress`` (N, 3) in Voigt order (xx, yy, xy),
    ``u`` (N, 2) and ``grad`` (N, 2, 2) with ``grad[:, i, j] = du_i/dx_j``.
    Points closer than ``R (1 - tol)`` to the center are rejected.
    """
    x = np.atleast_2d(np.asarray(x, float))
    r2 = np.sum(x**2, axis=1)
    if np.any(r2 < (R * (1 - tol)) ** 2):
        raise DomainError("point inside the hole")
    X, Y = x[:, 0], x[:, 1]
    c2, s2 = (X * X - Y * Y) / r2, 2 * X * Y / r2
    c4, s4 = c2 * c2 - s2 * s2, 2 * s2 * c2
    a2, a4 = R**2 / r2, R**4 / r2**2
    sxx = T * (1 - a2 * (1.5 * c2 + c4) + 1.5 * a4 * c4)
    syy = T * (-a2 * (0.5 * c2 - c4) - 1.5 * a4 * c4)
    sxy = T * (-a2 * (0.5 * s2 + s4) + 1.5 * a4 * s4)
    mu = E / (2 * (1 + nu))
    kappa = 3 - 4 * nu
    h = 1e-30
    ux, uy = _kirsch_displacement(X, Y, T, R, mu, kappa)
    dx = _kirsch_displacement(X + 1j * h, Y + 0j, T, R, mu, kappa)
    dy = _kirsch_displacement(X + 0j, Y + 1j * h, T, R, mu, kappa)
    grad = np.empty((len(x), 2, 2))
    for i in range(2):
        grad[:, i, 0] = dx[i].imag / h
        grad[:, i, 1] = dy[i].imag / h
    return {"stress": np.column_stack([sxx, syy, sxy]), "u": np.column_stack([ux, uy]), "grad": grad}


def exact_lshape(x):
    """``u = r^(2/3) sin(2 theta/3)`` with theta in [0, 3 pi/2]; returns ``(u, grad)``.

    The excluded quadrant is x > 0, y < 0.
    """
    x = np.atleast_2d(np.asarray(x, float))
    r = np.hypot(x[:, 0], x[:, 1])
    if np.any(r < 1e-300):
        raise SingularPointError("the gradient is singular at the reentrant corner")
    if np.any((x[:, 0] > 1e-12 * r) & (x[:, 1] < -1e-12 * r)):
        raise DomainError("point outside the L-shaped domain")
    th = np.mod(np.arctan2(x[:, 1], x[:, 0]), 2 * np.pi)
    th = np.where(th > 1.75 * np.pi, 0.0, th)  # y = -0 on the positive x axis
    a = 2.0 / 3.0
    u = r**a * np.sin(a * th)
    g = a * r ** (a - 1)
    grad = np.column_stack([g * np.sin((a - 1) * th), g * np.cos((a - 1) * th)])
    return u, grad


def bimaterial_alpha(a: float, b: float, m1: Material, m2: Material) -> float:
    l1, u1, l2, u2 = m1.lam, m1.mu, m2.lam, m2.mu
    return (l1 + u1 + u2) * b**2 / ((l2 + u2) * a**2 + (l1 + u1) * (b**2 - a**2) + u2 * b**2)


BIMAT = (Material(1.0, 0.25), Material(10.0, 0.3))


def exact_bimaterial_disk(r, a: float = 0.4, b: float = 2.0, materials=BIMAT):
    """Radial fields of the two-material disk with ``u_r(b) = b``.

    ``r <= a`` uses the inner branch.  Returns a dict of arrays
    ``u_r, e_rr, e_tt, s_rr, s_tt``.
    """
    r = np.atleast_1d(np.asarray(r, float))
    if np.any(r > b * (1 + 1e-12)) or np.any(r < 0):
        raise DomainError("radius outside [0, b]")
    m1, m2 = materials
    al = bimaterial_alpha(a, b, m1, m2)
    inner = r <= a
    k = (1 - b**2 / a**2) * al + b**2 / a**2
    rs = np.where(inner, 1.0, r)
    ur = np.where(inner, k * r, (r - b**2 / rs) * al + b**2 / rs)
    err = np.where(inner, k, (1 + b**2 / rs**2) * al - b**2 / rs**2)
    ett = np.where(inner, k, (1 - b**2 / rs**2) * al + b**2 / rs**2)
    lam = np.where(inner, m1.lam, m2.lam)
    mu = np.where(inner, m1.mu, m2.mu)
    return {"u_r": ur, "e_rr": err, "e_tt": ett,
            "s_rr": lam * (err + ett) + 2 * mu * err, "s_tt": lam * (err + ett) + 2 * mu * ett}


def bimaterial_field(x, a: float = 0.4, b: float = 2.0, materials=BIMAT):
    """Cartesian displacement (N, 2) and gradient (N, 2, 2) of the disk solution."""
    x = np.atleast_2d(np.asarray(x, float))
    r2 = np.sum(x**2, axis=1)
    m1, m2 = materials
    al = bimaterial_alpha(a, b, m1, m2)
    k = (1 - b**2 / a**2) * al + b**2 / a**2
    inner = r2 <= a * a
    I = np.eye(2)
    s = np.where(inner, 1.0, r2)
    c = np.where(inner, k, al + (1 - al) * b**2 / s)
    u = c[:, None] * x
    outer = al * I + (1 - al) * b**2 * (I / s[:, None, None] - 2 * x[:, :, None] * x[:, None, :] / s[:, None, None] ** 2)
    grad = np.where(inner[:, None, None], k * I, outer)
    return u, grad


FLOWER_R = 1.25


def flower_curve(R0: float = 1.0, A: float = 0.25, k: int = 5, m: int = 60):
    """Closed quadratic B-spline through the polar curve ``R0 + A cos(k theta)``."""
    th = np.linspace(0, 2 * np.pi, m, endpoint=False)
    r = R0 + A * np.cos(k * th)
    return closed_quadratic(np.column_stack([r * np.cos(th), r * np.sin(th)]))


def exact_flower(x):
    x = np.atleast_2d(np.asarray(x, float))
    a = np.pi / FLOWER_R
    sx, sy = np.sin(a * x[:, 0]), np.sin(a * x[:, 1])
    cx, cy = np.cos(a * x[:, 0]), np.cos(a * x[:, 1])
    return sx * sy, a * np.column_stack([cx * sy, sx * cy])


def flower_source(x):
    return 2 * (np.pi / FLOWER_R) ** 2 * exact_flower(x)[0]


# ---------------------------------------------------------------------------
# configuration and reports
# ---------------------------------------------------------------------------

@dataclass
class CaseConfig:
    """Run configuration; ``options`` holds case-specific switches.

    Thickness is relative to the characteristic radius of the case (the hole
    or fiber radius).  ``degree`` applies to background patches; layers keep
    the degree of their boundary curve.
    """

    case: str
    levels: int = 4
    thickness: float | None = None
    degree: int = 2
    seed: int = 0
    out: str | None = None
    materials: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.case not in CASES:
            raise SpecError(f"unknown case {self.case!r}; choose from {', '.join(CASES)}")
        if int(self.levels) < 1:
            raise SpecError("levels must be at least 1")
        if self.thickness is not None and not self.thickness > 0:
            raise SpecError("thickness must be positive")
        if self.degree < 2:
            raise SpecError("degree must be at least 2")

    def material(self, key: str, default: Material) -> Material:
        m = self.materials.get(key)
        return default if m is None else (m if isinstance(m, Material) else Material(**m))

    @classmethod
    def from_json(cls, path_or_text) -> "CaseConfig":
        p = Path(str(path_or_text))
        text = p.read_text() if p.suffix == ".json" or p.exists() else str(path_or_text)
        return cls(**json.loads(text))

    def to_json(self) -> str:
        d = asdict(self)
        d["materials"] = {k: asdict(v) if isinstance(v, Material) else v for k, v in self.materials.items()}
        return json.dumps(d, indent=2)


@dataclass
class LevelResult:
    level: int
    h: float
    dof: int
    errL2: float = float("nan")
    errH1: float = float("nan")
    qoi: float = float("nan")
    seconds: float = 0.0


def _rate(e0, e1):
    if not (np.isfinite(e0) and np.isfinite(e1)) or e0 <= 0 or e1 <= 0:
        return float("nan")
    return math.log2(e0 / e1)


@dataclass
class ConvergenceReport:
    case: str
    rows: list = field(default_factory=list)
    label: str = ""

    def add(self, row: LevelResult):
        if self.rows:
            last = self.rows[-1]
            if not row.h < last.h or not row.dof > last.dof:
                raise ValueError("levels must have decreasing h and increasing DOF")
        self.rows.append(row)

    def rates(self, key: str = "errL2") -> list[float]:
        v = [getattr(r, key) for r in self.rows]
        return [float("nan")] + [_rate(a, b) for a, b in zip(v[:-1], v[1:])]

    @property
    def final_rates(self):
        """Rates of the last interval (L2, H1)."""
        return self.rates("errL2")[-1], self.rates("errH1")[-1]

    def column(self, key: str) -> np.ndarray:
        return np.array([getattr(r, key) for r in self.rows], float)

    HEADER = ("level", "h", "dof", "errL2", "errH1", "rateL2", "rateH1", "qoi")

    def to_csv(self, path):
        rl, rh = self.rates("errL2"), self.rates("errH1")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.HEADER)
            for r, a, b in zip(self.rows, rl, rh):
                w.writerow([r.level, f"{r.h:.10g}", r.dof, f"{r.errL2:.10g}", f"{r.errH1:.10g}",
                            f"{a:.4f}", f"{b:.4f}", f"{r.qoi:.10g}"])

    @classmethod
    def from_csv(cls, path, case: str = "") -> "ConvergenceReport":
        rep = cls(case)
        with open(path, newline="") as fh:
            for d in csv.DictReader(fh):
                rep.rows.append(LevelResult(int(d["level"]), float(d["h"]), int(d["dof"]), float(d["errL2"]),
                                            float(d["errH1"]), float(d.get("qoi", "nan") or "nan")))
        return rep

    def table(self) -> str:
        rl, rh = self.rates("errL2"), self.rates("errH1")
        lines = [f"{self.case} {self.label}".strip(),
                 f"{'lvl':>3} {'h':>10} {'dof':>8} {'errL2':>11} {'rate':>6} {'errH1':>11} {'rate':>6} {'qoi':>12}"]
        for r, a, b in zip(self.rows, rl, rh):
            lines.append(f"{r.level:>3} {r.h:>10.4g} {r.dof:>8d} {r.errL2:>11.4e} {a:>6.2f} "
                         f"{r.errH1:>11.4e} {b:>6.2f} {r.qoi:>12.6g}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# problem builders
# ---------------------------------------------------------------------------

@dataclass
class Problem:
    """A discretized benchmark at one refinement level."""

    model: UnionModel
    spec: ProblemSpec
    exact_u: Callable | None = None
    exact_grad: Callable | None = None
    materials: list | None = None
    probes: dict = field(default_factory=dict)  # name -> (points, what)
    qoi: Callable | None = None  # Solution -> float
    h_patches: tuple | None = None  # patches whose size defines h

    def h(self) -> float:
        ks = self.h_patches if self.h_patches is not None else range(len(self.model.entries))
        return max(self.model.entries[k].h for k in ks)


def _uniform(a: float, b: float, n: int):
    return list(a + (b - a) * np.arange(1, n) / n)


def _bottoms(model: UnionModel):
    return tuple(k for k, E in enumerate(model.entries) if E.trimmed) or None


def _sigma_xx_on_arc(center, R, th0, th1, n=91, lift=1e-9):
    th = np.linspace(th0, th1, n)
    r = R * (1 + lift)
    return np.column_stack([center[0] + r * np.cos(th), center[1] + r * np.sin(th)])


def plate_hole(level: int, cfg: CaseConfig) -> Problem:
    """Quarter plate [0, 4]^2 with a hole of radius 1 under remote tension 10 along x."""
    R, L, T = 1.0, 4.0, 10.0
    mat = cfg.material("plate", Material(1000.0, 0.3))
    method = cfg.options.get("method", "ibcm")
    t = (cfg.thickness if cfg.thickness is not None else 0.2) * R
    n = 2**level
    hole = arc((0.0, 0.0), R, np.pi / 2, 0.0)  # clockwise: the plate is on its left
    bg = rectangle_patch(0, L, 0, L, 4 * n, 4 * n, degree=cfg.degree)
    if method == "ibcm":
        layer = build_layer(hole, thickness=t).refined(2 * n, 2 * n)
        m = build_boundary_type(layer, bg, material=mat)
        k = 1
        dirichlet = [BoundaryPiece(0, "u0", g=0.0, components=(0,)),
                     BoundaryPiece(0, "u1", g=0.0, components=(1,))]
    elif method == "trimming":
        m = UnionModel()
        k = m.add_trimmed_bottom(bg, [], mat, extra_loops=[TrimmingLoop([hole], open=True)])
        dirichlet = []
    else:
        raise SpecError(f"unknown plate_hole method {method!r}")
    dirichlet += [BoundaryPiece(k, "u0", g=0.0, components=(0,)), BoundaryPiece(k, "v0", g=0.0, components=(1,))]

    def traction(x, nrm):
        s = exact_plate_hole(x, T, R, mat.E, mat.nu)["stress"]
        return np.column_stack([s[:, 0] * nrm[:, 0] + s[:, 2] * nrm[:, 1], s[:, 2] * nrm[:, 0] + s[:, 1] * nrm[:, 1]])

    spec = ProblemSpec("elasticity", f=0.0, dirichlet=dirichlet,
                       neumann=[BoundaryPiece(k, "u1", g=traction), BoundaryPiece(k, "v1", g=traction)])
    ex = lambda x: exact_plate_hole(x, T, R, mat.E, mat.nu, tol=1e-2)  # fitted trimming curves dip inside
    pts = _sigma_xx_on_arc((0, 0), R, 0, np.pi / 2)
    return Problem(m, spec, lambda x: ex(x)["u"], lambda x: ex(x)["grad"],
                   probes={"hole_stress": (pts, "stress"), "x0_stress": (np.column_stack([np.zeros(61), np.linspace(R * (1 + 1e-9), L, 61)]), "stress")},
                   qoi=lambda sol: float(np.nanmax(sol.at_points(pts, "stress")[:, 0])), h_patches=(k,))


def lshape_patch(degree: int = 2) -> NurbsPatch:
    """Single C0 patch of the L-shaped domain [-1, 1]^2 minus (0, 1] x [-1, 0)."""
    row0 = np.array([(0, -1), (0, -0.5), (0, 0), (0.5, 0), (1, 0)], float)
    row1 = np.array([(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1)], float)
    net = np.stack([row0, 0.5 * (row0 + row1), row1], axis=1)
    P = NurbsPatch(KnotVector([0, 0, 0, 0.5, 0.5, 1, 1, 1], 2), KnotVector([0, 0, 0, 1, 1, 1], 2),
                   net, np.ones(net.shape[:2]))
    if degree > 2:
        raise SpecError("the L-shape patch is quadratic")
    return P


def l_shape(level: int, cfg: CaseConfig) -> Problem:
    n = 4 * 2**level
    P = lshape_patch(cfg.degree)
    P = P.refined(_uniform(0, 0.5, n) + _uniform(0.5, 1, n), _uniform(0, 1, n))
    g = lambda x: exact_lshape(x)[0]
    method = cfg.options.get("method", "layer")
    r0 = cfg.options.get("corner_radius", 0.25)
    if method == "layer":
        corner = build_layer_ruled(arc((0, 0), r0, 0.0, 1.5 * np.pi), np.zeros((7, 2)))
        corner = corner.refined(2**(level + 1), 2**(level + 1))
        m = UnionModel()
        m.add_patch(corner.patch, name="corner")
        k = m.add_trimmed_bottom(P, [(0, "v0")])
        m.audit()
        dirichlet = [BoundaryPiece(0, "u0", g=g), BoundaryPiece(0, "u1", g=g)]
    elif method == "single":
        m = UnionModel()
        k = m.add_patch(P, name="L")
        dirichlet = []
    else:
        raise SpecError(f"unknown l_shape method {method!r}")
    dirichlet += [BoundaryPiece(k, e, g=g) for e in ("u0", "u1", "v0", "v1")]
    spec = ProblemSpec("poisson", f=0.0, dirichlet=dirichlet)
    return Problem(m, spec, lambda x: exact_lshape(x)[0], lambda x: exact_lshape(x)[1], h_patches=(k,))


def flower(level: int, cfg: CaseConfig) -> Problem:
    F = flower_curve()
    target = cfg.options.get("target", "offset")
    if target == "offset":
        d = cfg.thickness if cfg.thickness is not None else 0.1
        L0 = build_layer_loft(F, offset_curve(F, d)[0])
    elif target == "circle":
        L0 = build_layer_ruled(F, project_greville(F, circle((0, 0), cfg.options.get("circle_radius", 0.5))))
    else:
        raise SpecError(f"unknown flower target {target!r}")
    n = 2**level
    layer = L0.refined(n, 2 * n)
    bg = rectangle_patch(-1.2, 1.2, -1.2, 1.2, 8 * n, 8 * n, degree=cfg.degree)
    m = build_boundary_type(layer, bg)
    g = lambda x: exact_flower(x)[0]
    spec = ProblemSpec("poisson", f=flower_source, dirichlet=[BoundaryPiece(0, "v0", g=g)])
    return Problem(m, spec, g, lambda x: exact_flower(x)[1], h_patches=(1,))


def bimaterial_disk(level: int, cfg: CaseConfig) -> Problem:
    """Two-material disk: inner layer + trimmed square, conforming outer layer up to r = b."""
    a, b = 0.4, 2.0
    mats = (cfg.material("inner", BIMAT[0]), cfg.material("outer", BIMAT[1]))
    t = (cfg.thickness if cfg.thickness is not None else 0.25) * a
    n = 2**level
    G = circle((0, 0), a)
    layer1 = build_layer(G, thickness=t).refined(2 * n, n)
    layer2 = build_layer(G.reversed(), thickness=b - a).refined(2 * n, 4 * n)
    s = a - 0.2 * t
    bg = rectangle_patch(-s, s, -s, s, 4 * n, 4 * n, degree=cfg.degree)
    m = build_interface_type(layer1, layer2, bg, None, materials=mats)
    spec = ProblemSpec("elasticity", dirichlet=[BoundaryPiece(1, "v1", g=lambda x: x)])
    ex = lambda x: bimaterial_field(x, a, b, mats)
    th = np.pi / 7  # off the symmetry axes
    r = np.linspace(0.05, b * (1 - 1e-9), 121)
    ray = np.column_stack([r * np.cos(th), r * np.sin(th)])
    delta = 1e-7 * a
    ends = np.array([[(a - delta) * np.cos(th), (a - delta) * np.sin(th)],
                     [(a + delta) * np.cos(th), (a + delta) * np.sin(th)]])
    return Problem(m, spec, lambda x: ex(x)[0], lambda x: ex(x)[1], materials=list(mats),
                   probes={"ray": (ray, "grad"), "interface": (ends, "grad")},
                   qoi=lambda sol: _radial_jump(sol, ends, th)[1], h_patches=(2,))


def _radial_jump(sol: Solution, ends, th):
    """(u_r jump, e_rr jump) across the interface along direction ``th``."""
    e = np.array([np.cos(th), np.sin(th)])
    u = sol.at_points(ends, "value") @ e
    G = sol.at_points(ends, "grad")
    err = np.einsum("i,nij,j->n", e, G, e)
    return float(u[1] - u[0]), float(err[1] - err[0])


def place_fibers(n: int, radius: float, thickness: float, seed: int, box: float = 5.0,
                 margin: float = 0.05, max_tries: int = 100000) -> np.ndarray:
    """Rejection-sample ``n`` fiber centers with pairwise distance > 2(radius + thickness).

    Centers stay far enough from the box edges that the outer layers fit.
    """
    rng = np.random.default_rng(seed)
    lim = box - radius - thickness - margin
    if lim <= 0:
        raise SpecError("fibers do not fit in the matrix")
    dmin = 2 * (radius + thickness)
    out = []
    for _ in range(max_tries):
        c = rng.uniform(-lim, lim, 2)
        if all(np.linalg.norm(c - q) > dmin + margin for q in out):
            out.append(c)
            if len(out) == n:
                return np.array(out)
    raise SpecError(f"could not place {n} fibers; lower the count or the thickness")


def fiber_composite(level: int, cfg: CaseConfig) -> Problem:
    """Matrix [-5, 5]^2 with unit fibers, each with an inner and an outer conformal layer."""
    nf = int(cfg.options.get("fibers", 5))
    t = cfg.thickness if cfg.thickness is not None else 0.25
    centers = place_fibers(nf, 1.0, t, cfg.seed)
    fib = cfg.material("fiber", Material(100.0, 0.33))
    mat = cfg.material("matrix", Material(1.0, 0.3))
    n = 2**level
    m = UnionModel()
    outers = []
    for c in centers:
        G = circle(c, 1.0)
        inner = build_layer(G, thickness=t).refined(2 * n, n)
        outer = build_layer(G.reversed(), thickness=t).refined(2 * n, n)
        i1 = m.add_patch(inner.patch, fib, "fiber layer")
        outers.append(m.add_patch(outer.patch, mat, "matrix layer"))
        s = 1.0 - 0.5 * t
        core = rectangle_patch(c[0] - s, c[0] + s, c[1] - s, c[1] + s, 3 * n, 3 * n, degree=cfg.degree)
        m.add_trimmed_bottom(core, [(i1, "v1")], fib, name="fiber core")
    bg = rectangle_patch(-5, 5, -5, 5, 8 * n, 8 * n, degree=cfg.degree)
    k = m.add_trimmed_bottom(bg, [(o, "v1") for o in outers], mat, name="matrix")
    m.audit()
    spec = ProblemSpec("elasticity", dirichlet=[BoundaryPiece(k, "u0", g=0.0, components=(0,)),
                                                BoundaryPiece(k, "v0", g=0.0, components=(1,))],
                       neumann=[BoundaryPiece(k, "u1", g=(100.0, 0.0))])
    prob = Problem(m, spec, h_patches=(k,))
    prob.qoi = lambda sol: max_sampled(sol, "sxx")
    prob.centers = centers
    return prob


def advdiff_plate_hole(level: int, cfg: CaseConfig) -> Problem:
    """Advection-dominated flow past a hole in [0, 15]^2 with weak Dirichlet data.

    ``level`` refines the background (level 0: 28 x 16 elements with a
    dense band of width 0.75 at the outflow edge); the layer is fixed.
    """
    L = H = 15.0
    Rh = 1.0
    c = (L / 5, H / 2)
    eps = cfg.options.get("eps", 0.1)
    n = 2**level
    kx = np.concatenate([np.linspace(0, 0.95 * L, 16 * n + 1), np.linspace(0.95 * L, L, 12 * n + 1)[1:]])
    ky = np.linspace(0, H, 16 * n + 1)
    bg = rectangle_patch(0, L, 0, H, len(kx) - 1, len(ky) - 1, degree=cfg.degree, knots_x=kx, knots_y=ky)
    hole = circle(c, Rh, ccw=False)
    method = cfg.options.get("method", "ibcm")
    if method == "ibcm":
        t = (cfg.thickness if cfg.thickness is not None else 1.0) * Rh
        layer = build_layer(hole, thickness=t).refined(cfg.options.get("layer_u", 8),
                                                       cfg.options.get("layer_v", 8),
                                                       grading=cfg.options.get("grading", 8.0))
        m = build_boundary_type(layer, bg)
        k = 1
        weak = [BoundaryPiece(0, "v0", g=1.0)]
    elif method == "trimming":
        m = UnionModel()
        k = m.add_trimmed_bottom(bg, [], extra_loops=[TrimmingLoop.from_curve(hole)])
        weak = [BoundaryPiece(k, curve=hole, g=1.0)]
    else:
        raise SpecError(f"unknown advdiff method {method!r}")
    weak += [BoundaryPiece(k, e, g=0.0) for e in ("u0", "u1", "v0", "v1")]
    spec = ProblemSpec("advection_diffusion", f=0.0, weak_dirichlet=weak, eps=eps, velocity=(1.0, 0.0))
    xs = np.linspace(0, L, 601)
    xs = xs[np.abs(xs - c[0]) > Rh * (1 + 1e-9)]
    line = np.column_stack([xs, np.full_like(xs, H / 2)])
    return Problem(m, spec, probes={"line": (line, "value")}, h_patches=(k,),
                   qoi=lambda sol: _overshoot(sol.at_points(line, "value")[:, 0]))


def _overshoot(v) -> float:
    """Largest excursion outside [0, 1]."""
    v = v[np.isfinite(v)]
    return float(max(0.0, v.max() - 1.0, -v.min()))


BUILDERS = {"plate_hole": plate_hole, "l_shape": l_shape, "flower": flower, "bimaterial_disk": bimaterial_disk,
            "fiber_composite": fiber_composite, "advdiff_plate_hole": advdiff_plate_hole}


# ---------------------------------------------------------------------------
# sampling and export
# ---------------------------------------------------------------------------

def _elements_of(kv: KnotVector, s):
    br = kv.breaks
    i = np.clip(np.searchsorted(br, s, side="right") - 1, 0, len(br) - 2)
    return i, br


def sample_patch(sol: Solution, k: int, n: int = 21):
    """Samples of patch ``k`` on an ``n x n`` parametric grid.

    Returns ``(x (n, n, 2), active (n, n), fields)`` where ``fields`` maps
    names to arrays ``(n, n, ...)``; inactive samples hold NaN.
    """
    E = sol.model.entries[k]
    P = E.patch
    (u0, u1), (v0, v1) = P.domain
    U, V = np.meshgrid(np.linspace(u0, u1, n), np.linspace(v0, v1, n), indexing="ij")
    uv = np.column_stack([U.ravel(), V.ravel()])
    active = E.domain.is_active(uv) if E.trimmed else np.ones(len(uv), bool)
    iu, bu = _elements_of(P.kv_u, uv[:, 0])
    iv, bv = _elements_of(P.kv_v, uv[:, 1])
    nc = sol.ncomp
    X = P.evaluate(uv)
    val = np.full((len(uv), nc), np.nan)
    grad = np.full((len(uv), nc, 2), np.nan)
    stress = np.full((len(uv), 3), np.nan) if nc == 2 else None
    key = iu * (len(bv) - 1) + iv
    for kk in np.unique(key[active]):
        sel = np.flatnonzero(active & (key == kk))
        box = ((bu[iu[sel[0]]], bu[iu[sel[0]] + 1]), (bv[iv[sel[0]]], bv[iv[sel[0]] + 1]))
        v, G, _ = sol.evaluate(k, uv[sel], element=box)
        val[sel], grad[sel] = v, G
        if stress is not None:
            stress[sel] = sol.stress(k, uv[sel], element=box)
    fields = {"u": val.reshape(n, n, nc), "grad": grad.reshape(n, n, nc, 2)}
    if stress is not None:
        fields["stress"] = stress.reshape(n, n, 3)
    return X.reshape(n, n, 2), active.reshape(n, n), fields


def max_sampled(sol: Solution, what: str = "sxx", n: int = 21) -> float:
    """Maximum of a stress component over grid samples of all patches."""
    comp = {"sxx": 0, "syy": 1, "sxy": 2}[what]
    best = -np.inf
    for k in range(len(sol.model.entries)):
        _, act, f = sample_patch(sol, k, n)
        if act.any():
            best = max(best, float(np.nanmax(f["stress"][..., comp])))
    return best


def _vtk_grid(path: Path, X, fields):
    n1, n2 = X.shape[:2]
    N = n1 * n2
    # VTK structured grids run fastest in the first index
    order = lambda a: np.swapaxes(a, 0, 1).reshape(N, -1)
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nibcm patch samples\nASCII\nDATASET STRUCTURED_GRID\n")
        fh.write(f"DIMENSIONS {n1} {n2} 1\nPOINTS {N} double\n")
        P = order(X)
        np.savetxt(fh, np.column_stack([P, np.zeros(N)]), fmt="%.12g")
        fh.write(f"POINT_DATA {N}\n")
        for name, a in fields.items():
            a = order(a)
            fh.write(f"SCALARS {name} double {a.shape[1]}\nLOOKUP_TABLE default\n")
            np.savetxt(fh, a, fmt="%.12g")


def export_fields(sol: Solution, path, resolution: int = 21, probes: dict | None = None, tag: str = ""):
    """Write one legacy VTK structured grid per patch and one CSV per probe line.

    Returns the list of written files.
    """
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    files = []
    for k in range(len(sol.model.entries)):
        X, act, f = sample_patch(sol, k, resolution)
        flat = {"active": act[..., None].astype(float), "u": f["u"],
                "grad": f["grad"].reshape(resolution, resolution, -1)}
        if "stress" in f:
            flat["stress"] = f["stress"]
        p = out / f"{tag}patch{k}.vtk"
        _vtk_grid(p, X, flat)
        files.append(p)
    for name, (pts, what) in (probes or {}).items():
        vals = sol.at_points(pts, what).reshape(len(pts), -1)
        p = out / f"probe_{tag}{name}.csv"
        cols = {"value": [f"u{i}" for i in range(vals.shape[1])],
                "grad": [f"g{i}{j}" for i in range(sol.ncomp) for j in "xy"],
                "stress": ["sxx", "syy", "sxy"]}[what]
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y"] + cols)
            for x, v in zip(pts, vals):
                w.writerow([f"{x[0]:.10g}", f"{x[1]:.10g}"] + [f"{a:.10g}" for a in v])
        files.append(p)
    return files


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def solve_level(cfg: CaseConfig, level: int):
    """Build, assemble and solve one level; returns ``(problem, solution)``."""
    try:
        prob = BUILDERS[cfg.case](level, cfg)
        system = assemble(prob.model, prob.spec)
        return prob, solve(system)
    except IBCMError as exc:
        raise type(exc)(f"{cfg.case}, level {level}: {exc}") from exc


def run_case(cfg: CaseConfig, export: bool | None = None, resolution: int = 21) -> ConvergenceReport:
    """Convergence study over ``cfg.levels`` dyadic levels.

    Writes ``convergence.csv``, per-level VTK files and probes when
    ``cfg.out`` is set (or ``export`` is true).
    """
    label = ""
    if cfg.thickness is not None:
        label = f"t={cfg.thickness:g}"
    if cfg.options:
        label = " ".join([label] + [f"{k}={v}" for k, v in sorted(cfg.options.items())]).strip()
    rep = ConvergenceReport(cfg.case, label=label)
    out = Path(cfg.out) if cfg.out else None
    export = bool(out) if export is None else export
    for level in range(int(cfg.levels)):
        t0 = time.perf_counter()
        prob, sol = solve_level(cfg, level)
        row = LevelResult(level, prob.h(), sol.system.A.shape[0])
        if prob.exact_u is not None:
            row.errL2, row.errH1 = error_norms(sol, prob.exact_u, prob.exact_grad)
        if prob.qoi is not None:
            row.qoi = prob.qoi(sol)
        row.seconds = time.perf_counter() - t0
        rep.add(row)
        log.info("%s level %d: dof %d, errors %.3e %.3e, qoi %.6g (%.1f s)", cfg.case, level, row.dof,
                 row.errL2, row.errH1, row.qoi, row.seconds)
        if export and out is not None:
            export_fields(sol, out / f"level{level}", resolution, prob.probes)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        rep.to_csv(out / "convergence.csv")
        (out / "config.json").write_text(cfg.to_json())
    return rep
