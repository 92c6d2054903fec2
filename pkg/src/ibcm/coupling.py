"""Overlapping-patch models: layers on top of trimmed backgrounds."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (InterfaceConstructionError, NonconformingInterfaceError, PreconditionError)
from .quadrature import InterfaceQuadMesh, build_interface_quadrature, element_quadrature, gauss_rule
from .splines import NurbsCurve, NurbsPatch
from .trimming import TrimmedDomain, TrimmingLoop

EDGES = ("u0", "u1", "v0", "v1")
# sign passed to the interface quadrature so that normals point out of the patch
OUTWARD_SIGN = {"v0": 1.0, "v1": -1.0, "u0": -1.0, "u1": 1.0}


@dataclass
class PatchEntry:
    patch: NurbsPatch
    role: str = "top"  # "top" (untrimmed) or "bottom" (trimmed background)
    domain: TrimmedDomain | None = None
    material: object = None
    name: str = ""
    _h: float | None = field(default=None, repr=False)

    @property
    def trimmed(self) -> bool:
        return self.domain is not None

    def regions(self):
        """``(element_id, element_box, region)`` for all active integration regions."""
        if self.domain is None:
            return [(k, e, e) for k, e in enumerate(self.patch.elements())]
        return [(eid, self.domain.element_box(eid), r) for eid, r in self.domain.regions()]

    def active_mask(self) -> np.ndarray:
        if self.domain is None:
            return np.ones(self.patch.num_basis, dtype=bool)
        return self.domain.active_functions()

    def element_boxes(self):
        if self.domain is None:
            return self.patch.elements()
        return [self.domain.element_box(e) for e in self.domain.active_elements()]

    @property
    def h(self) -> float:
        """Largest element size: longest mapped element edge (5-point polyline)."""
        if self._h is None:
            s = np.linspace(0.0, 1.0, 5)
            B = np.asarray(self.element_boxes(), float)  # (E, 2, 2)
            lo, hi = B[:, :, 0], B[:, :, 1]
            m = lo[:, None, :] + s[None, :, None] * (hi - lo)[:, None, :]
            pts = []
            for fixed in (0, 1):  # u fixed / v fixed
                for side in (lo, hi):
                    q = m.copy()
                    q[:, :, fixed] = side[:, None, fixed]
                    pts.append(q)
            uv = np.stack(pts, axis=1).reshape(-1, 2)
            x = self.patch.evaluate(uv).reshape(len(B), 4, 5, 2)
            best = float(np.linalg.norm(np.diff(x, axis=2), axis=3).sum(axis=2).max())
            self._h = best
        return self._h

    def area(self, order: int | None = None) -> float:
        rule = gauss_rule(order if order is not None else max(self.patch.degrees) + 2)
        return float(sum(element_quadrature(self.patch, r, rule)[1].sum() for _, _, r in self.regions()))


@dataclass
class Interface:
    """Nitsche interface: an untrimmed ``top`` edge lying inside ``bottom``."""

    top: int
    edge: str
    bottom: int
    mesh: InterfaceQuadMesh
    flux_side: str = "top"

    def top_uv(self, model: "UnionModel", seg) -> np.ndarray:
        return model.entries[self.top].patch.edge_param(self.edge, seg.t)


@dataclass
class ConformingEdge:
    a: int
    edge_a: str
    b: int
    edge_b: str
    reversed: bool


@dataclass
class DofMap:
    """Global numbering over the direct sum of patch spaces.

    ``local[k][i]`` is the global index of basis ``i`` of patch ``k`` or -1
    when the function is inactive.
    """

    local: list
    n: int

    def patch_dofs(self, k: int, idx) -> np.ndarray:
        return self.local[k][idx]


def _trimming_curve(patch: NurbsPatch, edge: str) -> NurbsCurve:
    # the region beyond the top patch must lie on the left
    c = patch.edge_curve(edge)
    return c if OUTWARD_SIGN[edge] < 0 else c.reversed()


def _same_curve(a: NurbsCurve, b: NurbsCurve, tol: float):
    """``None``, ``"same"`` or ``"reversed"`` for control-identical curves."""
    if a.degree != b.degree or len(a.control_points) != len(b.control_points):
        return None
    for mode, bb in (("same", b), ("reversed", b.reversed())):
        if (a.kv == bb.kv and np.allclose(a.control_points, bb.control_points, atol=tol, rtol=0)
                and np.allclose(a.weights, bb.weights, atol=1e-12, rtol=0)):
            return mode
    return None


class _UnionFind:
    def __init__(self, n: int):
        self.parent = np.arange(n)

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return int(root)

    def union(self, i: int, j: int):
        a, b = self.find(i), self.find(j)
        if a != b:
            self.parent[max(a, b)] = min(a, b)


class UnionModel:
    """Hierarchy of overlapping patches.

    Untrimmed patches are on top and own the interface fluxes; trimmed
    backgrounds are at the bottom.  Patch edges whose control data coincide
    (ring seams, shared material interfaces) are merged into single global
    unknowns.
    """

    def __init__(self):
        self.entries: list[PatchEntry] = []
        self.interfaces: list[Interface] = []
        self.conforming: list[ConformingEdge] = []
        self._dofs: DofMap | None = None

    # -- construction --------------------------------------------------------
    def add_patch(self, patch: NurbsPatch, material=None, name: str = "") -> int:
        self.entries.append(PatchEntry(patch, "top", None, material, name))
        self._dofs = None
        return len(self.entries) - 1

    def add_layer(self, layer, material=None, name: str = "layer") -> list[int]:
        return [self.add_patch(P, material, name) for P in layer.patches]

    def add_trimmed_bottom(self, patch: NurbsPatch, couplings, material=None, name: str = "background",
                           extra_loops=(), fit_tol: float | None = None, order: int | None = None) -> int:
        """Trim ``patch`` by the coupled top edges and register the interfaces.

        ``couplings`` is a list of ``(top_index, edge)``; the region kept is
        the one beyond each top edge.  ``extra_loops`` are additional
        :class:`TrimmingLoop` objects (e.g. holes without a layer).
        """
        loops = list(extra_loops)
        for top, edge in couplings:
            c = _trimming_curve(self.entries[top].patch, edge)
            loops.append(TrimmingLoop.from_curve(c) if c.is_closed else TrimmingLoop([c], open=True))
        dom = TrimmedDomain(patch, loops, fit_tol=fit_tol)
        self.entries.append(PatchEntry(patch, "bottom", dom, material, name))
        k = len(self.entries) - 1
        for top, edge in couplings:
            self.couple(top, edge, k, order=order)
        self._dofs = None
        return k

    def couple(self, top: int, edge: str, bottom: int, order: int | None = None) -> Interface:
        te, be = self.entries[top], self.entries[bottom]
        if te.trimmed:
            raise PreconditionError("interface flux must come from an untrimmed top patch")
        curve = te.patch.edge_curve(edge)
        q = order if order is not None else max(max(te.patch.degrees), max(be.patch.degrees)) + 2
        try:
            mesh = build_interface_quadrature(curve, be.patch, order=q, normal_sign=OUTWARD_SIGN[edge])
        except InterfaceConstructionError as exc:
            raise PreconditionError(f"interface does not lie inside the bottom patch: {exc}") from exc
        itf = Interface(top, edge, bottom, mesh)
        self.interfaces.append(itf)
        return itf

    # -- checks ----------------------------------------------------------------
    def audit(self):
        """Reject any interface whose flux would come from a trimmed patch."""
        for itf in self.interfaces:
            if itf.flux_side != "top" or self.entries[itf.top].trimmed:
                raise PreconditionError("flux side of an interface must be an untrimmed top patch")
        return True

    def area(self) -> float:
        """Sum of the active areas of all patches (backgrounds are trimmed by the layers)."""
        return float(sum(e.area() for e in self.entries))

    # -- unknowns -------------------------------------------------------------
    def find_conforming(self, tol: float = 1e-12) -> list[ConformingEdge]:
        found = []
        keys = [(k, e) for k in range(len(self.entries)) for e in EDGES]
        curves = {key: self.entries[key[0]].patch.edge_curve(key[1]) for key in keys}
        scale = max(1.0, max(float(np.abs(E.patch.control_net).max()) for E in self.entries))
        for i, ka in enumerate(keys):
            for kb in keys[i + 1:]:
                mode = _same_curve(curves[ka], curves[kb], tol * scale)
                if mode is not None:
                    found.append(ConformingEdge(ka[0], ka[1], kb[0], kb[1], mode == "reversed"))
        self.conforming = found
        return found

    def dofs(self) -> DofMap:
        if self._dofs is None:
            self._dofs = self._build_dofs()
        return self._dofs

    def _build_dofs(self) -> DofMap:
        sizes = [E.patch.num_basis for E in self.entries]
        offs = np.concatenate([[0], np.cumsum(sizes)])
        uf = _UnionFind(int(offs[-1]))
        for E, o in zip(self.entries, offs):
            P = E.patch
            for e in EDGES:
                pts = P.edge_curve(e).control_points
                if np.ptp(pts, axis=0).max() < 1e-12 * max(1.0, np.abs(pts).max()):
                    idx = P.edge_indices(e) + o  # degenerate edge: one point
                    for j in idx[1:]:
                        uf.union(int(idx[0]), int(j))
        for ce in self.find_conforming():
            ia = self.entries[ce.a].patch.edge_indices(ce.edge_a) + offs[ce.a]
            ib = self.entries[ce.b].patch.edge_indices(ce.edge_b) + offs[ce.b]
            if ce.reversed:
                ib = ib[::-1]
            for i, j in zip(ia, ib):
                uf.union(int(i), int(j))
        active = np.concatenate([E.active_mask() for E in self.entries])
        roots = np.array([uf.find(i) for i in range(len(active))])
        root_active = np.zeros(len(active), dtype=bool)
        np.logical_or.at(root_active, roots, active)
        number = -np.ones(len(active), dtype=int)
        n = 0
        for r in np.unique(roots[root_active[roots]]):
            number[r] = n
            n += 1
        glob = np.where(root_active[roots], number[roots], -1)
        local = [glob[offs[k]:offs[k + 1]] for k in range(len(self.entries))]
        return DofMap(local, n)


# ---------------------------------------------------------------------------
# standard constructions
# ---------------------------------------------------------------------------

def build_boundary_type(layer, background: NurbsPatch, keep: str | None = None,
                        material=None, fit_tol: float | None = None) -> UnionModel:
    """Layer along a boundary curve coupled to a background trimmed by its target.

    The kept background region is the one beyond the layer's target curve;
    ``keep`` ("interior" or "exterior") is checked against the orientation of
    a closed target.
    """
    target = layer.patch.edge_curve("v1")
    if keep is not None:
        if keep not in ("interior", "exterior"):
            raise ValueError("keep must be 'interior' or 'exterior'")
        if target.is_closed:
            inner = target.signed_area() > 0
            if inner != (keep == "interior"):
                raise PreconditionError(f"layer orientation does not keep the {keep} region")
    m = UnionModel()
    tops = m.add_layer(layer, material)
    m.add_trimmed_bottom(background, [(t, "v1") for t in tops], material, fit_tol=fit_tol)
    m.audit()
    return m


def _attach_side(m: UnionModel, top: int, bg, material, fit_tol):
    if bg is None:
        return
    target = m.entries[top].patch.edge_curve("v1")
    for e in EDGES:
        if _same_curve(target, bg.edge_curve(e), 1e-12 * max(1.0, float(np.abs(bg.control_net).max()))):
            m.add_patch(bg, material, "outer")
            return
    m.add_trimmed_bottom(bg, [(top, "v1")], material, fit_tol=fit_tol)


def build_interface_type(layer1, layer2, bg1=None, bg2=None, materials=(None, None),
                         fit_tol: float | None = None) -> UnionModel:
    """Two layers extruded to both sides of one interface curve.

    Each background is trimmed by its layer's target and Nitsche-coupled,
    unless one of its edges coincides with the target, in which case it is
    joined conformingly.
    """
    g1, g2 = layer1.patch.edge_curve("v0"), layer2.patch.edge_curve("v0")
    scale = max(1.0, float(np.abs(g1.control_points).max()))
    if _same_curve(g1, g2, 1e-12 * scale) != "reversed":
        raise NonconformingInterfaceError("layers must share the interface curve with opposite orientation")
    m = UnionModel()
    t1 = m.add_patch(layer1.patch, materials[0], "layer1")
    t2 = m.add_patch(layer2.patch, materials[1], "layer2")
    _attach_side(m, t1, bg1, materials[0], fit_tol)
    _attach_side(m, t2, bg2, materials[1], fit_tol)
    m.audit()
    return m


def active_dof_map(model: UnionModel) -> DofMap:
    return model.dofs()
