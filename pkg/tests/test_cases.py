import csv
import json

import numpy as np
import pytest

from ibcm import cli
from ibcm.assembly import BoundaryPiece, Material, ProblemSpec, assemble, solve
from ibcm.cases import (BIMAT, CaseConfig, ConvergenceReport, LevelResult, SingularPointError,
                        bimaterial_alpha, bimaterial_field, exact_bimaterial_disk, exact_flower,
                        exact_lshape, exact_plate_hole, export_fields, flower_source, place_fibers,
                        run_case, sample_patch, solve_level)
from ibcm.conformal import build_layer
from ibcm.coupling import UnionModel
from ibcm.errors import DomainError, SpecError
from ibcm.splines import circle, rectangle_patch

rng = np.random.default_rng(7)


def plane_strain_stress(grad, mat):
    eps = np.stack([grad[:, 0, 0], grad[:, 1, 1], grad[:, 0, 1] + grad[:, 1, 0]], axis=1)
    return eps @ mat.D().T


def fd_grad(f, x, h=1e-6):
    """Central differences of a vector field: (N, m, 2)."""
    cols = []
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def d4(f, x, j, h):
    """Fourth-order central difference of ``f`` along axis ``j``."""
    e = np.zeros(2)
    e[j] = h
    return (8 * (f(x + e) - f(x - e)) - (f(x + 2 * e) - f(x - 2 * e))) / (12 * h)


# --- Kirsch field ----------------------------------------------------------

def test_kirsch_far_field():
    th = np.linspace(0, 2 * np.pi, 50)
    x = 100 * np.column_stack([np.cos(th), np.sin(th)])
    s = exact_plate_hole(x)["stress"]
    assert np.abs(s - [10.0, 0.0, 0.0]).max() < 1e-3 * 10


def test_kirsch_hoop_maximum_and_free_hole():
    s = exact_plate_hole([[0.0, 1.0], [0.0, -1.0]])["stress"]
    assert np.allclose(s[:, 0], 30.0, atol=1e-12)
    th = np.linspace(0, 2 * np.pi, 73)
    n = np.column_stack([np.cos(th), np.sin(th)])
    s = exact_plate_hole(n)["stress"]
    tx = s[:, 0] * n[:, 0] + s[:, 2] * n[:, 1]
    ty = s[:, 2] * n[:, 0] + s[:, 1] * n[:, 1]
    assert max(np.abs(tx).max(), np.abs(ty).max()) < 1e-12


def test_kirsch_displacement_matches_stress():
    r = rng.uniform(1.05, 4, 40)
    th = rng.uniform(0, 2 * np.pi, 40)
    x = np.column_stack([r * np.cos(th), r * np.sin(th)])
    d = exact_plate_hole(x)
    # gradient against finite differences, stress against Hooke's law
    g = fd_grad(lambda y: exact_plate_hole(y)["u"], x)
    assert np.abs(g - d["grad"]).max() < 1e-7
    s = plane_strain_stress(d["grad"], Material(1000.0, 0.3))
    assert np.abs(s - d["stress"]).max() < 1e-10


def test_kirsch_rejects_points_in_hole():
    with pytest.raises(DomainError):
        exact_plate_hole([[0.5, 0.2]])


# --- L-shape -------------------------------------------------------------

def lshape_points(n):
    r = rng.uniform(0.1, 1.0, n)
    th = rng.uniform(0.05, 1.45 * np.pi, n)
    return np.column_stack([r * np.cos(th), r * np.sin(th)])


def test_lshape_is_harmonic():
    x = lshape_points(100)
    lap = sum(d4(lambda y: exact_lshape(y)[1][:, j], x, j, 1e-3) for j in range(2))
    assert np.abs(lap).max() < 1e-8
    g = fd_grad(lambda y: exact_lshape(y)[0][:, None], x)[:, 0]
    assert np.abs(g - exact_lshape(x)[1]).max() < 1e-7


def test_lshape_vanishes_on_corner_edges():
    s = np.linspace(0.01, 1, 20)
    assert np.abs(exact_lshape(np.column_stack([s, 0 * s]))[0]).max() < 1e-15
    assert np.abs(exact_lshape(np.column_stack([0 * s, -s]))[0]).max() < 1e-15


def test_lshape_errors():
    with pytest.raises(SingularPointError):
        exact_lshape([[0.0, 0.0]])
    with pytest.raises(DomainError):
        exact_lshape([[0.5, -0.5]])


# --- bimaterial disk ----------------------------------------------------

def test_bimaterial_boundary_and_interface_conditions():
    a, b = 0.4, 2.0
    assert abs(exact_bimaterial_disk(b)["u_r"][0] - b) < 1e-14
    d = exact_bimaterial_disk(np.array([a, np.nextafter(a, 1.0)]))
    assert abs(d["u_r"][0] - d["u_r"][1]) < 1e-12
    assert abs(d["s_rr"][0] - d["s_rr"][1]) < 1e-10
    assert abs(d["e_rr"][0] - d["e_rr"][1]) > 0.1  # strain jumps with the stiffness
    with pytest.raises(DomainError):
        exact_bimaterial_disk(2.5)


def test_bimaterial_alpha_from_traction_balance():
    # independent oracle: solve the 2x2 system for u = A r (inner), C r + D / r (outer)
    a, b = 0.4, 2.0
    m1, m2 = BIMAT
    M = np.array([[a, -a, -1 / a], [0, b, 1 / b],
                  [2 * (m1.lam + m1.mu), -2 * (m2.lam + m2.mu), 2 * m2.mu / a**2]])
    A, C, D = np.linalg.solve(M, [0.0, b, 0.0])
    assert abs(bimaterial_alpha(a, b, m1, m2) - C) < 1e-12
    assert abs(exact_bimaterial_disk(0.2)["u_r"][0] - 0.2 * A) < 1e-12


def test_bimaterial_field_is_in_equilibrium():
    r = rng.uniform(0.5, 1.9, 30)
    th = rng.uniform(0, 2 * np.pi, 30)
    x = np.column_stack([r * np.cos(th), r * np.sin(th)])
    u, g = bimaterial_field(x)
    assert np.allclose(np.sum(u * x, axis=1) / r, exact_bimaterial_disk(r)["u_r"], atol=1e-12)
    assert np.abs(fd_grad(lambda y: bimaterial_field(y)[0], x) - g).max() < 1e-7
    # div sigma = 0 in the outer material
    sig = lambda y: plane_strain_stress(bimaterial_field(y)[1], BIMAT[1])
    div = d4(sig, x, 0, 1e-3)[:, [0, 2]] + d4(sig, x, 1, 1e-3)[:, [2, 1]]
    assert np.abs(div).max() < 1e-8


def test_flower_source_matches_laplacian():
    x = rng.uniform(-1.2, 1.2, (50, 2))
    h = 1e-4
    lap = sum((exact_flower(x + e)[0] - 2 * exact_flower(x)[0] + exact_flower(x - e)[0]) / h**2
              for e in (np.array([h, 0]), np.array([0, h])))
    assert np.abs(-lap - flower_source(x)).max() < 1e-5


# --- configuration and reports ----------------------------------------------

def test_config_validation_and_json_round_trip(tmp_path):
    for bad in ({"case": "spanner"}, {"case": "flower", "levels": 0}, {"case": "flower", "thickness": -1},
                {"case": "flower", "degree": 1}):
        with pytest.raises(SpecError):
            CaseConfig(**bad)
    cfg = CaseConfig("fiber_composite", levels=2, thickness=0.3, seed=4,
                     materials={"fiber": Material(50.0, 0.2)}, options={"fibers": 3})
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    back = CaseConfig.from_json(p)
    assert back.levels == 2 and back.options == {"fibers": 3}
    assert back.material("fiber", None) == Material(50.0, 0.2)
    assert back.material("matrix", Material(1.0, 0.3)) == Material(1.0, 0.3)


def test_report_rates_and_csv(tmp_path):
    rep = ConvergenceReport("demo")
    for l in range(4):
        rep.add(LevelResult(l, 0.5**l, 10 * 4**l, 3.0 * 8.0**-l, 2.0 * 4.0**-l, 1.0 + l))
    assert np.allclose(rep.rates("errL2")[1:], 3.0) and np.allclose(rep.final_rates, (3.0, 2.0))
    with pytest.raises(ValueError):
        rep.add(LevelResult(4, 1.0, 10_000))
    rep.to_csv(tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as fh:
        head = next(csv.reader(fh))
    assert head[:7] == ["level", "h", "dof", "errL2", "errH1", "rateL2", "rateH1"]
    back = ConvergenceReport.from_csv(tmp_path / "r.csv", "demo")
    assert np.allclose(back.column("errL2"), rep.column("errL2"), rtol=1e-9)
    assert np.array_equal(back.column("dof"), rep.column("dof"))
    assert "demo" in back.table()


# --- export ---------------------------------------------------------------

def constant_solution():
    P = rectangle_patch(0, 2, 0, 1, 3, 2)
    m = UnionModel()
    m.add_patch(P)
    spec = ProblemSpec("poisson", dirichlet=[BoundaryPiece(0, e, g=2.0) for e in ("u0", "u1", "v0", "v1")])
    return solve(assemble(m, spec))


def test_export_constant_solution(tmp_path):
    sol = constant_solution()
    _, act, f = sample_patch(sol, 0, 9)
    assert act.all() and np.abs(f["u"] - 2.0).max() < 1e-12 and np.abs(f["grad"]).max() < 1e-12
    pts = np.column_stack([np.linspace(0.1, 1.9, 5), np.full(5, 0.5)])
    files = export_fields(sol, tmp_path / "out", resolution=9, probes={"line": (pts, "value")})
    assert [p.name for p in files] == ["patch0.vtk", "probe_line.csv"]
    text = files[0].read_text()
    assert "DATASET STRUCTURED_GRID" in text and "DIMENSIONS 9 9 1" in text
    with open(files[1]) as fh:
        rows = list(csv.DictReader(fh))
    assert np.allclose([float(r["u0"]) for r in rows], 2.0, atol=1e-12)


def test_export_to_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        export_fields(constant_solution(), blocker / "sub")


# --- fibers and smoke tests -----------------------------------------------

def test_fiber_placement():
    c = place_fibers(5, 1.0, 0.25, seed=3)
    d = np.linalg.norm(c[:, None] - c[None], axis=2) + np.eye(5) * 99
    assert d.min() > 2 + 2 * 0.25
    assert np.abs(c).max() < 5 - 1.25
    assert np.array_equal(c, place_fibers(5, 1.0, 0.25, seed=3))
    with pytest.raises(SpecError):
        place_fibers(40, 1.0, 0.25, seed=0, max_tries=2000)


def test_wrench_like_smoke():
    # a plate with two holes: clamped at one, pulled at the other
    m = UnionModel()
    mat = Material(200.0, 0.3)
    tops = []
    for c, rad in (((-2.0, 0.0), 0.6), ((2.0, 0.0), 0.4)):
        L = build_layer(circle(c, rad, ccw=False), thickness=0.25).refined(2, 1)
        tops += m.add_layer(L, mat)
    bg = rectangle_patch(-3.2, 3.2, -1.2, 1.2, 16, 6)
    m.add_trimmed_bottom(bg, [(t, "v1") for t in tops], mat)
    m.audit()
    spec = ProblemSpec("elasticity", dirichlet=[BoundaryPiece(tops[0], "v0", g=0.0)],
                       neumann=[BoundaryPiece(tops[1], "v0", g=(0.0, -5.0))])
    sol = solve(assemble(m, spec))
    assert sol.residual < 1e-10 and np.all(np.isfinite(sol.x))
    v = sol.at_points([[2.0, 0.5], [-2.0, 0.7]])
    assert v[0, 1] < 0 and abs(v[0, 1]) > 10 * np.abs(v[1]).max()


@pytest.mark.slow
def test_fiber_seeded_regression():
    cfg = CaseConfig("fiber_composite", levels=2, seed=0)
    rep = run_case(cfg)
    q = rep.column("qoi")
    assert np.allclose(q, [223.7, 199.1], rtol=2e-3)
    assert np.array_equal(rep.column("qoi"), run_case(cfg).column("qoi"))


def test_solve_level_adds_context():
    with pytest.raises(SpecError, match="fiber_composite, level 0"):
        solve_level(CaseConfig("fiber_composite", options={"fibers": 60}), 0)


# --- command line ----------------------------------------------------------

def test_cli_run_and_report(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["run", "bimaterial_disk", "--levels", "2", "--out", str(out), "-q"]) == 0
    assert (out / "convergence.csv").exists() and (out / "level1" / "patch0.vtk").exists()
    assert json.loads((out / "config.json").read_text())["levels"] == 2
    assert any(p.name.startswith("probe_") for p in (out / "level0").iterdir())
    capsys.readouterr()
    assert cli.main(["report", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "bimaterial_disk" in text and len(text.strip().splitlines()) == 4
    assert cli.main(["run", "flower", "--levels", "0", "-q"]) == 2
    assert cli.main(["report", str(tmp_path / "empty")]) == 1
