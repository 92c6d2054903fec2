"""Command line: ``ibcm run <case>`` and ``ibcm report <dir>``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .cases import CASES, PLATE_THICKNESS_SWEEP, CaseConfig, ConvergenceReport, run_case
from .errors import IBCMError


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ibcm", description="Boundary-conformal isogeometric benchmarks")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a convergence study")
    run.add_argument("case", nargs="?", choices=CASES, help="benchmark name (or use --config)")
    run.add_argument("--config", help="JSON file with CaseConfig fields")
    run.add_argument("--levels", type=int)
    run.add_argument("--thickness", type=float, help="layer thickness relative to the hole/fiber radius")
    run.add_argument("--degree", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory")
    run.add_argument("--option", action="append", default=[], metavar="KEY=VALUE",
                     help="case option, e.g. method=trimming (repeatable)")
    run.add_argument("-q", "--quiet", action="store_true")
    rep = sub.add_parser("report", help="print the rate table of a finished run")
    rep.add_argument("dir")
    return ap


def _value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _config(args) -> CaseConfig:
    data = {}
    if args.config:
        data = CaseConfig.from_json(args.config).__dict__.copy()
    if args.case:
        data["case"] = args.case
    if "case" not in data:
        raise SystemExit("ibcm run: give a case name or --config")
    for key in ("levels", "thickness", "degree", "seed", "out"):
        v = getattr(args, key)
        if v is not None:
            data[key] = v
    opts = dict(data.get("options", {}))
    for item in args.option:
        k, _, v = item.partition("=")
        opts[k] = _value(v)
    data["options"] = opts
    return CaseConfig(**data)


def _run(args) -> int:
    cfg = _config(args)
    sweep = cfg.case == "plate_hole" and cfg.thickness is None and opts_method(cfg) == "ibcm"
    configs = [cfg]
    if sweep:
        # default thickness sweep, one subdirectory each
        configs = []
        for t in PLATE_THICKNESS_SWEEP:
            d = dict(cfg.__dict__, thickness=t)
            if cfg.out:
                d["out"] = str(Path(cfg.out) / f"t{t:g}")
            configs.append(CaseConfig(**d))
    for c in configs:
        rep = run_case(c)
        print(rep.table())
        print()
    return 0


def opts_method(cfg: CaseConfig) -> str:
    return str(cfg.options.get("method", "ibcm"))


def _report(args) -> int:
    root = Path(args.dir)
    files = sorted(root.rglob("convergence.csv"))
    if not files:
        print(f"no convergence.csv under {root}", file=sys.stderr)
        return 1
    for f in files:
        cfg = f.parent / "config.json"
        name = CaseConfig.from_json(cfg).case if cfg.exists() else f.parent.name
        rep = ConvergenceReport.from_csv(f, name)
        rep.label = str(f.parent.relative_to(root)) if f.parent != root else ""
        print(rep.table())
        print()
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
                        format="%(message)s")
    try:
        return _run(args) if args.command == "run" else _report(args)
    except IBCMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
