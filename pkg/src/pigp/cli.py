"""Command line entry point: run, evaluate, baseline, compare, verify-adjoint."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .grid import GridError, build_grid, tag_boundaries
from .problem import SpecError, load_spec, parse_spec, to_jsonable

log = logging.getLogger("pigp")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UsageError(Exception):
    pass


def _scalar(v):
    # YAML 1.1 reads "2e-3" as a string; accept it as a number
    if isinstance(v, str):
        try:
            return float(v)
        except ValueError:
            return v
    return v


def _apply_sets(spec, sets):
    """``--set section.key=value`` overrides, values parsed as YAML scalars."""
    if not sets:
        return spec
    raw = dict(spec.raw)
    for item in sets:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        key, val = item.split("=", 1)
        sec, name = key.split(".", 1)
        section = dict(raw.get(sec) or {})
        section[name] = _scalar(yaml.safe_load(val))
        raw[sec] = section
    return parse_spec(raw)


def _spec(args):
    spec = load_spec(args.spec)
    spec = _apply_sets(spec, getattr(args, "set", None))
    train = {}
    if getattr(args, "seed", None) is not None:
        train["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        train["n_tol"] = args.epochs
    if getattr(args, "threads", None) is not None:
        train["threads"] = args.threads
    return spec.with_overrides(**train) if train else spec


def _run_dir(args, spec, tag: str) -> Path:
    from .io import output_root

    if args.out:
        return Path(args.out)
    return output_root() / f"{spec.name}-{tag}-{spec.config_hash()[:8]}-s{spec.train['seed']}"


def cmd_run(args) -> dict:
    from .io import emit_outputs, ensure_writable
    from .trainer import Trainer

    spec = _spec(args)
    dest = ensure_writable(_run_dir(args, spec, "pigp"))
    threads = int(spec.train["threads"])
    trainer = Trainer(spec, seed=spec.train["seed"], threads=threads)
    result = trainer.run(out_dir=dest, progress=args.progress)
    files = emit_outputs(dest, spec, trainer, result, spec.train["seed"], threads, vtk=not args.no_vtk)
    summary = {"out": str(dest), "epochs": len(result.history)}
    if result.design is not None:
        from .fem import evaluate_design

        ev = evaluate_design(result.design.phases, spec, result.design.grid)
        summary.update(evaluation=ev, gray_total=result.design.gray_total)
        _write_json(dest / "evaluation.json", ev)
    summary["files"] = {k: (str(v) if not isinstance(v, list) else [str(x) for x in v]) for k, v in files.items()}
    return summary


def cmd_evaluate(args) -> dict:
    from .fem import evaluate_design
    from .io import load_design

    spec = load_spec(args.spec)
    grid, phases, _ = load_design(args.design)
    grid = tag_boundaries(grid, spec.boundaries)
    return evaluate_design(phases, spec, grid)


def cmd_baseline(args) -> dict:
    from .fem import evaluate_design, run_simp_baseline
    from .io import ensure_writable, write_design_rasters, write_pgm, cell_image
    from .trainer import Design, gray_fractions

    spec = _spec(args)
    counts = args.resolution or spec.simp["resolution"] or spec.grid["fine"]
    grid = tag_boundaries(build_grid(spec.domain, counts), spec.boundaries)
    res = run_simp_baseline(spec, grid, args.iterations)
    dest = ensure_writable(_run_dir(args, spec, "simp"))
    rho = np.eye(spec.materials.n_phases)[res.phases]
    design = Design(rho, res.phases, gray_fractions(rho), grid)
    write_design_rasters(dest, design)
    write_pgm(dest / "density.pgm", cell_image(grid, res.x))
    from .io import save_design

    save_design(dest / "design.npz", design, spec)
    ev = evaluate_design(res.phases, spec, grid)
    gray = float(np.mean((res.x > 0.1) & (res.x < 0.9)))
    out = {"out": str(dest), "objective_filtered": res.objective, "evaluation": ev, "gray_total": gray}
    _write_json(dest / "evaluation.json", ev)
    with open(dest / "history.csv", "w") as fh:
        fh.write("iteration,objective,volume\n")
        for h in res.history:
            fh.write("%d,%.17g,%.17g\n" % (h["iteration"], h["objective"], h["volume"]))
    return out


def _load_result(path: Path) -> dict:
    path = Path(path)
    ev = json.loads((path / "evaluation.json").read_text())
    gray = None
    run = path / "run.json"
    if run.exists():
        gray = json.loads(run.read_text()).get("gray_total")
    return {"objective": ev.get("objective"), "mass": ev.get("mass"), "cost": ev.get("cost"), "gray": gray}


def cmd_compare(args) -> dict:
    a, b = _load_result(args.results), _load_result(args.baseline)
    rows = []
    for key in ("objective", "mass", "cost", "gray"):
        va, vb = a[key], b[key]
        ratio = va / vb if isinstance(va, (int, float)) and isinstance(vb, (int, float)) and vb else None
        rows.append({"quantity": key, "pigp": va, "baseline": vb, "ratio": ratio})
    if not args.json:
        print(f"{'quantity':<10} {'pigp':>14} {'baseline':>14} {'ratio':>9}")
        for r in rows:
            f = lambda v: "-" if v is None else f"{v:.6g}"  # noqa: E731
            print(f"{r['quantity']:<10} {f(r['pigp']):>14} {f(r['baseline']):>14} {f(r['ratio']):>9}")
    return {"rows": rows}


def cmd_verify_adjoint(args) -> dict:
    from .adjoint import verify_adjoint

    spec = _spec(args)
    counts = tuple(int(c) + 1 for c in args.mesh.lower().split("x"))
    out = {}
    check = verify_adjoint(spec, counts, seed=args.seed or 0, h=args.step)
    out[spec.objective] = {"max_rel_err": check.max_rel_err, "checked": check.n_checked,
                           "excluded": check.n_excluded}
    if spec.objective == "thermo-mechanical-device" and args.isothermal_dT is not None:
        iso = verify_adjoint(spec, counts, seed=args.seed or 0, h=args.step, dT_fixed=args.isothermal_dT)
        out["isothermal-device"] = {"max_rel_err": iso.max_rel_err, "checked": iso.n_checked,
                                    "excluded": iso.n_excluded}
    if not args.json:
        for kind, r in out.items():
            print(f"{kind:<26} max rel err {r['max_rel_err']:.3e} ({r['checked']} checks, {r['excluded']} excluded)")
    return out


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(to_jsonable(obj), indent=2, sort_keys=True, default=str) + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pigp", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, training=True):
        sp.add_argument("spec", help="problem YAML file or bundled problem name")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config entry")
        sp.add_argument("--json", action="store_true", help="print the machine-readable summary")
        if training:
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--threads", type=int)
            sp.add_argument("--out", help="output directory (default: $PIGP_OUTPUT_ROOT/<run>)")

    sp = sub.add_parser("run", help="train a PIGP design")
    common(sp)
    sp.add_argument("--progress", type=int, default=0, help="log every N epochs")
    sp.add_argument("--no-vtk", action="store_true")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("evaluate", help="FEM analysis of a saved design")
    sp.add_argument("design")
    sp.add_argument("spec")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("baseline", help="run the SIMP oracle")
    common(sp)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--resolution", type=int, nargs="+", help="node counts per axis")
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("compare", help="tabulate a PIGP run against a baseline run")
    sp.add_argument("results")
    sp.add_argument("baseline")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("verify-adjoint", help="continuous adjoint vs finite differences")
    common(sp, training=False)
    sp.add_argument("--mesh", default="8x4", help="elements per axis, e.g. 8x4")
    sp.add_argument("--step", type=float, default=1e-4)
    sp.add_argument("--isothermal-dT", type=float, default=100.0)
    sp.add_argument("--threads", type=int)
    sp.set_defaults(func=cmd_verify_adjoint)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or getattr(args, "progress", 0) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None):
        import torch

        torch.set_num_threads(args.threads)
    try:
        result = args.func(args)
    except (SpecError, GridError, UsageError, FileNotFoundError, PermissionError, ValueError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, SpecError):
            err["path"] = exc.path
        print(json.dumps(err), file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "internal": True}), file=sys.stderr)
        return EXIT_INTERNAL
    if getattr(args, "json", False) or args.func in (cmd_run, cmd_evaluate, cmd_baseline):
        print(json.dumps(to_jsonable(result), indent=2, sort_keys=True, default=str, allow_nan=False))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
