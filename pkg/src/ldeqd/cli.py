"""Command-line entry point: ``ldeqd <command> ...``.

Commands
  simulate                       geometry -> k.p operator -> electron/hole states -> emission
  geometry MAP [MAP2]            nanohole statistics (and pair difference)
  fit {peak,power,dolp,lifetime,g2} DATA
  materials {show,validate}

Exit codes: 0 success, 1 usage/config, 2 data, 3 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, emission, geometry, kpcore, materials, specfit
from .eigensolver import EigenSolverError, SolveRequest, save_solution, solve_interior

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger("ldeqd")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SCHEMA_VERSION = 1
MANIFEST_FORMAT = "ldeqd-manifest/1"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, exc, hint, code):
        super().__init__(f"[{stage}] {exc}\n  hint: {hint}")
        self.stage, self.code = stage, code


# --------------------------------------------------------------------------
# run configuration

# section -> key -> default; None means "unset" (TOML has no null)
DEFAULTS = {
    "": {"schema_version": SCHEMA_VERSION, "seed": 0, "threads": 1, "output_dir": "ldeqd-run", "database": None},
    "geometry": {
        "source": "parametric",
        "kind": "sloped-lde-dot",
        "depth_nm": 8.45,
        "lateral_nm": 51.0,
        "residual_depth_nm": 3.32,
        "residual_lateral_nm": None,
        "orientation_deg": 0.0,
        "before": None,
        "after": None,
        "center_nm": None,
    },
    "composition": {"dot_alloy": "InGaAs", "dot_x": 0.7, "barrier_alloy": "InAlAs", "barrier_x": 0.7},
    "grid": {"dims": [48, 48, 48], "spacing_nm": [1.55, 1.55, 0.55], "min_margin_nm": 9.0},
    "model": {
        "kind": "kp8",
        "orientation": "111",
        "ordering": "symmetrized",
        "boundary": "dirichlet",
        "spurious": "ep-rescale",
        "ac_target": 1.0,
    },
    "solver": {
        "method": "lobpcg-folded",
        "tol_eV": 1e-5,
        "max_iterations": 600,
        "electron_states": 2,
        "hole_states": 4,
        "edge_offset_meV": 5.0,
    },
    "emission": {"excitonic_offset_meV": 0.0, "reference_transition_eV": None},
}
_FLAG_KEYS = {"seed": "seed", "threads": "threads", "out": "output_dir", "db": "database"}
_PATH_KEYS = {("", "database"), ("", "output_dir"), ("geometry", "before"), ("geometry", "after")}


def _flat(section, key):
    return f"{section}.{key}" if section else key


def load_config(path: Path | None, flags: dict) -> tuple[dict, dict]:
    """Resolve every option; returns (values, sources) keyed by dotted name."""
    raw = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            raw = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.parent

    values, sources = {}, {}
    for section, keys in DEFAULTS.items():
        table = raw if section == "" else raw.get(section, {})
        if section and not isinstance(table, dict):
            raise ConfigError(f"[{section}] must be a table")
        for k, v in keys.items():
            values[_flat(section, k)] = v
            sources[_flat(section, k)] = "default"
        for k, v in table.items():
            if section == "" and k in DEFAULTS and isinstance(v, dict):
                continue
            if k not in keys:
                where = f"[{section}]" if section else "top level"
                raise ConfigError(f"unknown key {k!r} at {where} (allowed: {', '.join(sorted(keys))})")
            if (section, k) in _PATH_KEYS and isinstance(v, str):
                v = str(base / v) if not Path(v).is_absolute() else v
            values[_flat(section, k)] = v
            sources[_flat(section, k)] = "config"
    for k in raw:
        if k not in DEFAULTS[""] and k not in DEFAULTS:
            raise ConfigError(f"unknown top-level key or table {k!r}")
    for flag, key in _FLAG_KEYS.items():
        if flags.get(flag) is not None:
            values[key] = flags[flag]
            sources[key] = "flag"
    _validate(values)
    return values, sources


def _validate(v: dict) -> None:
    if v["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {v['schema_version']} is not supported (expected {SCHEMA_VERSION})")
    src = v["geometry.source"]
    if src not in ("parametric", "heightmaps"):
        raise ConfigError("geometry.source must be 'parametric' or 'heightmaps'")
    if src == "heightmaps":
        for k in ("geometry.before", "geometry.after"):
            if not v[k]:
                raise ConfigError(f"{k} is required when geometry.source = 'heightmaps'")
            if not Path(v[k]).is_file():
                raise ConfigError(f"{k}: file {v[k]} does not exist")
    elif v["geometry.kind"] not in geometry.SHAPE_KINDS or v["geometry.kind"] == "afm-derived":
        raise ConfigError(f"geometry.kind must be 'inverted-triangular-pyramid' or 'sloped-lde-dot'")
    if v["database"] and not Path(v["database"]).is_file():
        raise ConfigError(f"material database {v['database']} does not exist")
    for k in ("grid.dims", "grid.spacing_nm"):
        if not (isinstance(v[k], list) and len(v[k]) == 3):
            raise ConfigError(f"{k} must be a list of three numbers")
    if any(int(n) < 3 for n in v["grid.dims"]) or any(float(h) <= 0 for h in v["grid.spacing_nm"]):
        raise ConfigError("grid dims must be >= 3 and spacings positive")
    if v["model.kind"] not in ("kp8", "single-band"):
        raise ConfigError("model.kind must be 'kp8' or 'single-band'")
    for k, allowed in (
        ("model.orientation", kpcore.ORIENTATIONS),
        ("model.ordering", kpcore.ORDERINGS),
        ("model.boundary", kpcore.BOUNDARIES),
        ("model.spurious", kpcore.SPURIOUS),
    ):
        if v[k] not in allowed:
            raise ConfigError(f"{k} must be one of {allowed}")
    try:
        SolveRequest(shift=0.0, n_states=int(v["solver.electron_states"]), tol=float(v["solver.tol_eV"]),
                     max_iterations=int(v["solver.max_iterations"]), method=v["solver.method"])
        SolveRequest(shift=0.0, n_states=int(v["solver.hole_states"]))
    except ValueError as exc:
        raise ConfigError(f"[solver] {exc}") from None
    for k in ("seed", "threads"):
        if not isinstance(v[k], int) or v[k] < (1 if k == "threads" else 0):
            raise ConfigError(f"{k} must be a {'positive' if k == 'threads' else 'non-negative'} integer")


def _limit_threads(n):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


# --------------------------------------------------------------------------
# simulate


def _stage(name, hint, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (ConfigError, StageError):
        raise
    except (materials.MaterialError, geometry.HeightMapFormatError, specfit.DataError) as exc:
        raise StageError(name, exc, hint, EXIT_DATA) from exc
    except (geometry.GeometryError, kpcore.AssemblyError, ValueError) as exc:
        raise StageError(name, exc, hint, EXIT_CONFIG) from exc
    except EigenSolverError as exc:
        raise StageError(name, exc, hint, EXIT_NUMERIC) from exc


def _build_grid(v):
    dims, spacing = [int(n) for n in v["grid.dims"]], [float(h) for h in v["grid.spacing_nm"]]
    kw = dict(
        dot_x=float(v["composition.dot_x"]),
        barrier_x=float(v["composition.barrier_x"]),
        min_margin=float(v["grid.min_margin_nm"]),
        dot_ternary=v["composition.dot_alloy"],
        barrier_ternary=v["composition.barrier_alloy"],
    )
    if v["geometry.source"] == "heightmaps":
        h0 = geometry.flatten(geometry.load_heightmap(v["geometry.before"]))
        hf = geometry.flatten(geometry.load_heightmap(v["geometry.after"]))
        center = v["geometry.center_nm"]
        return geometry.rasterize((h0, hf), dims, spacing, center=tuple(center) if center else None, **kw)
    rl = v["geometry.residual_lateral_nm"]
    shape = geometry.ShapeSpec(
        v["geometry.kind"],
        float(v["geometry.depth_nm"]),
        float(v["geometry.lateral_nm"]),
        float(v["geometry.orientation_deg"]),
        float(v["geometry.residual_depth_nm"]) if v["geometry.kind"] == "sloped-lde-dot" else 0.0,
        None if rl is None else float(rl),
    )
    return geometry.rasterize(shape, dims, spacing, **kw)


def _write_manifest(out: Path, manifest: dict) -> None:
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_simulation(values: dict, sources: dict) -> tuple[emission.TransitionReport, dict, int]:
    """Run the pipeline and write artifacts. Returns (report, manifest, exit code).

    On failure a manifest marked ``partial`` lists whatever was written.
    """
    out = Path(values["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        return _pipeline(values, sources, out)
    except StageError as exc:
        _write_manifest(out, {
            "format": MANIFEST_FORMAT,
            "options": _resolved(values, sources),
            "status": f"partial: failed in stage {exc.stage}",
            "artifacts": sorted(f.name for f in out.iterdir() if f.name != "manifest.json"),
        })
        raise


def _resolved(values, sources):
    return {k: {"value": values[k], "source": sources[k]} for k in sorted(values)}


def _pipeline(v: dict, sources: dict, out: Path):
    db = _stage("materials", "check the database file with `ldeqd materials validate`",
                materials.load_material_db, v["database"])
    grid = _stage("geometry", "adjust grid.dims / grid.spacing_nm or the shape parameters", _build_grid, v)
    grid.save(out / "grid.npz")

    opts = kpcore.AssemblyOptions(
        ordering=v["model.ordering"],
        boundary=v["model.boundary"],
        spurious=v["model.spurious"],
        orientation=v["model.orientation"],
        ac_target=float(v["model.ac_target"]),
    )
    dot = db.material(v["composition.dot_alloy"], float(v["composition.dot_x"]))
    ec, ev = materials.band_edges(dot)
    off = float(v["solver.edge_offset_meV"]) * 1e-3
    hint = "raise solver.max_iterations, loosen solver.tol_eV or try another seed"

    def build(band):
        if v["model.kind"] == "kp8":
            return kpcore.assemble_kp8(grid, db, opts)
        return kpcore.assemble_single_band(grid, db, "electron" if band == "electron" else "heavy-hole", opts)

    def solve(op, band):
        req = SolveRequest(
            shift=ec - off if band == "electron" else ev + off,
            n_states=int(v[f"solver.{band}_states"]),
            tol=float(v["solver.tol_eV"]),
            max_iterations=int(v["solver.max_iterations"]),
            method=v["solver.method"],
            seed=int(v["seed"]),
        )
        return solve_interior(op, req), req

    ahint = "reduce grid.dims or check the material parameters"
    op = _stage("assembly", ahint, build, "electron")
    e_sol, e_req = _stage("solve-electron", hint, solve, op, "electron")
    save_solution(e_sol, out / "electron.npz")
    if v["model.kind"] != "kp8":
        op = _stage("assembly", ahint, build, "hole")
    h_sol, h_req = _stage("solve-hole", hint, solve, op, "hole")
    del op
    save_solution(h_sol, out / "hole.npz")

    provenance = {
        "grid": grid.digest(),
        "database": db.digest(),
        "solver": emission.digest({"electron": e_req.__dict__, "hole": h_req.__dict__, "model": opts.__dict__}),
        "config": emission.digest({k: v[k] for k in sorted(v) if k != "output_dir"}),
        "version": __version__,
    }
    manifest = {
        "format": MANIFEST_FORMAT,
        "options": _resolved(v, sources),
        "provenance": provenance,
        "artifacts": ["grid.npz", "electron.npz", "hole.npz", "report.json", "summary.txt"],
        "electron": {"converged": e_sol.converged, "iterations": e_sol.iterations,
                     "max_residual_eV": float(e_sol.residuals.max())},
        "hole": {"converged": h_sol.converged, "iterations": h_sol.iterations,
                 "max_residual_eV": float(h_sol.residuals.max())},
        "status": "complete",
    }
    if not (e_sol.converged and h_sol.converged):
        raise StageError("emission", "electron or hole states are not converged; solutions are partial",
                         hint, EXIT_NUMERIC)
    ref = v["emission.reference_transition_eV"]
    report = _stage(
        "emission",
        "check that the solver shifts bracket the gap",
        emission.transition_energy,
        e_sol,
        h_sol,
        excitonic_offset=float(v["emission.excitonic_offset_meV"]) * 1e-3,
        reference_energy=None if ref is None else float(ref),
        provenance=provenance,
    )
    (out / "report.json").write_text(report.to_json())
    (out / "summary.txt").write_text(report.summary() + "\n")
    _write_manifest(out, manifest)
    return report, manifest, EXIT_OK


def cmd_simulate(args) -> int:
    flags = {k: getattr(args, k, None) for k in _FLAG_KEYS}
    values, sources = load_config(args.config, flags)
    with _limit_threads(values["threads"]):
        report, _, code = run_simulation(values, sources)
    print(report.summary())
    return code


# --------------------------------------------------------------------------
# geometry


def cmd_geometry(args) -> int:
    hm0 = geometry.load_heightmap(args.maps[0])
    stats0 = geometry.detect_nanoholes(hm0, depth_threshold=args.threshold)
    report = {"unfilled" if len(args.maps) == 2 else "map": stats0.summary()}
    lines = [f"{args.maps[0]}: " + _stats_line(stats0)]
    if len(args.maps) == 2:
        hm1 = geometry.load_heightmap(args.maps[1])
        stats1 = geometry.detect_nanoholes(hm1, depth_threshold=args.threshold)
        report["filled"] = stats1.summary()
        report["effective_height_nm"] = geometry.effective_height_from_stats(stats0, stats1)
        diff = geometry.subtract_heightmaps(geometry.flatten(hm0), geometry.flatten(hm1))
        heights = geometry.effective_qd_heights(diff, stats0)
        report["paired_effective_heights_nm"] = {
            "mean": float(np.mean(heights)) if len(heights) else None,
            "std": float(np.std(heights)) if len(heights) else None,
            "count": int(len(heights)),
        }
        lines.append(f"{args.maps[1]}: " + _stats_line(stats1))
        lines.append(f"effective QD height: {report['effective_height_nm']:.3f} nm")
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            geometry.save_heightmap(diff, Path(args.out) / "difference.txt")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "geometry.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def _stats_line(s) -> str:
    d = s.summary()
    txt = f"{d['count']} holes, density {d['density_cm2']:.3e} cm^-2"
    if d["count"]:
        txt += (f", depth {d['depth_mean_nm']:.2f} +- {d['depth_std_nm']:.2f} nm"
                f", lateral {d['lateral_mean_nm']:.1f} +- {d['lateral_std_nm']:.1f} nm")
    if d.get("low_confidence"):
        txt += " (low confidence: threshold at or below the roughness)"
    return txt


# --------------------------------------------------------------------------
# fit


def cmd_fit(args) -> int:
    kind = {"peak": "spectrum", "power": "power", "dolp": "polarization", "lifetime": "decay", "g2": "coincidence"}
    extra = {"period": args.period} if args.what == "g2" else {}
    ds = specfit.load_dataset(args.data, kind=kind[args.what], **extra)
    if args.what == "peak":
        res = specfit.fit_gaussian_peak(ds, window=args.window, model=args.model)
    elif args.what == "power":
        res = specfit.fit_power_law(ds.power, ds.intensity)
    elif args.what == "dolp":
        res = specfit.fit_dolp(ds.angle_deg, ds.intensity)
    elif args.what == "lifetime":
        res = specfit.fit_monoexp(ds, fit_start=args.fit_start)
    else:
        res = specfit.fit_g2_pulsed(ds)
    print(res.to_text(), end="")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / f"fit_{args.what}.json").write_text(res.to_json())
    return EXIT_OK if res.converged else EXIT_NUMERIC


# --------------------------------------------------------------------------
# materials


def cmd_materials(args) -> int:
    db = materials.load_material_db(args.db)
    if args.action == "validate":
        n_b, n_t = len(db.binaries), len(db.ternaries)
        print(f"ok: {n_b} binaries, {n_t} ternaries, sha256 {db.digest()}")
        return EXIT_OK
    if args.name is None:
        names = list(db.binaries) + [f"{t} (x=...)" for t in db.ternaries]
        print("\n".join(names))
        return EXIT_OK
    p = db.material(args.name, args.x)
    ec, ev = materials.band_edges(p)
    print(f"{p.name}")
    for k, val in p.values().items():
        print(f"  {k:<14} {val:.6g}")
    print(f"  {'Ec':<14} {ec:.6g}\n  {'Ev':<14} {ev:.6g}")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration (TOML)")
    common.add_argument("--seed", type=int, help="seed for solver start vectors")
    common.add_argument("--threads", type=int, help="BLAS/OpenMP thread limit")
    common.add_argument("--out", help="output directory")
    common.add_argument("--db", help="material database file (INI)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="ldeqd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"ldeqd {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="electron/hole states and emission wavelength")
    s.add_argument("config_path", nargs="?", type=Path, help="run configuration (same as --config)")
    s.set_defaults(func=cmd_simulate)

    g = sub.add_parser("geometry", parents=[common], help="nanohole statistics from AFM height maps")
    g.add_argument("maps", nargs="+", help="height map, or unfilled and filled maps")
    g.add_argument("--threshold", type=float, help="depth threshold in nm (default: from roughness)")
    g.set_defaults(func=cmd_geometry)

    f = sub.add_parser("fit", help="spectroscopy fits")
    fsub = f.add_subparsers(dest="what", required=True)
    for name, helptext in (
        ("peak", "Gaussian linewidth on the energy axis"),
        ("power", "power-law exponent"),
        ("dolp", "degree of linear polarization"),
        ("lifetime", "monoexponential decay"),
        ("g2", "pulsed second-order autocorrelation"),
    ):
        q = fsub.add_parser(name, parents=[common], help=helptext)
        q.add_argument("data", help="two-column dataset file")
        if name == "peak":
            q.add_argument("--window", type=float, nargs=2, metavar=("LO", "HI"))
            q.add_argument("--model", default="gaussian", choices=specfit.PEAK_MODELS)
        if name == "lifetime":
            q.add_argument("--fit-start", type=float, help="start of fit window, ns")
        if name == "g2":
            q.add_argument("--period", type=float, help="repetition period, ns (overrides the file header)")
        q.set_defaults(func=cmd_fit)

    m = sub.add_parser("materials", help="inspect or validate the material database")
    msub = m.add_subparsers(dest="action", required=True)
    ms = msub.add_parser("show", parents=[common])
    ms.add_argument("name", nargs="?")
    ms.add_argument("--x", type=float, help="alloy composition for ternaries")
    mv = msub.add_parser("validate", parents=[common])
    mv.add_argument("path", nargs="?", help="database to validate (default: --db or bundled)")
    for q in (ms, mv):
        q.set_defaults(func=cmd_materials)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.command == "simulate" and args.config_path is not None:
        if args.config is not None:
            print("config error: give the config either positionally or with --config", file=sys.stderr)
            return EXIT_CONFIG
        args.config = args.config_path
    if args.command == "materials" and args.action == "validate" and args.path:
        args.db = args.path
    try:
        if args.command == "simulate":
            return args.func(args)  # thread limit comes from the resolved config
        with _limit_threads(args.threads or 1):
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (specfit.DataError, geometry.HeightMapFormatError, materials.MaterialError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except specfit.FitError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (geometry.GeometryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
