"""Command-line interface: reconstruct, eval, synth, info."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ReconConfig
from .errors import VoroUDFError
from .mesh import read_mesh, write_mesh, write_point_ply
from .metrics import ALL_METRICS, evaluate, write_csv
from .pipeline import reconstruct
from .presets import PRESETS, get_preset
from .udf import GridField, MeshField, field_from_spec, spec_with_bounds

log = logging.getLogger("voroudf")

EXIT_OK, EXIT_ERROR, EXIT_WARN = 0, 1, 2
MESH_SUFFIXES = (".obj", ".ply")


def _setup_logging():
    level = os.environ.get("VOROUDF_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _metrics_arg(text):
    names = tuple(t.strip() for t in text.split(",") if t.strip())
    bad = [n for n in names if n not in ALL_METRICS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown metrics {bad}; choose from {','.join(ALL_METRICS)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="voroudf", description="Mesh reconstruction from unsigned distance fields.")
    ap.add_argument("--version", action="version", version=f"voroudf {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("reconstruct", help="reconstruct a mesh from a UDF")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="ground-truth mesh (.obj/.ply) or analytic field spec (.json)")
    src.add_argument("--analytic", help="named analytic preset (see `synth --list`)")
    src.add_argument("--grid", help="sampled UDF grid file")
    r.add_argument("--out", required=True, help="output mesh path (.obj/.ply)")
    r.add_argument("--config", help="JSON config; missing keys take defaults")
    r.add_argument("--seeds", type=int, help="seed count N")
    r.add_argument("--delta", type=float, help="inner-loop stop threshold")
    r.add_argument("--threads", type=int, help="worker count; 1 is bitwise deterministic")
    r.add_argument("--rng-seed", type=int, help="random seed")
    r.add_argument("--manifest", help="manifest path (default: <out>.manifest.json)")
    r.add_argument("--json", action="store_true", help="print the manifest to stdout")

    e = sub.add_parser("eval", help="compare a mesh (or a directory of meshes) with a reference")
    e.add_argument("--input", required=True, help="mesh file or directory")
    e.add_argument("--reference", required=True, help="reference mesh file or directory (paired by file stem)")
    e.add_argument("--locus", help="ground-truth non-manifold locus point PLY for NM-CD")
    e.add_argument("--metrics", type=_metrics_arg, default=ALL_METRICS, help="comma list, e.g. cd,td")
    e.add_argument("--samples", type=int, default=100_000, help="surface samples per mesh")
    e.add_argument("--rng-seed", type=int, default=0)
    e.add_argument("--out", help="report path (.json for a single pair, .csv in batch mode)")
    e.add_argument("--json", action="store_true", help="print the report as JSON")

    s = sub.add_parser("synth", help="emit an analytic test field and its non-manifold locus")
    s.add_argument("--preset", help="preset name")
    s.add_argument("--list", action="store_true", help="list presets")
    s.add_argument("--out", default=".", help="output directory")
    s.add_argument("--locus-samples", type=int, default=2000)
    s.add_argument("--reference", action="store_true", help="also write the ground-truth mesh")
    s.add_argument("--json", action="store_true")

    i = sub.add_parser("info", help="print defaults or describe a mesh / manifest")
    i.add_argument("--input", help="mesh or manifest file")
    i.add_argument("--config", help="config file to merge over defaults")
    i.add_argument("--json", action="store_true")
    return ap


def _load_field(args):
    if args.analytic:
        return get_preset(args.analytic).field(), {"analytic": args.analytic}
    if args.grid:
        return GridField.load(args.grid), {"grid": str(args.grid)}
    path = Path(args.input)
    if path.suffix.lower() == ".json":
        return field_from_spec(json.loads(path.read_text())), {"field_spec": str(path)}
    return MeshField(read_mesh(path)), {"mesh": str(path)}


def _effective_config(args) -> ReconConfig:
    cfg = ReconConfig.load(args.config) if getattr(args, "config", None) else ReconConfig()
    over = {}
    for flag, key in (("seeds", "seed_count"), ("delta", "delta"), ("threads", "threads"),
                      ("rng_seed", "rng_seed")):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    return cfg.replace(**over) if over else cfg


def cmd_reconstruct(args) -> int:
    cfg = _effective_config(args)
    out = Path(args.out)
    if out.suffix.lower() not in MESH_SUFFIXES:
        raise VoroUDFError(f"output must end in .obj or .ply, got {out.name!r}")
    field, inputs = _load_field(args)
    rec = reconstruct(field, cfg, inputs)
    write_mesh(rec.mesh, out)
    man_path = Path(args.manifest) if args.manifest else out.with_name(out.name + ".manifest.json")
    man_path.write_text(rec.manifest.to_json())
    man_path.with_name(man_path.name.replace(".json", "") + ".timings.json").write_text(
        rec.manifest.timings_json())
    if args.json:
        sys.stdout.write(rec.manifest.to_json())
    else:
        c = rec.manifest.counters
        print(f"wrote {out}: {c['faces']} faces, {c['vertices']} vertices, "
              f"{c['residual_tets']} residual tets, {len(rec.manifest.warnings)} warnings")
    return EXIT_WARN if rec.manifest.flagged else EXIT_OK


def _pairs(inp: Path, ref: Path):
    if inp.is_dir() != ref.is_dir():
        raise VoroUDFError("--input and --reference must both be files or both be directories")
    if not inp.is_dir():
        return [(inp.stem, inp, ref)]
    refs = {p.stem: p for p in sorted(ref.iterdir()) if p.suffix.lower() in MESH_SUFFIXES}
    pairs = [(p.stem, p, refs[p.stem]) for p in sorted(inp.iterdir())
             if p.suffix.lower() in MESH_SUFFIXES and p.stem in refs]
    if not pairs:
        raise VoroUDFError(f"no meshes in {inp} with a same-stem reference in {ref}")
    return pairs


def cmd_eval(args) -> int:
    pairs = _pairs(Path(args.input), Path(args.reference))
    locus = read_mesh(args.locus).vertices if args.locus else None
    rows = []
    for name, a, b in pairs:
        rep = evaluate(read_mesh(a), read_mesh(b), metrics=args.metrics, n_samples=args.samples,
                       rng_seed=args.rng_seed, reference_locus=locus)
        rows.append((name, rep))
    batch = Path(args.input).is_dir()
    if batch:
        write_csv(rows, args.out or sys.stdout, metrics=args.metrics)
    else:
        rep = rows[0][1]
        if args.out:
            Path(args.out).write_text(rep.to_json())
        if args.json or not args.out:
            sys.stdout.write(rep.to_json())
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.list or not args.preset:
        if args.json:
            print(json.dumps({k: p.description for k, p in PRESETS.items()}, indent=2))
        else:
            for k, p in PRESETS.items():
                tags = [t for t in ("closed", "open_boundary", "thin_plate") if getattr(p, t)]
                print(f"{k:14s} {p.description}" + (f"  [{', '.join(tags)}]" if tags else ""))
        return EXIT_OK
    p = get_preset(args.preset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec_path = out / f"{p.name}.json"
    spec_path.write_text(json.dumps(spec_with_bounds(p.field()), indent=2, sort_keys=True) + "\n")
    locus = p.locus(args.locus_samples)
    locus_path = out / f"{p.name}.locus.ply"
    write_point_ply(locus, locus_path)
    written = {"field": str(spec_path), "locus": str(locus_path), "locus_points": int(len(locus))}
    if args.reference:
        ref_path = out / f"{p.name}.ref.ply"
        write_mesh(p.reference(), ref_path)
        written["reference"] = str(ref_path)
    print(json.dumps(written, indent=2) if args.json else "\n".join(f"{k}: {v}" for k, v in written.items()))
    return EXIT_OK


def cmd_info(args) -> int:
    if not args.input:
        cfg = ReconConfig.load(args.config) if args.config else ReconConfig()
        print(cfg.to_json())
        return EXIT_OK
    path = Path(args.input)
    if path.suffix.lower() == ".json":
        print(json.dumps(json.loads(path.read_text()), indent=2, sort_keys=True))
        return EXIT_OK
    m = read_mesh(path)
    _, inc = m.edge_incidence()
    info = {"vertices": m.n_vertices, "faces": m.n_faces, "components": m.n_components(),
            "euler_characteristic": m.euler_characteristic(),
            "boundary_edges": int(np.sum(inc == 1)), "nonmanifold_edges": int(np.sum(inc >= 3)),
            "diagonal": m.diagonal()}
    print(json.dumps(info, indent=2) if args.json else "\n".join(f"{k}: {v}" for k, v in info.items()))
    return EXIT_OK


COMMANDS = {"reconstruct": cmd_reconstruct, "eval": cmd_eval, "synth": cmd_synth, "info": cmd_info}


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (VoroUDFError, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
