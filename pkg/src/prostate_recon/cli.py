"""Command-line interface.

Subcommands mirror the pipeline stages and exchange plain files::

    prostate-recon protocol validate|convert PROTOCOL
    prostate-recon slice        --protocol P (--mesh M | --generic-dims W,H,D) --out DIR
    prostate-recon register     --reference DIR/reference_model.json --annotations ADIR --out DIR
    prostate-recon reconstruct  --registered DIR/registered.json --out DIR
    prostate-recon mark-slides  --reference DIR/reference_model.json --ids 3L1 5R2 --out DIR
    prostate-recon pipeline     (all of the above in one run)

Options may also come from ``--config run.json`` (keys are the long option
names with dashes replaced by underscores); command-line flags win. Exit
status: 0 success, 1 unreadable or malformed input, 2 validation or
geometric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .annotations import SlideMapping, parse_geojson_annotations, resolve_mapping
from .errors import ConfigError, DomainError, InputError, MissingAnnotationsError
from .geometry import AffineTransform3D, apply_transform, read_mesh
from .protocol import fragment_ids, parse_protocol, serialize_protocol
from .reconstruction import (CONVEX_HULL, GAUSSIAN_SPLATTER, LINEAR_EXTRUSION, SplatterConfig,
                             export_reconstructions, mark_slides, reconstruct)
from .registration import CpdConfig, parse_registered, register_slide, serialize_registered
from .slicing import (build_reference_model, export_reference_obj, parse_reference_model,
                      serialize_reference_model)
from .synthetic import generic_model

log = logging.getLogger("prostate_recon")

METHOD_NAMES = {"hull": CONVEX_HULL, "splatter": GAUSSIAN_SPLATTER, "extrusion": LINEAR_EXTRUSION}

REFERENCE_JSON = "reference_model.json"
REFERENCE_OBJ_DIR = "reference_obj"
REGISTERED_JSON = "registered.json"
REGISTERED_OBJ_DIR = "registered_obj"
REPORT_JSON = "registration_report.json"
RECON_DIR = "reconstruction"
RECON_SUMMARY = "reconstruction_summary.json"


# ---------------------------------------------------------------------------
# configuration


@dataclass
class PipelineConfig:
    out: str | None = None
    protocol: str | None = None
    mesh: str | None = None
    generic_dims: tuple[float, float, float] | None = None
    rotate: tuple[float, float, float] = (0.0, 0.0, 0.0)
    mesh_scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    apex_offset: float | None = None
    base_offset: float | None = None
    reference: str | None = None
    annotations: str | None = None
    manifest: str | None = None
    annotation_scale: float = 1.0
    flip_y: bool = False
    strict: bool = True
    per: str = "slide"
    cpd: CpdConfig = field(default_factory=CpdConfig)
    registered: str | None = None
    methods: tuple[str, ...] = ("hull", "splatter", "extrusion")
    splatter: SplatterConfig = field(default_factory=SplatterConfig)
    ids: tuple[str, ...] = ()
    label: str = "tumor-positive"

    def to_dict(self) -> dict:
        return asdict(self)


def _floats(text, n: int, what: str, broadcast: bool = False) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        vals = [float(v) for v in text]
    else:
        try:
            vals = [float(v) for v in str(text).split(",")]
        except ValueError:
            raise ConfigError(f"{what}: expected {n} comma-separated numbers, got {text!r}") from None
    if broadcast and len(vals) == 1:
        vals = vals * n
    if len(vals) != n:
        raise ConfigError(f"{what}: expected {n} numbers, got {len(vals)}")
    return tuple(vals)


def _merge(args: argparse.Namespace) -> dict:
    """Flag values over config-file values; ``None`` means "not given"."""
    merged = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc.msg})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        merged.update(doc)
    for key, value in vars(args).items():
        if key in ("config", "func", "command", "action") or value is None:
            continue
        merged[key] = value
    return merged


def build_config(args: argparse.Namespace) -> PipelineConfig:
    o = _merge(args)
    if "scale" in o:  # config-file spelling of --scale
        o["annotation_scale"] = o.pop("scale")
    known = {"out", "protocol", "mesh", "generic_dims", "rotate", "mesh_scale", "apex_offset",
             "base_offset", "reference", "annotations", "manifest", "mpp", "annotation_scale",
             "flip_y", "lenient", "per", "target_points", "outlier_weight", "max_iters",
             "sigma_tolerance", "restarts", "restart_step_deg", "iou_resolution", "registered",
             "method", "radius_factor", "min_normal_sigma", "splat_tessellation", "ids", "label",
             "verbose"}
    unknown = sorted(set(o) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    if "mpp" in o and "annotation_scale" in o:
        raise ConfigError("give either --mpp or --scale, not both")
    try:
        cpd = CpdConfig(
            target_points=int(o.get("target_points", 500)),
            outlier_weight=float(o.get("outlier_weight", 0.0)),
            max_iterations=int(o.get("max_iters", 150)),
            sigma_tolerance=float(o.get("sigma_tolerance", 1e-8)),
            rotation_restarts=int(o.get("restarts", 8)),
            restart_step_deg=float(o.get("restart_step_deg", 45.0)),
            iou_resolution=int(o.get("iou_resolution", 512)))
        splat = SplatterConfig(
            radius_factor=float(o.get("radius_factor", 2.0)),
            min_normal_sigma_mm=(float(o["min_normal_sigma"])
                                 if o.get("min_normal_sigma") is not None else None),
            tessellation=tuple(int(v) for v in _floats(o.get("splat_tessellation", "16,32"), 2,
                                                       "--splat-tessellation")))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    methods = tuple(o.get("method") or ("hull", "splatter", "extrusion"))
    bad = [m for m in methods if m not in METHOD_NAMES]
    if bad:
        raise ConfigError(f"unknown reconstruction method(s): {', '.join(bad)}")
    scale = float(o["mpp"]) / 1000.0 if "mpp" in o else float(o.get("annotation_scale", 1.0))
    if not scale > 0:
        raise ConfigError("annotation scale must be positive")
    per = o.get("per", "slide")
    if per not in ("slide", "annotation"):
        raise ConfigError("--per must be 'slide' or 'annotation'")
    return PipelineConfig(
        out=o.get("out"), protocol=o.get("protocol"), mesh=o.get("mesh"),
        generic_dims=_floats(o["generic_dims"], 3, "--generic-dims") if o.get("generic_dims")
        else None,
        rotate=_floats(o.get("rotate", "0,0,0"), 3, "--rotate"),
        mesh_scale=_floats(o.get("mesh_scale", "1"), 3, "--mesh-scale", broadcast=True),
        apex_offset=_opt_float(o.get("apex_offset")), base_offset=_opt_float(o.get("base_offset")),
        reference=o.get("reference"), annotations=o.get("annotations"),
        manifest=o.get("manifest"), annotation_scale=scale, flip_y=bool(o.get("flip_y", False)),
        strict=not bool(o.get("lenient", False)), per=per, cpd=cpd,
        registered=o.get("registered"), methods=methods, splatter=splat,
        ids=tuple(o.get("ids") or ()), label=str(o.get("label", "tumor-positive")))


def _opt_float(v):
    return None if v is None else float(v)


# ---------------------------------------------------------------------------
# file helpers


def _read_text(path: str | Path, what: str) -> str:
    if path is None:
        raise ConfigError(f"no {what} given")
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {what} {path}: {exc.strerror}") from None


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Collects written files, input hashes and stage timings for the manifest."""

    def __init__(self, command: str, out: Path, cfg: PipelineConfig):
        self.command = command
        self.out = out
        self.cfg = cfg
        self.inputs: dict[str, str] = {}
        self.outputs: list[Path] = []
        self.timings: dict[str, float] = {}

    def input(self, path) -> None:
        p = Path(path)
        if p.is_file():
            self.inputs[str(p)] = _sha256(p)

    def write(self, rel: str, content: str | bytes) -> Path:
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(content, bytes):
            path.write_bytes(content)
        else:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(content)
        self.outputs.append(path)
        return path

    def stage(self, name: str):
        run = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[name] = round(time.perf_counter() - self.t0, 6)

        return _Timer()

    def manifest(self, status: str, failed_stage: str | None = None) -> Path:
        import numba
        import scipy

        doc = {
            "command": self.command,
            "status": status,
            "failed_stage": failed_stage,
            "config": self.cfg.to_dict(),
            "versions": {"prostate_recon": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__,
                         "numba": numba.__version__},
            "timings_s": self.timings,
            "inputs": self.inputs,
            "outputs": {str(p.relative_to(self.out)): _sha256(p) for p in sorted(self.outputs)},
        }
        path = self.out / f"manifest_{self.command}.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=list) + "\n")
        return path


def _out_dir(cfg: PipelineConfig) -> Path:
    if not cfg.out:
        raise ConfigError("no output directory given (--out)")
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


# ---------------------------------------------------------------------------
# stages


def stage_slice(cfg: PipelineConfig, run: Run):
    proto = parse_protocol(_read_text(cfg.protocol, "protocol"))
    run.input(cfg.protocol)
    if (cfg.mesh is None) == (cfg.generic_dims is None):
        raise ConfigError("give exactly one of --mesh or --generic-dims")
    if cfg.mesh is not None:
        try:
            mesh = read_mesh(cfg.mesh)
        except OSError as exc:
            raise InputError(f"cannot read mesh {cfg.mesh}: {exc.strerror}") from None
        run.input(cfg.mesh)
    else:
        mesh = generic_model(cfg.generic_dims)
    # rotate into the reference frame first, then scale along its axes
    tf = AffineTransform3D.scaling(cfg.mesh_scale) @ AffineTransform3D.from_euler_deg(*cfg.rotate)
    if not np.allclose(tf.linear, np.eye(3)):
        mesh = apply_transform(mesh, tf)
    model = build_reference_model(mesh, proto, cfg.apex_offset, cfg.base_offset)
    run.write(REFERENCE_JSON, serialize_reference_model(model))
    for name, text in sorted(export_reference_obj(model).items()):
        run.write(f"{REFERENCE_OBJ_DIR}/{name}", text)
    print(f"{len(model.polygons)} reference polygons for case {model.case_id}")
    for region in ("apex", "central", "base"):
        th = sorted({round(p.thickness_mm, 6) for p in model.polygons if p.region.kind == region})
        if th:
            print(f"  {region:8s} thickness (mm): {', '.join(f'{t:g}' for t in th)}")
    return model


def _load_model(path, run: Run):
    text = _read_text(path, "reference model")
    run.input(path)
    try:
        return parse_reference_model(text)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: malformed reference model ({exc})") from None


def _load_annotations(cfg: PipelineConfig, run: Run) -> dict:
    if cfg.annotations is None:
        if cfg.strict:
            raise MissingAnnotationsError("no annotation directory given (--annotations)")
        return {}
    adir = Path(cfg.annotations)
    if not adir.is_dir():
        raise InputError(f"annotation directory {adir} does not exist")
    files = sorted(adir.glob("*.geojson"))
    if not files:
        if cfg.strict:
            raise MissingAnnotationsError(f"no *.geojson files in {adir}")
        log.warning("no *.geojson files in %s; nothing to register", adir)
    out = {}
    for f in files:
        run.input(f)
        out[f.name] = parse_geojson_annotations(_read_text(f, "annotations"), f.stem,
                                                cfg.annotation_scale, cfg.flip_y)
    return out


def stage_register(cfg: PipelineConfig, run: Run, model=None):
    model = model if model is not None else _load_model(cfg.reference, run)
    files = _load_annotations(cfg, run)
    mapping = None
    if cfg.manifest:
        mapping = SlideMapping.from_json(_read_text(cfg.manifest, "slide manifest"))
        run.input(cfg.manifest)
    pairs = resolve_mapping(files, model, mapping, strict=cfg.strict)
    results = [register_slide(s, ref, cfg.cpd, model.case_id) for s, ref in pairs]
    text, objs = serialize_registered(results, per=cfg.per)
    run.write(REGISTERED_JSON, text)
    for name, obj in sorted(objs.items()):
        run.write(f"{REGISTERED_OBJ_DIR}/{name}", obj)

    rows = [{"polygon": r.polygon_name, "slide": r.slide_name, "iou": r.iou,
             "restart_angle_deg": r.restart_angle, "iterations": r.iterations_used,
             "converged": r.converged} for r in results]
    ious = np.array([r.iou for r in results])
    summary = {"n": len(results), "mean_iou": float(ious.mean()) if len(ious) else None,
               "std_iou": float(ious.std()) if len(ious) else None, "slides": rows}
    run.write(REPORT_JSON, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"{'polygon':10s} {'slide':16s} {'IoU':>6s} {'restart':>7s} {'iters':>5s}")
    for r in rows:
        flag = "" if r["converged"] else "  (max iterations)"
        print(f"{r['polygon']:10s} {r['slide']:16s} {r['iou']:6.3f} "
              f"{r['restart_angle_deg']:7.0f} {r['iterations']:5d}{flag}")
    if len(ious):
        print(f"mean IoU {ious.mean():.3f} ± {ious.std():.3f} over {len(ious)} slides")
    else:
        print("no slides registered")
    return results


def stage_mark(cfg: PipelineConfig, run: Run, model=None):
    model = model if model is not None else _load_model(cfg.reference, run)
    results = mark_slides(model, list(cfg.ids), cfg.label)
    text, _ = serialize_registered(results)
    run.write(REGISTERED_JSON, text)
    print(f"marked {len(results)} slides as {cfg.label!r}")
    return results


def stage_reconstruct(cfg: PipelineConfig, run: Run, results=None):
    if results is None:
        text = _read_text(cfg.registered, "registered results")
        run.input(cfg.registered)
        try:
            results = parse_registered(text)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InputError(f"{cfg.registered}: malformed registered results ({exc})") from None
    case_id = results[0].case_id if results else "case"
    meshes = reconstruct(results, [METHOD_NAMES[m] for m in cfg.methods], cfg.splatter)
    files, summary = export_reconstructions(meshes, case_id)
    for name, text in sorted(files.items()):
        run.write(f"{RECON_DIR}/{name}", text)
    run.write(RECON_SUMMARY, summary)
    for m in meshes:
        print(f"{m.method:17s} {m.class_label:16s} {m.volume:12.3f} mm^3  "
              f"({len(m.provenance)} annotations)")
    return meshes


# ---------------------------------------------------------------------------
# commands


def cmd_protocol(args) -> int:
    path = args.input
    p = parse_protocol(_read_text(path, "protocol"))
    if args.action == "validate":
        ids = fragment_ids(p)
        by_region: dict[str, int] = {}
        for _, region in ids:
            by_region[region.kind] = by_region.get(region.kind, 0) + 1
        print(f"{path}: valid protocol for case {p.case_id}")
        print(f"  {len(ids)} fragments: " + ", ".join(f"{k} {v}" for k, v in by_region.items()))
        print(f"  apex offset {p.apex.offset_mm:g} mm, base offset {p.base.offset_mm:g} mm, "
              f"{p.central_count} central slices")
        return 0
    text = serialize_protocol(p)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _staged(command: str, stages):
    def run_command(args) -> int:
        cfg = build_config(args)
        out = _out_dir(cfg)
        run = Run(command, out, cfg)
        current = None
        try:
            state = None
            for name, fn in stages:
                current = name
                with run.stage(name):
                    state = fn(cfg, run, state)
        except Exception:
            run.manifest("failed", current)
            raise
        run.manifest("ok")
        return 0
    return run_command


def _pipeline_stages():
    def slice_(cfg, run, _):
        return stage_slice(cfg, run)

    def register(cfg, run, model):
        results = stage_mark(cfg, run, model) if cfg.ids else stage_register(cfg, run, model)
        return results

    def recon(cfg, run, results):
        return stage_reconstruct(cfg, run, results)

    return [("slice", slice_), ("register", register), ("reconstruct", recon)]


COMMANDS = {
    "slice": _staged("slice", [("slice", lambda c, r, _: stage_slice(c, r))]),
    "register": _staged("register", [("register", lambda c, r, _: stage_register(c, r))]),
    "reconstruct": _staged("reconstruct",
                           [("reconstruct", lambda c, r, _: stage_reconstruct(c, r))]),
    "mark-slides": _staged("mark-slides", [("mark-slides", lambda c, r, _: stage_mark(c, r))]),
    "pipeline": _staged("pipeline", _pipeline_stages()),
}


# ---------------------------------------------------------------------------
# argument parsing


def _add_slice_args(p):
    g = p.add_argument_group("slicing")
    g.add_argument("--protocol", help="sectioning protocol JSON")
    g.add_argument("--mesh", help="surface model (OBJ, PLY or STL)")
    g.add_argument("--generic-dims", metavar="W,H,D",
                   help="use the generic model with these dimensions in mm instead of --mesh")
    g.add_argument("--rotate", metavar="X,Y,Z", help="Euler rotation of the mesh in degrees")
    g.add_argument("--mesh-scale", metavar="S|SX,SY,SZ", help="mesh scale after rotation")
    g.add_argument("--apex-offset", type=float, help="apex region thickness (mm)")
    g.add_argument("--base-offset", type=float, help="base region thickness (mm)")


def _add_register_args(p, with_reference=True):
    g = p.add_argument_group("registration")
    if with_reference:
        g.add_argument("--reference", help="reference model JSON from 'slice'")
    g.add_argument("--annotations", help="directory of <fragment-id>.geojson files")
    g.add_argument("--manifest", help="JSON list of {file, polygon} assignments")
    units = g.add_mutually_exclusive_group()
    units.add_argument("--mpp", type=float, help="microns per pixel of annotation coordinates")
    units.add_argument("--scale", type=float, dest="annotation_scale",
                       help="millimetres per annotation coordinate unit (default 1)")
    g.add_argument("--flip-y", action="store_true", default=None,
                   help="negate annotation y (image rows point down)")
    g.add_argument("--lenient", action="store_true", default=None,
                   help="skip unmatched annotation files instead of failing")
    g.add_argument("--per", choices=("slide", "annotation"), help="OBJ export granularity")
    g.add_argument("--target-points", type=int)
    g.add_argument("--outlier-weight", type=float)
    g.add_argument("--max-iters", type=int)
    g.add_argument("--sigma-tolerance", type=float)
    g.add_argument("--restarts", type=int)
    g.add_argument("--restart-step-deg", type=float)
    g.add_argument("--iou-resolution", type=int)


def _add_recon_args(p, with_registered=True):
    g = p.add_argument_group("reconstruction")
    if with_registered:
        g.add_argument("--registered", help="registered results JSON")
    g.add_argument("--method", action="append", choices=sorted(METHOD_NAMES),
                   help="repeatable; default all three")
    g.add_argument("--radius-factor", type=float)
    g.add_argument("--min-normal-sigma", type=float, help="mm; default half the slab thickness")
    g.add_argument("--splat-tessellation", metavar="STACKS,SLICES")


def _add_mark_args(p, with_reference=True):
    if with_reference:
        p.add_argument("--reference", help="reference model JSON from 'slice'")
    p.add_argument("--ids", nargs="*", help="fragment ids of tumour-positive slides")
    p.add_argument("--label", help="class label for the marked slides")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prostate-recon", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("protocol", help="validate or canonicalize a sectioning protocol")
    p.add_argument("action", choices=("validate", "convert"))
    p.add_argument("input")
    p.add_argument("-o", "--output", help="write canonical JSON here (convert)")
    p.set_defaults(func=cmd_protocol)

    def staged(name, help_, *adders):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON run configuration; flags override it")
        sp.add_argument("--out", help="output directory")
        for add in adders:
            add(sp)
        sp.set_defaults(func=COMMANDS[name])

    staged("slice", "virtually slice a surface model", _add_slice_args)
    staged("register", "register slide annotations to reference polygons", _add_register_args)
    staged("reconstruct", "build tumour volumes from registered annotations", _add_recon_args)
    staged("mark-slides", "mark whole slides as tumour-positive", _add_mark_args)
    staged("pipeline", "slice, register (or mark) and reconstruct", _add_slice_args,
           lambda sp: _add_register_args(sp, with_reference=False),
           lambda sp: _add_recon_args(sp, with_registered=False),
           lambda sp: _add_mark_args(sp, with_reference=False))
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
