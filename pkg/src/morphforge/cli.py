"""Batch command-line interface.

Subcommands cover the individual pipeline stages plus the end-to-end
`personalize` run. Exit codes: 0 success, 2 input or validation error,
3 numerical failure. Set MORPHFORGE_THREADS to cap internal parallelism.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .errors import InputError, NumericalError
from .grids import BinaryImage3D, DisplacementField, read_image, write_image
from .mesh import read_femesh, read_stl, write_femesh, write_stl
from .metrics import accuracy_report, dice, distance_map, hd95, scaled_jacobian
from .morphing import DEFAULT_BLEND_BAND, MorphMask, morph_mesh
from .registration import DemonsParams, invert_field, register_demons, warp_image
from .signals import (
    CFC_CLASSES,
    CoraParams,
    average_components,
    cfc_filter,
    classify_biofidelity,
    cora_rate,
    read_timeseries_csv,
    write_timeseries_csv,
)
from .voxelize import DEFAULT_PADDING, DEFAULT_SPACING, voxelize
from . import pipeline

logger = logging.getLogger("morphforge")


def _json_out(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    print(text)
    if path:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text + "\n")


def _load_mesh_any(path: str):
    if path.endswith(".stl"):
        return read_stl(path)
    return read_femesh(path)


def _save_mesh_any(mesh, path: str):
    from .mesh import FEMesh, TriangleMesh

    if isinstance(mesh, TriangleMesh):
        write_stl(mesh, path, format="binary" if path.endswith(".stl") else "ascii")
    elif isinstance(mesh, FEMesh):
        write_femesh(mesh, path)


# --------------------------------------------------------------------------
# subcommand implementations
# --------------------------------------------------------------------------

def _cmd_voxelize(args) -> int:
    mesh = read_stl(args.mesh)
    img = voxelize(mesh, args.spacing, args.padding, seed=args.seed)
    write_image(img, args.output)
    lo = img.origin - 0.5 * img.spacing
    hi = img.origin + (np.array(img.dims) - 0.5) * img.spacing
    print(f"occupied voxels: {img.occupied_count}")
    print(f"dims: {img.dims}  spacing: {tuple(img.spacing)} mm")
    print(f"bounds: {tuple(np.round(lo, 6))} .. {tuple(np.round(hi, 6))} mm")
    print(f"wrote {args.output}")
    return 0


def _demons_params_from_args(args) -> DemonsParams | None:
    fields = {}
    if args.levels is not None:
        fields["pyramid_levels"] = args.levels
    if args.iterations is not None:
        fields["iterations"] = tuple(args.iterations)
    for name in ("sigma_fluid", "sigma_diffusion", "sigma_presmooth", "max_step", "alpha"):
        value = getattr(args, name)
        if value is not None:
            fields[name] = value
    if args.convergence_tol is not None:
        fields["convergence_tol"] = args.convergence_tol
    if not fields:
        return None
    if "pyramid_levels" in fields and "iterations" not in fields:
        fields["iterations"] = tuple([100] * fields["pyramid_levels"])
    if "iterations" in fields and "pyramid_levels" not in fields:
        fields["pyramid_levels"] = len(fields["iterations"])
    base = DemonsParams.defaults_for_spacing(1.0)
    merged = {**base.__dict__, **fields}
    return DemonsParams(**merged)


def _cmd_register(args) -> int:
    fixed = read_image(args.fixed)
    moving = read_image(args.moving)
    if not isinstance(fixed, BinaryImage3D) or not isinstance(moving, BinaryImage3D):
        raise InputError("register expects two binary images")
    params = _demons_params_from_args(args)
    if params is None:
        params = DemonsParams.defaults_for_spacing(float(fixed.spacing.min()))
    field, report = register_demons(fixed, moving, params, return_report=True)
    write_image(field, args.output)
    print(f"initial mse: {report.initial_mse:.6e}")
    print(f"final mse:   {report.final_mse:.6e}")
    for lvl in report.level_mse:
        print(
            f"level {lvl['level']} dims {lvl['dims']}: {lvl['iterations']} iterations, "
            f"mse {lvl['start_mse']:.3e} -> {lvl['accepted_mse']:.3e}"
        )
    print(f"wrote {args.output}")
    return 0


def _cmd_invert_field(args) -> int:
    d = read_image(args.field)
    if not isinstance(d, DisplacementField):
        raise InputError(f"{args.field} is not a displacement field")
    result = invert_field(d, args.iterations, args.tol)
    write_image(result.field, args.output)
    print(f"iterations: {result.iterations}  converged: {result.converged}")
    print(f"residual p95: {result.residual_p95_mm:.6g} mm  max: {result.residual_max_mm:.6g} mm")
    print(f"wrote {args.output}")
    return 0


def _cmd_warp_image(args) -> int:
    img = read_image(args.image)
    d = read_image(args.field)
    if not isinstance(d, DisplacementField):
        raise InputError(f"{args.field} is not a displacement field")
    if isinstance(img, DisplacementField):
        raise InputError("warp-image expects a binary or scalar image, not a field")
    out = warp_image(img, d)
    write_image(out, args.output)
    print(f"wrote {args.output}")
    return 0


def _cmd_morph(args) -> int:
    mesh = _load_mesh_any(args.mesh)
    d = read_image(args.field)
    if not isinstance(d, DisplacementField):
        raise InputError(f"{args.field} is not a displacement field")
    mask = MorphMask(frozenset(args.exclude_part or []), args.blend_band)
    morphed = morph_mesh(mesh, d, mask)
    _save_mesh_any(morphed, args.output)
    print(f"wrote {args.output}")
    return 0


def _cmd_evaluate(args) -> int:
    a = read_image(args.image_a)
    b = read_image(args.image_b)
    if not isinstance(a, BinaryImage3D) or not isinstance(b, BinaryImage3D):
        raise InputError("evaluate expects two binary images")
    from .errors import UndefinedMetricError
    from .grids import check_same_grid

    check_same_grid(a, b, "evaluate operands")
    try:
        report = accuracy_report(a, b)
        payload = json.loads(report.to_json())
    except UndefinedMetricError as exc:
        payload = {
            "dice": dice(a, b),
            "hd95": None,
            "hd95_error": str(exc),
            "count_a": a.occupied_count,
            "count_b": b.occupied_count,
        }
    _json_out(payload, args.output)
    return 0


def _cmd_distmap(args) -> int:
    morphed = read_stl(args.morphed)
    target = read_stl(args.target)
    distances = distance_map(morphed, target)
    with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("vertex_id,distance_mm\n")
        for i, value in enumerate(distances):
            fh.write(f"{i},{value!r}\n")
    print(f"vertices: {len(distances)}")
    print(f"distance mm: min {distances.min():.6g}  mean {distances.mean():.6g}  max {distances.max():.6g}")
    print(f"wrote {args.output}")
    return 0


def _cmd_jacobian(args) -> int:
    mesh = read_femesh(args.mesh)
    quality = scaled_jacobian(mesh)
    payload = {
        "minimum": quality.minimum,
        "solid_elements": int(len(quality.values)),
        "skipped_shells": quality.skipped_shells,
    }
    if args.per_element:
        with open(args.per_element, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("element_id,scaled_jacobian\n")
            for eid, value in zip(quality.element_ids, quality.values):
                fh.write(f"{eid},{value!r}\n")
        payload["per_element_csv"] = args.per_element
    _json_out(payload, args.output)
    return 0


def _cmd_filter(args) -> int:
    series = read_timeseries_csv(args.input)
    filtered = cfc_filter(series, args.cfc)
    write_timeseries_csv(filtered, args.output)
    print(f"filtered {args.input} at CFC {args.cfc} -> {args.output}")
    return 0


def _cmd_cora(args) -> int:
    if len(args.reference) != len(args.test):
        raise InputError(
            f"need matching counts of reference and test files, "
            f"got {len(args.reference)} vs {len(args.test)}"
        )
    params = CoraParams()
    if args.params:
        with open(args.params, "r", encoding="utf-8") as fh:
            params = CoraParams(**json.load(fh))

    channels = []
    results = []
    for ref_path, test_path in zip(args.reference, args.test):
        ref = read_timeseries_csv(ref_path)
        test = read_timeseries_csv(test_path)
        if args.cfc:
            ref = cfc_filter(ref, args.cfc)
            test = cfc_filter(test, args.cfc)
        result = cora_rate(ref, test, params)
        results.append(result)
        channels.append(
            {
                "reference": ref_path,
                "test": test_path,
                "label": ref.label,
                **result.to_dict(),
            }
        )

    payload: dict = {
        "channels": channels,
        "cfc": args.cfc,
        "params": params.__dict__,
    }
    if len(results) == 3:
        score = average_components(*results)
        payload["average"] = score
        payload["classification"] = classify_biofidelity(score)
    elif len(results) == 1:
        payload["classification"] = classify_biofidelity(results[0].total)
    _json_out(payload, args.output)
    return 0


def _cmd_personalize(args) -> int:
    overrides = {
        "spacing": args.spacing,
        "output_dir": args.output_dir,
        "seed": args.seed,
    }
    manifest = pipeline.load_manifest(args.manifest, overrides)
    summary = pipeline.run_personalize(manifest)
    acc = summary["accuracy"]
    print(f"dice: {acc['dice']:.4f}  hd95: {acc['hd95']:.3f} mm")
    print(f"summary: {manifest.output_dir}/summary.json")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="morphforge",
        description="Image-registration-based mesh personalization toolkit",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("voxelize", help="voxelize a closed STL surface to a binary image")
    p.add_argument("mesh")
    p.add_argument("--spacing", type=float, default=DEFAULT_SPACING, help="voxel size in mm")
    p.add_argument("--padding", type=int, default=DEFAULT_PADDING, help="padding in voxels")
    p.add_argument("--seed", type=int, default=0, help="seed for degenerate-ray jitter")
    p.add_argument("-o", "--output", required=True, help="output .mhd path")
    p.set_defaults(func=_cmd_voxelize)

    p = sub.add_parser("register", help="demons-register moving onto fixed")
    p.add_argument("fixed")
    p.add_argument("moving")
    p.add_argument("-o", "--output", required=True, help="output field .mhd path")
    p.add_argument("--levels", type=int, default=None)
    p.add_argument("--iterations", type=int, nargs="+", default=None, metavar="N")
    p.add_argument("--sigma-fluid", dest="sigma_fluid", type=float, default=None)
    p.add_argument("--sigma-diffusion", dest="sigma_diffusion", type=float, default=None)
    p.add_argument("--sigma-presmooth", dest="sigma_presmooth", type=float, default=None)
    p.add_argument("--max-step", dest="max_step", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--convergence-tol", dest="convergence_tol", type=float, default=None)
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("invert-field", help="invert a displacement field")
    p.add_argument("field")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--tol", type=float, default=0.01, help="stop threshold in voxels")
    p.set_defaults(func=_cmd_invert_field)

    p = sub.add_parser("warp-image", help="warp an image by a displacement field")
    p.add_argument("image")
    p.add_argument("field")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_warp_image)

    p = sub.add_parser("morph", help="apply a displacement field to mesh nodes")
    p.add_argument("mesh", help=".stl surface or neutral-format volume mesh")
    p.add_argument("field")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--exclude-part", action="append", default=None, metavar="PART")
    p.add_argument("--blend-band", type=float, default=DEFAULT_BLEND_BAND, help="mm")
    p.set_defaults(func=_cmd_morph)

    p = sub.add_parser("evaluate", help="Dice and HD95 of two binary images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("-o", "--output", default=None, help="also write the JSON report here")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("distmap", help="per-vertex distance from morphed to target surface")
    p.add_argument("morphed")
    p.add_argument("target")
    p.add_argument("-o", "--output", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_distmap)

    p = sub.add_parser("jacobian", help="scaled Jacobian quality of a volume mesh")
    p.add_argument("mesh")
    p.add_argument("-o", "--output", default=None, help="also write the JSON summary here")
    p.add_argument("--per-element", default=None, help="write per-element CSV here")
    p.set_defaults(func=_cmd_jacobian)

    p = sub.add_parser("filter", help="phaseless channel-class low-pass of a CSV signal")
    p.add_argument("input")
    p.add_argument("--cfc", type=int, required=True, choices=CFC_CLASSES)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_filter)

    p = sub.add_parser("cora", help="CORA rating of test signals against references")
    p.add_argument("--reference", nargs="+", required=True, metavar="CSV")
    p.add_argument("--test", nargs="+", required=True, metavar="CSV")
    p.add_argument("--params", default=None, help="JSON file of rating parameters")
    p.add_argument("--cfc", type=int, default=None, choices=CFC_CLASSES,
                   help="filter both signals before rating")
    p.add_argument("-o", "--output", default=None, help="also write the JSON report here")
    p.set_defaults(func=_cmd_cora)

    p = sub.add_parser("personalize", help="run the full pipeline from a JSON manifest")
    p.add_argument("manifest")
    p.add_argument("--spacing", type=float, default=None, help="override manifest spacing")
    p.add_argument("--output-dir", default=None, help="override manifest output dir")
    p.add_argument("--seed", type=int, default=None, help="override manifest seed")
    p.set_defaults(func=_cmd_personalize)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
