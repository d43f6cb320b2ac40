"""End-to-end personalization: align, voxelize, register, morph, evaluate.

A JSON manifest names the template surfaces (skin, optional skeleton,
optional volume mesh), the target surfaces, a landmark file mapping target
points onto template points, and the numeric settings. The run writes all
intermediate images, the displacement field and its inverse, the morphed
meshes, the accuracy report, and a summary JSON carrying every parameter
that influenced the result. Outputs are byte-identical across re-runs.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np
from filelock import FileLock

from .errors import InputError, MorphforgeError
from .grids import BinaryImage3D, write_image
from .mesh import (
    FEMesh,
    TriangleMesh,
    apply_rigid,
    fit_rigid,
    read_femesh,
    read_landmarks,
    read_stl,
    write_femesh,
    write_stl,
)
from .metrics import accuracy_report
from .morphing import DEFAULT_BLEND_BAND, MorphMask, morph_mesh, morph_report
from .registration import DemonsParams, invert_field, register_demons, warp_image
from .voxelize import DEFAULT_PADDING, DEFAULT_SPACING, image_union, voxelize

logger = logging.getLogger(__name__)

__all__ = ["PipelineManifest", "load_manifest", "run_personalize"]


@dataclass
class PipelineManifest:
    """Validated inputs of one personalization run."""

    template_skin: str
    target_skin: str
    landmarks: str
    output_dir: str
    template_skeleton: str | None = None
    template_volume_mesh: str | None = None
    target_skeleton: str | None = None
    spacing: float = DEFAULT_SPACING
    padding: int = DEFAULT_PADDING
    demons: DemonsParams | None = None
    mask: MorphMask | None = None
    seed: int = 0
    invert_iterations: int = 50
    invert_tol: float = 0.01

    def validate(self) -> None:
        if self.spacing <= 0:
            raise InputError(f"spacing must be > 0, got {self.spacing}")
        if self.padding < 0:
            raise InputError(f"padding must be >= 0, got {self.padding}")
        required = {"template skin": self.template_skin, "target skin": self.target_skin,
                    "landmarks": self.landmarks}
        optional = {
            "template skeleton": self.template_skeleton,
            "template volume mesh": self.template_volume_mesh,
            "target skeleton": self.target_skeleton,
        }
        for name, path in required.items():
            if not path:
                raise InputError(f"manifest is missing the {name} path")
            if not os.path.exists(path):
                raise InputError(f"{name} file does not exist: {path}")
        for name, path in optional.items():
            if path and not os.path.exists(path):
                raise InputError(f"{name} file does not exist: {path}")


def load_manifest(path: str, overrides: dict | None = None) -> PipelineManifest:
    """Load and validate a manifest; non-None overrides win over the file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON: {exc}") from exc

    template = raw.get("template", {})
    target = raw.get("target", {})
    demons_cfg = raw.get("demons")
    mask_cfg = raw.get("mask")

    manifest = PipelineManifest(
        template_skin=template.get("skin", ""),
        template_skeleton=template.get("skeleton"),
        template_volume_mesh=template.get("volume_mesh"),
        target_skin=target.get("skin", ""),
        target_skeleton=target.get("skeleton"),
        landmarks=raw.get("landmarks", ""),
        output_dir=raw.get("output_dir", ""),
        spacing=float(raw.get("spacing", DEFAULT_SPACING)),
        padding=int(raw.get("padding", DEFAULT_PADDING)),
        demons=DemonsParams(**demons_cfg) if demons_cfg else None,
        mask=MorphMask(
            excluded_parts=frozenset(mask_cfg.get("excluded_parts", [])),
            blend_band=float(mask_cfg.get("blend_band", DEFAULT_BLEND_BAND)),
        )
        if mask_cfg
        else None,
        seed=int(raw.get("seed", 0)),
        invert_iterations=int(raw.get("invert_iterations", 50)),
        invert_tol=float(raw.get("invert_tol", 0.01)),
    )
    base = os.path.dirname(os.path.abspath(path))

    def _resolve(p):
        if not p:
            return p
        return p if os.path.isabs(p) else os.path.join(base, p)

    manifest.template_skin = _resolve(manifest.template_skin)
    manifest.template_skeleton = _resolve(manifest.template_skeleton)
    manifest.template_volume_mesh = _resolve(manifest.template_volume_mesh)
    manifest.target_skin = _resolve(manifest.target_skin)
    manifest.target_skeleton = _resolve(manifest.target_skeleton)
    manifest.landmarks = _resolve(manifest.landmarks)
    manifest.output_dir = _resolve(manifest.output_dir)

    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(manifest, key, value)
    if not manifest.output_dir:
        raise InputError("manifest must name an output_dir")
    manifest.validate()
    return manifest


def _combined_grid(meshes: list[TriangleMesh], spacing: float, padding: int):
    lows, highs = zip(*(m.bounds() for m in meshes))
    lo = np.min(np.array(lows), axis=0)
    hi = np.max(np.array(highs), axis=0)
    h = np.full(3, float(spacing))
    dims = tuple(int(n) for n in np.maximum(np.ceil((hi - lo) / h).astype(int), 1) + 2 * padding)
    origin = lo + 0.5 * h - padding * h
    return dims, origin


def _model_image(
    skin: TriangleMesh,
    skeleton: TriangleMesh | None,
    spacing: float,
    grid,
    seed: int,
) -> BinaryImage3D:
    """Union occupancy of a model's surfaces on the shared grid."""
    img = voxelize(skin, spacing, grid=grid, seed=seed)
    if skeleton is not None:
        img = image_union(img, voxelize(skeleton, spacing, grid=grid, seed=seed))
    return img


def _json_dump(obj, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_personalize(manifest: PipelineManifest) -> dict:
    """Execute the full pipeline; returns the summary dictionary."""
    manifest.validate()
    out_dir = manifest.output_dir
    os.makedirs(out_dir, exist_ok=True)

    with FileLock(os.path.join(out_dir, ".morphforge.lock")):
        return _run_locked(manifest, out_dir)


def _run_locked(manifest: PipelineManifest, out_dir: str) -> dict:
    stage = "load inputs"
    completed: list[str] = []
    artifacts: list[str] = []

    def _out(name: str) -> str:
        artifacts.append(name)
        if name.endswith(".mhd"):
            artifacts.append(name[:-4] + ".raw")
        return os.path.join(out_dir, name)

    try:
        template_skin = read_stl(manifest.template_skin)
        template_skeleton = (
            read_stl(manifest.template_skeleton) if manifest.template_skeleton else None
        )
        volume_mesh = (
            read_femesh(manifest.template_volume_mesh)
            if manifest.template_volume_mesh
            else None
        )
        target_skin = read_stl(manifest.target_skin)
        target_skeleton = (
            read_stl(manifest.target_skeleton) if manifest.target_skeleton else None
        )
        src_lm, dst_lm = read_landmarks(manifest.landmarks)

        stage = "rigid alignment"
        rigid = fit_rigid(src_lm, dst_lm)  # target-space points onto template space
        target_skin = apply_rigid(target_skin, rigid)
        if target_skeleton is not None:
            target_skeleton = apply_rigid(target_skeleton, rigid)

        stage = "voxelize"
        all_surfaces = [template_skin, target_skin]
        if template_skeleton is not None:
            all_surfaces.append(template_skeleton)
        if target_skeleton is not None:
            all_surfaces.append(target_skeleton)
        grid = _combined_grid(all_surfaces, manifest.spacing, manifest.padding)
        template_img = _model_image(
            template_skin, template_skeleton, manifest.spacing, grid, manifest.seed
        )
        target_img = _model_image(
            target_skin, target_skeleton, manifest.spacing, grid, manifest.seed
        )
        write_image(template_img, _out("template_image.mhd"))
        write_image(target_img, _out("target_image.mhd"))
        completed.append("voxelize")

        stage = "registration"
        params = manifest.demons or DemonsParams.defaults_for_spacing(manifest.spacing)
        disp, reg_report = register_demons(
            template_img, target_img, params, return_report=True
        )
        write_image(disp, _out("displacement.mhd"))
        completed.append("registration")

        stage = "morph"
        mask = manifest.mask or MorphMask()
        morphed_skin = morph_mesh(template_skin, disp, mask)
        write_stl(morphed_skin, _out("morphed_skin.stl"), format="binary")
        quality = None
        if template_skeleton is not None:
            morphed_skeleton = morph_mesh(template_skeleton, disp, mask)
            write_stl(morphed_skeleton, _out("morphed_skeleton.stl"), format="binary")
        if volume_mesh is not None:
            morphed_volume = morph_mesh(volume_mesh, disp, mask)
            write_femesh(morphed_volume, _out("morphed_volume.txt"))
            quality = morph_report(volume_mesh, morphed_volume)
            with open(_out("morph_quality.json"), "w", encoding="utf-8", newline="\n") as fh:
                fh.write(quality.to_json() + "\n")
        completed.append("morph")

        stage = "evaluate"
        inv = invert_field(disp, manifest.invert_iterations, manifest.invert_tol)
        write_image(inv.field, _out("displacement_inverse.mhd"))
        warped_template = warp_image(template_img, inv.field)
        write_image(warped_template, _out("warped_template.mhd"))
        report = accuracy_report(target_img, warped_template)
        with open(_out("accuracy.json"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(report.to_json() + "\n")
        completed.append("evaluate")
    except MorphforgeError as exc:
        exc.args = (
            f"personalize failed at stage '{stage}' "
            f"(completed: {', '.join(completed) or 'none'}): {exc}",
        )
        raise
    except Exception as exc:
        raise RuntimeError(
            f"personalize failed at stage '{stage}' "
            f"(completed: {', '.join(completed) or 'none'}): {exc}"
        ) from exc

    summary = {
        "inputs": {
            "template_skin": manifest.template_skin,
            "template_skeleton": manifest.template_skeleton,
            "template_volume_mesh": manifest.template_volume_mesh,
            "target_skin": manifest.target_skin,
            "target_skeleton": manifest.target_skeleton,
            "landmarks": manifest.landmarks,
        },
        "parameters": {
            "spacing_mm": manifest.spacing,
            "padding_voxels": manifest.padding,
            "seed": manifest.seed,
            "demons": asdict(params),
            "mask": {
                "excluded_parts": sorted(mask.excluded_parts),
                "blend_band_mm": mask.blend_band,
            },
            "invert_iterations": manifest.invert_iterations,
            "invert_tol_voxels": manifest.invert_tol,
        },
        "rigid_alignment": {
            "rotation": rigid.rotation.tolist(),
            "translation": rigid.translation.tolist(),
        },
        "registration": {
            "initial_mse": reg_report.initial_mse,
            "final_mse": reg_report.final_mse,
            "levels": reg_report.level_mse,
        },
        "inversion": {
            "iterations": inv.iterations,
            "converged": inv.converged,
            "residual_p95_mm": inv.residual_p95_mm,
            "residual_max_mm": inv.residual_max_mm,
        },
        "accuracy": json.loads(report.to_json()),
        "morph_quality": json.loads(quality.to_json()) if quality else None,
        "artifacts": sorted(artifacts),
    }
    _json_dump(summary, os.path.join(out_dir, "summary.json"))
    return summary
