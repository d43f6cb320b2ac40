"""Apply a fixed-space displacement field to mesh nodes.

Morphing moves each node by the trilinearly interpolated field vector,
optionally masked so selected parts (head, feet, ...) stay untouched, with
a linear blend band so elements straddling the exclusion boundary are not
torn. Nodes outside the field grid use clamped sampling and are reported
with a warning rather than an error, since extremities routinely protrude
a voxel or two past a padded grid.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.spatial import cKDTree

from .errors import InputError
from .grids import DisplacementField
from .mesh import FEMesh, TriangleMesh

__all__ = ["MorphMask", "MorphReport", "sample_field", "morph_mesh", "morph_report"]

DEFAULT_BLEND_BAND = 30.0  # mm
JACOBIAN_FLAG_THRESHOLD = 0.1


@dataclass(frozen=True)
class MorphMask:
    """Parts whose nodes must not move, with a transition band width in mm."""

    excluded_parts: frozenset[str] = frozenset()
    blend_band: float = DEFAULT_BLEND_BAND

    def __post_init__(self):
        object.__setattr__(self, "excluded_parts", frozenset(self.excluded_parts))
        if self.blend_band < 0:
            raise InputError(f"blend_band must be >= 0, got {self.blend_band}")


def sample_field(d: DisplacementField, points) -> np.ndarray:
    """Field vectors at world points (n, 3) or (3,); clamped outside the grid."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    idx = (pts - d.origin) / d.spacing
    out = np.empty_like(pts)
    for c in range(3):
        out[:, c] = map_coordinates(d.data[..., c], idx.T, order=1, mode="nearest")
    return out[0] if single else out


def _outside_count(d: DisplacementField, pts: np.ndarray) -> int:
    idx = (pts - d.origin) / d.spacing
    hi = np.array(d.dims, dtype=float) - 1.0
    return int(np.count_nonzero(np.any((idx < 0) | (idx > hi), axis=1)))


def _blend_weights(mesh: FEMesh, mask: MorphMask) -> np.ndarray:
    """Per-node weight: 0 on excluded parts, ramping linearly to 1 over the band."""
    n = len(mesh.node_ids)
    if not mask.excluded_parts:
        return np.ones(n)
    excluded_nodes: set[int] = set()
    for el in mesh.elements:
        if el.part in mask.excluded_parts:
            excluded_nodes.update(el.nodes)
    if not excluded_nodes:
        return np.ones(n)
    excl_idx = np.array([mesh.node_index(nid) for nid in sorted(excluded_nodes)])
    w = np.ones(n)
    if mask.blend_band > 0:
        tree = cKDTree(mesh.coords[excl_idx])
        dist, _ = tree.query(mesh.coords, k=1)
        w = np.minimum(dist / mask.blend_band, 1.0)
    w[excl_idx] = 0.0
    return w


def morph_mesh(mesh, d: DisplacementField, mask: MorphMask | None = None):
    """Move every node by its (blend-weighted) field vector; topology unchanged."""
    if mask is None:
        mask = MorphMask()
    if isinstance(mesh, TriangleMesh):
        pts = mesh.vertices
        weights = np.ones(len(pts))
    elif isinstance(mesh, FEMesh):
        pts = mesh.coords
        weights = _blend_weights(mesh, mask)
    else:
        raise InputError(f"morph_mesh: unsupported mesh type {type(mesh).__name__}")

    outside = _outside_count(d, pts)
    if outside:
        warnings.warn(
            f"{outside} nodes lie outside the displacement grid; "
            "clamped field values were used for them",
            RuntimeWarning,
        )
    disp = sample_field(d, pts)
    moved = pts + weights[:, None] * disp
    # excluded nodes must come through bit-identical, not merely close
    moved[weights == 0.0] = pts[weights == 0.0]

    if isinstance(mesh, TriangleMesh):
        return TriangleMesh(moved, mesh.triangles)
    return mesh.with_coords(moved)


@dataclass
class MorphReport:
    """Element-quality and displacement summary of a morph."""

    max_node_displacement_mm: float
    min_scaled_jacobian_before: float | None
    min_scaled_jacobian_after: float | None
    mean_scaled_jacobian_before: float | None
    mean_scaled_jacobian_after: float | None
    elements_below_threshold: int
    threshold: float = JACOBIAN_FLAG_THRESHOLD
    solid_element_count: int = 0
    skipped_shell_count: int = 0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    def to_text(self) -> str:
        return "\n".join(f"{k}: {v}" for k, v in sorted(self.__dict__.items()))


def morph_report(before: FEMesh, after: FEMesh, threshold: float = JACOBIAN_FLAG_THRESHOLD) -> MorphReport:
    """Compare element quality before and after morphing (same connectivity)."""
    from .metrics import scaled_jacobian

    if len(before.node_ids) != len(after.node_ids) or not np.array_equal(
        before.node_ids, after.node_ids
    ):
        raise InputError("morph_report: meshes have different nodes")
    if before.elements != after.elements:
        raise InputError("morph_report: meshes have different connectivity")

    disp = np.linalg.norm(after.coords - before.coords, axis=1)
    q_before = scaled_jacobian(before)
    q_after = scaled_jacobian(after)

    def _stats(q):
        if len(q.values) == 0:
            return None, None
        return float(q.values.min()), float(q.values.mean())

    min_b, mean_b = _stats(q_before)
    min_a, mean_a = _stats(q_after)
    below = int(np.count_nonzero(q_after.values < threshold)) if len(q_after.values) else 0
    return MorphReport(
        max_node_displacement_mm=float(disp.max()) if len(disp) else 0.0,
        min_scaled_jacobian_before=min_b,
        min_scaled_jacobian_after=min_a,
        mean_scaled_jacobian_before=mean_b,
        mean_scaled_jacobian_after=mean_a,
        elements_below_threshold=below,
        threshold=threshold,
        solid_element_count=len(q_after.values),
        skipped_shell_count=q_after.skipped_shells,
    )
