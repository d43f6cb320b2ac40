"""Personalization accuracy metrics.

Dice overlap and the 95th-percentile Hausdorff distance compare binary
images; the per-vertex distance map compares surface meshes; the scaled
Jacobian measures solid-element distortion. HD95 uses the same
six-connected boundary extraction as the voxelizer (the two must agree or
the metric drifts) and the nearest-rank percentile, ceil(0.95 n)-th
smallest, so results are reproducible across implementations.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import InputError, UndefinedMetricError
from .grids import BinaryImage3D, check_same_grid
from .mesh import FEMesh, TriangleMesh
from .voxelize import boundary_voxels

__all__ = [
    "AccuracyReport",
    "Hd95Result",
    "ElementQuality",
    "dice",
    "hd95",
    "accuracy_report",
    "distance_map",
    "scaled_jacobian",
]


@dataclass(frozen=True)
class AccuracyReport:
    """Overlap and boundary-distance summary of two binary images."""

    dice: float
    hd95: float
    directed_hd95_forward: float
    directed_hd95_backward: float
    count_a: int
    count_b: int
    count_intersection: int
    both_empty: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


class Hd95Result(NamedTuple):
    hd95: float
    forward: float
    backward: float


def dice(a: BinaryImage3D, b: BinaryImage3D) -> float:
    """2|A n B| / (|A| + |B|); defined as 1.0 when both images are empty."""
    check_same_grid(a, b, "dice operands")
    na = a.occupied_count
    nb = b.occupied_count
    if na == 0 and nb == 0:
        return 1.0
    inter = int(np.count_nonzero(a.data & b.data))
    return 2.0 * inter / (na + nb)


def _nearest_rank_p95(values: np.ndarray) -> float:
    """ceil(0.95 n)-th smallest value (1-indexed nearest-rank percentile)."""
    n = len(values)
    rank = int(np.ceil(0.95 * n))
    return float(np.partition(values, rank - 1)[rank - 1])


def _boundary_points_mm(img: BinaryImage3D) -> np.ndarray:
    idx = boundary_voxels(img)
    return img.origin + idx * img.spacing


def hd95(a: BinaryImage3D, b: BinaryImage3D) -> Hd95Result:
    """Symmetric 95th-percentile Hausdorff distance between boundary voxel sets (mm)."""
    if not np.array_equal(a.spacing, b.spacing):
        raise InputError(f"hd95 needs identical spacing, got {a.spacing} vs {b.spacing}")
    if a.occupied_count == 0 or b.occupied_count == 0:
        raise UndefinedMetricError("hd95 is undefined for an empty image")
    pa = _boundary_points_mm(a)
    pb = _boundary_points_mm(b)
    da, _ = cKDTree(pb).query(pa, k=1)
    db, _ = cKDTree(pa).query(pb, k=1)
    forward = _nearest_rank_p95(da)
    backward = _nearest_rank_p95(db)
    return Hd95Result(max(forward, backward), forward, backward)


def accuracy_report(a: BinaryImage3D, b: BinaryImage3D) -> AccuracyReport:
    """Dice plus HD95 in one report; HD95 requires the same full grid here."""
    check_same_grid(a, b, "accuracy_report operands")
    na = a.occupied_count
    nb = b.occupied_count
    inter = int(np.count_nonzero(a.data & b.data))
    both_empty = na == 0 and nb == 0
    d = 1.0 if both_empty else 2.0 * inter / (na + nb)
    h = hd95(a, b)
    return AccuracyReport(
        dice=d,
        hd95=h.hd95,
        directed_hd95_forward=h.forward,
        directed_hd95_backward=h.backward,
        count_a=na,
        count_b=nb,
        count_intersection=inter,
        both_empty=both_empty,
    )


# --------------------------------------------------------------------------
# Mesh-to-mesh distance map
# --------------------------------------------------------------------------

def _point_segment_sqdist(p, a, b) -> np.ndarray:
    """Squared distance from points (n,1,3) to segments a->b (1,m,3)."""
    ab = b - a
    denom = np.einsum("xmk,xmk->xm", ab, ab)
    t = np.einsum("nmk,xmk->nm", p - a, ab)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(denom > 0, t / denom, 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = a + t[..., None] * ab
    diff = p - closest
    return np.einsum("nmk,nmk->nm", diff, diff)


def _point_triangle_distances(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Min distance from each point (n,3) to each triangle (m,3,3) -> (n,m).

    The closest point is either the in-plane projection (when it lands
    inside the triangle) or on one of the three boundary segments, so the
    minimum over those four candidates is exact for any triangle shape.
    """
    a = tri[:, 0][None, :, :]  # (1,m,3)
    b = tri[:, 1][None, :, :]
    c = tri[:, 2][None, :, :]
    p = points[:, None, :]  # (n,1,3)

    sq = _point_segment_sqdist(p, a, b)
    sq = np.minimum(sq, _point_segment_sqdist(p, b, c))
    sq = np.minimum(sq, _point_segment_sqdist(p, c, a))

    # face projection, valid only where barycentric coords are all >= 0
    ab = b - a
    ac = c - a
    n = np.cross(ab, ac)
    nn = np.einsum("xmk,xmk->xm", n, n)
    ap = p - a
    dist_plane = np.einsum("nmk,xmk->nm", ap, n)  # signed, scaled by |n|
    proj = p - (np.where(nn > 0, dist_plane / np.where(nn > 0, nn, 1.0), 0.0))[..., None] * n
    # barycentric via edge cross products against the face normal
    w_a = np.einsum("nmk,xmk->nm", np.cross(b - proj, c - proj), n)
    w_b = np.einsum("nmk,xmk->nm", np.cross(c - proj, a - proj), n)
    w_c = np.einsum("nmk,xmk->nm", np.cross(a - proj, b - proj), n)
    inside = (w_a >= 0) & (w_b >= 0) & (w_c >= 0) & (nn > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        face_sq = np.where(nn > 0, dist_plane * dist_plane / np.where(nn > 0, nn, 1.0), np.inf)
    sq = np.where(inside, np.minimum(sq, face_sq), sq)
    return np.sqrt(sq)


def distance_map(morphed: TriangleMesh, target: TriangleMesh, chunk: int = 128) -> np.ndarray:
    """Distance (mm) from each morphed vertex to the nearest point on the target surface.

    Exact point-to-triangle distances, evaluated in chunks of vertices
    against every target triangle (O(n_points * n_triangles)).
    """
    if morphed.is_empty:
        raise InputError("distance_map: morphed mesh is empty")
    if target.is_empty:
        raise InputError("distance_map: target mesh is empty")
    tri = target.triangle_corners()
    pts = morphed.vertices
    out = np.empty(len(pts))
    for start in range(0, len(pts), chunk):
        block = pts[start : start + chunk]
        out[start : start + chunk] = _point_triangle_distances(block, tri).min(axis=1)
    return out


# --------------------------------------------------------------------------
# Scaled Jacobian
# --------------------------------------------------------------------------

# At hex corner k the three edge-connected neighbors, ordered so a
# right-handed element gives a positive determinant.
_HEX_CORNER_NEIGHBORS = (
    (1, 3, 4),
    (2, 0, 5),
    (3, 1, 6),
    (0, 2, 7),
    (7, 5, 0),
    (4, 6, 1),
    (5, 7, 2),
    (6, 4, 3),
)


@dataclass(frozen=True)
class ElementQuality:
    """Per-solid-element scaled Jacobians, the mesh minimum, and skipped shells."""

    element_ids: np.ndarray
    values: np.ndarray
    skipped_shells: int

    @property
    def minimum(self) -> float | None:
        return float(self.values.min()) if len(self.values) else None


def _hex_scaled_jacobian(corners: np.ndarray) -> float:
    """Min over the 8 corners of det(edges)/prod(edge lengths); 0 if degenerate."""
    worst = np.inf
    for k, (na, nb, nc) in enumerate(_HEX_CORNER_NEIGHBORS):
        e = np.stack(
            [corners[na] - corners[k], corners[nb] - corners[k], corners[nc] - corners[k]]
        )
        lengths = np.linalg.norm(e, axis=1)
        if np.any(lengths == 0.0):
            return 0.0
        j = float(np.linalg.det(e)) / float(lengths.prod())
        worst = min(worst, j)
    return worst


def _tet_scaled_jacobian(corners: np.ndarray) -> float:
    """det of the three reference-corner edges over the product of their lengths.

    Equals 6 * volume / (|e1||e2||e3|); 1.0 for a right-angle corner tet,
    not normalized to the regular tetrahedron.
    """
    e = corners[1:] - corners[0]
    lengths = np.linalg.norm(e, axis=1)
    if np.any(lengths == 0.0):
        return 0.0
    return float(np.linalg.det(e)) / float(lengths.prod())


def scaled_jacobian(mesh: FEMesh) -> ElementQuality:
    """Scaled Jacobian of every hex8/tet4 element; shells are skipped."""
    ids: list[int] = []
    values: list[float] = []
    skipped = 0
    for el in mesh.elements:
        if el.kind == "hex8":
            corners = mesh.coords[mesh.element_node_indices(el)]
            values.append(_hex_scaled_jacobian(corners))
            ids.append(el.eid)
        elif el.kind == "tet4":
            corners = mesh.coords[mesh.element_node_indices(el)]
            values.append(_tet_scaled_jacobian(corners))
            ids.append(el.eid)
        else:
            skipped += 1
    return ElementQuality(
        element_ids=np.array(ids, dtype=np.int64),
        values=np.array(values, dtype=np.float64),
        skipped_shells=skipped,
    )
