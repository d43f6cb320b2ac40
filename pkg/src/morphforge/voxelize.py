"""Solid voxelization of closed surface meshes and voxel-set utilities.

Occupancy is decided by ray parity: axis-parallel rays through the voxel
centers are intersected with the surface, a center is inside when the
number of crossings beyond it is odd, and the three axes vote (a voxel is
occupied with >= 2 votes). Rays that graze an edge or vertex in projection
are recast with a tiny deterministic jitter, so measure-zero alignments
cannot flip results.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import (
    DegenerateGeometryError,
    EmptyMeshError,
    GridMismatchError,
    InputError,
    OpenSurfaceError,
)
from .grids import BinaryImage3D, check_same_grid
from .mesh import TriangleMesh

__all__ = [
    "voxelize",
    "boundary_voxels",
    "image_union",
    "check_watertight",
    "DEFAULT_SPACING",
    "DEFAULT_PADDING",
]

# Voxel size is a user decision; these defaults resolve body-scale
# skeletal features at tractable memory.
DEFAULT_SPACING = 2.0
DEFAULT_PADDING = 4

_EDGE_EPS = 1e-9  # relative edge-function tolerance flagging a grazing ray
_JITTER = 1e-6  # jitter magnitude in units of spacing
_MAX_RECASTS = 8


def _worker_count() -> int:
    env = os.environ.get("MORPHFORGE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return min(3, os.cpu_count() or 1)


def check_watertight(mesh: TriangleMesh) -> None:
    """Raise OpenSurfaceError unless every edge is shared by exactly 2 triangles."""
    if mesh.is_empty:
        raise EmptyMeshError("cannot voxelize an empty mesh")
    tris = mesh.triangles
    edges = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    bad = int(np.count_nonzero(counts != 2))
    if bad:
        raise OpenSurfaceError(
            f"surface is not watertight: {bad} edges not shared by exactly 2 triangles",
            boundary_edge_count=bad,
        )


def _signed_volume(mesh: TriangleMesh) -> float:
    c = mesh.triangle_corners()
    return float(np.einsum("ij,ij->", c[:, 0], np.cross(c[:, 1], c[:, 2]))) / 6.0


def voxelize(
    mesh: TriangleMesh,
    spacing=DEFAULT_SPACING,
    padding: int = DEFAULT_PADDING,
    *,
    grid: tuple[tuple[int, int, int], np.ndarray] | None = None,
    seed: int = 0,
) -> BinaryImage3D:
    """Voxelize a closed surface into a solid occupancy image.

    The grid covers the mesh bounding box expanded by ``padding`` voxels on
    each side; pass ``grid=(dims, origin)`` to voxelize onto an explicit
    grid instead (used to put several surfaces on one shared grid).
    ``seed`` drives the jitter used to recast degenerate rays.
    """
    spacing = np.asarray(spacing, dtype=float)
    if spacing.ndim == 0:
        spacing = np.full(3, float(spacing))
    if spacing.shape != (3,) or np.any(spacing <= 0):
        raise InputError(f"spacing must be positive (scalar or 3-vector), got {spacing}")

    check_watertight(mesh)
    lo, hi = mesh.bounds()
    if abs(_signed_volume(mesh)) <= 1e-12 * max(float(np.max(hi - lo)), 1.0) ** 3:
        raise DegenerateGeometryError("mesh encloses no volume")

    if grid is None:
        if padding < 0:
            raise InputError(f"padding must be >= 0, got {padding}")
        core = np.maximum(np.ceil((hi - lo) / spacing).astype(int), 1)
        dims = tuple(int(n) for n in core + 2 * padding)
        origin = lo + 0.5 * spacing - padding * spacing
    else:
        dims, origin = grid
        dims = tuple(int(n) for n in dims)
        origin = np.asarray(origin, dtype=float)

    corners = mesh.triangle_corners()
    axes = (0, 1, 2)
    workers = _worker_count()
    # Integer crossing counts make the reduction order irrelevant, so the
    # result is deterministic regardless of the thread pool.
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            votes = list(
                pool.map(
                    lambda ax: _parity_vote(corners, dims, spacing, origin, ax, seed),
                    axes,
                )
            )
    else:
        votes = [_parity_vote(corners, dims, spacing, origin, ax, seed) for ax in axes]
    occupied = (votes[0].astype(np.int8) + votes[1] + votes[2]) >= 2
    return BinaryImage3D(spacing, origin, occupied)


def _parity_vote(corners, dims, spacing, origin, axis, seed) -> np.ndarray:
    """Inside/outside vote from rays parallel to ``axis``; shape = dims."""
    u, v = [a for a in (0, 1, 2) if a != axis]
    nu, nv, nw = dims[u], dims[v], dims[axis]
    hu, hv, hw = spacing[u], spacing[v], spacing[axis]
    ou, ov, ow = origin[u], origin[v], origin[axis]

    tri_u = corners[:, :, u]
    tri_v = corners[:, :, v]
    tri_w = corners[:, :, axis]

    # C[iu, iv, m]: number of surface crossings with exactly m voxel
    # centers below them; suffix sums give crossings above each center.
    counts = np.zeros((nu, nv, nw + 1), dtype=np.int32)
    suspicious = np.zeros((nu, nv), dtype=bool)

    for t in range(len(corners)):
        au, av = tri_u[t], tri_v[t]
        area2 = (au[1] - au[0]) * (av[2] - av[0]) - (au[2] - au[0]) * (av[1] - av[0])
        scale = max(
            abs(au[1] - au[0]) + abs(av[1] - av[0]),
            abs(au[2] - au[1]) + abs(av[2] - av[1]),
            abs(au[0] - au[2]) + abs(av[0] - av[2]),
        )
        if abs(area2) <= _EDGE_EPS * scale * scale:
            continue  # projected to (nearly) zero area: ray lies in its plane

        i0 = max(int(np.ceil((au.min() - ou) / hu - 1e-12)), 0)
        i1 = min(int(np.floor((au.max() - ou) / hu + 1e-12)), nu - 1)
        j0 = max(int(np.ceil((av.min() - ov) / hv - 1e-12)), 0)
        j1 = min(int(np.floor((av.max() - ov) / hv + 1e-12)), nv - 1)
        if i0 > i1 or j0 > j1:
            continue

        iu = np.arange(i0, i1 + 1)
        iv = np.arange(j0, j1 + 1)
        pu = ou + iu * hu
        pv = ov + iv * hv
        PU, PV = np.meshgrid(pu, pv, indexing="ij")
        e0 = (au[1] - au[0]) * (PV - av[0]) - (av[1] - av[0]) * (PU - au[0])
        e1 = (au[2] - au[1]) * (PV - av[1]) - (av[2] - av[1]) * (PU - au[1])
        e2 = (au[0] - au[2]) * (PV - av[2]) - (av[0] - av[2]) * (PU - au[2])
        tol = _EDGE_EPS * scale * scale
        if area2 < 0:
            e0, e1, e2 = -e0, -e1, -e2
        inside = (e0 > tol) & (e1 > tol) & (e2 > tol)
        grazing = (
            (np.abs(e0) <= tol) | (np.abs(e1) <= tol) | (np.abs(e2) <= tol)
        ) & (e0 >= -tol) & (e1 >= -tol) & (e2 >= -tol)
        if grazing.any():
            gi, gj = np.nonzero(grazing)
            suspicious[iu[gi], iv[gj]] = True
        if not inside.any():
            continue

        ii, jj = np.nonzero(inside)
        s = np.abs(area2)
        w0 = e1[ii, jj] / s
        w1 = e2[ii, jj] / s
        w2 = e0[ii, jj] / s
        w_hit = w0 * tri_w[t][0] + w1 * tri_w[t][1] + w2 * tri_w[t][2]
        q = (w_hit - ow) / hw
        near_center = np.abs(q - np.round(q)) <= 1e-9
        if near_center.any():
            suspicious[iu[ii[near_center]], iv[jj[near_center]]] = True
        m = np.clip(np.ceil(q).astype(np.int64), 0, nw)
        np.add.at(counts, (iu[ii], iv[jj], m), 1)

    # A closed surface crosses any full line an even number of times.
    odd_total = (counts.sum(axis=2) & 1).astype(bool)
    suspicious |= odd_total

    above = np.cumsum(counts[:, :, ::-1], axis=2)[:, :, ::-1]
    inside_grid = (above[:, :, 1:] & 1).astype(bool)  # crossings above center iz

    if suspicious.any():
        rng = np.random.default_rng((seed, axis))
        for iu0, iv0 in zip(*np.nonzero(suspicious)):
            inside_grid[iu0, iv0, :] = _recast_ray(
                tri_u, tri_v, tri_w, ou + iu0 * hu, ov + iv0 * hv, ow, hw, hu, hv, nw, rng
            )

    # inside_grid axes are (u, v, ray-axis); permute back to (x, y, z)
    return np.transpose(inside_grid, np.argsort([u, v, axis]))


def _recast_ray(tri_u, tri_v, tri_w, pu, pv, ow, hw, hu, hv, nw, rng) -> np.ndarray:
    """Re-cast one ray with fresh jitters until no triangle is grazed."""
    for attempt in range(_MAX_RECASTS):
        ju = pu + (_JITTER * hu) * (1 if rng.random() < 0.5 else -1) * (1 + attempt)
        jv = pv + (_JITTER * hv) * (1 if rng.random() < 0.5 else -1) * (1 + attempt)
        e0 = (tri_u[:, 1] - tri_u[:, 0]) * (jv - tri_v[:, 0]) - (tri_v[:, 1] - tri_v[:, 0]) * (ju - tri_u[:, 0])
        e1 = (tri_u[:, 2] - tri_u[:, 1]) * (jv - tri_v[:, 1]) - (tri_v[:, 2] - tri_v[:, 1]) * (ju - tri_u[:, 1])
        e2 = (tri_u[:, 0] - tri_u[:, 2]) * (jv - tri_v[:, 2]) - (tri_v[:, 0] - tri_v[:, 2]) * (ju - tri_u[:, 2])
        area2 = (tri_u[:, 1] - tri_u[:, 0]) * (tri_v[:, 2] - tri_v[:, 0]) - (
            tri_u[:, 2] - tri_u[:, 0]
        ) * (tri_v[:, 1] - tri_v[:, 0])
        scale = np.abs(tri_u - tri_u[:, :1]).max(axis=1) + np.abs(tri_v - tri_v[:, :1]).max(axis=1)
        tol = _EDGE_EPS * scale * scale
        flat = np.abs(area2) <= tol
        sign = np.where(area2 < 0, -1.0, 1.0)
        f0, f1, f2 = e0 * sign, e1 * sign, e2 * sign
        inside = (f0 > tol) & (f1 > tol) & (f2 > tol) & ~flat
        grazing = (
            ((np.abs(f0) <= tol) | (np.abs(f1) <= tol) | (np.abs(f2) <= tol))
            & (f0 >= -tol)
            & (f1 >= -tol)
            & (f2 >= -tol)
            & ~flat
        )
        if grazing.any():
            continue
        if not inside.any():
            return np.zeros(nw, dtype=bool)
        s = np.abs(area2[inside])
        w0 = e1[inside] * sign[inside] / s
        w1 = e2[inside] * sign[inside] / s
        w2 = e0[inside] * sign[inside] / s
        w_hit = w0 * tri_w[inside, 0] + w1 * tri_w[inside, 1] + w2 * tri_w[inside, 2]
        if len(w_hit) % 2 != 0:
            continue  # still inconsistent; jitter again
        centers = ow + np.arange(nw) * hw
        above = (w_hit[None, :] > centers[:, None]).sum(axis=1)
        return (above & 1).astype(bool)
    raise DegenerateGeometryError(
        f"ray through ({pu}, {pv}) could not be disambiguated after {_MAX_RECASTS} jitters"
    )


def boundary_voxels(img: BinaryImage3D) -> np.ndarray:
    """Indices (n, 3) of occupied voxels with an unoccupied or out-of-image 6-neighbor."""
    occ = img.data
    padded = np.pad(occ, 1, constant_values=False)
    all_neighbors = (
        padded[:-2, 1:-1, 1:-1]
        & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1]
        & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2]
        & padded[1:-1, 1:-1, 2:]
    )
    return np.argwhere(occ & ~all_neighbors)


def image_union(a: BinaryImage3D, b: BinaryImage3D) -> BinaryImage3D:
    """Voxelwise OR of two images on the identical grid."""
    check_same_grid(a, b, "union operands")
    return BinaryImage3D(a.spacing, a.origin, a.data | b.data)
