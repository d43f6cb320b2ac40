"""Surface and volume mesh types, STL and neutral FE-mesh I/O, rigid alignment.

Coordinates are millimeters throughout. All types are immutable after
construction; the transform operations return new meshes.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateGeometryError,
    EmptyMeshError,
    InputError,
    MeshFormatError,
)

__all__ = [
    "TriangleMesh",
    "FEMesh",
    "Element",
    "RigidTransform",
    "ELEMENT_ARITY",
    "read_stl",
    "write_stl",
    "read_femesh",
    "write_femesh",
    "apply_rigid",
    "fit_rigid",
    "read_landmarks",
]

ELEMENT_ARITY = {"hex8": 8, "tet4": 4, "tri3": 3, "quad4": 4}


@dataclass(frozen=True)
class TriangleMesh:
    """Triangulated surface: ``vertices`` (n, 3) float mm, ``triangles`` (m, 3) int."""

    vertices: np.ndarray = field(repr=False)
    triangles: np.ndarray = field(repr=False)

    def __post_init__(self):
        verts = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        tris = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64))
        if verts.size == 0:
            verts = verts.reshape(0, 3)
        if tris.size == 0:
            tris = tris.reshape(0, 3)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise InputError(f"vertices must have shape (n, 3), got {verts.shape}")
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise InputError(f"triangles must have shape (m, 3), got {tris.shape}")
        if tris.size:
            if tris.min() < 0 or tris.max() >= len(verts):
                raise InputError("triangle index out of range")
            if (
                np.any(tris[:, 0] == tris[:, 1])
                or np.any(tris[:, 1] == tris[:, 2])
                or np.any(tris[:, 0] == tris[:, 2])
            ):
                raise InputError("triangle with repeated vertex")
        if len(verts) and len(verts) < 3:
            raise InputError("non-empty mesh needs at least 3 vertices")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self.is_empty:
            raise EmptyMeshError("empty mesh has no bounds")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def triangle_corners(self) -> np.ndarray:
        """Corner positions per triangle, shape (m, 3, 3)."""
        return self.vertices[self.triangles]


@dataclass(frozen=True)
class Element:
    """One finite element: id, kind (hex8/tet4/tri3/quad4), part label, node ids."""

    eid: int
    kind: str
    part: str
    nodes: tuple[int, ...]

    def __post_init__(self):
        if self.kind not in ELEMENT_ARITY:
            raise InputError(f"unknown element kind {self.kind!r} (element {self.eid})")
        if len(self.nodes) != ELEMENT_ARITY[self.kind]:
            raise InputError(
                f"element {self.eid}: kind {self.kind} needs "
                f"{ELEMENT_ARITY[self.kind]} nodes, got {len(self.nodes)}"
            )


class FEMesh:
    """Volumetric/shell node-element mesh with per-element part labels."""

    def __init__(self, node_ids, coords, elements: tuple[Element, ...] | list[Element]):
        node_ids = np.ascontiguousarray(np.asarray(node_ids, dtype=np.int64))
        coords = np.ascontiguousarray(np.asarray(coords, dtype=np.float64))
        if coords.size == 0:
            coords = coords.reshape(0, 3)
        if node_ids.ndim != 1 or coords.ndim != 2 or coords.shape != (len(node_ids), 3):
            raise InputError(
                f"node_ids (n,) and coords (n, 3) mismatch: {node_ids.shape} vs {coords.shape}"
            )
        if len(np.unique(node_ids)) != len(node_ids):
            raise InputError("duplicate node ids")
        index = {int(nid): i for i, nid in enumerate(node_ids)}
        for el in elements:
            for nid in el.nodes:
                if nid not in index:
                    raise InputError(f"element {el.eid} references missing node {nid}")
        self.node_ids = node_ids
        self.coords = coords
        self.elements = tuple(elements)
        self._index = index

    def node_index(self, nid: int) -> int:
        return self._index[int(nid)]

    @property
    def parts(self) -> set[str]:
        return {el.part for el in self.elements}

    def with_coords(self, coords: np.ndarray) -> "FEMesh":
        """Same topology with replaced node positions."""
        return FEMesh(self.node_ids, coords, self.elements)

    def element_node_indices(self, el: Element) -> np.ndarray:
        return np.array([self._index[n] for n in el.nodes], dtype=np.int64)


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion p -> R @ p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise InputError(f"rotation must be 3x3, got {rot.shape}")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9):
            raise InputError("rotation is not orthonormal within 1e-9")
        if not np.isclose(np.linalg.det(rot), 1.0, atol=1e-9):
            raise InputError("rotation determinant is not +1 (reflection?)")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation


def apply_rigid(mesh, transform: RigidTransform):
    """Apply a rigid transform to every point of a mesh; connectivity unchanged."""
    if isinstance(mesh, TriangleMesh):
        return TriangleMesh(transform.apply_points(mesh.vertices), mesh.triangles)
    if isinstance(mesh, FEMesh):
        return mesh.with_coords(transform.apply_points(mesh.coords))
    raise InputError(f"apply_rigid: unsupported mesh type {type(mesh).__name__}")


def fit_rigid(source_landmarks, target_landmarks) -> RigidTransform:
    """Least-squares proper rigid fit mapping source landmarks onto targets.

    Closed-form SVD solution; reflections are corrected so the rotation
    determinant is +1. Requires at least 3 non-collinear point pairs in
    corresponding order.
    """
    src = np.asarray(source_landmarks, dtype=np.float64)
    dst = np.asarray(target_landmarks, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 3 or src.shape != dst.shape:
        raise InputError(
            f"landmarks must be matching (n, 3) arrays, got {src.shape} and {dst.shape}"
        )
    if len(src) < 3:
        raise DegenerateGeometryError(f"rigid fit needs >= 3 landmark pairs, got {len(src)}")

    src_c = src - src.mean(axis=0)
    dst_c = dst - dst.mean(axis=0)
    cov = src_c.T @ dst_c
    u, s, vt = np.linalg.svd(cov)
    # Collinear sources leave the rotation about their axis undetermined.
    scale = max(s[0], np.linalg.norm(src_c) ** 2, 1e-30)
    if s[1] <= 1e-12 * scale:
        raise DegenerateGeometryError("landmarks are collinear; rigid fit is underdetermined")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    tr = dst.mean(axis=0) - rot @ src.mean(axis=0)
    return RigidTransform(rot, tr)


def read_landmarks(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Read paired landmarks: one `sx sy sz tx ty tz` line per pair, `#` comments."""
    src, dst = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise InputError(f"{path}:{lineno}: expected 6 numbers, got {len(parts)}")
            try:
                values = [float(t) for t in parts]
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
            src.append(values[:3])
            dst.append(values[3:])
    if not src:
        raise InputError(f"{path}: no landmark pairs found")
    return np.array(src), np.array(dst)


# --------------------------------------------------------------------------
# STL
# --------------------------------------------------------------------------

def _dedup_vertices(corners: np.ndarray) -> TriangleMesh:
    """Build a mesh from per-facet corners, merging bitwise-equal coordinates."""
    flat = corners.reshape(-1, 3)
    uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
    tris = inverse.reshape(-1, 3)
    return TriangleMesh(uniq, tris)


def read_stl(path: str | os.PathLike) -> TriangleMesh:
    """Read an ASCII or binary STL file into a vertex-deduplicated mesh.

    Vertex merging is exact coordinate match only; no tolerance welding.
    Triangle winding is preserved as stored.
    """
    path = os.fspath(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 15:
        raise MeshFormatError(f"{path}: too short to be an STL file", offset=len(blob))

    # Binary layout check first: many binary files also start with 'solid'.
    if len(blob) >= 84:
        (count,) = struct.unpack_from("<I", blob, 80)
        if 84 + 50 * count == len(blob):
            return _read_stl_binary(path, blob, count)
    if blob[:5].lower() == b"solid":
        return _read_stl_ascii(path, blob)
    if len(blob) >= 84:
        (count,) = struct.unpack_from("<I", blob, 80)
        raise MeshFormatError(
            f"{path}: binary facet count {count} does not match file size {len(blob)}",
            offset=80,
        )
    raise MeshFormatError(f"{path}: not a recognizable STL file", offset=0)


def _read_stl_binary(path: str, blob: bytes, count: int) -> TriangleMesh:
    if count == 0:
        raise EmptyMeshError(f"{path}: binary STL declares 0 facets")
    raw = np.frombuffer(blob[84 : 84 + 50 * count], dtype=np.uint8).reshape(count, 50)
    floats = raw[:, :48].copy().view("<f4").reshape(count, 4, 3)
    corners = floats[:, 1:4, :].astype(np.float64)  # row 0 is the stored normal
    if not np.all(np.isfinite(corners)):
        bad = int(np.argwhere(~np.isfinite(corners.reshape(count, -1)).all(axis=1))[0][0])
        raise MeshFormatError(
            f"{path}: non-finite vertex in facet {bad}", offset=84 + 50 * bad
        )
    return _dedup_vertices(corners)


def _read_stl_ascii(path: str, blob: bytes) -> TriangleMesh:
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MeshFormatError(f"{path}: invalid UTF-8 in ASCII STL", offset=exc.start) from exc

    corners: list[list[float]] = []
    offset = 0
    in_loop = False
    loop_verts = 0
    for line in text.splitlines(keepends=True):
        stripped = line.strip()
        tokens = stripped.split()
        if tokens:
            head = tokens[0].lower()
            if head == "vertex":
                if len(tokens) != 4:
                    raise MeshFormatError(f"{path}: malformed vertex line {stripped!r}", offset=offset)
                try:
                    corners.append([float(t) for t in tokens[1:]])
                except ValueError:
                    raise MeshFormatError(f"{path}: bad vertex number in {stripped!r}", offset=offset)
                loop_verts += 1
            elif head == "outer":
                in_loop = True
                loop_verts = 0
            elif head == "endloop":
                if not in_loop or loop_verts != 3:
                    raise MeshFormatError(
                        f"{path}: facet loop with {loop_verts} vertices (need 3)", offset=offset
                    )
                in_loop = False
        offset += len(line.encode("utf-8"))
    if in_loop:
        raise MeshFormatError(f"{path}: unterminated facet loop", offset=offset)
    if not corners:
        raise EmptyMeshError(f"{path}: ASCII STL contains no facets")
    if len(corners) % 3 != 0:
        raise MeshFormatError(f"{path}: vertex count {len(corners)} not a multiple of 3", offset=offset)
    arr = np.array(corners, dtype=np.float64).reshape(-1, 3, 3)
    return _dedup_vertices(arr)


def write_stl(mesh: TriangleMesh, path: str | os.PathLike, format: str = "binary") -> None:
    """Write a mesh as ASCII or little-endian binary STL."""
    if mesh.is_empty:
        raise EmptyMeshError("refusing to write an empty mesh")
    if format not in ("ascii", "binary"):
        raise InputError(f"format must be 'ascii' or 'binary', got {format!r}")
    path = os.fspath(path)
    corners = mesh.triangle_corners()
    e1 = corners[:, 1] - corners[:, 0]
    e2 = corners[:, 2] - corners[:, 0]
    normals = np.cross(e1, e2)
    lengths = np.linalg.norm(normals, axis=1)
    nonzero = lengths > 0
    normals[nonzero] /= lengths[nonzero, None]

    if format == "ascii":
        lines = ["solid morphforge"]
        for n, tri in zip(normals, corners):
            lines.append(f"  facet normal {n[0]:.9e} {n[1]:.9e} {n[2]:.9e}")
            lines.append("    outer loop")
            for v in tri:
                # 17 significant digits: ASCII round-trips are bit-exact
                lines.append(f"      vertex {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
            lines.append("    endloop")
            lines.append("  endfacet")
        lines.append("endsolid morphforge")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
        return

    count = len(corners)
    rec = np.zeros((count, 50), dtype=np.uint8)
    packed = np.concatenate(
        [normals.astype("<f4")[:, None, :], corners.astype("<f4")], axis=1
    ).reshape(count, 48 // 4)
    rec[:, :48] = packed.view(np.uint8).reshape(count, 48)
    header = b"morphforge binary STL".ljust(80, b" ")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<I", count))
        fh.write(rec.tobytes())


# --------------------------------------------------------------------------
# Neutral FE mesh format
# --------------------------------------------------------------------------
# Line-oriented UTF-8 text, whitespace-delimited, '#' starts a comment:
#   NODE <id> <x> <y> <z>
#   ELEM <id> <kind> <part> <n1> ... <nk>
# Coordinates are written with 17 significant digits so round-trips are
# lossless; canonical emission sorts nodes and elements by id.


def read_femesh(path: str | os.PathLike) -> FEMesh:
    path = os.fspath(path)
    node_ids: list[int] = []
    coords: list[list[float]] = []
    elements: list[Element] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            tag = tokens[0].upper()
            try:
                if tag == "NODE":
                    if len(tokens) != 5:
                        raise InputError(f"{path}:{lineno}: NODE needs id + 3 coords")
                    node_ids.append(int(tokens[1]))
                    coords.append([float(t) for t in tokens[2:5]])
                elif tag == "ELEM":
                    if len(tokens) < 5:
                        raise InputError(f"{path}:{lineno}: ELEM line too short")
                    eid = int(tokens[1])
                    kind = tokens[2].lower()
                    part = tokens[3]
                    if kind not in ELEMENT_ARITY:
                        raise InputError(f"{path}:{lineno}: unknown element kind {kind!r}")
                    arity = ELEMENT_ARITY[kind]
                    nodes = tuple(int(t) for t in tokens[4:])
                    if len(nodes) != arity:
                        raise InputError(
                            f"{path}:{lineno}: element {eid} kind {kind} needs {arity} nodes, "
                            f"got {len(nodes)}"
                        )
                    elements.append(Element(eid, kind, part, nodes))
                else:
                    raise InputError(f"{path}:{lineno}: unknown record {tokens[0]!r}")
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
    return FEMesh(np.array(node_ids, dtype=np.int64), np.array(coords), elements)


def write_femesh(mesh: FEMesh, path: str | os.PathLike) -> None:
    path = os.fspath(path)
    order = np.argsort(mesh.node_ids, kind="stable")
    lines = []
    for i in order:
        x, y, z = (f"{c:.17g}" for c in mesh.coords[i])
        lines.append(f"NODE {mesh.node_ids[i]} {x} {y} {z}")
    for el in sorted(mesh.elements, key=lambda e: e.eid):
        nodes = " ".join(str(n) for n in el.nodes)
        lines.append(f"ELEM {el.eid} {el.kind} {el.part} {nodes}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
