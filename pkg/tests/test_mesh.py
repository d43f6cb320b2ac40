"""STL and neutral-mesh I/O, rigid transforms, and the landmark fit."""

import struct

import numpy as np
import pytest

from morphforge.errors import (
    DegenerateGeometryError,
    EmptyMeshError,
    InputError,
    MeshFormatError,
)
from morphforge.mesh import (
    Element,
    FEMesh,
    RigidTransform,
    TriangleMesh,
    apply_rigid,
    fit_rigid,
    read_femesh,
    read_landmarks,
    read_stl,
    write_femesh,
    write_stl,
)


def make_box_mesh():
    """Closed unit cube: 8 corners, 12 outward-wound triangles."""
    v = np.array(
        [
            [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
            [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
        ],
        dtype=float,
    )
    f = np.array(
        [
            [0, 2, 1], [0, 3, 2],
            [4, 5, 6], [4, 6, 7],
            [0, 1, 5], [0, 5, 4],
            [2, 3, 7], [2, 7, 6],
            [1, 2, 6], [1, 6, 5],
            [0, 4, 7], [0, 7, 3],
        ]
    )
    return TriangleMesh(v, f)


def write_binary_stl_bytes(corners):
    """Hand-build a binary STL blob from (m, 3, 3) facet corners."""
    blob = b"test".ljust(80, b"\0") + struct.pack("<I", len(corners))
    for tri in corners:
        blob += struct.pack("<3f", 0.0, 0.0, 0.0)
        for vert in tri:
            blob += struct.pack("<3f", *vert)
        blob += b"\0\0"
    return blob


# --------------------------------------------------------------------------
# STL reading
# --------------------------------------------------------------------------

def test_read_ascii_single_triangle(tmp_path):
    path = tmp_path / "tri.stl"
    path.write_text(
        "solid t\n"
        " facet normal 0 0 1\n"
        "  outer loop\n"
        "   vertex 0 0 0\n"
        "   vertex 1 0 0\n"
        "   vertex 0 1 0\n"
        "  endloop\n"
        " endfacet\n"
        "endsolid t\n"
    )
    mesh = read_stl(path)
    assert len(mesh.vertices) == 3
    assert len(mesh.triangles) == 1


def test_read_binary_zero_facets_is_empty_error(tmp_path):
    path = tmp_path / "empty.stl"
    path.write_bytes(b"x" * 80 + struct.pack("<I", 0))
    with pytest.raises(EmptyMeshError):
        read_stl(path)


def test_read_binary_box_dedups_to_8_vertices(tmp_path):
    # hand-enumerated corners: 12 facets, 36 corner records, 8 unique points
    box = make_box_mesh()
    blob = write_binary_stl_bytes(box.triangle_corners())
    path = tmp_path / "box.stl"
    path.write_bytes(blob)
    mesh = read_stl(path)
    assert len(mesh.triangles) == 12
    assert len(mesh.vertices) == 8


def test_read_malformed_binary_reports_offset(tmp_path):
    path = tmp_path / "bad.stl"
    path.write_bytes(b"binarystl".ljust(80, b"\0") + struct.pack("<I", 5) + b"\0" * 10)
    with pytest.raises(MeshFormatError) as err:
        read_stl(path)
    assert err.value.offset is not None


def test_read_malformed_ascii_vertex_line(tmp_path):
    path = tmp_path / "bad.stl"
    path.write_text("solid t\nouter loop\nvertex 0 0\nendloop\n")
    with pytest.raises(MeshFormatError):
        read_stl(path)


# --------------------------------------------------------------------------
# STL writing / round trips
# --------------------------------------------------------------------------

def test_roundtrip_ascii_single_triangle(tmp_path):
    mesh = TriangleMesh(
        [[0.1, 0.2, 0.3], [1.5, 0.25, 0.125], [0.0, 1.0, 2.0]], [[0, 1, 2]]
    )
    path = tmp_path / "tri.stl"
    write_stl(mesh, path, format="ascii")
    back = read_stl(path)
    # same triangle as a set of corner coordinates
    orig = mesh.triangle_corners()[0]
    got = back.triangle_corners()[0]
    assert np.allclose(sorted(map(tuple, got)), sorted(map(tuple, orig)), atol=1e-6)


@pytest.mark.parametrize("fmt", ["ascii", "binary"])
def test_roundtrip_box(tmp_path, fmt):
    box = make_box_mesh()
    path = tmp_path / "box.stl"
    write_stl(box, path, format=fmt)
    back = read_stl(path)
    assert len(back.triangles) == 12
    assert len(back.vertices) == 8
    assert np.allclose(
        np.array(sorted(map(tuple, back.vertices))),
        np.array(sorted(map(tuple, box.vertices))),
        atol=1e-6,
    )


def test_write_empty_mesh_is_error(tmp_path):
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
    with pytest.raises(EmptyMeshError):
        write_stl(empty, tmp_path / "e.stl")


# --------------------------------------------------------------------------
# Neutral FE mesh format
# --------------------------------------------------------------------------

def unit_cube_femesh():
    coords = [
        [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
        [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
    ]
    el = Element(1, "hex8", "body", (1, 2, 3, 4, 5, 6, 7, 8))
    return FEMesh(np.arange(1, 9), coords, [el])


def test_femesh_roundtrip_unit_cube(tmp_path):
    mesh = unit_cube_femesh()
    path = tmp_path / "cube.txt"
    write_femesh(mesh, path)
    back = read_femesh(path)
    assert np.array_equal(back.node_ids, mesh.node_ids)
    assert np.array_equal(back.coords, mesh.coords)
    assert back.elements == mesh.elements


def test_femesh_missing_node_reference(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("NODE 1 0 0 0\nNODE 2 1 0 0\nNODE 3 0 1 0\nELEM 7 tri3 shell 1 2 99\n")
    with pytest.raises(InputError, match="element 7.*node 99"):
        read_femesh(path)


def test_femesh_canonical_reemission_byte_identical(tmp_path):
    # two parts, mixed hex/tet, unsorted ids and ragged whitespace
    raw = tmp_path / "raw.txt"
    raw.write_text(
        "# comment\n"
        "NODE 10 0 0 0\n"
        "NODE 2   1.0  0 0\n"
        "NODE 3 1 1 0\nNODE 4 0 1 0\n"
        "NODE 5 0 0 1\nNODE 6 1 0 1\nNODE 7 1 1 1\nNODE 8 0 1 1\n"
        "NODE 9 2 0 0.5\n"
        "ELEM 2 tet4 partB 2 3 9 7\n"
        "ELEM 1 hex8 partA 10 2 3 4 5 6 7 8\n"
    )
    mesh = read_femesh(raw)
    out1 = tmp_path / "c1.txt"
    out2 = tmp_path / "c2.txt"
    write_femesh(mesh, out1)
    write_femesh(read_femesh(out1), out2)
    assert out1.read_bytes() == out2.read_bytes()


def test_femesh_arity_validation():
    with pytest.raises(InputError):
        Element(1, "hex8", "p", (1, 2, 3))
    with pytest.raises(InputError):
        Element(1, "pent5", "p", (1, 2, 3, 4, 5))


# --------------------------------------------------------------------------
# Rigid transforms
# --------------------------------------------------------------------------

def test_apply_rigid_identity():
    box = make_box_mesh()
    out = apply_rigid(box, RigidTransform.identity())
    assert np.array_equal(out.vertices, box.vertices)
    assert np.array_equal(out.triangles, box.triangles)


def test_apply_rigid_translation():
    box = make_box_mesh()
    t = RigidTransform(np.eye(3), [10.0, 0.0, 0.0])
    out = apply_rigid(box, t)
    assert np.allclose(out.vertices[:, 0], box.vertices[:, 0] + 10.0)
    assert np.array_equal(out.vertices[:, 1:], box.vertices[:, 1:])


def test_apply_rigid_90deg_z_rotation():
    rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = RigidTransform(rot, np.zeros(3))
    p = t.apply_points(np.array([1.0, 0.0, 0.0]))
    assert np.allclose(p, [0.0, 1.0, 0.0], atol=1e-12)


def test_rigid_transform_rejects_reflection():
    with pytest.raises(InputError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_apply_rigid_preserves_pairwise_distances():
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(20, 3)) * 50
    mesh = TriangleMesh(pts, [[0, 1, 2]])
    for _ in range(5):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(0, 2 * np.pi)
        k = np.array(
            [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
        )
        rot = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
        t = RigidTransform(rot, rng.normal(size=3) * 10)
        out = apply_rigid(mesh, t)
        d_before = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        d_after = np.linalg.norm(out.vertices[:, None] - out.vertices[None, :], axis=2)
        assert np.allclose(d_after, d_before, rtol=1e-9, atol=1e-9)


# --------------------------------------------------------------------------
# fit_rigid
# --------------------------------------------------------------------------

def test_fit_rigid_identity():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    t = fit_rigid(pts, pts)
    assert np.allclose(t.rotation, np.eye(3), atol=1e-9)
    assert np.allclose(t.translation, 0, atol=1e-9)


def test_fit_rigid_pure_translation():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    t = fit_rigid(pts, pts + [5.0, 5.0, 5.0])
    assert np.allclose(t.rotation, np.eye(3), atol=1e-9)
    assert np.allclose(t.translation, [5, 5, 5], atol=1e-9)


def test_fit_rigid_recovers_known_rotation():
    # construct a 30 degree rotation, apply it, recover it
    rng = np.random.default_rng(3)
    src = rng.normal(size=(10, 3)) * 20
    angle = np.pi / 6
    rot = np.array(
        [
            [np.cos(angle), -np.sin(angle), 0],
            [np.sin(angle), np.cos(angle), 0],
            [0, 0, 1],
        ]
    )
    tr = np.array([4.0, -2.0, 7.0])
    dst = src @ rot.T + tr
    t = fit_rigid(src, dst)
    assert np.allclose(t.rotation, rot, atol=1e-6)
    assert np.allclose(t.translation, tr, atol=1e-6)


def test_fit_rigid_too_few_points():
    with pytest.raises(DegenerateGeometryError):
        fit_rigid([[0, 0, 0], [1, 1, 1]], [[0, 0, 0], [1, 1, 1]])


def test_fit_rigid_collinear_points():
    src = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=float)
    with pytest.raises(DegenerateGeometryError):
        fit_rigid(src, src + 1.0)


def test_fit_after_apply_is_identity():
    rng = np.random.default_rng(11)
    src = rng.normal(size=(8, 3)) * 30
    angle = 0.7
    rot = np.array(
        [
            [np.cos(angle), 0, np.sin(angle)],
            [0, 1, 0],
            [-np.sin(angle), 0, np.cos(angle)],
        ]
    )
    t = RigidTransform(rot, [1.0, 2.0, 3.0])
    moved = t.apply_points(src)
    t2 = fit_rigid(moved, moved)
    assert np.allclose(t2.rotation, np.eye(3), atol=1e-6)
    assert np.allclose(t2.translation, 0, atol=1e-6)


# --------------------------------------------------------------------------
# landmarks
# --------------------------------------------------------------------------

def test_read_landmarks(tmp_path):
    path = tmp_path / "lm.txt"
    path.write_text("# src xyz, dst xyz\n0 0 0 1 1 1\n1 0 0 2 1 1\n0 1 0 1 2 1\n")
    src, dst = read_landmarks(path)
    assert src.shape == (3, 3)
    assert np.allclose(dst - src, 1.0)


def test_read_landmarks_bad_column_count(tmp_path):
    path = tmp_path / "lm.txt"
    path.write_text("0 0 0 1 1\n")
    with pytest.raises(InputError):
        read_landmarks(path)
