"""Grid container types and the header/raw file pair."""

import numpy as np
import pytest

from morphforge.errors import GridMismatchError, InputError
from morphforge.grids import (
    BinaryImage3D,
    DisplacementField,
    ScalarImage3D,
    check_same_grid,
    read_image,
    write_image,
)


def test_binary_image_validates_dims():
    with pytest.raises(InputError):
        BinaryImage3D(1.0, (0, 0, 0), np.zeros((2, 2), dtype=bool))


def test_spacing_must_be_positive():
    with pytest.raises(InputError):
        BinaryImage3D((1.0, 0.0, 1.0), (0, 0, 0), np.zeros((2, 2, 2), dtype=bool))


def test_scalar_image_rejects_nan():
    data = np.zeros((2, 2, 2))
    data[0, 0, 0] = np.nan
    with pytest.raises(InputError):
        ScalarImage3D(1.0, (0, 0, 0), data)


def test_world_index_round_trip():
    img = ScalarImage3D((2.0, 1.0, 0.5), (10.0, -5.0, 0.0), np.zeros((4, 4, 4)))
    p = np.array([13.0, -3.5, 1.25])
    assert np.allclose(img.index_to_world(img.world_to_index(p)), p)


def test_grid_mismatch_message_reports_both():
    a = BinaryImage3D(1.0, (0, 0, 0), np.zeros((2, 2, 2), dtype=bool))
    b = BinaryImage3D(1.0, (1, 0, 0), np.zeros((2, 2, 2), dtype=bool))
    with pytest.raises(GridMismatchError, match=r"dims.*dims"):
        check_same_grid(a, b)


@pytest.mark.parametrize("kind", ["binary", "scalar", "field"])
def test_image_file_round_trip(tmp_path, kind):
    rng = np.random.default_rng(5)
    spacing = (0.5, 1.0, 2.0)
    origin = (-3.0, 4.0, 0.25)
    if kind == "binary":
        img = BinaryImage3D(spacing, origin, rng.random((5, 4, 3)) > 0.5)
    elif kind == "scalar":
        img = ScalarImage3D(spacing, origin, rng.random((5, 4, 3)).astype(np.float32))
    else:
        img = DisplacementField(spacing, origin, rng.random((5, 4, 3, 3)).astype(np.float32))
    path = tmp_path / "img.mhd"
    write_image(img, path)
    back = read_image(path)
    assert type(back) is type(img)
    assert back.dims == img.dims
    assert np.array_equal(back.spacing, img.spacing)
    assert np.array_equal(back.origin, img.origin)
    if kind == "binary":
        assert np.array_equal(back.data, img.data)
    else:
        assert np.allclose(back.data, img.data, atol=0)  # float32 payload is exact here


def test_image_write_is_deterministic(tmp_path):
    rng = np.random.default_rng(9)
    img = ScalarImage3D(1.0, (0, 0, 0), rng.random((6, 5, 4)))
    p1 = tmp_path / "a.mhd"
    p2 = tmp_path / "b.mhd"
    write_image(img, p1)
    write_image(img, p2)
    assert p1.read_bytes().replace(b"a.raw", b"x.raw") == p2.read_bytes().replace(
        b"b.raw", b"x.raw"
    )
    assert (tmp_path / "a.raw").read_bytes() == (tmp_path / "b.raw").read_bytes()


def test_raw_file_is_x_fastest(tmp_path):
    data = np.arange(24).reshape(2, 3, 4).astype(np.float64)  # (nx, ny, nz)
    img = ScalarImage3D(1.0, (0, 0, 0), data)
    write_image(img, tmp_path / "img.mhd")
    raw = np.frombuffer((tmp_path / "img.raw").read_bytes(), dtype="<f4")
    # first two file entries walk x at y=z=0
    assert raw[0] == data[0, 0, 0]
    assert raw[1] == data[1, 0, 0]
    assert raw[2] == data[0, 1, 0]  # then y increments


def test_read_image_missing_key(tmp_path):
    path = tmp_path / "bad.mhd"
    path.write_text("NDims = 3\nDimSize = 2 2 2\n")
    with pytest.raises(InputError, match="missing keys"):
        read_image(path)


def test_read_image_size_mismatch(tmp_path):
    path = tmp_path / "bad.mhd"
    path.write_text(
        "NDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 1\nOffset = 0 0 0\n"
        "ElementType = UINT8\nElementNumberOfChannels = 1\nElementDataFile = bad.raw\n"
    )
    (tmp_path / "bad.raw").write_bytes(b"\0" * 3)
    with pytest.raises(InputError, match="expected 8"):
        read_image(path)
