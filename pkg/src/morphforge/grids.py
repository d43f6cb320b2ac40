"""Regular-grid image containers and their two-file (header + raw) format.

Three containers share one grid model: a binary occupancy image, a scalar
intensity image, and a dense per-voxel 3-vector displacement field. The
grid is axis-aligned; ``origin`` is the world position (mm) of the center
of voxel (0, 0, 0) and voxel (i, j, k) has center ``origin + (i,j,k) *
spacing``. Array data is indexed ``data[ix, iy, iz]`` (fields carry a
trailing channel axis).

On disk the containers use a MetaImage-style pair: a UTF-8 key/value
header (``.mhd``) next to a little-endian raw file, x-fastest, channels
interleaved. Binary images are stored as UINT8, everything else FLOAT32.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatchError, InputError

__all__ = [
    "BinaryImage3D",
    "ScalarImage3D",
    "DisplacementField",
    "read_image",
    "write_image",
    "same_grid",
    "check_same_grid",
    "resample_scalar_to",
]


def _as_vec3(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if np.isscalar(value) or arr.ndim == 0:
        arr = np.full(3, float(arr))
    if arr.shape != (3,):
        raise InputError(f"{name} must be a scalar or 3-vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class _Grid3:
    """Common grid metadata plus the voxel payload."""

    spacing: np.ndarray
    origin: np.ndarray
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "spacing", _as_vec3(self.spacing, "spacing"))
        object.__setattr__(self, "origin", _as_vec3(self.origin, "origin"))
        if np.any(self.spacing <= 0):
            raise InputError(f"spacing must be positive on every axis, got {self.spacing}")
        if any(n < 1 for n in self.dims):
            raise InputError(f"image dims must be >= 1 on every axis, got {self.dims}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape[:3])

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def index_to_world(self, idx) -> np.ndarray:
        """World position (mm) of fractional voxel index ``idx`` (..., 3)."""
        return self.origin + np.asarray(idx, dtype=float) * self.spacing

    def world_to_index(self, p) -> np.ndarray:
        """Fractional voxel index of world position ``p`` (..., 3)."""
        return (np.asarray(p, dtype=float) - self.origin) / self.spacing

    def grid_like(self) -> tuple[tuple[int, int, int], np.ndarray, np.ndarray]:
        return self.dims, self.spacing.copy(), self.origin.copy()


class BinaryImage3D(_Grid3):
    """Voxel occupancy grid. ``data`` is bool, shape (nx, ny, nz)."""

    def __init__(self, spacing, origin, data):
        data = np.ascontiguousarray(np.asarray(data).astype(bool, copy=False))
        if data.ndim != 3:
            raise InputError(f"binary image data must be 3-D, got ndim={data.ndim}")
        super().__init__(spacing, origin, data)

    @property
    def occupied_count(self) -> int:
        return int(np.count_nonzero(self.data))


class ScalarImage3D(_Grid3):
    """Real-valued intensity grid. ``data`` is float64, shape (nx, ny, nz)."""

    def __init__(self, spacing, origin, data):
        data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if data.ndim != 3:
            raise InputError(f"scalar image data must be 3-D, got ndim={data.ndim}")
        if not np.all(np.isfinite(data)):
            raise InputError("scalar image contains non-finite values")
        super().__init__(spacing, origin, data)


class DisplacementField(_Grid3):
    """Per-voxel 3-vector field (mm), shape (nx, ny, nz, 3), defined on the fixed grid."""

    def __init__(self, spacing, origin, data):
        data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if data.ndim != 4 or data.shape[3] != 3:
            raise InputError(f"displacement data must have shape (nx,ny,nz,3), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InputError("displacement field contains non-finite values")
        super().__init__(spacing, origin, data)

    @property
    def magnitudes(self) -> np.ndarray:
        return np.linalg.norm(self.data, axis=3)


def same_grid(a: _Grid3, b: _Grid3) -> bool:
    return (
        a.dims == b.dims
        and np.array_equal(a.spacing, b.spacing)
        and np.array_equal(a.origin, b.origin)
    )


def check_same_grid(a: _Grid3, b: _Grid3, what: str = "images") -> None:
    if not same_grid(a, b):
        raise GridMismatchError(
            f"{what} are on different grids: "
            f"dims {a.dims} spacing {a.spacing} origin {a.origin} vs "
            f"dims {b.dims} spacing {b.spacing} origin {b.origin}"
        )


def resample_scalar_to(src: ScalarImage3D, like: _Grid3, cval: float = 0.0) -> ScalarImage3D:
    """Trilinearly resample ``src`` onto the grid of ``like`` (world-aligned)."""
    from scipy.ndimage import map_coordinates

    idx = np.indices(like.dims, dtype=float)
    world = like.origin.reshape(3, 1, 1, 1) + idx * like.spacing.reshape(3, 1, 1, 1)
    coords = (world - src.origin.reshape(3, 1, 1, 1)) / src.spacing.reshape(3, 1, 1, 1)
    out = map_coordinates(src.data, coords.reshape(3, -1), order=1, mode="constant", cval=cval)
    return ScalarImage3D(like.spacing, like.origin, out.reshape(like.dims))


# --------------------------------------------------------------------------
# Header + raw container I/O
# --------------------------------------------------------------------------

_HEADER_KEYS = (
    "NDims",
    "DimSize",
    "ElementSpacing",
    "Offset",
    "ElementType",
    "ElementNumberOfChannels",
    "ElementDataFile",
)


def _fmt_floats(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def write_image(img: _Grid3, path: str | os.PathLike) -> None:
    """Write a grid container as a header/raw pair.

    ``path`` names the header; the raw file is written next to it with the
    same stem. Output bytes are a pure function of the image content.
    """
    path = os.fspath(path)
    if not path.endswith(".mhd"):
        raise InputError(f"image header path must end in .mhd: {path}")
    raw_name = os.path.basename(path)[:-4] + ".raw"
    raw_path = os.path.join(os.path.dirname(path), raw_name)

    if isinstance(img, BinaryImage3D):
        elem_type, channels = "UINT8", 1
        payload = img.data.astype(np.uint8)
    elif isinstance(img, ScalarImage3D):
        elem_type, channels = "FLOAT32", 1
        payload = img.data.astype("<f4")
    elif isinstance(img, DisplacementField):
        elem_type, channels = "FLOAT32", 3
        payload = img.data.astype("<f4")
    else:
        raise InputError(f"unsupported image type {type(img).__name__}")

    nx, ny, nz = img.dims
    header = (
        f"NDims = 3\n"
        f"DimSize = {nx} {ny} {nz}\n"
        f"ElementSpacing = {_fmt_floats(img.spacing)}\n"
        f"Offset = {_fmt_floats(img.origin)}\n"
        f"ElementType = {elem_type}\n"
        f"ElementNumberOfChannels = {channels}\n"
        f"ElementDataFile = {raw_name}\n"
    )
    # x-fastest on disk: transpose spatial axes so x becomes the innermost,
    # channels (if any) stay innermost of all.
    if payload.ndim == 3:
        flat = payload.transpose(2, 1, 0).tobytes()
    else:
        flat = payload.transpose(2, 1, 0, 3).tobytes()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header)
    with open(raw_path, "wb") as fh:
        fh.write(flat)


def read_image(path: str | os.PathLike) -> BinaryImage3D | ScalarImage3D | DisplacementField:
    """Read a header/raw container pair written by :func:`write_image`."""
    path = os.fspath(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read image header {path}: {exc}") from exc

    kv: dict[str, str] = {}
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"malformed header line in {path}: {line!r}")
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()

    missing = [k for k in _HEADER_KEYS if k not in kv]
    if missing:
        raise InputError(f"header {path} missing keys: {', '.join(missing)}")
    if kv["NDims"] != "3":
        raise InputError(f"header {path}: only NDims = 3 is supported, got {kv['NDims']}")

    dims = tuple(int(t) for t in kv["DimSize"].split())
    spacing = np.array([float(t) for t in kv["ElementSpacing"].split()])
    origin = np.array([float(t) for t in kv["Offset"].split()])
    channels = int(kv["ElementNumberOfChannels"])
    elem_type = kv["ElementType"]
    if len(dims) != 3 or spacing.shape != (3,) or origin.shape != (3,):
        raise InputError(f"header {path}: DimSize/ElementSpacing/Offset must have 3 entries")

    raw_path = os.path.join(os.path.dirname(path), kv["ElementDataFile"])
    try:
        blob = np.fromfile(raw_path, dtype=np.uint8)
    except OSError as exc:
        raise InputError(f"cannot read raw data {raw_path}: {exc}") from exc

    nx, ny, nz = dims
    n_values = nx * ny * nz * channels
    if elem_type == "UINT8":
        expected = n_values
        values = blob
    elif elem_type == "FLOAT32":
        expected = 4 * n_values
        values = blob.view("<f4")
    else:
        raise InputError(f"header {path}: unsupported ElementType {elem_type}")
    if blob.size != expected:
        raise InputError(
            f"raw file {raw_path} has {blob.size} bytes, expected {expected} "
            f"for {dims} x {channels} {elem_type}"
        )

    if channels == 1:
        arr = values.reshape(nz, ny, nx).transpose(2, 1, 0)
        if elem_type == "UINT8":
            return BinaryImage3D(spacing, origin, arr != 0)
        return ScalarImage3D(spacing, origin, arr)
    if channels == 3:
        if elem_type != "FLOAT32":
            raise InputError(f"header {path}: 3-channel images must be FLOAT32")
        arr = values.reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3)
        return DisplacementField(spacing, origin, arr)
    raise InputError(f"header {path}: ElementNumberOfChannels must be 1 or 3, got {channels}")
