"""Exception types shared across the toolkit.

The CLI maps `InputError` subclasses to exit code 2 (bad input or
validation failure) and `NumericalError` to exit code 3 (divergence or
non-finite arithmetic).
"""


class MorphforgeError(Exception):
    """Base class for all toolkit errors."""


class InputError(MorphforgeError):
    """Invalid user input: bad files, bad arguments, failed validation."""


class MeshFormatError(InputError):
    """Malformed mesh file. Carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EmptyMeshError(InputError):
    """Mesh file contains no facets, or an empty mesh was passed where one is required."""


class OpenSurfaceError(InputError):
    """Surface is not watertight. Carries the number of bad (non-2-manifold) edges."""

    def __init__(self, message: str, boundary_edge_count: int = 0):
        super().__init__(message)
        self.boundary_edge_count = boundary_edge_count


class DegenerateGeometryError(InputError):
    """Geometry has no usable extent (zero volume, collinear landmarks, ...)."""


class GridMismatchError(InputError):
    """Two grid images were combined but their grids are incompatible."""


class UndefinedMetricError(InputError):
    """A metric is undefined for the given input (e.g. distances to an empty set)."""


class NumericalError(MorphforgeError):
    """Iteration diverged or produced non-finite values."""
