"""morphforge: image-registration-based mesh personalization toolkit.

Voxelizes closed surface meshes to binary images, registers them with
diffeomorphic demons, morphs template meshes by the resulting displacement
field, and evaluates the result (Dice, HD95, distance maps, scaled
Jacobians). Also ships the kinematic-signal instrumentation used to judge
simulation output: channel-class phaseless filtering and CORA rating.
"""

from .errors import (
    DegenerateGeometryError,
    EmptyMeshError,
    GridMismatchError,
    InputError,
    MeshFormatError,
    MorphforgeError,
    NumericalError,
    OpenSurfaceError,
    UndefinedMetricError,
)
from .grids import (
    BinaryImage3D,
    DisplacementField,
    ScalarImage3D,
    read_image,
    write_image,
)
from .mesh import (
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
from .metrics import (
    AccuracyReport,
    ElementQuality,
    accuracy_report,
    dice,
    distance_map,
    hd95,
    scaled_jacobian,
)
from .morphing import MorphMask, MorphReport, morph_mesh, morph_report, sample_field
from .registration import (
    DemonsParams,
    InversionResult,
    RegistrationReport,
    compose_fields,
    demons_step,
    exp_field,
    gaussian_smooth,
    invert_field,
    register_demons,
    warp_image,
)
from .signals import (
    CoraParams,
    CoraResult,
    TimeSeries,
    average_components,
    cfc_filter,
    classify_biofidelity,
    cora_rate,
    read_timeseries_csv,
    write_timeseries_csv,
)
from .voxelize import boundary_voxels, image_union, voxelize

__version__ = "0.1.0"
