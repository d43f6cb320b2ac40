"""Diffeomorphic demons registration of binary images.

The moving image is registered onto the fixed image over a coarse-to-fine
pyramid. Each iteration computes an intensity-driven update field, smooths
it (fluid regularization), exponentiates it by scaling and squaring so the
step is diffeomorphic, composes it with the running total, and smooths the
total (diffusion regularization). The result lives on the fixed grid with
the convention that ``moving(x + D(x)) ~ fixed(x)``: adding ``D`` to a
fixed-space point lands on its counterpart in moving-image space.

Binary inputs are carried as presmoothed scalar images because the force
term needs gradients, which raw occupancy only has at voxel boundaries.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import convolve1d, map_coordinates

from .errors import GridMismatchError, InputError, NumericalError
from .grids import (
    BinaryImage3D,
    DisplacementField,
    ScalarImage3D,
    check_same_grid,
    same_grid,
)

logger = logging.getLogger(__name__)

__all__ = [
    "DemonsParams",
    "RegistrationReport",
    "InversionResult",
    "gaussian_smooth",
    "demons_step",
    "exp_field",
    "compose_fields",
    "warp_image",
    "register_demons",
    "invert_field",
]

_DENOM_GUARD = 1e-12
_CONVERGENCE_WINDOW = 5


@dataclass(frozen=True)
class DemonsParams:
    """Registration settings. Sigmas are in mm, max_step in voxels.

    ``iterations`` runs coarse to fine and must have one entry per pyramid
    level. ``alpha`` is the dimensionless force normalization;
    ``convergence_tol`` is the relative MSE improvement over a 5-iteration
    window below which a level stops early.
    """

    pyramid_levels: int = 3
    iterations: tuple[int, ...] = (100, 50, 25)
    sigma_fluid: float = 1.0
    sigma_diffusion: float = 1.5
    sigma_presmooth: float = 1.5
    max_step: float = 1.25
    convergence_tol: float = 1e-4
    alpha: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "iterations", tuple(int(n) for n in self.iterations))
        if self.pyramid_levels < 1:
            raise InputError("pyramid_levels must be >= 1")
        if len(self.iterations) != self.pyramid_levels:
            raise InputError(
                f"iterations needs {self.pyramid_levels} entries, got {len(self.iterations)}"
            )
        if min(self.sigma_fluid, self.sigma_diffusion, self.sigma_presmooth) < 0:
            raise InputError("sigmas must be >= 0")
        if self.max_step <= 0:
            raise InputError("max_step must be > 0")

    @classmethod
    def defaults_for_spacing(cls, spacing_mm: float) -> "DemonsParams":
        """Conventional settings with sigmas scaled to the voxel size."""
        h = float(spacing_mm)
        return cls(
            sigma_fluid=1.0 * h,
            sigma_diffusion=1.5 * h,
            sigma_presmooth=1.5 * h,
        )


@dataclass
class RegistrationReport:
    """Per-level accepted MSE trace plus the full-resolution endpoints."""

    level_mse: list[dict] = field(default_factory=list)
    initial_mse: float = float("nan")
    final_mse: float = float("nan")


@dataclass
class InversionResult:
    """Inverse field plus the pointwise composition residual |Dinv(x) + D(x + Dinv(x))|."""

    field: DisplacementField
    residual_mm: np.ndarray
    iterations: int
    converged: bool

    @property
    def residual_p95_mm(self) -> float:
        return float(np.percentile(self.residual_mm, 95))

    @property
    def residual_max_mm(self) -> float:
        return float(self.residual_mm.max())


# --------------------------------------------------------------------------
# Raw-array helpers (shared by the public ops and the hot loop)
# --------------------------------------------------------------------------

def _smooth_raw(data: np.ndarray, sigma_mm: float, spacing: np.ndarray) -> np.ndarray:
    """Separable Gaussian, kernel radius ceil(3*sigma/h), clamped edges."""
    if sigma_mm == 0:
        return data
    out = data
    for axis in range(3):
        h = spacing[axis]
        radius = int(np.ceil(3.0 * sigma_mm / h))
        if radius == 0:
            continue
        x = np.arange(-radius, radius + 1) * h
        kernel = np.exp(-0.5 * (x / sigma_mm) ** 2)
        kernel /= kernel.sum()
        out = convolve1d(out, kernel, axis=axis, mode="nearest")
    return out


def _index_grid(dims) -> np.ndarray:
    return np.indices(dims, dtype=np.float64)


def _sample_field_raw(field_data, coords, mode="nearest") -> np.ndarray:
    """Sample a (nx,ny,nz,3) field at index-space coords (3, ...)."""
    flat = coords.reshape(3, -1)
    out = np.empty((flat.shape[1], 3))
    for c in range(3):
        out[:, c] = map_coordinates(field_data[..., c], flat, order=1, mode=mode)
    return out.reshape(coords.shape[1:] + (3,))


def _compose_raw(outer, inner, spacing, base_idx) -> np.ndarray:
    """result(x) = inner(x) + outer(x + inner(x)), clamped sampling."""
    coords = base_idx + np.moveaxis(inner, 3, 0) / spacing.reshape(3, 1, 1, 1)
    return inner + _sample_field_raw(outer, coords)


def _exp_raw(velocity, spacing, base_idx) -> np.ndarray:
    max_mag = float(np.sqrt((velocity**2).sum(axis=3).max()))
    half_min = 0.5 * float(spacing.min())
    if max_mag <= half_min:
        n = 0
    else:
        n = int(np.ceil(np.log2(max_mag / half_min)))
    phi = velocity / (2.0**n)
    for _ in range(n):
        phi = _compose_raw(phi, phi, spacing, base_idx)
    return phi


def _warp_scalar_raw(img_data, field_data, spacing, base_idx) -> np.ndarray:
    """out(x) = img(x + d(x)); out-of-bounds reads 0."""
    coords = base_idx + np.moveaxis(field_data, 3, 0) / spacing.reshape(3, 1, 1, 1)
    flat = map_coordinates(img_data, coords.reshape(3, -1), order=1, mode="constant", cval=0.0)
    return flat.reshape(img_data.shape)


def _demons_force_raw(fixed, warped, grad, grad_sq, alpha, step_cap_mm) -> np.ndarray:
    """Force pushing fixed-space points toward their moving-space matches.

    u = (f - m) grad(f) / (|grad f|^2 + alpha^2 (m - f)^2), zeroed where the
    denominator underflows, then magnitude-clamped to step_cap_mm.
    """
    diff = fixed - warped
    denom = grad_sq + (alpha * alpha) * diff * diff
    scale = np.where(denom < _DENOM_GUARD, 0.0, diff / np.where(denom < _DENOM_GUARD, 1.0, denom))
    u = grad * scale[..., None]
    mag = np.sqrt((u**2).sum(axis=3))
    over = mag > step_cap_mm
    if over.any():
        u[over] *= (step_cap_mm / mag[over])[:, None]
    return u


def _mse(a, b) -> float:
    # numpy's pairwise summation keeps this reduction deterministic
    d = a - b
    return float(np.mean(d * d))


# --------------------------------------------------------------------------
# Public operations
# --------------------------------------------------------------------------

def gaussian_smooth(img, sigma_mm: float):
    """Gaussian-smooth a scalar image or displacement field (sigma in mm)."""
    if sigma_mm < 0:
        raise InputError(f"sigma must be >= 0, got {sigma_mm}")
    if isinstance(img, ScalarImage3D):
        return ScalarImage3D(img.spacing, img.origin, _smooth_raw(img.data, sigma_mm, img.spacing))
    if isinstance(img, DisplacementField):
        return DisplacementField(
            img.spacing, img.origin, _smooth_raw(img.data, sigma_mm, img.spacing)
        )
    raise InputError(f"gaussian_smooth: unsupported type {type(img).__name__}")


def demons_step(
    fixed: ScalarImage3D, warped_moving: ScalarImage3D, alpha: float, max_step: float
) -> DisplacementField:
    """One unregularized demons update field (max_step in voxels)."""
    check_same_grid(fixed, warped_moving, "demons_step inputs")
    grad = np.stack(np.gradient(fixed.data, *fixed.spacing), axis=3)
    grad_sq = (grad**2).sum(axis=3)
    cap = max_step * float(fixed.spacing.min())
    u = _demons_force_raw(fixed.data, warped_moving.data, grad, grad_sq, alpha, cap)
    return DisplacementField(fixed.spacing, fixed.origin, u)


def exp_field(velocity: DisplacementField) -> DisplacementField:
    """Exponentiate a velocity field by scaling and squaring."""
    base = _index_grid(velocity.dims)
    phi = _exp_raw(velocity.data, velocity.spacing, base)
    return DisplacementField(velocity.spacing, velocity.origin, phi)


def compose_fields(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Displacement of applying ``inner`` then ``outer``: inner(x) + outer(x + inner(x))."""
    check_same_grid(outer, inner, "composed fields")
    base = _index_grid(outer.dims)
    out = _compose_raw(outer.data, inner.data, outer.spacing, base)
    return DisplacementField(outer.spacing, outer.origin, out)


def warp_image(img, d: DisplacementField):
    """Pull-back warp: out(x) = img(x + d(x)). Binary images re-threshold at 0.5."""
    check_same_grid(img, d, "warp inputs")
    base = _index_grid(d.dims)
    if isinstance(img, BinaryImage3D):
        warped = _warp_scalar_raw(img.data.astype(np.float64), d.data, d.spacing, base)
        return BinaryImage3D(img.spacing, img.origin, warped >= 0.5)
    if isinstance(img, ScalarImage3D):
        warped = _warp_scalar_raw(img.data, d.data, d.spacing, base)
        return ScalarImage3D(img.spacing, img.origin, warped)
    raise InputError(f"warp_image: unsupported type {type(img).__name__}")


# --------------------------------------------------------------------------
# Pyramid machinery
# --------------------------------------------------------------------------

def _downsample_mean(data: np.ndarray) -> np.ndarray:
    """2x2x2 block mean; trailing odd slabs average over what exists."""
    nx, ny, nz = data.shape
    ox, oy, oz = (nx + 1) // 2, (ny + 1) // 2, (nz + 1) // 2
    padded = np.zeros((ox * 2, oy * 2, oz * 2))
    padded[:nx, :ny, :nz] = data
    weight = np.zeros_like(padded)
    weight[:nx, :ny, :nz] = 1.0
    blocks = padded.reshape(ox, 2, oy, 2, oz, 2)
    wsum = weight.reshape(ox, 2, oy, 2, oz, 2).sum(axis=(1, 3, 5))
    return blocks.sum(axis=(1, 3, 5)) / wsum


def _upsample_field(coarse_data, coarse_spacing, coarse_origin, fine_dims, fine_spacing, fine_origin):
    """Trilinearly resample vectors (values stay in mm) onto the finer grid."""
    idx = _index_grid(fine_dims)
    world = fine_origin.reshape(3, 1, 1, 1) + idx * fine_spacing.reshape(3, 1, 1, 1)
    coords = (world - coarse_origin.reshape(3, 1, 1, 1)) / coarse_spacing.reshape(3, 1, 1, 1)
    return _sample_field_raw(coarse_data, coords)


def register_demons(
    fixed: BinaryImage3D,
    moving: BinaryImage3D,
    params: DemonsParams | None = None,
    *,
    return_report: bool = False,
):
    """Register ``moving`` onto ``fixed``; returns the field on the fixed grid.

    If the grids differ in dims or origin (spacing must match), the moving
    image is first resampled onto the fixed grid. Within a pyramid level the
    running field with the lowest MSE is the one accepted, so the energy
    never increases across level boundaries.
    """
    if params is None:
        params = DemonsParams.defaults_for_spacing(float(fixed.spacing.min()))
    if not np.array_equal(fixed.spacing, moving.spacing):
        raise GridMismatchError(
            f"fixed and moving spacing differ: {fixed.spacing} vs {moving.spacing}"
        )
    if fixed.occupied_count == 0 or moving.occupied_count == 0:
        raise InputError("cannot register empty images")

    fixed_s = fixed.data.astype(np.float64)
    if same_grid(fixed, moving):
        moving_s = moving.data.astype(np.float64)
    else:
        from .grids import resample_scalar_to

        moving_s = resample_scalar_to(
            ScalarImage3D(moving.spacing, moving.origin, moving.data.astype(np.float64)),
            fixed,
        ).data

    fixed_s = _smooth_raw(fixed_s, params.sigma_presmooth, fixed.spacing)
    moving_s = _smooth_raw(moving_s, params.sigma_presmooth, fixed.spacing)

    # Pyramid, fine to coarse; each level halves the grid and doubles spacing.
    levels = [(fixed_s, moving_s, fixed.spacing.copy(), fixed.origin.copy())]
    n_levels = params.pyramid_levels
    while len(levels) < n_levels:
        f_prev, m_prev, h_prev, o_prev = levels[-1]
        if min(f_prev.shape) < 8:
            break  # coarser levels would lose the geometry entirely
        f_dn = _downsample_mean(f_prev)
        m_dn = _downsample_mean(m_prev)
        levels.append((f_dn, m_dn, h_prev * 2.0, o_prev + 0.5 * h_prev))
    if len(levels) < n_levels:
        logger.info(
            "pyramid reduced to %d levels for dims %s", len(levels), fixed.dims
        )
    iterations = params.iterations[-len(levels):]
    levels = levels[::-1]  # coarse to fine

    report = RegistrationReport()
    report.initial_mse = _mse(fixed_s, moving_s)

    d = None
    h_full = float(fixed.spacing.min())
    for level_idx, (f_lvl, m_lvl, h_lvl, o_lvl) in enumerate(levels):
        dims = f_lvl.shape
        base = _index_grid(dims)
        if d is None:
            d = np.zeros(dims + (3,), dtype=np.float64)
        else:
            d = _upsample_field(d, prev_h, prev_o, dims, h_lvl, o_lvl)

        grad = np.stack(np.gradient(f_lvl, *h_lvl), axis=3)
        grad_sq = (grad**2).sum(axis=3)
        step_cap = params.max_step * float(h_lvl.min())
        # sigmas are stated at full resolution; keeping them constant in
        # voxel units across the pyramid gives coarse levels the physically
        # wider regularization they need to carry displacement into object
        # interiors
        level_scale = float(h_lvl.min()) / h_full
        sigma_fluid = params.sigma_fluid * level_scale
        sigma_diffusion = params.sigma_diffusion * level_scale

        best_mse = np.inf
        best_d = d
        mse_trace: list[float] = []
        for it in range(iterations[level_idx]):
            warped = _warp_scalar_raw(m_lvl, d, h_lvl, base)
            mse = _mse(f_lvl, warped)
            if not np.isfinite(mse):
                raise NumericalError(f"registration MSE became non-finite at level {level_idx}")
            mse_trace.append(mse)
            if mse < best_mse:
                best_mse = mse
                best_d = d
            if mse == 0.0:
                break
            if len(mse_trace) > _CONVERGENCE_WINDOW:
                prev = mse_trace[-1 - _CONVERGENCE_WINDOW]
                if prev > 0 and (prev - mse) / prev < params.convergence_tol:
                    break

            u = _demons_force_raw(f_lvl, warped, grad, grad_sq, params.alpha, step_cap)
            u = _smooth_raw(u, sigma_fluid, h_lvl)
            phi = _exp_raw(u, h_lvl, base)
            d = _compose_raw(d, phi, h_lvl, base)
            d = _smooth_raw(d, sigma_diffusion, h_lvl)

        # the loop may end right after an update; score the final field too
        warped = _warp_scalar_raw(m_lvl, d, h_lvl, base)
        final_mse = _mse(f_lvl, warped)
        if final_mse < best_mse:
            best_mse = final_mse
            best_d = d
        d = best_d
        report.level_mse.append(
            {
                "level": level_idx,
                "dims": tuple(int(n) for n in dims),
                "iterations": len(mse_trace),
                "start_mse": mse_trace[0] if mse_trace else float("nan"),
                "accepted_mse": best_mse,
            }
        )
        logger.info(
            "level %d dims %s: %d iterations, mse %.3e -> %.3e",
            level_idx,
            dims,
            len(mse_trace),
            mse_trace[0] if mse_trace else float("nan"),
            best_mse,
        )
        prev_h, prev_o = h_lvl, o_lvl

    report.final_mse = _mse(fixed_s, _warp_scalar_raw(moving_s, d, fixed.spacing, _index_grid(fixed.dims)))
    out = DisplacementField(fixed.spacing, fixed.origin, d)
    if return_report:
        return out, report
    return out


def invert_field(d: DisplacementField, iterations: int = 50, tol: float = 0.01) -> InversionResult:
    """Invert a displacement field by fixed-point iteration.

    ``tol`` is the max update per iteration, in voxels, below which the
    iteration stops. The update magnitude equals the composition residual
    of the previous iterate, so a residual growing 3 iterations in a row
    signals a non-invertible field (warned, not raised).
    """
    base = _index_grid(d.dims)
    spacing = d.spacing
    tol_mm = tol * float(spacing.min())
    dinv = np.zeros_like(d.data)
    converged = False
    grow_streak = 0
    prev_delta = np.inf
    iterations_run = 0
    for it in range(iterations):
        iterations_run = it + 1
        coords = base + np.moveaxis(dinv, 3, 0) / spacing.reshape(3, 1, 1, 1)
        sampled = _sample_field_raw(d.data, coords)
        new_dinv = -sampled
        residual = np.sqrt(((new_dinv - dinv) ** 2).sum(axis=3))
        delta = float(residual.max())
        dinv = new_dinv
        if delta < tol_mm:
            converged = True
            break
        if delta > prev_delta:
            grow_streak += 1
            if grow_streak >= 3:
                worst = np.unravel_index(int(residual.argmax()), residual.shape)
                warnings.warn(
                    f"field inversion diverging (residual {delta:.3g} mm growing 3 "
                    f"iterations; worst voxel {worst}); returning current iterate",
                    RuntimeWarning,
                )
                break
        else:
            grow_streak = 0
        prev_delta = delta

    coords = base + np.moveaxis(dinv, 3, 0) / spacing.reshape(3, 1, 1, 1)
    final_residual = np.sqrt(((dinv + _sample_field_raw(d.data, coords)) ** 2).sum(axis=3))
    return InversionResult(
        field=DisplacementField(d.spacing, d.origin, dinv),
        residual_mm=final_residual,
        iterations=iterations_run,
        converged=converged,
    )
