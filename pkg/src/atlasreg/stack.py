"""Stack reconstruction: in-plane rigid section-to-section alignment by
normalized cross-correlation, and composition of pairwise transforms into a
3D volume.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NoOverlap
from .geometry import (
    GridGeometry,
    Image2,
    ImageGeometry,
    Rigid2,
    VoxelGrid,
    apply_rigid2,
    compose_rigid2,
    invert_rigid2,
    resample_rigid2,
    sample_bilinear_masked,
)
from .optim import AdagradConfig, adagrad_ascent

_INVALID = -2.0  # NCC lives in [-1, 1]; sentinel for unusable candidates


@dataclass
class RigidSearchConfig:
    theta_max_rad: float = 0.05
    theta_step_rad: float = 0.01
    translation_max_um: float = 40.0
    translation_step_um: float = 10.0
    min_overlap_px: int = 64
    coarse_factor: int = 2  # grid stage runs on block-averaged images
    refine_base_step: tuple = (0.002, 2.0, 2.0)  # (rad, µm, µm)
    refine_max_iters: int = 50
    fd_step: tuple = (1e-4, 0.1, 0.1)  # finite-difference h per parameter


def downsample_image(img: Image2, factor: int) -> Image2:
    """Block-average by an integer factor (trailing remainder rows dropped)."""
    if factor <= 1:
        return img
    nx, ny = img.dims
    mx, my = nx // factor, ny // factor
    if mx == 0 or my == 0:
        return img
    v = img.values[:mx * factor, :my * factor]
    v = v.reshape(mx, factor, my, factor).mean(axis=(1, 3))
    new_origin = img.origin + 0.5 * (factor - 1) * img.spacing
    return Image2(v, img.spacing * factor, new_origin)


class _NccObjective:
    """NCC between a fixed image and a moving image resampled through a
    candidate transform mapping moving coords onto fixed coords."""

    def __init__(self, fixed: Image2, moving: Image2, min_overlap_px: int):
        self.fixed = fixed
        self.moving = moving
        self.min_overlap = min_overlap_px
        self.fixed_pts = fixed.geometry.pixel_centers()
        self.fixed_vals = fixed.values.ravel(order="F")

    def __call__(self, params) -> float:
        r = Rigid2(params[0], params[1], params[2])
        # moving-frame coords of every fixed pixel
        pts = apply_rigid2(invert_rigid2(r), self.fixed_pts)
        m, inside = sample_bilinear_masked(self.moving, pts)
        if inside.sum() < self.min_overlap:
            return _INVALID
        f = self.fixed_vals[inside]
        m = m[inside]
        sf = f.std()
        sm = m.std()
        if sf < 1e-12 or sm < 1e-12:
            return _INVALID
        return float(np.mean((f - f.mean()) * (m - m.mean())) / (sf * sm))


def align_sections_rigid(fixed: Image2, moving: Image2,
                         config: RigidSearchConfig | None = None) -> tuple:
    """Find the Rigid2 mapping moving onto fixed that maximizes the NCC of
    overlapping pixels: coarse grid over (theta, tx, ty), then Adagrad
    ascent with finite-difference gradients on the interpolated objective.

    Returns (transform, ncc). Raises NoOverlap when no candidate yields a
    usable overlap (including constant, zero-variance images).
    """
    config = config or RigidSearchConfig()

    coarse = _NccObjective(downsample_image(fixed, config.coarse_factor),
                           downsample_image(moving, config.coarse_factor),
                           max(4, config.min_overlap_px // config.coarse_factor**2))
    thetas = _symmetric_steps(config.theta_max_rad, config.theta_step_rad)
    shifts = _symmetric_steps(config.translation_max_um, config.translation_step_um)
    best = None
    best_v = _INVALID
    for th in thetas:
        for ty in shifts:
            for tx in shifts:
                v = coarse(np.array([th, tx, ty]))
                if v > best_v:
                    best_v = v
                    best = np.array([th, tx, ty])
    if best is None or best_v <= _INVALID:
        raise NoOverlap("no candidate transform produced a usable overlap")

    full = _NccObjective(fixed, moving, config.min_overlap_px)
    h = np.asarray(config.fd_step)

    def grad(params):
        g = np.zeros(3)
        for i in range(3):
            dp = np.zeros(3)
            dp[i] = h[i]
            g[i] = (full(params + dp) - full(params - dp)) / (2.0 * h[i])
        return g

    res = adagrad_ascent(
        full, grad, best,
        AdagradConfig(base_step=np.asarray(config.refine_base_step),
                      max_iters=config.refine_max_iters, grad_tol=1e-6))
    v = full(res.x)
    if v <= _INVALID:
        raise NoOverlap("refined transform lost the overlap")
    return Rigid2(res.x[0], res.x[1], res.x[2]), float(v)


def _symmetric_steps(maximum: float, step: float) -> np.ndarray:
    if maximum <= 0 or step <= 0:
        return np.array([0.0])
    n = int(np.floor(maximum / step + 1e-9))
    return np.arange(-n, n + 1, dtype=np.float64) * step


def compose_stack_transforms(pairwise: list, n_sections: int) -> list:
    """Absolute per-section transforms from consecutive pairwise ones.

    pairwise[i] maps section i+1 coords onto section i coords; the middle
    section anchors the common frame (identity), minimizing composed drift.
    """
    if len(pairwise) != n_sections - 1:
        raise DataError(
            f"need {n_sections - 1} pairwise transforms, got {len(pairwise)}")
    anchor = n_sections // 2
    absolute = [None] * n_sections
    absolute[anchor] = Rigid2.identity()
    for i in range(anchor + 1, n_sections):
        absolute[i] = compose_rigid2(absolute[i - 1], pairwise[i - 1])
    for i in range(anchor - 1, -1, -1):
        absolute[i] = compose_rigid2(absolute[i + 1], invert_rigid2(pairwise[i]))
    return absolute


def build_stack(sections: list, pairwise: list, slab_thickness_um: float = 20.0,
                plane_geometry: ImageGeometry | None = None,
                z_origin_um: float = 0.0) -> tuple:
    """Compose pairwise transforms and stack sections into a 3D volume.

    Returns (volume, absolute_transforms); absolute[i] maps section-i slide
    coords into the common frame. Each section is resampled in-plane and
    written to one z-slab of thickness slab_thickness_um.
    """
    n = len(sections)
    if n == 0:
        raise DataError("no sections to stack")
    absolute = compose_stack_transforms(pairwise, n)
    plane = plane_geometry or sections[0].geometry
    vals = np.zeros((plane.dims[0], plane.dims[1], n), dtype=np.float64)
    for i, sec in enumerate(sections):
        moved = resample_rigid2(sec, invert_rigid2(absolute[i]), plane)
        vals[:, :, i] = moved.values
    spacing = np.array([plane.spacing[0], plane.spacing[1], slab_thickness_um])
    origin = np.array([plane.origin[0], plane.origin[1], z_origin_um])
    return VoxelGrid(vals, spacing, origin), absolute


def align_stack(sections: list, config: RigidSearchConfig | None = None,
                slab_thickness_um: float = 20.0,
                z_origin_um: float = 0.0) -> tuple:
    """Pairwise-align consecutive sections, then build the stack volume."""
    pairwise = []
    for i in range(len(sections) - 1):
        r, _ = align_sections_rigid(sections[i], sections[i + 1], config)
        pairwise.append(r)
    return build_stack(sections, pairwise, slab_thickness_um,
                       z_origin_um=z_origin_um)
