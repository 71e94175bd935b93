"""Physical-coordinate geometry: affine/rigid transforms, voxel grids and
interpolation.

All public APIs work in micrometers. A grid owns its origin (physical
location of the center of voxel (0, 0, 0)) and per-axis spacing; voxel
values are stored x-fastest when serialized. Sampling outside a grid uses
the zero-padding convention: the field is treated as embedded in zeros, so
values decay linearly to 0 within one voxel of the grid support and are
exactly 0 beyond it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import GeometryMismatch, SingularTransform

AXIS_INDEX = {"x": 0, "y": 1, "z": 2}

_DET_EPS = 1e-12


def vec3(x, y, z) -> np.ndarray:
    v = np.array([x, y, z], dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite vector {v}")
    return v


def as_points(pts) -> np.ndarray:
    """Coerce to an (N, 3) float64 array; a single (3,) point becomes (1, 3)."""
    a = np.asarray(pts, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"expected points of shape (N, 3), got {a.shape}")
    return a


# ---------------------------------------------------------------------------
# 3D affine transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Affine3:
    """T(p) = linear @ p + translation, in µm."""

    linear: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        lin = np.asarray(self.linear, dtype=np.float64).reshape(3, 3)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(lin)) and np.all(np.isfinite(tr))):
            raise ValueError("non-finite affine transform")
        lin.setflags(write=False)
        tr.setflags(write=False)
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "translation", tr)

    @staticmethod
    def identity() -> "Affine3":
        return Affine3(np.eye(3), np.zeros(3))

    @staticmethod
    def from_translation(t) -> "Affine3":
        return Affine3(np.eye(3), t)

    def det(self) -> float:
        return float(np.linalg.det(self.linear))

    def as_params(self) -> np.ndarray:
        """Flatten to 12 reals: row-major linear part followed by translation."""
        return np.concatenate([self.linear.ravel(), self.translation])

    @staticmethod
    def from_params(params) -> "Affine3":
        p = np.asarray(params, dtype=np.float64).reshape(12)
        return Affine3(p[:9].reshape(3, 3), p[9:])


def apply_affine(t: Affine3, p):
    """Apply T to a point (3,) or points (N, 3); returns the same shape."""
    a = np.asarray(p, dtype=np.float64)
    if a.ndim == 1:
        return t.linear @ a + t.translation
    return a @ t.linear.T + t.translation


def compose_affine(second: Affine3, first: Affine3) -> Affine3:
    """Transform equal to applying `first`, then `second`."""
    return Affine3(second.linear @ first.linear,
                   second.linear @ first.translation + second.translation)


def invert_affine(t: Affine3) -> Affine3:
    if abs(t.det()) <= _DET_EPS:
        raise SingularTransform(f"linear part is singular (det={t.det():.3e})")
    inv = np.linalg.inv(t.linear)
    return Affine3(inv, -inv @ t.translation)


def mirror_across_plane(p, axis: str, plane_coord: float):
    """Reflect the `axis` coordinate about plane_coord; other coords unchanged."""
    i = AXIS_INDEX[axis]
    a = np.array(p, dtype=np.float64, copy=True)
    a[..., i] = 2.0 * plane_coord - a[..., i]
    return a


def mirror_matrix(axis: str) -> np.ndarray:
    """Linear part of the reflection (for conjugating covariances)."""
    m = np.eye(3)
    m[AXIS_INDEX[axis], AXIS_INDEX[axis]] = -1.0
    return m


def rotation_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_axis_angle(axis, theta: float) -> np.ndarray:
    """Rodrigues rotation about an arbitrary axis."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * kx + (1.0 - math.cos(theta)) * (kx @ kx)


# ---------------------------------------------------------------------------
# 2D rigid transforms (in-plane section alignment)
# ---------------------------------------------------------------------------


def _wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    t = math.fmod(theta + math.pi, 2.0 * math.pi)
    if t <= 0.0:
        t += 2.0 * math.pi
    return t - math.pi


@dataclass(frozen=True)
class Rigid2:
    """In-plane rigid transform: rotate by theta, then translate by (tx, ty) µm."""

    theta: float
    tx: float
    ty: float

    def __post_init__(self):
        if not all(np.isfinite([self.theta, self.tx, self.ty])):
            raise ValueError("non-finite rigid transform")
        object.__setattr__(self, "theta", _wrap_angle(float(self.theta)))

    @staticmethod
    def identity() -> "Rigid2":
        return Rigid2(0.0, 0.0, 0.0)


def apply_rigid2(r: Rigid2, pts):
    a = np.asarray(pts, dtype=np.float64)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    c, s = math.cos(r.theta), math.sin(r.theta)
    out = np.empty_like(a)
    out[:, 0] = c * a[:, 0] - s * a[:, 1] + r.tx
    out[:, 1] = s * a[:, 0] + c * a[:, 1] + r.ty
    return out[0] if single else out


def compose_rigid2(second: Rigid2, first: Rigid2) -> Rigid2:
    """Transform equal to applying `first`, then `second`."""
    c, s = math.cos(second.theta), math.sin(second.theta)
    tx = c * first.tx - s * first.ty + second.tx
    ty = s * first.tx + c * first.ty + second.ty
    return Rigid2(second.theta + first.theta, tx, ty)


def invert_rigid2(r: Rigid2) -> Rigid2:
    c, s = math.cos(r.theta), math.sin(r.theta)
    return Rigid2(-r.theta, -(c * r.tx + s * r.ty), -(-s * r.tx + c * r.ty))


# ---------------------------------------------------------------------------
# Voxel grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridGeometry:
    """Grid layout without values: dims, per-axis spacing (µm/voxel), origin (µm)."""

    dims: tuple
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError(f"bad dims {dims}")
        sp = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        org = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if not (np.all(sp > 0) and np.all(np.isfinite(sp)) and np.all(np.isfinite(org))):
            raise ValueError("spacing must be positive and finite; origin finite")
        sp.setflags(write=False)
        org.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "origin", org)

    @staticmethod
    def isotropic(dims, spacing_um: float, origin=(0.0, 0.0, 0.0)) -> "GridGeometry":
        return GridGeometry(tuple(dims), np.full(3, float(spacing_um)), origin)

    def world_to_index(self, pts) -> np.ndarray:
        return (as_points(pts) - self.origin) / self.spacing

    def index_to_world(self, idx) -> np.ndarray:
        return np.asarray(idx, dtype=np.float64) * self.spacing + self.origin

    def voxel_centers(self) -> np.ndarray:
        """Physical centers of all voxels, shape (nx*ny*nz, 3), x varying fastest."""
        nx, ny, nz = self.dims
        ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                 indexing="ij")
        idx = np.stack([ix.ravel(order="F"), iy.ravel(order="F"),
                        iz.ravel(order="F")], axis=1)
        return self.index_to_world(idx)

    def zeros(self, dtype=np.float64) -> "VoxelGrid":
        return VoxelGrid(np.zeros(self.dims, dtype=dtype), self.spacing, self.origin)

    def __eq__(self, other):
        return (isinstance(other, GridGeometry) and self.dims == other.dims
                and np.array_equal(self.spacing, other.spacing)
                and np.array_equal(self.origin, other.origin))


@dataclass(frozen=True)
class VoxelGrid:
    """3D scalar field on a regular grid. values[ix, iy, iz], immutable."""

    values: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.dtype not in (np.float32, np.float64):
            v = v.astype(np.float64)
        if v.ndim != 3:
            raise ValueError(f"values must be 3D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid values must be finite")
        geo = GridGeometry(v.shape, self.spacing, self.origin)
        v = v.copy() if (v.base is not None or v.flags.writeable) else v
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "spacing", geo.spacing)
        object.__setattr__(self, "origin", geo.origin)

    @property
    def dims(self) -> tuple:
        return self.values.shape

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.dims, self.spacing, self.origin)

    def with_values(self, values) -> "VoxelGrid":
        return VoxelGrid(values, self.spacing, self.origin)

    def with_origin(self, origin) -> "VoxelGrid":
        return VoxelGrid(self.values, self.spacing, origin)


def same_geometry(a, b) -> bool:
    ga = a.geometry if isinstance(a, VoxelGrid) else a
    gb = b.geometry if isinstance(b, VoxelGrid) else b
    return ga == gb


def require_same_geometry(grids):
    ref = grids[0].geometry
    for g in grids[1:]:
        if g.geometry != ref:
            raise GeometryMismatch(
                f"grid geometry {g.dims}/{g.spacing}/{g.origin} differs from "
                f"{ref.dims}/{ref.spacing}/{ref.origin}")
    return ref


def sample_trilinear_many(g: VoxelGrid, pts) -> np.ndarray:
    """Trilinear interpolation at physical points (N, 3); zero-padded outside."""
    idx = g.geometry.world_to_index(pts)
    return map_coordinates(g.values.astype(np.float64, copy=False), idx.T,
                           order=1, mode="grid-constant", cval=0.0)


def sample_trilinear(g: VoxelGrid, p) -> float:
    return float(sample_trilinear_many(g, np.asarray(p, dtype=np.float64)[None, :])[0])


def resample_affine(g: VoxelGrid, t: Affine3, out_geometry: GridGeometry) -> VoxelGrid:
    """Materialize g under T: output voxel at location q holds g(T(q))."""
    if abs(t.det()) <= _DET_EPS:
        raise SingularTransform(f"resample transform is singular (det={t.det():.3e})")
    q = out_geometry.voxel_centers()
    vals = sample_trilinear_many(g, apply_affine(t, q))
    out = vals.reshape(out_geometry.dims, order="F")
    return VoxelGrid(out, out_geometry.spacing, out_geometry.origin)


def crop_to_support(g: VoxelGrid, margin_voxels: int = 2, threshold: float = 0.0) -> VoxelGrid:
    """Smallest sub-grid containing all values > threshold, plus a margin."""
    mask = g.values > threshold
    if not mask.any():
        raise ValueError("grid has no support to crop to")
    lo, hi = [], []
    for ax in range(3):
        proj = mask.any(axis=tuple(i for i in range(3) if i != ax))
        nz = np.nonzero(proj)[0]
        lo.append(max(0, nz[0] - margin_voxels))
        hi.append(min(g.dims[ax], nz[-1] + 1 + margin_voxels))
    sub = g.values[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    origin = g.geometry.index_to_world(np.array(lo, dtype=np.float64))
    return VoxelGrid(sub, g.spacing, origin)


# ---------------------------------------------------------------------------
# 2D images (histology sections)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImageGeometry:
    """2D analogue of GridGeometry; origin is the center of pixel (0, 0)."""

    dims: tuple
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 2 or any(d <= 0 for d in dims):
            raise ValueError(f"bad image dims {dims}")
        sp = np.asarray(self.spacing, dtype=np.float64).reshape(2)
        org = np.asarray(self.origin, dtype=np.float64).reshape(2)
        if not (np.all(sp > 0) and np.all(np.isfinite(sp)) and np.all(np.isfinite(org))):
            raise ValueError("bad image spacing/origin")
        sp.setflags(write=False)
        org.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "origin", org)

    def world_to_index(self, pts) -> np.ndarray:
        a = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        return (a - self.origin) / self.spacing

    def index_to_world(self, idx) -> np.ndarray:
        return np.asarray(idx, dtype=np.float64) * self.spacing + self.origin

    def pixel_centers(self) -> np.ndarray:
        nx, ny = self.dims
        ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        idx = np.stack([ix.ravel(order="F"), iy.ravel(order="F")], axis=1)
        return self.index_to_world(idx)

    def extent(self) -> tuple:
        """Physical bounds covered by pixel area: (lo, hi) per axis, µm."""
        lo = self.origin - 0.5 * self.spacing
        hi = self.origin + (np.array(self.dims) - 0.5) * self.spacing
        return lo, hi

    def __eq__(self, other):
        return (isinstance(other, ImageGeometry) and self.dims == other.dims
                and np.array_equal(self.spacing, other.spacing)
                and np.array_equal(self.origin, other.origin))


@dataclass(frozen=True)
class Image2:
    """2D scalar image with physical geometry. values[ix, iy], immutable."""

    values: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.dtype not in (np.float32, np.float64):
            v = v.astype(np.float64)
        if v.ndim != 2:
            raise ValueError(f"image values must be 2D, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("image values must be finite")
        geo = ImageGeometry(v.shape, self.spacing, self.origin)
        v = v.copy() if (v.base is not None or v.flags.writeable) else v
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "spacing", geo.spacing)
        object.__setattr__(self, "origin", geo.origin)

    @property
    def dims(self) -> tuple:
        return self.values.shape

    @property
    def geometry(self) -> ImageGeometry:
        return ImageGeometry(self.dims, self.spacing, self.origin)


def sample_bilinear_many(img: Image2, pts) -> np.ndarray:
    idx = img.geometry.world_to_index(pts)
    return map_coordinates(img.values.astype(np.float64, copy=False), idx.T,
                           order=1, mode="grid-constant", cval=0.0)


def sample_bilinear_masked(img: Image2, pts):
    """Bilinear samples plus a validity mask (True where the point lies inside
    the grid-point hull, so the sample uses only stored pixels)."""
    idx = img.geometry.world_to_index(pts)
    vals = map_coordinates(img.values.astype(np.float64, copy=False), idx.T,
                           order=1, mode="grid-constant", cval=0.0)
    n = np.array(img.dims, dtype=np.float64)
    inside = np.all((idx >= 0.0) & (idx <= n - 1.0), axis=1)
    return vals, inside


def resample_rigid2(img: Image2, t: Rigid2, out_geometry: ImageGeometry) -> Image2:
    """Output pixel at location q holds img(t(q)); zero-padded outside."""
    q = out_geometry.pixel_centers()
    vals = sample_bilinear_many(img, apply_rigid2(t, q))
    return Image2(vals.reshape(out_geometry.dims, order="F"),
                  out_geometry.spacing, out_geometry.origin)
