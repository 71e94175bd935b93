"""Anatomical model construction: annotated contours to binary volumes,
ICP shape alignment, voxel-voted probabilistic shapes, centroid statistics
with hemispheric symmetrization, and assembly into the per-structure
probability field A.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import shapely
from scipy.spatial import cKDTree
from shapely.geometry import Polygon

from .errors import (
    DegenerateCloud,
    EmptyAnnotation,
    EmptyInput,
    GeometryMismatch,
    InvalidAnnotation,
    MissingPair,
    NoObservations,
    ShapeOutsideDomainWarning,
)
from .geometry import (
    Affine3,
    GridGeometry,
    Rigid2,
    VoxelGrid,
    apply_affine,
    apply_rigid2,
    as_points,
    crop_to_support,
    invert_affine,
    mirror_across_plane,
    mirror_matrix,
    resample_affine,
    require_same_geometry,
    sample_trilinear_many,
)

HEMISPHERES = ("left", "right", "unpaired")


@dataclass(frozen=True)
class StructureId:
    """Identity of one anatomical structure. `paired_with` holds the index of
    the mirror-image partner, or None for unpaired structures."""

    index: int
    name: str
    hemisphere: str
    paired_with: int | None = None

    def __post_init__(self):
        if self.hemisphere not in HEMISPHERES:
            raise ValueError(f"hemisphere must be one of {HEMISPHERES}")
        if (self.hemisphere == "unpaired") != (self.paired_with is None):
            raise ValueError("paired structures need paired_with; unpaired must not")


def validate_structure_set(structures) -> None:
    """Indices unique; paired structures reference each other symmetrically."""
    by_index = {}
    for s in structures:
        if s.index in by_index:
            raise ValueError(f"duplicate structure index {s.index}")
        by_index[s.index] = s
    for s in structures:
        if s.paired_with is not None:
            partner = by_index.get(s.paired_with)
            if partner is None or partner.paired_with != s.index:
                raise ValueError(f"structure {s.name} is not symmetrically paired")


@dataclass(frozen=True)
class SectionContour:
    section_index: int
    vertices_um: np.ndarray  # (N, 2), slide-frame µm

    def __post_init__(self):
        v = np.asarray(self.vertices_um, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise InvalidAnnotation("contour needs at least 3 2D vertices")
        if not np.all(np.isfinite(v)):
            raise InvalidAnnotation("contour vertices must be finite")
        if not Polygon(v).is_valid:
            raise InvalidAnnotation("contour polygon is self-intersecting")
        v.setflags(write=False)
        object.__setattr__(self, "vertices_um", v)


@dataclass(frozen=True)
class StructureAnnotation:
    structure: StructureId
    contours: tuple  # of SectionContour

    def __post_init__(self):
        object.__setattr__(self, "contours", tuple(self.contours))


@dataclass(frozen=True)
class StructureInstance:
    """One structure in one brain: binary volume, boundary point cloud, centroid."""

    volume: VoxelGrid
    boundary_points: np.ndarray  # (M, 3) µm
    centroid: np.ndarray  # (3,) µm


def instance_from_volume(volume: VoxelGrid) -> StructureInstance:
    """Derive centroid and six-connected boundary point cloud from a binary volume."""
    mask = volume.values > 0.5
    if not mask.any():
        raise EmptyAnnotation("structure volume is empty")
    idx = np.argwhere(mask)
    centroid = volume.geometry.index_to_world(idx).mean(axis=0)

    padded = np.pad(mask, 1, constant_values=False)
    interior = np.ones_like(mask)
    for ax in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[ax] = slice(0, -2)
        hi[ax] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    boundary = mask & ~interior
    bpts = volume.geometry.index_to_world(np.argwhere(boundary))
    return StructureInstance(volume, bpts, centroid)


def contours_to_volume(annotation: StructureAnnotation,
                       stack_geometry: GridGeometry,
                       section_transforms: list) -> StructureInstance:
    """Rasterize per-section contours into a binary volume on the stack grid.

    A voxel on section s is filled iff its (x, y) center lies inside the
    polygon after mapping the slide-frame vertices through that section's
    rigid transform. Section index s occupies z-slab s.
    """
    if not annotation.contours:
        raise EmptyAnnotation(f"no contours for {annotation.structure.name}")
    nx, ny, nz = stack_geometry.dims
    vals = np.zeros(stack_geometry.dims, dtype=np.float64)
    xs = stack_geometry.origin[0] + np.arange(nx) * stack_geometry.spacing[0]
    ys = stack_geometry.origin[1] + np.arange(ny) * stack_geometry.spacing[1]
    for contour in annotation.contours:
        s = contour.section_index
        if not 0 <= s < nz:
            raise InvalidAnnotation(f"section index {s} outside stack of {nz}")
        if s >= len(section_transforms):
            raise InvalidAnnotation(f"no section transform for section {s}")
        verts = apply_rigid2(section_transforms[s], contour.vertices_um)
        poly = Polygon(verts)
        # restrict the scan to the polygon's bounding box
        x0, y0, x1, y1 = poly.bounds
        ix = np.nonzero((xs >= x0) & (xs <= x1))[0]
        iy = np.nonzero((ys >= y0) & (ys <= y1))[0]
        if ix.size == 0 or iy.size == 0:
            continue
        gx, gy = np.meshgrid(xs[ix], ys[iy], indexing="ij")
        inside = shapely.contains_xy(poly, gx.ravel(), gy.ravel())
        sub = vals[np.ix_(ix, iy, [s])]
        vals[np.ix_(ix, iy, [s])] = np.maximum(
            sub, inside.reshape(len(ix), len(iy), 1).astype(np.float64))
    grid = VoxelGrid(vals, stack_geometry.spacing, stack_geometry.origin)
    if not (grid.values > 0.5).any():
        raise EmptyAnnotation(
            f"contours for {annotation.structure.name} filled no voxel")
    return instance_from_volume(grid)


# ---------------------------------------------------------------------------
# ICP
# ---------------------------------------------------------------------------


@dataclass
class IcpResult:
    transform: Affine3  # maps source points onto the target cloud
    rms: float  # µm, nearest-neighbor RMS under the final transform
    trace: list  # per-iteration RMS (non-increasing)
    iterations: int


def _check_cloud(pts: np.ndarray, name: str) -> None:
    if pts.shape[0] < 3:
        raise DegenerateCloud(f"{name} cloud has {pts.shape[0]} < 3 points")
    centered = pts - pts.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[1] <= 1e-9 * max(s[0], 1.0):
        raise DegenerateCloud(f"{name} cloud is collinear")


def rigid_fit(source: np.ndarray, target: np.ndarray) -> Affine3:
    """Least-squares rigid transform mapping paired source -> target points
    (SVD / Kabsch, reflection-corrected so det(R) = +1)."""
    cs = source.mean(axis=0)
    ct = target.mean(axis=0)
    h = (source - cs).T @ (target - ct)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Affine3(r, ct - r @ cs)


def icp_align(source, target, init: Affine3 | None = None,
              max_iters: int = 50, tol: float = 1e-6) -> IcpResult:
    """Point-to-point ICP: alternate nearest-neighbor correspondence against a
    KD-tree of the target with an SVD rigid re-fit of the full source cloud.

    Stops when the RMS improvement drops below tol. The per-iteration RMS
    sequence is non-increasing. Default init aligns the cloud centroids.
    """
    src = as_points(source)
    tgt = as_points(target)
    _check_cloud(src, "source")
    _check_cloud(tgt, "target")
    if init is None:
        init = Affine3.from_translation(tgt.mean(axis=0) - src.mean(axis=0))

    tree = cKDTree(tgt)
    t = init
    trace = []
    it = 0
    for it in range(1, max_iters + 1):
        moved = apply_affine(t, src)
        dist, idx = tree.query(moved)
        rms = float(np.sqrt(np.mean(dist**2)))
        trace.append(rms)
        if len(trace) >= 2 and trace[-2] - rms < tol:
            break
        t = rigid_fit(src, tgt[idx])
    return IcpResult(t, trace[-1], trace, it)


# ---------------------------------------------------------------------------
# Shape and position statistics
# ---------------------------------------------------------------------------


def voxel_vote(instances: list) -> VoxelGrid:
    """Per-voxel vote fraction over aligned binary volumes: value = k/n."""
    if not instances:
        raise EmptyInput("voxel_vote needs at least one instance")
    geo = require_same_geometry(instances)
    acc = np.zeros(geo.dims, dtype=np.float64)
    for g in instances:
        acc += g.values.astype(np.float64)
    return VoxelGrid(acc / len(instances), geo.spacing, geo.origin)


@dataclass(frozen=True)
class CentroidStats:
    mean: np.ndarray  # (3,) µm
    covariance: np.ndarray  # (3, 3) µm²
    n_observations: int


def estimate_centroid_stats(observations, sigma0_um: float = 100.0) -> dict:
    """Per-structure mean and (n-1)-denominator sample covariance of centroid
    positions. A structure observed once gets the isotropic fallback
    covariance sigma0² * I.

    observations: iterable of (brain_id, structure_index, centroid µm).
    """
    grouped: dict[int, list] = {}
    for _brain, k, c in observations:
        grouped.setdefault(int(k), []).append(np.asarray(c, dtype=np.float64))
    if not grouped:
        raise NoObservations("no centroid observations")
    out = {}
    for k, pts in grouped.items():
        arr = np.vstack(pts)
        mean = arr.mean(axis=0)
        if len(pts) >= 2:
            centered = arr - mean
            cov = centered.T @ centered / (len(pts) - 1)
            cov = 0.5 * (cov + cov.T)
        else:
            cov = sigma0_um**2 * np.eye(3)
        out[k] = CentroidStats(mean, cov, len(pts))
    return out


def symmetrize_pairs(stats: dict, structures, mirror_axis: str = "y",
                     plane_coord: float = 0.0) -> dict:
    """Enforce left/right symmetry of centroid statistics about a mirror plane.

    For each pair the means are averaged in the mirrored frame and the
    covariances averaged after mirror conjugation; afterwards the mirrored
    right mean equals the left mean exactly. Unpaired structures have the
    mirror-axis coordinate of their mean snapped onto the plane.
    """
    by_index = {s.index: s for s in structures}
    out = dict(stats)
    m = mirror_matrix(mirror_axis)
    for s in structures:
        if s.index not in stats:
            continue
        if s.hemisphere == "unpaired":
            st = stats[s.index]
            mean = st.mean.copy()
            mean[{"x": 0, "y": 1, "z": 2}[mirror_axis]] = plane_coord
            out[s.index] = replace(st, mean=mean)
        elif s.hemisphere == "left":
            partner = by_index.get(s.paired_with)
            if partner is None or partner.index not in stats:
                raise MissingPair(f"no right-side stats for {s.name}")
            left, right = stats[s.index], stats[partner.index]
            new_left_mean = 0.5 * (left.mean
                                   + mirror_across_plane(right.mean, mirror_axis,
                                                         plane_coord))
            new_right_mean = mirror_across_plane(new_left_mean, mirror_axis,
                                                 plane_coord)
            cov = 0.5 * (left.covariance + m @ right.covariance @ m)
            cov = 0.5 * (cov + cov.T)
            n = left.n_observations + right.n_observations
            out[s.index] = CentroidStats(new_left_mean, cov, n)
            out[partner.index] = CentroidStats(new_right_mean, m @ cov @ m, n)
    return out


def precision_from_covariance(cov: np.ndarray, floor_um2: float = 1.0) -> np.ndarray:
    """Inverse covariance with covariance eigenvalues floored at floor_um2,
    keeping the regularizer finite for degenerate position statistics."""
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    w = np.maximum(w, floor_um2)
    return v @ np.diag(1.0 / w) @ v.T


# ---------------------------------------------------------------------------
# Atlas assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AtlasStructure:
    id: StructureId
    mean_centroid: np.ndarray  # (3,) µm, atlas frame
    covariance: np.ndarray  # (3, 3) µm²
    precision: np.ndarray  # (3, 3), C_k
    shape: VoxelGrid  # probabilistic, re-originated so its centroid is at 0


@dataclass(frozen=True)
class AnnotatedBrain:
    """Instances of every annotated structure of one brain, mapped into the
    common (atlas) frame. z_score is None for manual annotations."""

    brain_id: str
    instances: dict  # structure index -> StructureInstance
    z_score: float | None = None
    transform: Affine3 | None = None  # atlas -> specimen, if registered


@dataclass(frozen=True)
class AtlasModel:
    structures: tuple  # of AtlasStructure
    domain: GridGeometry
    sources: tuple = ()  # of AnnotatedBrain, the instances the model was built from

    def structure(self, index: int) -> AtlasStructure:
        for s in self.structures:
            if s.id.index == index:
                return s
        raise KeyError(f"no structure with index {index}")

    def indices(self) -> list:
        return [s.id.index for s in self.structures]

    def structure_field(self, index: int) -> VoxelGrid:
        """The structure's occupancy probability A_k materialized on the domain."""
        s = self.structure(index)
        shift = _shape_centroid(s.shape) - s.mean_centroid
        return resample_affine(s.shape, Affine3.from_translation(shift), self.domain)

    def fields(self) -> dict:
        return {s.id.index: self.structure_field(s.id.index) for s in self.structures}

    def probability_vectors(self, points) -> np.ndarray:
        """A(p) for points (N, 3): per-structure probabilities, shape (N, K)."""
        pts = as_points(points)
        cols = []
        for s in self.structures:
            q = pts - s.mean_centroid + _shape_centroid(s.shape)
            cols.append(sample_trilinear_many(s.shape, q))
        return np.stack(cols, axis=1)


def _shape_centroid(shape: VoxelGrid) -> np.ndarray:
    mass = float(shape.values.sum())
    if mass <= 0:
        raise EmptyInput("shape volume has zero mass")
    idx = np.argwhere(shape.values > 0)
    w = shape.values[shape.values > 0]
    centers = shape.geometry.index_to_world(idx)
    return (centers * w[:, None]).sum(axis=0) / mass


def center_shape(shape: VoxelGrid) -> VoxelGrid:
    """Shift the grid origin so the probability-weighted centroid lands at 0.
    Pure metadata change; values are untouched."""
    return shape.with_origin(shape.origin - _shape_centroid(shape))


def assemble_atlas(shapes: dict, stats: dict, domain: GridGeometry,
                   structures, sources=()) -> AtlasModel:
    """Combine per-structure probabilistic shapes with centroid statistics into
    an atlas whose field A_k(p) is shape_k sampled at p - mean_centroid_k
    (plus the shape's own centroid offset)."""
    validate_structure_set(structures)
    out = []
    lo_dom = domain.origin
    hi_dom = domain.origin + (np.array(domain.dims) - 1) * domain.spacing
    for sid in structures:
        if sid.index not in shapes or sid.index not in stats:
            raise NoObservations(f"structure {sid.name} lacks a shape or stats")
        st = stats[sid.index]
        shape = center_shape(shapes[sid.index])
        support = crop_to_support(shape, margin_voxels=0)
        lo = support.origin + st.mean
        hi = (support.origin + (np.array(support.dims) - 1) * support.spacing
              + st.mean)
        if np.any(lo < lo_dom) or np.any(hi > hi_dom):
            warnings.warn(
                f"shape of {sid.name} is clipped by the atlas domain",
                ShapeOutsideDomainWarning, stacklevel=2)
        out.append(AtlasStructure(
            id=sid,
            mean_centroid=np.asarray(st.mean, dtype=np.float64),
            covariance=np.asarray(st.covariance, dtype=np.float64),
            precision=precision_from_covariance(st.covariance),
            shape=shape,
        ))
    return AtlasModel(tuple(out), domain, tuple(sources))


# ---------------------------------------------------------------------------
# Full build and incremental update
# ---------------------------------------------------------------------------


@dataclass
class AtlasBuildConfig:
    sigma0_um: float = 100.0
    precision_floor_um2: float = 1.0
    icp_max_iters: int = 50
    icp_tol: float = 1e-6
    mirror_axis: str = "y"
    mirror_plane_coord: float | None = None  # None: mass midline of annotations
    shape_crop_margin: int = 2
    binarize_threshold: float = 0.5


def build_atlas(brains, structures, domain: GridGeometry,
                config: AtlasBuildConfig | None = None) -> AtlasModel:
    """Estimate the full model from annotated brains already mapped into a
    common frame: centroid stats with symmetrization, then per-structure
    ICP-aligned voxel-voted average shapes, assembled on the domain.

    Shapes are aligned to the first brain carrying the structure; that
    instance anchors the averaging frame.
    """
    config = config or AtlasBuildConfig()
    validate_structure_set(structures)
    brains = list(brains)
    if not brains:
        raise NoObservations("no annotated brains")

    observations = []
    for b in brains:
        for k, inst in sorted(b.instances.items()):
            observations.append((b.brain_id, k, inst.centroid))
    stats = estimate_centroid_stats(observations, sigma0_um=config.sigma0_um)

    plane = config.mirror_plane_coord
    if plane is None:
        axis_i = {"x": 0, "y": 1, "z": 2}[config.mirror_axis]
        weights = []
        coords = []
        for b in brains:
            for k, inst in sorted(b.instances.items()):
                n = float((inst.volume.values > 0.5).sum())
                weights.append(n)
                coords.append(inst.centroid[axis_i])
        plane = float(np.average(coords, weights=weights))
    stats = symmetrize_pairs(stats, structures, config.mirror_axis, plane)

    shapes = {}
    for sid in structures:
        instances = [b.instances[sid.index] for b in brains
                     if sid.index in b.instances]
        if not instances:
            raise NoObservations(f"no instance of {sid.name} in any brain")
        ref = instances[0]
        ref_geo = crop_to_support(ref.volume, config.shape_crop_margin).geometry
        aligned = [resample_affine(ref.volume, Affine3.identity(), ref_geo)]
        for inst in instances[1:]:
            icp = icp_align(inst.boundary_points, ref.boundary_points,
                            max_iters=config.icp_max_iters, tol=config.icp_tol)
            moved = resample_affine(inst.volume, invert_affine(icp.transform),
                                    ref_geo)
            aligned.append(moved)
        binary = [g.with_values((g.values > config.binarize_threshold)
                                .astype(np.float64)) for g in aligned]
        shapes[sid.index] = voxel_vote(binary)

    model = assemble_atlas(shapes, stats, domain, structures, sources=brains)
    return model


def update_atlas(current: AtlasModel, new_brains, config: AtlasBuildConfig | None = None,
                 z_threshold: float = 1.0) -> AtlasModel:
    """Re-estimate the model over the union of its source brains and new
    automatically annotated brains, dropping newcomers whose registration
    z-score falls below the threshold. Updating with nothing new rebuilds
    the identical model."""
    kept = [b for b in new_brains
            if b.z_score is None or b.z_score >= z_threshold]
    sources = list(current.sources) + kept
    structures = [s.id for s in current.structures]
    return build_atlas(sources, structures, current.domain, config)
