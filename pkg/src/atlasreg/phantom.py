"""Synthetic phantom brains with known ground truth.

A phantom specimen is a stack of 2D sections rendering ellipsoidal
structures, each filled with its own dot texture, over a textured
background. Per specimen the generator samples a global affine and
per-structure translations from configured distributions; optional
per-section rigid jitter and pixel noise complete the corruption model.
Everything derives from one seed through per-(stage, specimen, section)
seed-sequence keys, so generation order cannot change results and a rerun
is bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from skimage.measure import approximate_polygon, find_contours

from .atlas import SectionContour, StructureAnnotation, StructureId
from .errors import SpecInvalid
from .geometry import (
    Affine3,
    GridGeometry,
    Image2,
    ImageGeometry,
    Rigid2,
    apply_affine,
    apply_rigid2,
    invert_affine,
    mirror_across_plane,
    rotation_axis_angle,
)

# seed-sequence stage keys
_AFFINE, _LOCAL, _JITTER, _NOISE, _DOTS = 0, 1, 2, 3, 4


def _rng(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


@dataclass
class StructureSpec:
    index: int
    name: str
    hemisphere: str
    paired_with: int | None
    semi_axes_um: np.ndarray  # (3,)
    mean_centroid_um: np.ndarray  # (3,), canonical frame
    position_cov_um2: np.ndarray  # (3, 3)
    base_intensity: float
    dot_density_per_um2: float
    dot_radius_um: float
    dot_intensity_delta: float

    def __post_init__(self):
        self.semi_axes_um = np.asarray(self.semi_axes_um, dtype=np.float64)
        self.mean_centroid_um = np.asarray(self.mean_centroid_um, dtype=np.float64)
        self.position_cov_um2 = np.asarray(self.position_cov_um2,
                                           dtype=np.float64).reshape(3, 3)

    def structure_id(self) -> StructureId:
        return StructureId(self.index, self.name, self.hemisphere, self.paired_with)


@dataclass
class PhantomSpec:
    structures: list
    domain_dims: tuple = (64, 64, 64)
    domain_spacing_um: float = 20.0
    inplane_resolution_um: float = 5.0
    n_specimens: int = 12
    n_annotated: int = 3
    scale_range: tuple = (0.97, 1.03)
    rotation_max_rad: float = math.radians(3.0)
    translation_max_um: float = 80.0
    section_jitter_theta_rad: float = 0.0
    section_jitter_translation_um: float = 0.0
    noise_sigma: float = 0.0
    background_intensity: float = 0.40
    background_dot_density: float = 5e-5
    background_dot_radius_um: float = 18.0
    background_dot_delta: float = -0.12
    seed: int = 0

    def validate(self) -> None:
        if not self.structures:
            raise SpecInvalid("phantom needs at least one structure")
        if self.n_annotated > self.n_specimens or self.n_annotated < 0:
            raise SpecInvalid("n_annotated must be in [0, n_specimens]")
        if self.domain_spacing_um <= 0 or self.inplane_resolution_um <= 0:
            raise SpecInvalid("spacings must be positive")
        if any(d <= 0 for d in self.domain_dims):
            raise SpecInvalid("domain dims must be positive")
        if not (0 < self.scale_range[0] <= self.scale_range[1]):
            raise SpecInvalid("bad scale range")
        for s in self.structures:
            if np.any(s.semi_axes_um <= 0):
                raise SpecInvalid(f"structure {s.name} has non-positive semi-axes")
            w = np.linalg.eigvalsh(0.5 * (s.position_cov_um2
                                          + s.position_cov_um2.T))
            if w.min() < -1e-9:
                raise SpecInvalid(f"structure {s.name} covariance is not PSD")
        try:
            from .atlas import validate_structure_set
            validate_structure_set([s.structure_id() for s in self.structures])
        except ValueError as e:
            raise SpecInvalid(str(e)) from None

    def structure_ids(self) -> list:
        return [s.structure_id() for s in self.structures]

    def domain(self) -> GridGeometry:
        return GridGeometry.isotropic(self.domain_dims, self.domain_spacing_um)

    def domain_center(self) -> np.ndarray:
        g = self.domain()
        return g.origin + 0.5 * (np.array(g.dims) - 1) * g.spacing

    def section_geometry(self) -> ImageGeometry:
        """In-plane slide geometry whose pixel-area extent matches the domain's
        voxel-area extent."""
        g = self.domain()
        res = self.inplane_resolution_um
        lo = g.origin[:2] - 0.5 * g.spacing[:2]
        width = np.array(g.dims[:2]) * g.spacing[:2]
        npix = np.maximum(1, np.round(width / res).astype(int))
        return ImageGeometry(tuple(npix), (res, res), tuple(lo + 0.5 * res))

    def n_sections(self) -> int:
        return self.domain_dims[2]

    def section_z(self, s: int) -> float:
        g = self.domain()
        return float(g.origin[2] + s * g.spacing[2])


@dataclass
class SpecimenTruth:
    brain_id: str
    global_affine: Affine3  # canonical -> specimen frame
    local_translations: dict  # structure index -> (3,) µm, canonical frame
    section_transforms: list  # slide -> specimen frame, one Rigid2 per section
    centroids: dict  # structure index -> true centroid in the specimen frame


@dataclass
class PhantomSpecimen:
    truth: SpecimenTruth
    sections: list  # of Image2
    annotations: dict | None  # structure index -> StructureAnnotation, if annotated

    @property
    def annotated(self) -> bool:
        return self.annotations is not None


@dataclass
class PhantomData:
    spec: PhantomSpec
    specimens: list

    def structure_ids(self):
        return self.spec.structure_ids()


def sample_specimen_params(spec: PhantomSpec, index: int) -> tuple:
    """Draw (global affine, per-structure translations, section jitter) for
    specimen `index`. Rotation and scale act about the domain center so
    structures stay inside the rendered volume."""
    rng = _rng(spec.seed, _AFFINE, index)
    scales = rng.uniform(spec.scale_range[0], spec.scale_range[1], size=3)
    axis = rng.standard_normal(3)
    axis = axis / max(np.linalg.norm(axis), 1e-12)
    angle = rng.uniform(0.0, spec.rotation_max_rad)
    extra = rng.uniform(-spec.translation_max_um, spec.translation_max_um, size=3) \
        if spec.translation_max_um > 0 else np.zeros(3)
    lin = rotation_axis_angle(axis, angle) @ np.diag(scales)
    center = spec.domain_center()
    affine = Affine3(lin, center - lin @ center + extra)

    rng_l = _rng(spec.seed, _LOCAL, index)
    locals_ = {}
    for s in spec.structures:
        w, v = np.linalg.eigh(0.5 * (s.position_cov_um2 + s.position_cov_um2.T))
        eps = rng_l.standard_normal(3)
        locals_[s.index] = v @ (np.sqrt(np.clip(w, 0.0, None)) * eps)

    n = spec.n_sections()
    jitter = []
    for s in range(n):
        rj = _rng(spec.seed, _JITTER, index, s)
        th = rj.uniform(-spec.section_jitter_theta_rad,
                        spec.section_jitter_theta_rad) \
            if spec.section_jitter_theta_rad > 0 else 0.0
        tmax = spec.section_jitter_translation_um
        t = rj.uniform(-tmax, tmax, size=2) if tmax > 0 else np.zeros(2)
        jitter.append(Rigid2(th, t[0], t[1]))
    jitter[n // 2] = Rigid2.identity()  # anchor section carries no jitter
    return affine, locals_, jitter


def specimen_truth(spec: PhantomSpec, index: int) -> SpecimenTruth:
    affine, locals_, jitter = sample_specimen_params(spec, index)
    centroids = {s.index: apply_affine(affine,
                                       s.mean_centroid_um + locals_[s.index])
                 for s in spec.structures}
    return SpecimenTruth(f"specimen_{index:03d}", affine, locals_, jitter,
                         centroids)


def _membership(spec: PhantomSpec, truth: SpecimenTruth,
                points_specimen: np.ndarray) -> dict:
    """Per-structure inside-ellipsoid masks for points in the specimen frame."""
    canonical = apply_affine(invert_affine(truth.global_affine), points_specimen)
    masks = {}
    for s in spec.structures:
        center = s.mean_centroid_um + truth.local_translations[s.index]
        d = (canonical - center) / s.semi_axes_um
        masks[s.index] = np.einsum("ij,ij->i", d, d) <= 1.0
    return masks


def _paint_dots(img: np.ndarray, geom: ImageGeometry, centers_um: np.ndarray,
                radius_um: float, delta: float, mask: np.ndarray | None) -> None:
    if centers_um.size == 0:
        return
    res = geom.spacing
    rpx = np.ceil(radius_um / res).astype(int)
    nx, ny = geom.dims
    for cx, cy in centers_um:
        ix = int(round((cx - geom.origin[0]) / res[0]))
        iy = int(round((cy - geom.origin[1]) / res[1]))
        x0, x1 = max(0, ix - rpx[0]), min(nx, ix + rpx[0] + 1)
        y0, y1 = max(0, iy - rpx[1]), min(ny, iy + rpx[1] + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        xs = geom.origin[0] + np.arange(x0, x1) * res[0]
        ys = geom.origin[1] + np.arange(y0, y1) * res[1]
        disk = ((xs[:, None] - cx)**2 + (ys[None, :] - cy)**2) <= radius_um**2
        if mask is not None:
            disk &= mask[x0:x1, y0:y1]
        img[x0:x1, y0:y1][disk] += delta


def render_section(spec: PhantomSpec, truth: SpecimenTruth, index: int,
                   section: int) -> tuple:
    """Render one slide image; returns (Image2, per-structure slide masks).

    Dot layouts are keyed by (section, structure) only, so specimens with
    identical geometry carry identical texture; all specimen-to-specimen
    variation flows from the sampled transforms and noise.
    """
    geom = spec.section_geometry()
    pix = geom.pixel_centers()
    z = spec.section_z(section)
    slide_xy = apply_rigid2(truth.section_transforms[section], pix)
    pts = np.column_stack([slide_xy, np.full(len(pix), z)])
    masks = {k: m.reshape(geom.dims, order="F")
             for k, m in _membership(spec, truth, pts).items()}

    img = np.full(geom.dims, spec.background_intensity, dtype=np.float64)
    lo, hi = geom.extent()
    area = float(np.prod(hi - lo))
    rng_bg = _rng(spec.seed, _DOTS, section, 0)
    n_bg = int(round(spec.background_dot_density * area))
    centers = rng_bg.uniform(lo, hi, size=(n_bg, 2)) if n_bg else np.zeros((0, 2))
    _paint_dots(img, geom, centers, spec.background_dot_radius_um,
                spec.background_dot_delta, None)

    for s in spec.structures:
        m = masks[s.index]
        if not m.any():
            continue
        img[m] = s.base_intensity
        ix = np.nonzero(m.any(axis=1))[0]
        iy = np.nonzero(m.any(axis=0))[0]
        blo = geom.index_to_world(np.array([ix[0], iy[0]], dtype=float))
        bhi = geom.index_to_world(np.array([ix[-1], iy[-1]], dtype=float))
        barea = float(np.prod(np.maximum(bhi - blo, geom.spacing)))
        rng_d = _rng(spec.seed, _DOTS, section, s.index + 1)
        n_dots = int(round(s.dot_density_per_um2 * barea))
        centers = rng_d.uniform(blo, bhi, size=(n_dots, 2)) if n_dots \
            else np.zeros((0, 2))
        _paint_dots(img, geom, centers, s.dot_radius_um,
                    s.dot_intensity_delta, m)

    if spec.noise_sigma > 0:
        rng_n = _rng(spec.seed, _NOISE, index, section)
        img = img + rng_n.normal(0.0, spec.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return Image2(img.astype(np.float32), geom.spacing, geom.origin), masks


def _annotation_from_masks(sid: StructureId, per_section_masks: dict,
                           geom: ImageGeometry) -> StructureAnnotation | None:
    contours = []
    for s, mask in sorted(per_section_masks.items()):
        for c in find_contours(mask.astype(np.float64), 0.5):
            c = approximate_polygon(c, tolerance=0.5)
            if len(c) < 4:
                continue
            if np.array_equal(c[0], c[-1]):
                c = c[:-1]
            if len(c) < 3:
                continue
            verts = geom.index_to_world(c)
            contours.append(SectionContour(s, verts))
    if not contours:
        return None
    return StructureAnnotation(sid, tuple(contours))


def generate_specimen(spec: PhantomSpec, index: int) -> PhantomSpecimen:
    truth = specimen_truth(spec, index)
    geom = spec.section_geometry()
    sections = []
    mask_store: dict = {s.index: {} for s in spec.structures} \
        if index < spec.n_annotated else None
    for s in range(spec.n_sections()):
        img, masks = render_section(spec, truth, index, s)
        sections.append(img)
        if mask_store is not None:
            for k, m in masks.items():
                if m.any():
                    mask_store[k][s] = m
    annotations = None
    if mask_store is not None:
        annotations = {}
        for st in spec.structures:
            ann = _annotation_from_masks(st.structure_id(), mask_store[st.index],
                                         geom)
            if ann is not None:
                annotations[st.index] = ann
    return PhantomSpecimen(truth, sections, annotations)


def generate_phantom(spec: PhantomSpec) -> PhantomData:
    """Render every specimen. Deterministic given spec.seed; the designated
    first n_annotated specimens carry full contour annotations."""
    spec.validate()
    return PhantomData(spec, [generate_specimen(spec, i)
                              for i in range(spec.n_specimens)])


# ---------------------------------------------------------------------------
# Truth volumes and fields (for evaluation and tests)
# ---------------------------------------------------------------------------


def true_structure_volume(spec: PhantomSpec, truth: SpecimenTruth,
                          structure_index: int,
                          domain: GridGeometry | None = None):
    """Exact binary volume of one structure in the specimen frame."""
    domain = domain or spec.domain()
    pts = domain.voxel_centers()
    mask = _membership(spec, truth, pts)[structure_index]
    vals = mask.reshape(domain.dims, order="F").astype(np.float64)
    from .geometry import VoxelGrid
    return VoxelGrid(vals, domain.spacing, domain.origin)


def canonical_structure_volume(spec: PhantomSpec, structure_index: int,
                               domain: GridGeometry | None = None):
    """Binary volume of one structure at its mean position, canonical frame."""
    domain = domain or spec.domain()
    st = next(s for s in spec.structures if s.index == structure_index)
    pts = domain.voxel_centers()
    d = (pts - st.mean_centroid_um) / st.semi_axes_um
    mask = np.einsum("ij,ij->i", d, d) <= 1.0
    from .geometry import VoxelGrid
    return VoxelGrid(mask.reshape(domain.dims, order="F").astype(np.float64),
                     domain.spacing, domain.origin)


def truth_atlas_fields(spec: PhantomSpec,
                       domain: GridGeometry | None = None) -> dict:
    """Probability-1 canonical structure masks, the idealized atlas."""
    return {s.index: canonical_structure_volume(spec, s.index, domain)
            for s in spec.structures}


# ---------------------------------------------------------------------------
# Default desk-scale phantom
# ---------------------------------------------------------------------------


def _pair(index: int, name: str, center_left, axes, cov_sigma_um: float,
          texture: tuple, mirror_y: float) -> list:
    base, density, radius, delta = texture
    cov = np.eye(3) * cov_sigma_um**2
    left = StructureSpec(index, f"{name}_left", "left", index + 1,
                         np.array(axes, dtype=float),
                         np.array(center_left, dtype=float), cov,
                         base, density, radius, delta)
    right = StructureSpec(index + 1, f"{name}_right", "right", index,
                          np.array(axes, dtype=float),
                          mirror_across_plane(np.array(center_left, float),
                                              "y", mirror_y),
                          cov.copy(), base, density, radius, delta)
    return [left, right]


def default_phantom_spec(seed: int = 0) -> PhantomSpec:
    """8 ellipsoidal structures (3 mirrored pairs + 2 unpaired on the
    midline), 64³ domain at 20 µm, 12 specimens with the first 3 annotated."""
    mid = 630.0  # y midline of the 64-voxel, 20 µm domain
    structures = []
    structures += _pair(0, "n1", (400.0, mid + 240.0, 400.0), (130, 95, 110),
                        55.0, (0.62, 8e-4, 7.0, -0.30), mid)
    structures += _pair(2, "n2", (760.0, mid + 290.0, 480.0), (100, 140, 95),
                        60.0, (0.50, 3e-4, 12.0, 0.28), mid)
    structures += _pair(4, "n3", (480.0, mid + 180.0, 880.0), (115, 110, 150),
                        50.0, (0.70, 5e-4, 9.0, -0.25), mid)
    structures.append(StructureSpec(
        6, "m1", "unpaired", None, np.array([160.0, 110.0, 95.0]),
        np.array([850.0, mid, 850.0]), np.eye(3) * 65.0**2,
        0.45, 1e-3, 6.0, 0.35))
    structures.append(StructureSpec(
        7, "m2", "unpaired", None, np.array([95.0, 125.0, 135.0]),
        np.array([300.0, mid, 640.0]), np.eye(3) * 45.0**2,
        0.58, 2e-4, 14.0, -0.22))
    return PhantomSpec(structures=structures, seed=seed)


def phantom_spec_to_dict(spec: PhantomSpec) -> dict:
    return {
        "seed": spec.seed,
        "domain_dims": list(spec.domain_dims),
        "domain_spacing_um": spec.domain_spacing_um,
        "inplane_resolution_um": spec.inplane_resolution_um,
        "n_specimens": spec.n_specimens,
        "n_annotated": spec.n_annotated,
        "scale_range": list(spec.scale_range),
        "rotation_max_rad": spec.rotation_max_rad,
        "translation_max_um": spec.translation_max_um,
        "section_jitter_theta_rad": spec.section_jitter_theta_rad,
        "section_jitter_translation_um": spec.section_jitter_translation_um,
        "noise_sigma": spec.noise_sigma,
        "background_intensity": spec.background_intensity,
        "background_dot_density": spec.background_dot_density,
        "background_dot_radius_um": spec.background_dot_radius_um,
        "background_dot_delta": spec.background_dot_delta,
        "structures": [{
            "index": s.index, "name": s.name, "hemisphere": s.hemisphere,
            "paired_with": s.paired_with,
            "semi_axes_um": s.semi_axes_um.tolist(),
            "mean_centroid_um": s.mean_centroid_um.tolist(),
            "position_cov_um2": s.position_cov_um2.ravel().tolist(),
            "base_intensity": s.base_intensity,
            "dot_density_per_um2": s.dot_density_per_um2,
            "dot_radius_um": s.dot_radius_um,
            "dot_intensity_delta": s.dot_intensity_delta,
        } for s in spec.structures],
    }


def phantom_spec_from_dict(d: dict) -> PhantomSpec:
    try:
        structures = [StructureSpec(
            index=int(s["index"]), name=s["name"], hemisphere=s["hemisphere"],
            paired_with=s["paired_with"],
            semi_axes_um=np.array(s["semi_axes_um"], dtype=float),
            mean_centroid_um=np.array(s["mean_centroid_um"], dtype=float),
            position_cov_um2=np.array(s["position_cov_um2"],
                                      dtype=float).reshape(3, 3),
            base_intensity=float(s["base_intensity"]),
            dot_density_per_um2=float(s["dot_density_per_um2"]),
            dot_radius_um=float(s["dot_radius_um"]),
            dot_intensity_delta=float(s["dot_intensity_delta"]),
        ) for s in d["structures"]]
        spec = PhantomSpec(
            structures=structures,
            domain_dims=tuple(d.get("domain_dims", (64, 64, 64))),
            domain_spacing_um=float(d.get("domain_spacing_um", 20.0)),
            inplane_resolution_um=float(d.get("inplane_resolution_um", 5.0)),
            n_specimens=int(d.get("n_specimens", 12)),
            n_annotated=int(d.get("n_annotated", 3)),
            scale_range=tuple(d.get("scale_range", (0.97, 1.03))),
            rotation_max_rad=float(d.get("rotation_max_rad",
                                         math.radians(3.0))),
            translation_max_um=float(d.get("translation_max_um", 80.0)),
            section_jitter_theta_rad=float(
                d.get("section_jitter_theta_rad", 0.0)),
            section_jitter_translation_um=float(
                d.get("section_jitter_translation_um", 0.0)),
            noise_sigma=float(d.get("noise_sigma", 0.0)),
            background_intensity=float(d.get("background_intensity", 0.40)),
            background_dot_density=float(d.get("background_dot_density", 5e-5)),
            background_dot_radius_um=float(
                d.get("background_dot_radius_um", 18.0)),
            background_dot_delta=float(d.get("background_dot_delta", -0.12)),
            seed=int(d.get("seed", 0)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise SpecInvalid(f"bad phantom spec: {e}") from None
    spec.validate()
    return spec
