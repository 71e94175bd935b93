"""Per-structure texture detection: patch gridding, training-set sampling
against the structure's surround, logistic-regression training, dense
section scoring, and 2D-to-3D score stacking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from .atlas import StructureInstance
from .errors import (
    DimensionMismatch,
    EmptyClass,
    GeometryMismatch,
    InsufficientSamples,
    SectionTooSmall,
)
from .geometry import (
    GridGeometry,
    Image2,
    ImageGeometry,
    Rigid2,
    VoxelGrid,
    apply_rigid2,
    invert_rigid2,
    resample_rigid2,
    require_same_geometry,
)
from .optim import AdagradConfig, adagrad_ascent

PROB_EPS = 1e-12  # emitted scores stay inside (0, 1)


@dataclass(frozen=True)
class Patch:
    """Square patch on one section: center in slide-frame µm."""

    center: tuple  # (x, y) µm
    section_index: int
    size_um: float


def grid_patches(geometry: ImageGeometry, section_index: int,
                 size_um: float = 100.0, spacing_um: float = 25.0) -> list:
    """Axis-aligned grid of fully-contained patches, centered in the section.

    Deterministic order: y-major, x-fastest (sorted by (section, y, x)).
    """
    lo, hi = geometry.extent()
    width = hi - lo
    if width[0] < size_um or width[1] < size_um:
        raise SectionTooSmall(
            f"section extent {width} µm cannot contain a {size_um} µm patch")
    centers = []
    for ax in range(2):
        n_fit = int(math.floor((width[ax] - size_um) / spacing_um + 1e-9)) + 1
        span = (n_fit - 1) * spacing_um
        start = 0.5 * (lo[ax] + hi[ax]) - 0.5 * span
        centers.append(start + np.arange(n_fit) * spacing_um)
    return [Patch((float(x), float(y)), section_index, size_um)
            for y in centers[1] for x in centers[0]]


def patch_pixel_batch(image: Image2, patches: list) -> np.ndarray:
    """Pixel blocks for same-size patches on one section, shape (N, npx, npy).

    A pixel belongs to the patch if its center lies in the half-open square
    [c - s/2, c + s/2); all blocks therefore share one shape.
    """
    if not patches:
        return np.zeros((0, 0, 0))
    size = patches[0].size_um
    sx, sy = image.spacing
    npx = max(1, int(round(size / sx)))
    npy = max(1, int(round(size / sy)))
    out = np.empty((len(patches), npx, npy), dtype=np.float64)
    for i, p in enumerate(patches):
        if p.size_um != size:
            raise ValueError("mixed patch sizes in one batch")
        ix = int(math.ceil((p.center[0] - size / 2 - image.origin[0]) / sx - 1e-9))
        iy = int(math.ceil((p.center[1] - size / 2 - image.origin[1]) / sy - 1e-9))
        block = image.values[ix:ix + npx, iy:iy + npy]
        if block.shape != (npx, npy):
            raise ValueError(f"patch at {p.center} overruns the section image")
        out[i] = block
    return out


def patch_features(extractor, image: Image2, patches: list) -> np.ndarray:
    return extractor.extract_batch(patch_pixel_batch(image, patches))


# ---------------------------------------------------------------------------
# Training-set sampling
# ---------------------------------------------------------------------------


def split_patch_indices(instance: StructureInstance, patches: list,
                        surround_um: float = 50.0,
                        section_transforms: list | None = None) -> tuple:
    """Indices of patches whose center lies inside the structure (positives)
    and of those outside but within surround_um of it (negatives). Patch
    centers are mapped through their section's rigid transform into the
    instance's frame when transforms are given."""
    vol = instance.volume
    mask = vol.values > 0.5
    dist = distance_transform_edt(~mask, sampling=vol.spacing)
    geo = vol.geometry
    pos_idx, neg_idx = [], []
    for i, p in enumerate(patches):
        xy = np.array(p.center, dtype=np.float64)
        if section_transforms is not None:
            xy = apply_rigid2(section_transforms[p.section_index], xy)
        center = np.array([xy[0], xy[1],
                           geo.origin[2] + p.section_index * geo.spacing[2]])
        idx = np.round((center - geo.origin) / geo.spacing).astype(int)
        if np.any(idx < 0) or np.any(idx >= np.array(geo.dims)):
            continue
        if mask[tuple(idx)]:
            pos_idx.append(i)
        elif dist[tuple(idx)] <= surround_um:
            neg_idx.append(i)
    return pos_idx, neg_idx


def sample_training_sets(instance: StructureInstance, patches: list,
                         surround_um: float = 50.0, min_samples: int = 10,
                         section_transforms: list | None = None) -> tuple:
    """Split patches by center location: inside the structure (positives) vs
    outside but within surround_um of it (negatives). Patches further out
    belong to neither set. Distances are Euclidean, voxel-center based.
    """
    pos_idx, neg_idx = split_patch_indices(instance, patches, surround_um,
                                           section_transforms)
    if len(pos_idx) < min_samples or len(neg_idx) < min_samples:
        raise InsufficientSamples(
            f"{len(pos_idx)} positive / {len(neg_idx)} negative patches, "
            f"need {min_samples} of each")
    return [patches[i] for i in pos_idx], [patches[i] for i in neg_idx]


# ---------------------------------------------------------------------------
# Logistic regression with Adagrad
# ---------------------------------------------------------------------------


def logistic_loss_and_grad(params: np.ndarray, x: np.ndarray, y: np.ndarray,
                           l2: float) -> tuple:
    """Mean logistic loss + l2/2 ||w||² (bias unregularized) and its gradient.
    params = [w_0 .. w_{D-1}, bias]."""
    w, b = params[:-1], params[-1]
    z = x @ w + b
    margins = np.where(y > 0.5, z, -z)
    loss = float(np.mean(np.logaddexp(0.0, -margins)) + 0.5 * l2 * (w @ w))
    p = 1.0 / (1.0 + np.exp(-z))
    r = (p - y) / len(y)
    grad = np.concatenate([x.T @ r + l2 * w, [r.sum()]])
    return loss, grad


@dataclass
class TrainConfig:
    l2: float = 1e-3
    epochs: int = 500
    base_step: float = 0.1
    eps: float = 1e-8
    neg_pos_ratio: float = 2.0  # subsample negatives beyond this multiple
    subsample_seed: int = 0
    standardize: bool = True


@dataclass
class LogisticClassifier:
    """Binary texture detector for one structure, tied to the feature
    extractor (by id) and the feature standardization it was trained with."""

    weights: np.ndarray
    bias: float
    structure_index: int | None
    extractor_id: str
    feature_means: np.ndarray
    feature_stds: np.ndarray
    final_loss: float
    metadata: dict = field(default_factory=dict)

    def standardized(self, features: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(features) - self.feature_means) / self.feature_stds

    def decision(self, features: np.ndarray) -> np.ndarray:
        return self.standardized(features) @ self.weights + self.bias

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        z = self.decision(features)
        p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                     np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def train_logistic(positives: np.ndarray, negatives: np.ndarray,
                   config: TrainConfig | None = None,
                   structure_index: int | None = None,
                   extractor_id: str = "",
                   init_params: np.ndarray | None = None) -> LogisticClassifier:
    """Full-batch gradient descent with Adagrad step sizing on the l2-
    regularized logistic loss. The returned classifier carries the best
    (lowest) loss seen, which is never above the loss at initialization.
    """
    config = config or TrainConfig()
    pos = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    neg = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if pos.shape[0] == 0 or neg.shape[0] == 0:
        raise EmptyClass("both classes must be nonempty")
    if pos.shape[1] != neg.shape[1]:
        raise DimensionMismatch(
            f"feature dims differ: {pos.shape[1]} vs {neg.shape[1]}")

    max_neg = int(math.ceil(config.neg_pos_ratio * pos.shape[0]))
    if neg.shape[0] > max_neg:
        rng = np.random.default_rng(config.subsample_seed)
        keep = np.sort(rng.choice(neg.shape[0], size=max_neg, replace=False))
        neg = neg[keep]

    x = np.vstack([pos, neg])
    y = np.concatenate([np.ones(pos.shape[0]), np.zeros(neg.shape[0])])
    if config.standardize:
        means = x.mean(axis=0)
        stds = x.std(axis=0)
        stds = np.where(stds < 1e-12, 1.0, stds)
    else:
        means = np.zeros(x.shape[1])
        stds = np.ones(x.shape[1])
    xs = (x - means) / stds

    d = x.shape[1]
    p0 = np.zeros(d + 1) if init_params is None else np.asarray(init_params, float)

    def neg_loss(params):
        return -logistic_loss_and_grad(params, xs, y, config.l2)[0]

    def neg_grad(params):
        return -logistic_loss_and_grad(params, xs, y, config.l2)[1]

    res = adagrad_ascent(neg_loss, neg_grad, p0,
                         AdagradConfig(base_step=config.base_step, eps=config.eps,
                                       max_iters=config.epochs, grad_tol=0.0))
    return LogisticClassifier(
        weights=res.x[:-1], bias=float(res.x[-1]),
        structure_index=structure_index, extractor_id=extractor_id,
        feature_means=means, feature_stds=stds,
        final_loss=-res.value,
        metadata={"epochs": config.epochs, "l2": config.l2,
                  "base_step": config.base_step,
                  "n_positive": int(pos.shape[0]), "n_negative": int(neg.shape[0]),
                  "converged": res.converged},
    )


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScoreMap:
    """Detector scores on one section at patch-grid resolution."""

    image: Image2
    section_index: int

    def __post_init__(self):
        v = self.image.values
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("score map values must lie in [0, 1]")


@dataclass(frozen=True)
class ScoreVolumeSet:
    """Per-structure score volumes for one specimen, on a common geometry."""

    volumes: dict  # structure index -> VoxelGrid

    def __post_init__(self):
        if self.volumes:
            require_same_geometry(list(self.volumes.values()))
        for k, g in self.volumes.items():
            if g.values.min() < 0.0 or g.values.max() > 1.0:
                raise ValueError(f"score volume {k} has values outside [0, 1]")

    @property
    def geometry(self) -> GridGeometry:
        return next(iter(self.volumes.values())).geometry


def score_section(classifier: LogisticClassifier, extractor, image: Image2,
                  patches: list, features: np.ndarray | None = None) -> ScoreMap:
    """Apply one classifier on a regular patch grid of a section.

    `features` may carry precomputed per-patch features (one row per patch)
    so several classifiers can share a single extraction pass.
    """
    if extractor.dim != len(classifier.weights):
        raise DimensionMismatch(
            f"extractor emits {extractor.dim} dims, classifier expects "
            f"{len(classifier.weights)}")
    if classifier.extractor_id and extractor.extractor_id != classifier.extractor_id:
        raise DimensionMismatch(
            f"classifier was trained on '{classifier.extractor_id}', "
            f"got '{extractor.extractor_id}'")
    if features is None:
        features = patch_features(extractor, image, patches)
    probs = classifier.predict_proba(features)

    xs = np.unique([p.center[0] for p in patches])
    ys = np.unique([p.center[1] for p in patches])
    if len(patches) != len(xs) * len(ys):
        raise ValueError("patches do not form a full regular grid")
    # grid_patches order is y-major, x-fastest
    vals = probs.reshape(len(ys), len(xs)).T
    step = (xs[1] - xs[0] if len(xs) > 1 else
            ys[1] - ys[0] if len(ys) > 1 else patches[0].size_um)
    img = Image2(vals, (step, step), (xs[0], ys[0]))
    return ScoreMap(img, patches[0].section_index)


def stack_score_maps(maps: dict, section_transforms: list,
                     out_geometry: GridGeometry) -> VoxelGrid:
    """Assemble per-section score maps into a 3D score volume.

    Each map is carried through its section's rigid transform into the
    common frame and written to z-slab = section index; sections without a
    map are zero-filled. In-plane values are interpolated bilinearly.
    """
    nx, ny, nz = out_geometry.dims
    vals = np.zeros(out_geometry.dims, dtype=np.float64)
    plane_geom = ImageGeometry((nx, ny), out_geometry.spacing[:2],
                               out_geometry.origin[:2])
    for s, smap in sorted(maps.items()):
        if not 0 <= s < nz:
            raise GeometryMismatch(f"section {s} outside stack of {nz} slabs")
        if s >= len(section_transforms):
            raise GeometryMismatch(f"no section transform for section {s}")
        moved = resample_rigid2(smap.image, invert_rigid2(section_transforms[s]),
                                plane_geom)
        vals[:, :, s] = moved.values
    return VoxelGrid(vals, out_geometry.spacing, out_geometry.origin)
