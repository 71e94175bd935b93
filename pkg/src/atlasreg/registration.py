"""Atlas-to-specimen registration and confidence estimation.

The global stage maximizes the voxelwise correlation between the atlas
probability field and the specimen score volumes over a 3D affine (L, b):

    F_global(L, b) = sum_p A(p) . S(L p + b)

The local stage moves each structure by a pure translation t against the
globally transformed score volume S', with a Mahalanobis penalty that keeps
the structure near its mean atlas position:

    F_local(t) = sum_{p in interior} A(p) . S'(p + t)
               - sum_{p in surround} A-(p) * S'_k(p + t)
               - eta * t^T C_k t

Both optimizers run a deterministic grid search over translations followed
by Adagrad ascent, and never return a point worse than the best grid point.
Confidence of a converged peak is its z-score against samples in a sphere
around it, plus peak widths from the finite-difference Hessian of the
z-score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import (
    DegenerateObjective,
    DimensionMismatch,
    EmptyInput,
    EmptySupport,
    GeometryMismatch,
    NonPositivePeak,
)
from .geometry import (
    Affine3,
    Rigid2,
    VoxelGrid,
    apply_affine,
    require_same_geometry,
    sample_trilinear_many,
)
from .optim import AdagradConfig, adagrad_ascent, ball_pattern, translation_grid


@dataclass
class RegistrationResult:
    kind: str  # 'global' | 'local' | 'section'
    transform: object  # Affine3 for global, (3,) translation for local, Rigid2 for section
    objective_trace: list  # (iteration, best objective so far); last = value at transform
    converged: bool
    structure_index: int | None = None


# ---------------------------------------------------------------------------
# Global objective
# ---------------------------------------------------------------------------


def _gradient_grids(g: VoxelGrid) -> list:
    """Central-difference spatial gradient of a grid, one VoxelGrid per axis."""
    comps = np.gradient(g.values.astype(np.float64, copy=False),
                        g.spacing[0], g.spacing[1], g.spacing[2])
    return [g.with_values(c) for c in comps]


class GlobalObjective:
    """F_global and its analytic gradient for fixed atlas fields A_k and
    specimen score volumes S_k.

    The sum runs over atlas voxels where any A component is nonzero; the
    per-structure score gradients J_S are central differences on the score
    grid, interpolated trilinearly at the transformed points.
    """

    def __init__(self, atlas_fields: dict, score_fields: dict):
        if set(atlas_fields) != set(score_fields):
            raise DimensionMismatch(
                f"atlas structures {sorted(atlas_fields)} != "
                f"score structures {sorted(score_fields)}")
        if not atlas_fields:
            raise EmptyInput("no structures to register")
        self.keys = sorted(atlas_fields)
        require_same_geometry([atlas_fields[k] for k in self.keys])
        require_same_geometry([score_fields[k] for k in self.keys])
        self.scores = score_fields

        geo = atlas_fields[self.keys[0]].geometry
        mask = np.zeros(geo.dims, dtype=bool)
        for k in self.keys:
            mask |= atlas_fields[k].values > 0
        if not mask.any():
            raise EmptyInput("atlas field is identically zero")
        if all(not np.any(score_fields[k].values) for k in self.keys):
            raise EmptyInput("score volumes are identically zero")
        idx = np.argwhere(mask)
        self.points = geo.index_to_world(idx)
        # per-structure nonzero weights on the support
        self.weights = {}
        for k in self.keys:
            w = atlas_fields[k].values[mask]
            nz = w > 0
            if nz.any():
                self.weights[k] = (np.nonzero(nz)[0], w[nz])
        self._grad_grids = None

    def value(self, t: Affine3) -> float:
        q = apply_affine(t, self.points)
        total = 0.0
        for k, (rows, w) in self.weights.items():
            total += float(w @ sample_trilinear_many(self.scores[k], q[rows]))
        return total

    def value_normalized(self, t: Affine3) -> float:
        """Correlation-coefficient variant: F divided by the norms of the
        atlas weights and of the sampled scores (experimental)."""
        q = apply_affine(t, self.points)
        num = 0.0
        a2 = 0.0
        s2 = 0.0
        for k, (rows, w) in self.weights.items():
            s = sample_trilinear_many(self.scores[k], q[rows])
            num += float(w @ s)
            a2 += float(w @ w)
            s2 += float(s @ s)
        denom = np.sqrt(a2) * np.sqrt(s2)
        if denom < 1e-12:
            raise DegenerateObjective("zero-variance normalized correlation")
        return num / denom

    def gradient(self, t: Affine3) -> np.ndarray:
        """d F / d(L, b) as 12 reals: row-major L entries, then b."""
        if self._grad_grids is None:
            self._grad_grids = {k: _gradient_grids(self.scores[k])
                                for k in self.weights}
        q = apply_affine(t, self.points)
        g_pts = np.zeros_like(self.points)
        for k, (rows, w) in self.weights.items():
            gk = self._grad_grids[k]
            for ax in range(3):
                g_pts[rows, ax] += w * sample_trilinear_many(gk[ax], q[rows])
        db = g_pts.sum(axis=0)
        dl = g_pts.T @ self.points
        return np.concatenate([dl.ravel(), db])


def eval_global(atlas_fields: dict, score_fields: dict, t: Affine3,
                normalized: bool = False) -> float:
    obj = GlobalObjective(atlas_fields, score_fields)
    return obj.value_normalized(t) if normalized else obj.value(t)


def grad_global(atlas_fields: dict, score_fields: dict, t: Affine3) -> np.ndarray:
    return GlobalObjective(atlas_fields, score_fields).gradient(t)


@dataclass
class GlobalRegConfig:
    grid_radius_um: float = 500.0
    grid_step_um: float = 100.0
    base_step_translation_um: float = 10.0
    base_step_linear: float = 1e-3
    eps: float = 1e-8
    max_iters: int = 1000
    grad_tol: float = 1e-4


def register_global(atlas_fields: dict, score_fields: dict,
                    config: GlobalRegConfig | None = None) -> RegistrationResult:
    """Recover the affine mapping atlas coordinates into the specimen frame.

    Stage 1 grid-searches pure translations at L = I; stage 2 runs Adagrad
    ascent on all 12 affine parameters from the best grid point. The result
    is the best-seen transform, so its objective is >= the grid stage's.
    """
    config = config or GlobalRegConfig()
    obj = GlobalObjective(atlas_fields, score_fields)

    candidates = translation_grid(config.grid_radius_um, config.grid_step_um)
    best_b = None
    best_v = -np.inf
    for b in candidates:
        v = obj.value(Affine3.from_translation(b))
        if v > best_v:
            best_v = v
            best_b = b

    x0 = Affine3.from_translation(best_b).as_params()
    base = np.concatenate([np.full(9, config.base_step_linear),
                           np.full(3, config.base_step_translation_um)])
    res = adagrad_ascent(
        lambda p: obj.value(Affine3.from_params(p)),
        lambda p: obj.gradient(Affine3.from_params(p)),
        x0,
        AdagradConfig(base_step=base, eps=config.eps,
                      max_iters=config.max_iters, grad_tol=config.grad_tol))
    return RegistrationResult("global", Affine3.from_params(res.x), res.trace,
                              res.converged)


# ---------------------------------------------------------------------------
# Local (per-structure) objective
# ---------------------------------------------------------------------------


@dataclass
class LocalRegParams:
    """Per-structure translation registration: support construction,
    regularization, and optimizer constants."""

    eta: float = 1.0
    precision: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    surround_um: float = 50.0
    surround_weight: str = "shape-extension"  # or "uniform"
    sigma_surround_um: float = 25.0
    interior_threshold: float = 0.5
    grid_radius_um: float = 200.0
    grid_step_um: float = 40.0
    base_step_um: float = 10.0
    eps: float = 1e-8
    max_iters: int = 1000
    grad_tol: float = 1e-4

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        self.precision = np.asarray(self.precision, dtype=np.float64).reshape(3, 3)
        if not np.allclose(self.precision, self.precision.T, atol=1e-9):
            raise ValueError("precision must be symmetric")


@dataclass(frozen=True)
class StructureSupport:
    """Interior and surround voxel sets of one structure on the atlas grid,
    with the atlas weights folded in: interior carries the per-structure
    probability vectors, the surround carries the distance-extended
    structure weight A-."""

    structure_index: int
    interior_points: np.ndarray  # (N, 3) µm
    interior_weights: dict  # structure index -> (rows, weights) on interior points
    surround_points: np.ndarray  # (M, 3) µm
    surround_weights: np.ndarray  # (M,)


def build_structure_support(atlas_fields: dict, structure_index: int,
                            params: LocalRegParams) -> StructureSupport:
    """Voxels with A_k above the interior threshold form the interior; voxels
    within surround_um of it (Euclidean, voxel centers) form the surround.
    The two sets are disjoint by construction."""
    fld = atlas_fields[structure_index]
    interior = fld.values >= params.interior_threshold
    if not interior.any():
        raise EmptySupport(
            f"structure {structure_index} has no voxel with probability >= "
            f"{params.interior_threshold}")
    dist = distance_transform_edt(~interior, sampling=fld.spacing)
    surround = (dist > 0) & (dist <= params.surround_um)
    if not surround.any():
        raise EmptySupport(f"structure {structure_index} has an empty surround")
    geo = fld.geometry

    ipts = geo.index_to_world(np.argwhere(interior))
    iweights = {}
    for j, fj in atlas_fields.items():
        w = fj.values[interior]
        nz = w > 0
        if nz.any():
            iweights[j] = (np.nonzero(nz)[0], w[nz])

    spts = geo.index_to_world(np.argwhere(surround))
    d = dist[surround]
    if params.surround_weight == "uniform":
        sweights = np.ones_like(d)
    else:
        sweights = np.exp(-d**2 / (2.0 * params.sigma_surround_um**2))
    return StructureSupport(structure_index, ipts, iweights, spts, sweights)


class LocalObjective:
    """F_local(t) for one structure against the globally transformed score
    volume S'. Interior and surround terms sample S' trilinearly; the
    regularizer is eta * t^T C_k t."""

    def __init__(self, s_prime_fields: dict, support: StructureSupport,
                 params: LocalRegParams):
        self.s = s_prime_fields
        self.sup = support
        self.params = params
        self.k = support.structure_index
        self._grad_grids = {}

    def data_term(self, t: np.ndarray) -> float:
        total = 0.0
        qi = self.sup.interior_points + t
        for j, (rows, w) in self.sup.interior_weights.items():
            total += float(w @ sample_trilinear_many(self.s[j], qi[rows]))
        qs = self.sup.surround_points + t
        total -= float(self.sup.surround_weights
                       @ sample_trilinear_many(self.s[self.k], qs))
        return total

    def value(self, t: np.ndarray) -> float:
        t = np.asarray(t, dtype=np.float64)
        reg = self.params.eta * float(t @ self.params.precision @ t)
        return self.data_term(t) - reg

    def _grads(self, j: int) -> list:
        if j not in self._grad_grids:
            self._grad_grids[j] = _gradient_grids(self.s[j])
        return self._grad_grids[j]

    def gradient(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        g = np.zeros(3)
        qi = self.sup.interior_points + t
        for j, (rows, w) in self.sup.interior_weights.items():
            gj = self._grads(j)
            for ax in range(3):
                g[ax] += float(w @ sample_trilinear_many(gj[ax], qi[rows]))
        qs = self.sup.surround_points + t
        gk = self._grads(self.k)
        for ax in range(3):
            g[ax] -= float(self.sup.surround_weights
                           @ sample_trilinear_many(gk[ax], qs))
        return g - 2.0 * self.params.eta * (self.params.precision @ t)


def eval_local(s_prime_fields: dict, support: StructureSupport,
               t, params: LocalRegParams) -> float:
    return LocalObjective(s_prime_fields, support, params).value(t)


def register_local(s_prime_fields: dict, support: StructureSupport,
                   params: LocalRegParams | None = None) -> RegistrationResult:
    """Per-structure translation against S': grid search over t, then
    Adagrad ascent on the 3 translation parameters."""
    params = params or LocalRegParams()
    obj = LocalObjective(s_prime_fields, support, params)

    best_t = None
    best_v = -np.inf
    for t in translation_grid(params.grid_radius_um, params.grid_step_um):
        v = obj.value(t)
        if v > best_v:
            best_v = v
            best_t = t

    res = adagrad_ascent(
        obj.value, obj.gradient, best_t,
        AdagradConfig(base_step=params.base_step_um, eps=params.eps,
                      max_iters=params.max_iters, grad_tol=params.grad_tol))
    return RegistrationResult("local", res.x, res.trace, res.converged,
                              structure_index=support.structure_index)


# ---------------------------------------------------------------------------
# Registration confidence
# ---------------------------------------------------------------------------


@dataclass
class ConfidenceConfig:
    sphere_radius_um: float = 200.0
    n_samples: int = 200
    hessian_step_um: float = 10.0


@dataclass
class ConfidenceReport:
    z_score: float
    sphere_radius_um: float
    hessian: np.ndarray  # (3, 3), of the z-score in translation, µm^-2
    widths_um: np.ndarray  # (3,) per eigendirection; +inf where curvature >= 0
    eigenvectors: np.ndarray  # (3, 3), columns matching widths
    steepest_um: float
    flattest_um: float


def confidence_zscore(objective_fn, peak_t, sphere_radius_um: float = 200.0,
                      n_samples: int = 200) -> float:
    """Peak height standardized against the objective inside a sphere around
    the peak: z = (F(peak) - mean) / std over a deterministic low-discrepancy
    sample pattern (population std, n denominator)."""
    peak_t = np.asarray(peak_t, dtype=np.float64)
    pts = peak_t + ball_pattern(sphere_radius_um, n_samples)
    vals = np.array([objective_fn(p) for p in pts])
    std = float(vals.std())
    if std < 1e-12:
        raise DegenerateObjective("objective is constant inside the z-score sphere")
    return (float(objective_fn(peak_t)) - float(vals.mean())) / std


def confidence_hessian(z_fn, t_star, step_um: float = 10.0) -> np.ndarray:
    """Symmetric central-difference Hessian of the z-score on the 19-point
    stencil around the peak."""
    t0 = np.asarray(t_star, dtype=np.float64)
    h = float(step_um)
    f0 = z_fn(t0)
    hess = np.zeros((3, 3))
    for i in range(3):
        ei = np.zeros(3)
        ei[i] = h
        hess[i, i] = (z_fn(t0 + ei) + z_fn(t0 - ei) - 2.0 * f0) / h**2
        for j in range(i + 1, 3):
            ej = np.zeros(3)
            ej[j] = h
            hess[i, j] = (z_fn(t0 + ei + ej) + z_fn(t0 - ei - ej)
                          - z_fn(t0 + ei - ej) - z_fn(t0 - ei + ej)) / (4.0 * h**2)
            hess[j, i] = hess[i, j]
    return 0.5 * (hess + hess.T)


def peak_widths(z_peak: float, hessian: np.ndarray) -> tuple:
    """Distance from the peak at which the quadratically extrapolated z-score
    reaches 0, per Hessian eigendirection: width = sqrt(-2 z / lambda) for
    negative eigenvalues; non-negative curvature directions are unbounded
    (+inf). Returns (widths, eigenvectors) with eigenvalues ascending."""
    if z_peak <= 0:
        raise NonPositivePeak(f"peak z-score {z_peak} is not positive")
    w, v = np.linalg.eigh(0.5 * (hessian + hessian.T))
    widths = np.where(w < 0, np.sqrt(-2.0 * z_peak / np.where(w < 0, w, -1.0)),
                      np.inf)
    return widths, v


def compute_confidence(objective_fn, peak_t,
                       config: ConfidenceConfig | None = None) -> ConfidenceReport:
    """z-score of the peak plus Hessian-derived peak widths and the
    uncertainty ellipsoid axes. The z-score normalization (sphere mean/std)
    is frozen at the peak, so z(t) is an affine rescaling of the objective."""
    config = config or ConfidenceConfig()
    peak_t = np.asarray(peak_t, dtype=np.float64)
    pts = peak_t + ball_pattern(config.sphere_radius_um, config.n_samples)
    vals = np.array([objective_fn(p) for p in pts])
    std = float(vals.std())
    if std < 1e-12:
        raise DegenerateObjective("objective is constant inside the z-score sphere")
    mean = float(vals.mean())

    def z_fn(t):
        return (float(objective_fn(t)) - mean) / std

    z = z_fn(peak_t)
    hess = confidence_hessian(z_fn, peak_t, config.hessian_step_um)
    if z > 0:
        widths, vecs = peak_widths(z, hess)
    else:
        # a peak no higher than its sphere has no meaningful width
        widths = np.full(3, np.inf)
        vecs = np.eye(3)
    finite = widths[np.isfinite(widths)]
    return ConfidenceReport(
        z_score=z, sphere_radius_um=config.sphere_radius_um, hessian=hess,
        widths_um=widths, eigenvectors=vecs,
        steepest_um=float(widths.min()),
        flattest_um=float(finite.max()) if finite.size else float("inf"))
