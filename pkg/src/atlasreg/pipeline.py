"""End-to-end orchestration over a workspace directory: phantom generation,
stack reconstruction, atlas building with cross-brain co-registration,
detector training, scoring, registration with confidence, atlas update, and
truth-based evaluation.

Every artifact records the hash of the configuration that produced it;
stages refuse artifacts from a different configuration. All stages are
deterministic given (config, seed), including under --jobs parallelism:
jobs are independent, each artifact is written exactly once, and reductions
run in a fixed order.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from jsonschema import Draft7Validator

from . import io
from .atlas import (
    AnnotatedBrain,
    AtlasBuildConfig,
    AtlasModel,
    build_atlas,
    contours_to_volume,
    instance_from_volume,
    update_atlas,
)
from .detector import (
    TrainConfig,
    grid_patches,
    patch_features,
    score_section,
    split_patch_indices,
    stack_score_maps,
    train_logistic,
)
from .errors import ConfigError, DataError, MissingTruth, StageError
from .features import get_extractor
from .geometry import Affine3, Rigid2, VoxelGrid, apply_affine, resample_affine
from .phantom import (
    PhantomSpec,
    default_phantom_spec,
    generate_specimen,
    phantom_spec_from_dict,
    phantom_spec_to_dict,
)
from .registration import (
    ConfidenceConfig,
    GlobalObjective,
    GlobalRegConfig,
    LocalObjective,
    LocalRegParams,
    build_structure_support,
    compute_confidence,
    register_global,
    register_local,
)
from .stack import RigidSearchConfig, align_stack, build_stack

_HOLDOUT = 5  # seed-sequence stage key for train/holdout splits


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class StackStageConfig:
    slab_thickness_um: float = 20.0
    align: bool = True
    search: RigidSearchConfig = field(default_factory=RigidSearchConfig)


@dataclass
class DetectorStageConfig:
    patch_size_um: float = 100.0
    patch_spacing_um: float = 25.0
    surround_um: float = 50.0
    min_samples: int = 10
    extractor: str = "hist-grad-23"
    holdout_fraction: float = 0.25
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class PipelineConfig:
    workdir: str
    seed: int = 0
    jobs: int = 1
    update_z_threshold: float = 1.0
    phantom: PhantomSpec = field(default_factory=default_phantom_spec)
    stack: StackStageConfig = field(default_factory=StackStageConfig)
    detector: DetectorStageConfig = field(default_factory=DetectorStageConfig)
    atlas_build: AtlasBuildConfig = field(default_factory=AtlasBuildConfig)
    global_reg: GlobalRegConfig = field(default_factory=GlobalRegConfig)
    local_reg: LocalRegParams = field(default_factory=LocalRegParams)
    confidence: ConfidenceConfig = field(default_factory=ConfidenceConfig)


def default_pipeline_config(workdir: str, seed: int = 0) -> PipelineConfig:
    return PipelineConfig(workdir=workdir, seed=seed,
                          phantom=default_phantom_spec(seed=seed))


def pipeline_config_to_dict(config: PipelineConfig) -> dict:
    d = {
        "workdir": config.workdir,
        "seed": config.seed,
        "jobs": config.jobs,
        "update_z_threshold": config.update_z_threshold,
        "phantom": phantom_spec_to_dict(config.phantom),
        "stack": {
            "slab_thickness_um": config.stack.slab_thickness_um,
            "align": config.stack.align,
            "search": dataclasses.asdict(config.stack.search),
        },
        "detector": {
            "patch_size_um": config.detector.patch_size_um,
            "patch_spacing_um": config.detector.patch_spacing_um,
            "surround_um": config.detector.surround_um,
            "min_samples": config.detector.min_samples,
            "extractor": config.detector.extractor,
            "holdout_fraction": config.detector.holdout_fraction,
            "train": dataclasses.asdict(config.detector.train),
        },
        "atlas_build": dataclasses.asdict(config.atlas_build),
        "global_reg": dataclasses.asdict(config.global_reg),
        "local_reg": {k: v for k, v in dataclasses.asdict(config.local_reg).items()
                      if k != "precision"},
        "confidence": dataclasses.asdict(config.confidence),
    }
    for key in ("search",):
        d["stack"][key] = {k: (list(v) if isinstance(v, tuple) else v)
                           for k, v in d["stack"][key].items()}
    return d


_CONFIG_SCHEMA = {
    "type": "object",
    "required": ["workdir"],
    "properties": {
        "workdir": {"type": "string"},
        "seed": {"type": "integer"},
        "jobs": {"type": "integer", "minimum": 1},
        "update_z_threshold": {"type": "number"},
        "phantom": {"type": "object"},
        "stack": {"type": "object"},
        "detector": {"type": "object"},
        "atlas_build": {"type": "object"},
        "global_reg": {"type": "object"},
        "local_reg": {"type": "object"},
        "confidence": {"type": "object"},
    },
    "additionalProperties": False,
}


def pipeline_config_from_dict(d: dict) -> PipelineConfig:
    errors = sorted(Draft7Validator(_CONFIG_SCHEMA).iter_errors(d),
                    key=lambda e: list(e.path))
    if errors:
        raise ConfigError("; ".join(e.message for e in errors))
    try:
        config = PipelineConfig(
            workdir=d["workdir"],
            seed=int(d.get("seed", 0)),
            jobs=int(d.get("jobs", 1)),
            update_z_threshold=float(d.get("update_z_threshold", 1.0)),
            phantom=(phantom_spec_from_dict(d["phantom"]) if "phantom" in d
                     else default_phantom_spec(seed=int(d.get("seed", 0)))),
        )
        if "stack" in d:
            s = dict(d["stack"])
            search = s.pop("search", {})
            for k in ("refine_base_step", "fd_step"):
                if k in search:
                    search[k] = tuple(search[k])
            config.stack = StackStageConfig(
                **{**s, "search": RigidSearchConfig(**search)})
        if "detector" in d:
            s = dict(d["detector"])
            train = s.pop("train", {})
            config.detector = DetectorStageConfig(
                **{**s, "train": TrainConfig(**train)})
        if "atlas_build" in d:
            config.atlas_build = AtlasBuildConfig(**d["atlas_build"])
        if "global_reg" in d:
            config.global_reg = GlobalRegConfig(**d["global_reg"])
        if "local_reg" in d:
            config.local_reg = LocalRegParams(**d["local_reg"])
        if "confidence" in d:
            config.confidence = ConfidenceConfig(**d["confidence"])
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"bad pipeline config: {e}") from None
    return config


def pipeline_config_hash(config: PipelineConfig) -> str:
    """Hash of the scientific configuration; workdir and jobs are execution
    details and do not change results."""
    d = pipeline_config_to_dict(config)
    d.pop("workdir")
    d.pop("jobs")
    return io.config_hash(d)


def load_pipeline_config(path) -> PipelineConfig:
    try:
        d = io.load_json(path)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return pipeline_config_from_dict(d)


# ---------------------------------------------------------------------------
# Workspace layout
# ---------------------------------------------------------------------------


class Workspace:
    """Directory layout and artifact loaders. `overrides` may redirect any of
    the phantom/stacks/atlas/classifiers/scores/registrations roots (for the
    CLI's explicit path flags)."""

    def __init__(self, config: PipelineConfig, overrides: dict | None = None):
        self.config = config
        self.hash = pipeline_config_hash(config)
        self.root = Path(config.workdir)
        self.overrides = {k: Path(v) for k, v in (overrides or {}).items()}

    def _dir(self, key: str, default: Path) -> Path:
        return self.overrides.get(key, default)

    # directory helpers
    def phantom_dir(self) -> Path:
        return self._dir("phantom", self.root / "phantom")

    def specimen_dir(self, sid: str) -> Path:
        return self.phantom_dir() / "specimens" / sid

    def stack_dir(self, sid: str) -> Path:
        return self._dir("stacks", self.root / "stacks") / sid

    def atlas_dir(self) -> Path:
        return self._dir("atlas", self.root / "atlas")

    def atlas_updated_dir(self) -> Path:
        return self._dir("atlas_updated", self.root / "atlas_updated")

    def classifier_path(self, name: str) -> Path:
        return self._dir("classifiers", self.root / "classifiers") / f"{name}.json"

    def scores_dir(self, sid: str) -> Path:
        return self._dir("scores", self.root / "scores") / sid

    def registration_dir(self, sid: str) -> Path:
        return self._dir("registrations", self.root / "registrations") / sid

    def specimen_ids(self) -> list:
        return [f"specimen_{i:03d}" for i in range(self.config.phantom.n_specimens)]

    def annotated_ids(self) -> list:
        return self.specimen_ids()[:self.config.phantom.n_annotated]

    def unannotated_ids(self) -> list:
        return self.specimen_ids()[self.config.phantom.n_annotated:]

    # loaders
    def load_sections(self, sid: str) -> list:
        secdir = self.specimen_dir(sid) / "sections"
        paths = sorted(secdir.glob("sec_*.vgrid"))
        if not paths:
            raise DataError(f"no sections under {secdir}")
        return [io.grid_to_image(io.load_vgrid(p, self.hash)) for p in paths]

    def load_section_transforms(self, sid: str) -> list:
        return io.load_section_transforms(self.stack_dir(sid) / "transforms.json",
                                          self.hash)

    def load_truth(self, sid: str) -> dict:
        path = self.specimen_dir(sid) / "truth.json"
        if not path.exists():
            raise MissingTruth(f"no truth record for {sid}")
        return io.load_json(path)

    def load_atlas(self) -> AtlasModel:
        return io.load_atlas(self.atlas_dir(), self.hash)

    def load_scores(self, sid: str, names: dict) -> dict:
        return {k: io.load_vgrid(self.scores_dir(sid) / f"{name}.vgrid", self.hash)
                for k, name in names.items()}


def _run_jobs(fn, items, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def stage_phantom(ws: Workspace) -> None:
    """Generate all specimens and persist sections, truth, and annotations."""
    with _stage("phantom"):
        spec = ws.config.phantom
        spec.validate()
        io.dump_json(ws.phantom_dir() / "spec.json",
                     {**phantom_spec_to_dict(spec), "config_hash": ws.hash})
        for i, sid in enumerate(ws.specimen_ids()):
            sp = generate_specimen(spec, i)
            sdir = ws.specimen_dir(sid)
            for s, img in enumerate(sp.sections):
                io.save_vgrid(sdir / "sections" / f"sec_{s:03d}.vgrid",
                              io.image_to_grid(img), ws.hash)
            io.dump_json(sdir / "truth.json", {
                "config_hash": ws.hash,
                "brain_id": sp.truth.brain_id,
                "global_affine": io.affine_to_dict(sp.truth.global_affine),
                "local_translations": {str(k): v.tolist()
                                       for k, v in
                                       sorted(sp.truth.local_translations.items())},
                "section_transforms": [io.rigid2_to_list(r)
                                       for r in sp.truth.section_transforms],
                "centroids": {str(k): np.asarray(v).tolist()
                              for k, v in sorted(sp.truth.centroids.items())},
            })
            if sp.annotations is not None:
                io.save_annotations(sdir / "annotations.json", sid,
                                    sp.annotations, ws.hash)


def stage_stacks(ws: Workspace, ids=None) -> None:
    """Reconstruct each specimen's 3D volume from its sections."""
    with _stage("stack"):
        cfg = ws.config.stack

        def build(sid):
            sections = ws.load_sections(sid)
            z0 = ws.config.phantom.domain().origin[2]
            if cfg.align:
                volume, transforms = align_stack(
                    sections, cfg.search, cfg.slab_thickness_um, z_origin_um=z0)
            else:
                identity = [Rigid2.identity()] * (len(sections) - 1)
                volume, transforms = build_stack(
                    sections, identity, cfg.slab_thickness_um, z_origin_um=z0)
            io.save_vgrid(ws.stack_dir(sid) / "volume.vgrid", volume, ws.hash)
            io.save_section_transforms(ws.stack_dir(sid) / "transforms.json",
                                       transforms, ws.hash)

        _run_jobs(build, ids or ws.specimen_ids(), ws.config.jobs)


def _annotated_instances(ws: Workspace, sid: str) -> tuple:
    """Rasterize one annotated brain's contours into canonical-grid instances
    using its recovered section transforms."""
    _, annotations = io.load_annotations(
        ws.specimen_dir(sid) / "annotations.json", ws.hash)
    transforms = ws.load_section_transforms(sid)
    domain = ws.config.phantom.domain()
    instances = {}
    ids = {}
    for k, ann in sorted(annotations.items()):
        instances[k] = contours_to_volume(ann, domain, transforms)
        ids[k] = ann.structure
    return instances, ids


def stage_atlas(ws: Workspace, annotated_ids=None) -> AtlasModel:
    """Build the initial model: co-register annotated brains onto the first
    one (global registration of binary structure volumes), then estimate
    statistics and average shapes."""
    with _stage("atlas"):
        annotated_ids = annotated_ids or ws.annotated_ids()
        if not annotated_ids:
            raise DataError("no annotated specimens to build an atlas from")
        domain = ws.config.phantom.domain()

        loaded = [_annotated_instances(ws, sid) for sid in annotated_ids]
        structure_ids = {}
        for _, ids in loaded:
            for k, sid_ in ids.items():
                structure_ids.setdefault(k, sid_)
        id_list = [structure_ids[k] for k in sorted(structure_ids)]

        ref_fields = {k: inst.volume for k, inst in loaded[0][0].items()}
        brains = [AnnotatedBrain(annotated_ids[0], loaded[0][0],
                                 transform=Affine3.identity())]
        for sid, (instances, _) in zip(annotated_ids[1:], loaded[1:]):
            moving = {k: inst.volume for k, inst in instances.items()}
            reg = register_global(ref_fields, moving, ws.config.global_reg)
            mapped = {}
            for k, inst in instances.items():
                vol = resample_affine(inst.volume, reg.transform, domain)
                mapped[k] = instance_from_volume(
                    vol.with_values((vol.values > 0.5).astype(np.float64)))
            brains.append(AnnotatedBrain(sid, mapped, transform=reg.transform))

        model = build_atlas(brains, id_list, domain, ws.config.atlas_build)
        io.save_atlas(ws.atlas_dir(), model, ws.hash)
        return model


def _section_patch_features(ws: Workspace, sections, extractor):
    """Per-section patch grids and feature matrices, computed once and shared
    by every structure's training/scoring."""
    cfg = ws.config.detector
    out = []
    for s, img in enumerate(sections):
        patches = grid_patches(img.geometry, s, cfg.patch_size_um,
                               cfg.patch_spacing_um)
        out.append((patches, patch_features(extractor, img, patches)))
    return out


def stage_train(ws: Workspace) -> dict:
    """Train one texture classifier per structure against its surround,
    pooling patches from every annotated specimen."""
    with _stage("detect-train"):
        cfg = ws.config.detector
        extractor = get_extractor(cfg.extractor)
        pos_feats: dict = {}
        neg_feats: dict = {}
        names: dict = {}

        for sid in ws.annotated_ids():
            instances, ids = _annotated_instances(ws, sid)
            transforms = ws.load_section_transforms(sid)
            sections = ws.load_sections(sid)
            per_section = _section_patch_features(ws, sections, extractor)
            for k, inst in sorted(instances.items()):
                names[k] = ids[k].name
                for patches, feats in per_section:
                    pos_idx, neg_idx = split_patch_indices(
                        inst, patches, cfg.surround_um,
                        section_transforms=transforms)
                    if pos_idx:
                        pos_feats.setdefault(k, []).append(feats[pos_idx])
                    if neg_idx:
                        neg_feats.setdefault(k, []).append(feats[neg_idx])

        classifiers = {}
        for k in sorted(names):
            pos = np.vstack(pos_feats.get(k, [np.zeros((0, extractor.dim))]))
            neg = np.vstack(neg_feats.get(k, [np.zeros((0, extractor.dim))]))
            if len(pos) < cfg.min_samples or len(neg) < cfg.min_samples:
                raise DataError(
                    f"structure {names[k]}: {len(pos)} positive / {len(neg)} "
                    f"negative patches, need {cfg.min_samples}")
            rng = np.random.default_rng(
                np.random.SeedSequence(ws.config.seed, spawn_key=(_HOLDOUT, k)))
            pos_tr, pos_ho = _holdout_split(pos, cfg.holdout_fraction, rng)
            neg_tr, neg_ho = _holdout_split(neg, cfg.holdout_fraction, rng)
            clf = train_logistic(pos_tr, neg_tr, cfg.train, structure_index=k,
                                 extractor_id=extractor.extractor_id)
            acc = _holdout_accuracy(clf, pos_ho, neg_ho)
            clf.metadata["holdout_accuracy"] = acc
            clf.metadata["n_holdout"] = int(len(pos_ho) + len(neg_ho))
            io.save_classifier(ws.classifier_path(names[k]), clf, ws.hash)
            classifiers[k] = clf
        return classifiers


def _holdout_split(x: np.ndarray, fraction: float, rng) -> tuple:
    n_hold = int(round(fraction * len(x)))
    perm = rng.permutation(len(x))
    return x[np.sort(perm[n_hold:])], x[np.sort(perm[:n_hold])]


def _holdout_accuracy(clf, pos: np.ndarray, neg: np.ndarray) -> float:
    if len(pos) + len(neg) == 0:
        return float("nan")
    correct = 0
    if len(pos):
        correct += int(np.sum(clf.predict_proba(pos) >= 0.5))
    if len(neg):
        correct += int(np.sum(clf.predict_proba(neg) < 0.5))
    return correct / (len(pos) + len(neg))


def _atlas_names(model: AtlasModel) -> dict:
    return {s.id.index: s.id.name for s in model.structures}


def stage_score(ws: Workspace, ids=None) -> None:
    """Apply every classifier over each unannotated specimen's sections and
    stack the maps into per-structure score volumes on the atlas grid."""
    with _stage("detect-score"):
        model = ws.load_atlas()
        names = _atlas_names(model)
        cfg = ws.config.detector
        extractor = get_extractor(cfg.extractor)
        classifiers = {k: io.load_classifier(ws.classifier_path(n), ws.hash)
                       for k, n in names.items()}
        domain = ws.config.phantom.domain()

        def score(sid):
            sections = ws.load_sections(sid)
            transforms = ws.load_section_transforms(sid)
            per_section = _section_patch_features(ws, sections, extractor)
            for k in sorted(classifiers):
                maps = {}
                for s, (patches, feats) in enumerate(per_section):
                    maps[s] = score_section(classifiers[k], extractor,
                                            sections[s], patches, features=feats)
                volume = stack_score_maps(maps, transforms, domain)
                io.save_vgrid(ws.scores_dir(sid) / f"{names[k]}.vgrid",
                              volume, ws.hash)

        _run_jobs(score, ids or ws.unannotated_ids(), ws.config.jobs)


def stage_register(ws: Workspace, ids=None, do_global: bool = True,
                   do_local: bool = True) -> None:
    """Global affine then per-structure local registration of the atlas to
    each specimen's score volumes, with confidence reports, the spec'd
    per-specimen registration CSV, and auto-annotation instances for the
    atlas update."""
    with _stage("register"):
        model = ws.load_atlas()
        names = _atlas_names(model)
        fields = model.fields()
        supports = {k: build_structure_support(fields, k, ws.config.local_reg)
                    for k in sorted(fields)} if do_local else {}
        domain = model.domain
        conf_cfg = ws.config.confidence

        def run(sid):
            rdir = ws.registration_dir(sid)
            scores = ws.load_scores(sid, names)
            if do_global:
                reg = register_global(fields, scores, ws.config.global_reg)
                obj = GlobalObjective(fields, scores)
                linear = reg.transform.linear

                def over_b(b):
                    return obj.value(Affine3(linear, b))

                conf = compute_confidence(over_b, reg.transform.translation,
                                          conf_cfg)
                io.dump_json(rdir / "global.json", {
                    "config_hash": ws.hash,
                    "affine": io.affine_to_dict(reg.transform),
                    "converged": reg.converged,
                    "objective": reg.objective_trace[-1][1],
                    "iterations": reg.objective_trace[-1][0],
                    "z_score": conf.z_score,
                    "width_steepest_um": conf.steepest_um,
                    "width_flattest_um": conf.flattest_um,
                    "hessian": conf.hessian.ravel().tolist(),
                })
            if not do_local:
                return
            gmeta = io.load_json(rdir / "global.json")
            io._check_hash(gmeta.get("config_hash"), ws.hash,
                           rdir / "global.json")
            t_global = io.affine_from_dict(gmeta["affine"])
            sprime = {k: resample_affine(scores[k], t_global, domain)
                      for k in sorted(scores)}
            rows = [{
                "structure": "global",
                "tx": t_global.translation[0], "ty": t_global.translation[1],
                "tz": t_global.translation[2], "z_score": gmeta["z_score"],
                "width_steepest_um": gmeta["width_steepest_um"],
                "width_flattest_um": gmeta["width_flattest_um"],
                "converged": bool(gmeta["converged"]),
            }]
            locals_meta = {}
            for k in sorted(fields):
                params = replace(ws.config.local_reg,
                                 precision=model.structure(k).precision)
                reg = register_local(sprime, supports[k], params)
                obj = LocalObjective(sprime, supports[k], params)
                conf = compute_confidence(obj.value, reg.transform, conf_cfg)
                locals_meta[str(k)] = {
                    "translation_um": np.asarray(reg.transform).tolist(),
                    "converged": reg.converged,
                    "objective": reg.objective_trace[-1][1],
                    "z_score": conf.z_score,
                    "width_steepest_um": conf.steepest_um,
                    "width_flattest_um": conf.flattest_um,
                }
                rows.append({
                    "structure": names[k],
                    "tx": reg.transform[0], "ty": reg.transform[1],
                    "tz": reg.transform[2], "z_score": conf.z_score,
                    "width_steepest_um": conf.steepest_um,
                    "width_flattest_um": conf.flattest_um,
                    "converged": reg.converged,
                })
                # transferred annotation: atlas shape placed at mean + t
                shifted = resample_affine(
                    fields[k], Affine3.from_translation(
                        -np.asarray(reg.transform)), domain)
                auto = shifted.with_values(
                    (shifted.values > 0.5).astype(np.float64))
                if (auto.values > 0.5).any() and \
                        conf.z_score >= ws.config.update_z_threshold:
                    io.save_vgrid(rdir / "auto" / f"{k}.vgrid", auto, ws.hash)
            io.dump_json(rdir / "locals.json",
                         {"config_hash": ws.hash, "structures": locals_meta})
            io.write_registration_report(rdir / "report.csv", rows, ws.hash)

        _run_jobs(run, ids or ws.unannotated_ids(), ws.config.jobs)


def stage_update(ws: Workspace, z_threshold: float | None = None) -> AtlasModel:
    """Fold confidently registered specimens back into the model."""
    with _stage("atlas-update"):
        model = ws.load_atlas()
        threshold = (ws.config.update_z_threshold if z_threshold is None
                     else z_threshold)
        new_brains = []
        for sid in ws.unannotated_ids():
            rdir = ws.registration_dir(sid)
            gpath = rdir / "global.json"
            if not gpath.exists():
                continue
            gmeta = io.load_json(gpath)
            instances = {}
            for path in sorted((rdir / "auto").glob("*.vgrid")):
                k = int(path.stem)
                instances[k] = instance_from_volume(io.load_vgrid(path, ws.hash))
            if instances:
                new_brains.append(AnnotatedBrain(
                    sid, instances, z_score=float(gmeta["z_score"]),
                    transform=io.affine_from_dict(gmeta["affine"])))
        updated = update_atlas(model, new_brains, ws.config.atlas_build,
                               z_threshold=threshold)
        io.save_atlas(ws.atlas_updated_dir(), updated, ws.hash)
        return updated


# ---------------------------------------------------------------------------
# Evaluation against ground truth
# ---------------------------------------------------------------------------

EVAL_COLUMNS = ("specimen", "structure", "translation_error_um", "z_score",
                "width_steepest_um", "width_flattest_um", "converged")
STRUCTURE_COLUMNS = ("structure", "pair", "mean_translation_error_um",
                     "mean_z_score", "mean_width_steepest_um",
                     "mean_width_flattest_um", "position_spread_um",
                     "classifier_accuracy")


def evaluate_report(truth_by_id: dict, registrations_by_id: dict,
                    model: AtlasModel, classifier_accuracy: dict) -> tuple:
    """Compare recovered transforms against ground truth.

    Per (specimen, structure): distance between the registered structure
    position mapped into the specimen and the true centroid. Per structure:
    means plus the spread of recovered atlas-frame positions across
    specimens and the classifier's held-out accuracy. Returns
    (per_specimen_rows, per_structure_rows, aggregates).
    """
    if not registrations_by_id:
        return [], [], {}
    names = _atlas_names(model)
    rows = []
    recovered_positions: dict = {k: [] for k in names}
    per_structure_acc: dict = {k: [] for k in names}

    for sid in sorted(registrations_by_id):
        if sid not in truth_by_id:
            raise MissingTruth(f"no ground truth for registered specimen {sid}")
        truth = truth_by_id[sid]
        reg = registrations_by_id[sid]
        t_global = reg["global_affine"]
        true_centroids = truth["centroids"]

        global_errs = []
        for k in sorted(names):
            mean_k = model.structure(k).mean_centroid
            global_errs.append(np.linalg.norm(
                apply_affine(t_global, mean_k) - true_centroids[k]))
        rows.append({
            "specimen": sid, "structure": "global",
            "translation_error_um": float(np.sqrt(np.mean(
                np.square(global_errs)))),
            "z_score": reg["global_z"],
            "width_steepest_um": reg["global_widths"][0],
            "width_flattest_um": reg["global_widths"][1],
            "converged": reg["global_converged"],
        })
        for k in sorted(names):
            if k not in reg["locals"]:
                continue
            loc = reg["locals"][k]
            t_k = np.asarray(loc["translation_um"])
            atlas_pos = model.structure(k).mean_centroid + t_k
            recovered_positions[k].append(atlas_pos)
            placed = apply_affine(t_global, atlas_pos)
            err = float(np.linalg.norm(placed - true_centroids[k]))
            per_structure_acc[k].append(err)
            rows.append({
                "specimen": sid, "structure": names[k],
                "translation_error_um": err,
                "z_score": loc["z_score"],
                "width_steepest_um": loc["width_steepest_um"],
                "width_flattest_um": loc["width_flattest_um"],
                "converged": loc["converged"],
            })

    # per-structure aggregates with paired structures adjacent
    def _sort_key(k):
        s = model.structure(k).id
        base = min(k, s.paired_with) if s.paired_with is not None else k
        return (base, k)

    structure_rows = []
    for k in sorted(names, key=_sort_key):
        s = model.structure(k).id
        struct_rows = [r for r in rows if r["structure"] == names[k]]
        if not struct_rows:
            continue
        pos = np.array(recovered_positions[k])
        spread = float(np.sqrt(np.mean(np.sum(
            (pos - pos.mean(axis=0))**2, axis=1)))) if len(pos) > 1 else 0.0
        structure_rows.append({
            "structure": names[k],
            "pair": names[s.paired_with] if s.paired_with is not None else "",
            "mean_translation_error_um": float(np.mean(
                [r["translation_error_um"] for r in struct_rows])),
            "mean_z_score": float(np.mean([r["z_score"] for r in struct_rows])),
            "mean_width_steepest_um": float(np.mean(
                [r["width_steepest_um"] for r in struct_rows])),
            "mean_width_flattest_um": float(np.mean(
                [r["width_flattest_um"] for r in struct_rows])),
            "position_spread_um": spread,
            "classifier_accuracy": classifier_accuracy.get(k, float("nan")),
        })

    local_rows = [r for r in rows if r["structure"] != "global"]
    global_rows = [r for r in rows if r["structure"] == "global"]
    aggregates = {
        "n_specimens": len(registrations_by_id),
        "mean_global_z": float(np.mean([r["z_score"] for r in global_rows])),
        "mean_local_z": float(np.mean([r["z_score"] for r in local_rows])),
        "mean_translation_error_um": float(np.mean(
            [r["translation_error_um"] for r in local_rows])),
        "mean_global_error_um": float(np.mean(
            [r["translation_error_um"] for r in global_rows])),
        "mean_width_steepest_um": float(np.mean(
            [r["width_steepest_um"] for r in local_rows])),
        "mean_width_flattest_um": float(np.mean(
            [r["width_flattest_um"] for r in local_rows
             if np.isfinite(r["width_flattest_um"])] or [float("inf")])),
        "mean_classifier_accuracy": float(np.mean(
            [r["classifier_accuracy"] for r in structure_rows]))
        if structure_rows else float("nan"),
    }
    return rows, structure_rows, aggregates


def stage_report(ws: Workspace, out_path=None) -> dict:
    """Assemble the final truth-comparison report files."""
    with _stage("report"):
        model = ws.load_atlas()
        names = _atlas_names(model)
        truth_by_id = {}
        registrations = {}
        for sid in ws.unannotated_ids():
            rdir = ws.registration_dir(sid)
            if not (rdir / "global.json").exists():
                continue
            gmeta = io.load_json(rdir / "global.json")
            io._check_hash(gmeta.get("config_hash"), ws.hash,
                           rdir / "global.json")
            lmeta = io.load_json(rdir / "locals.json")
            registrations[sid] = {
                "global_affine": io.affine_from_dict(gmeta["affine"]),
                "global_z": float(gmeta["z_score"]),
                "global_widths": (float(gmeta["width_steepest_um"]),
                                  float(gmeta["width_flattest_um"])),
                "global_converged": bool(gmeta["converged"]),
                "locals": {int(k): v for k, v in lmeta["structures"].items()},
            }
            truth = ws.load_truth(sid)
            truth_by_id[sid] = {
                "global_affine": io.affine_from_dict(truth["global_affine"]),
                "centroids": {int(k): np.array(v, dtype=float)
                              for k, v in truth["centroids"].items()},
                "local_translations": {int(k): np.array(v, dtype=float)
                                       for k, v in
                                       truth["local_translations"].items()},
            }
        accuracy = {}
        for k, name in names.items():
            path = ws.classifier_path(name)
            if path.exists():
                clf = io.load_classifier(path, ws.hash)
                accuracy[k] = clf.metadata.get("holdout_accuracy", float("nan"))

        rows, structure_rows, aggregates = evaluate_report(
            truth_by_id, registrations, model, accuracy)
        out = Path(out_path) if out_path else ws.root / "report.csv"
        io.write_csv(out, EVAL_COLUMNS, rows, ws.hash)
        io.write_csv(out.parent / "report_structures.csv", STRUCTURE_COLUMNS,
                     structure_rows, ws.hash)
        io.dump_json(out.parent / "metrics.json",
                     {"config_hash": ws.hash, **aggregates})
        return aggregates


def run_pipeline(config: PipelineConfig) -> dict:
    """Execute every stage in order; returns the final aggregate metrics."""
    ws = Workspace(config)
    io.dump_json(ws.root / "config.json", pipeline_config_to_dict(config))
    stage_phantom(ws)
    stage_stacks(ws)
    stage_atlas(ws)
    stage_train(ws)
    stage_score(ws)
    stage_register(ws)
    stage_update(ws)
    return stage_report(ws)
