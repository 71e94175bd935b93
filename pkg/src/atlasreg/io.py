"""Bit-exact artifact formats.

Volume format ".vgrid": a JSON sidecar (dims, spacing_um, origin_um, dtype,
optional config_hash) next to a raw little-endian float32 payload in
x-fastest order at "<name>.vgrid.raw". All JSON is written with fixed key
order and shortest-round-trip float repr, so identical data produces
identical bytes. Artifacts record the config hash that produced them;
loaders reject artifacts from a different configuration when given the
expected hash.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .atlas import (
    AnnotatedBrain,
    AtlasModel,
    AtlasStructure,
    SectionContour,
    StructureAnnotation,
    StructureId,
    instance_from_volume,
    precision_from_covariance,
)
from .detector import LogisticClassifier
from .errors import DataError
from .geometry import Affine3, GridGeometry, Image2, Rigid2, VoxelGrid

REPORT_COLUMNS = ("structure", "tx", "ty", "tz", "z_score",
                  "width_steepest_um", "width_flattest_um", "converged")


def config_hash(config_dict: dict) -> str:
    canon = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def dump_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2)
        f.write("\n")


def load_json(path) -> dict:
    with open(path) as f:
        return json.load(f)


def _check_hash(found, expected, path) -> None:
    if expected is not None and found != expected:
        raise DataError(f"{path} was produced by config {found}, "
                        f"expected {expected}")


# ---------------------------------------------------------------------------
# .vgrid volumes
# ---------------------------------------------------------------------------


def save_vgrid(path, grid: VoxelGrid, cfg_hash: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sidecar = {
        "dims": list(grid.dims),
        "spacing_um": grid.spacing.tolist(),
        "origin_um": grid.origin.tolist(),
        "dtype": "f32",
    }
    if cfg_hash is not None:
        sidecar["config_hash"] = cfg_hash
    with open(path, "w") as f:
        json.dump(sidecar, f, indent=2)
        f.write("\n")
    payload = grid.values.astype("<f4").ravel(order="F")
    payload.tofile(str(path) + ".raw")


def load_vgrid(path, expected_hash: str | None = None) -> VoxelGrid:
    path = Path(path)
    sidecar = load_json(path)
    _check_hash(sidecar.get("config_hash"), expected_hash, path)
    if sidecar.get("dtype") != "f32":
        raise DataError(f"{path}: unsupported dtype {sidecar.get('dtype')}")
    dims = tuple(int(d) for d in sidecar["dims"])
    raw = np.fromfile(str(path) + ".raw", dtype="<f4")
    if raw.size != int(np.prod(dims)):
        raise DataError(f"{path}: payload has {raw.size} values, "
                        f"dims need {int(np.prod(dims))}")
    vals = raw.reshape(dims, order="F")
    return VoxelGrid(vals, sidecar["spacing_um"], sidecar["origin_um"])


def image_to_grid(img: Image2) -> VoxelGrid:
    """Sections are stored as single-slab volumes (nz = 1, unit z spacing)."""
    return VoxelGrid(img.values[:, :, None],
                     (img.spacing[0], img.spacing[1], 1.0),
                     (img.origin[0], img.origin[1], 0.0))


def grid_to_image(grid: VoxelGrid) -> Image2:
    if grid.dims[2] != 1:
        raise DataError(f"expected a single-slab volume, got nz={grid.dims[2]}")
    return Image2(grid.values[:, :, 0], grid.spacing[:2], grid.origin[:2])


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------


def affine_to_dict(t: Affine3) -> dict:
    return {"linear": t.linear.ravel().tolist(),
            "translation": t.translation.tolist()}


def affine_from_dict(d: dict) -> Affine3:
    return Affine3(np.array(d["linear"], dtype=float).reshape(3, 3),
                   np.array(d["translation"], dtype=float))


def rigid2_to_list(r: Rigid2) -> list:
    return [r.theta, r.tx, r.ty]


def rigid2_from_list(v) -> Rigid2:
    return Rigid2(float(v[0]), float(v[1]), float(v[2]))


def save_section_transforms(path, transforms: list, cfg_hash: str | None = None):
    dump_json(path, {"config_hash": cfg_hash,
                     "transforms": [rigid2_to_list(r) for r in transforms]})


def load_section_transforms(path, expected_hash: str | None = None) -> list:
    d = load_json(path)
    _check_hash(d.get("config_hash"), expected_hash, path)
    return [rigid2_from_list(v) for v in d["transforms"]]


# ---------------------------------------------------------------------------
# Annotations
# ---------------------------------------------------------------------------


def structure_id_to_dict(sid: StructureId) -> dict:
    return {"index": sid.index, "name": sid.name,
            "hemisphere": sid.hemisphere, "paired_with": sid.paired_with}


def structure_id_from_dict(d: dict) -> StructureId:
    return StructureId(int(d["index"]), d["name"], d["hemisphere"],
                       d["paired_with"])


def save_annotations(path, brain_id: str, annotations: dict,
                     cfg_hash: str | None = None) -> None:
    payload = {"config_hash": cfg_hash, "brain_id": brain_id, "structures": []}
    for k in sorted(annotations):
        ann = annotations[k]
        payload["structures"].append({
            **structure_id_to_dict(ann.structure),
            "contours": [{"section_index": c.section_index,
                          "vertices_um": c.vertices_um.tolist()}
                         for c in ann.contours],
        })
    dump_json(path, payload)


def load_annotations(path, expected_hash: str | None = None) -> tuple:
    d = load_json(path)
    _check_hash(d.get("config_hash"), expected_hash, path)
    out = {}
    for s in d["structures"]:
        sid = structure_id_from_dict(s)
        contours = tuple(SectionContour(int(c["section_index"]),
                                        np.array(c["vertices_um"], dtype=float))
                         for c in s["contours"])
        out[sid.index] = StructureAnnotation(sid, contours)
    return d["brain_id"], out


# ---------------------------------------------------------------------------
# Atlas directory
# ---------------------------------------------------------------------------


def save_atlas(dirpath, model: AtlasModel, cfg_hash: str | None = None) -> None:
    dirpath = Path(dirpath)
    (dirpath / "shapes").mkdir(parents=True, exist_ok=True)
    meta = {
        "config_hash": cfg_hash,
        "domain": {"dims": list(model.domain.dims),
                   "spacing_um": model.domain.spacing.tolist(),
                   "origin_um": model.domain.origin.tolist()},
        "structures": [{
            "id": s.id.index,
            "name": s.id.name,
            "hemisphere": s.id.hemisphere,
            "paired_id": s.id.paired_with,
            "mean_centroid_um": s.mean_centroid.tolist(),
            "covariance_um2": s.covariance.ravel().tolist(),
        } for s in model.structures],
        "sources": [{"brain_id": b.brain_id, "z_score": b.z_score,
                     "structures": sorted(b.instances)}
                    for b in model.sources],
    }
    dump_json(dirpath / "atlas.json", meta)
    for s in model.structures:
        save_vgrid(dirpath / "shapes" / f"{s.id.name}.vgrid", s.shape, cfg_hash)
    for b in model.sources:
        for k in sorted(b.instances):
            save_vgrid(dirpath / "sources" / b.brain_id / f"{k}.vgrid",
                       b.instances[k].volume, cfg_hash)
        if b.transform is not None:
            dump_json(dirpath / "sources" / b.brain_id / "transform.json",
                      affine_to_dict(b.transform))


def load_atlas(dirpath, expected_hash: str | None = None) -> AtlasModel:
    dirpath = Path(dirpath)
    meta = load_json(dirpath / "atlas.json")
    _check_hash(meta.get("config_hash"), expected_hash, dirpath / "atlas.json")
    domain = GridGeometry(tuple(meta["domain"]["dims"]),
                          meta["domain"]["spacing_um"],
                          meta["domain"]["origin_um"])
    structures = []
    for s in meta["structures"]:
        sid = StructureId(int(s["id"]), s["name"], s["hemisphere"],
                          s["paired_id"])
        cov = np.array(s["covariance_um2"], dtype=float).reshape(3, 3)
        shape = load_vgrid(dirpath / "shapes" / f"{s['name']}.vgrid",
                           expected_hash)
        structures.append(AtlasStructure(
            id=sid, mean_centroid=np.array(s["mean_centroid_um"], dtype=float),
            covariance=cov, precision=precision_from_covariance(cov),
            shape=shape))
    sources = []
    for b in meta.get("sources", []):
        instances = {}
        for k in b["structures"]:
            vol = load_vgrid(dirpath / "sources" / b["brain_id"] / f"{k}.vgrid",
                             expected_hash)
            instances[int(k)] = instance_from_volume(vol)
        tpath = dirpath / "sources" / b["brain_id"] / "transform.json"
        transform = affine_from_dict(load_json(tpath)) if tpath.exists() else None
        sources.append(AnnotatedBrain(b["brain_id"], instances,
                                      b.get("z_score"), transform))
    return AtlasModel(tuple(structures), domain, tuple(sources))


# ---------------------------------------------------------------------------
# Classifiers
# ---------------------------------------------------------------------------


def save_classifier(path, clf: LogisticClassifier,
                    cfg_hash: str | None = None) -> None:
    dump_json(path, {
        "structure": clf.structure_index,
        "extractor_id": clf.extractor_id,
        "standardization": {"means": clf.feature_means.tolist(),
                            "stds": clf.feature_stds.tolist()},
        "weights": clf.weights.tolist(),
        "bias": clf.bias,
        "final_loss": clf.final_loss,
        "metadata": clf.metadata,
        "config_hash": cfg_hash,
    })


def load_classifier(path, expected_hash: str | None = None) -> LogisticClassifier:
    d = load_json(path)
    _check_hash(d.get("config_hash"), expected_hash, path)
    return LogisticClassifier(
        weights=np.array(d["weights"], dtype=float),
        bias=float(d["bias"]),
        structure_index=d["structure"],
        extractor_id=d["extractor_id"],
        feature_means=np.array(d["standardization"]["means"], dtype=float),
        feature_stds=np.array(d["standardization"]["stds"], dtype=float),
        final_loss=float(d["final_loss"]),
        metadata=d.get("metadata", {}),
    )


# ---------------------------------------------------------------------------
# CSV reports
# ---------------------------------------------------------------------------


def _csv_cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows, cfg_hash: str | None = None) -> None:
    """Deterministic CSV: optional '# config_hash=' comment line, fixed column
    order, shortest-round-trip float formatting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    if cfg_hash is not None:
        lines.append(f"# config_hash={cfg_hash}")
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_csv_cell(row[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n")


def write_registration_report(path, rows, cfg_hash: str | None = None) -> None:
    """One row per structure plus one 'global' row, fixed column order."""
    write_csv(path, REPORT_COLUMNS, rows, cfg_hash)


def read_csv(path) -> list:
    lines = Path(path).read_text().strip().splitlines()
    lines = [ln for ln in lines if not ln.startswith("#")]
    cols = lines[0].split(",")
    return [dict(zip(cols, ln.split(","))) for ln in lines[1:]]
