"""
Manifest-driven orchestration of the full volume-to-decision pipeline.

Every stage writes into ``<out>/<patient>/<stage>-<key>/`` where ``key``
hashes the stage parameters, its input files and the key of the previous
stage. A stage directory holding a valid ``done.json`` is reused, so
deleting a downstream directory and re-running resumes from there.

When a label volume is supplied and no ingested boxes or masks are, the
ground truth stands in for the learned detector and segmenter.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import plotting
from .aggregate import AdaptiveParams, PredictionTable, decide_patient
from .errors import SpinevoxError, StageDependencyError, StageError
from .metrics import hd95, overlap_metrics
from .project import n_threads, project, save_proj
from .roivoi import (CERVICAL, VIEWS, Box2D, Box3D, bbox_from_mask, box_iou, fuse_voi,
                     read_boxes_jsonl, sequential_slice_select, tight_box3d, write_boxes_jsonl)
from .stacks import build_stacks, save_stacks
from .vertmask import (N_VERTEBRAE, ApproxMask3D, approximate_mask3d, extract_all, fit_mask,
                       load_multilabel, multilabel_project, save_multilabel)
from .volgrid import LABEL, VoxelGrid, WindowSpec, interpolate_slices, load_vvol, save_vvol

log = logging.getLogger("spinevox.pipeline")

STAGES = ("interpolate", "detect", "fuse", "segment", "approximate", "extract",
          "stacks", "aggregate", "evaluate")
EXIT_CODES = {name: 10 + i for i, name in enumerate(STAGES)}
HASH_CHUNK = 1 << 20


@dataclass
class Manifest:
    """One patient's inputs and parameters. Paths are resolved against ``base_dir``."""

    patient_id: str
    volume: str
    label: Optional[str] = None
    boxes: Optional[str] = None
    masks: Dict[str, str] = field(default_factory=dict)
    predictions: Optional[str] = None
    window: Tuple[float, float] = (400.0, 1400.0)
    t: int = 20
    min_slices: int = 400
    base_sagittal: Tuple[int, int] = (100, 420)
    margin: int = 2
    mask_threshold: float = 0.5
    stack_variants: Tuple[str, ...] = ("raw", "mip")
    mode: str = "adaptive"
    vote_thr: float = 0.5
    fuse_weight: float = 0.5
    adaptive: Tuple[float, float, float] = (0.4, 0.6, 0.2)
    figures: bool = True
    base_dir: str = "."

    def __post_init__(self):
        self.window = tuple(float(v) for v in self.window)
        self.base_sagittal = tuple(int(v) for v in self.base_sagittal)
        self.stack_variants = tuple(self.stack_variants)
        self.adaptive = tuple(float(v) for v in self.adaptive)

    def path(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def validate(self) -> None:
        if not self.patient_id or "/" in self.patient_id:
            raise ValueError(f"invalid patient_id {self.patient_id!r}")
        refs = [self.volume, self.label, self.boxes, self.predictions, *self.masks.values()]
        for rel in refs:
            if rel is not None and not self.path(rel).is_file():
                raise FileNotFoundError(f"manifest references missing file {self.path(rel)}")
        if set(self.masks) - {"sagittal", "coronal"}:
            raise ValueError("masks must be keyed by 'sagittal' and 'coronal'")
        WindowSpec(*self.window)
        AdaptiveParams(*self.adaptive)
        if self.t < 0 or self.margin < 0 or self.min_slices < 1:
            raise ValueError("t and margin must be >= 0 and min_slices >= 1")
        if not 0 < self.mask_threshold < 1 or not 0 < self.vote_thr < 1:
            raise ValueError("mask_threshold and vote_thr must lie in (0, 1)")
        if not 0 <= self.fuse_weight <= 1:
            raise ValueError("fuse_weight must lie in [0, 1]")
        if self.mode not in ("adaptive", "if-any"):
            raise ValueError(f"unknown aggregation mode {self.mode!r}")
        if not set(self.stack_variants) <= {"raw", "mip"}:
            raise ValueError(f"unknown stack variants {self.stack_variants}")

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "Manifest":
        d = dict(d)
        params = d.pop("params", {})
        known = {f for f in cls.__dataclass_fields__}
        merged = {**d, **params}
        unknown = set(merged) - known
        if unknown:
            raise ValueError(f"unknown manifest keys {sorted(unknown)}")
        if isinstance(merged.get("window"), dict):
            merged["window"] = (merged["window"]["width"], merged["window"]["level"])
        if isinstance(merged.get("adaptive"), dict):
            a = merged["adaptive"]
            merged["adaptive"] = (a["thr_low"], a["thr_high"], a["d_ref"])
        merged.setdefault("base_dir", str(base_dir))
        return cls(**merged)


def load_manifests(path) -> List[Manifest]:
    """A manifest file holds one patient object or ``{"patients": [...]}``."""
    path = Path(path)
    data = json.loads(path.read_text())
    items = data["patients"] if isinstance(data, dict) and "patients" in data else [data]
    return [Manifest.from_dict(item, path.parent) for item in items]


# ---------------------------------------------------------------- hashing

def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(HASH_CHUNK), b""):
            h.update(chunk)
    return h.hexdigest()


def _key(payload) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


# ---------------------------------------------------------------- stage bodies
#
# Each body receives the run context and its own directory, writes artifacts
# there and returns a JSON-able result. Downstream stages read upstream
# artifacts back from disk, which is what makes resuming work.

class _Run:
    def __init__(self, manifest: Manifest, patient_dir: Path):
        self.m = manifest
        self.dir = patient_dir
        self.stage_dirs: Dict[str, Path] = {}
        self.results: Dict[str, dict] = {}

    def art(self, stage, name) -> Path:
        return self.stage_dirs[stage] / name

    def window(self) -> WindowSpec:
        return WindowSpec(*self.m.window)


def _stage_interpolate(run: _Run, out: Path) -> dict:
    vol = load_vvol(run.m.path(run.m.volume))
    vol = interpolate_slices(vol, run.m.min_slices)
    save_vvol(vol, out / "volume.vvol")
    res = {"dims": list(vol.dims), "spacing": list(vol.spacing), "has_label": False}
    if run.m.label:
        lab = load_vvol(run.m.path(run.m.label))
        if not lab.is_label:
            raise ValueError("label volume must be of label kind")
        lab = interpolate_slices(lab, run.m.min_slices)
        if lab.dims != vol.dims:
            raise ValueError(f"label dims {lab.dims} differ from volume dims {vol.dims}")
        save_vvol(lab, out / "label.vvol")
        res["has_label"] = True
    return res


def _load_label(run: _Run) -> Optional[VoxelGrid]:
    if not run.results["interpolate"]["has_label"]:
        return None
    return load_vvol(run.art("interpolate", "label.vvol"))


def _stage_detect(run: _Run, out: Path) -> dict:
    vol = load_vvol(run.art("interpolate", "volume.vvol"))
    if run.m.boxes:
        ingested = read_boxes_jsonl(run.m.path(run.m.boxes))
        missing = [v for v in VIEWS if v not in ingested]
        if missing:
            raise StageDependencyError("detect", f"ingested boxes lack views {missing}")
        source = "ingested"

        def detector(img):
            return ingested[img.axis]
    else:
        label = _load_label(run)
        if label is None:
            raise StageDependencyError("detect", "no ingested boxes and no label volume")
        source = "oracle"

        def detector(img):
            return bbox_from_mask(label, img.axis)

    ranges = sequential_slice_select(vol, detector, run.m.base_sagittal)
    slabs = {"sagittal": ranges.sagittal, "coronal": ranges.coronal, "axial": ranges.axial}
    for view in VIEWS:
        img = project(vol, view, "variance", slab=slabs[view])
        save_proj(img, out / f"{view}_variance.pgm")
        if run.m.figures:
            plotting.plot_projection(img, out / f"{view}_variance.png",
                                     [(ranges.boxes[view], "red")], f"{view} variance")
    write_boxes_jsonl(ranges.boxes, out / "boxes.jsonl")
    return {"source": source, "ranges": {k: list(v) for k, v in slabs.items()},
            "boxes": {k: b.to_dict() for k, b in ranges.boxes.items()}}


def _stage_fuse(run: _Run, out: Path) -> dict:
    boxes = {k: Box2D(**v) for k, v in run.results["detect"]["boxes"].items()}
    dims = run.results["interpolate"]["dims"]
    voi = fuse_voi(boxes["coronal"], boxes["sagittal"], boxes["axial"], run.m.t, dims)
    vol = load_vvol(run.art("interpolate", "volume.vvol"))
    save_vvol(vol.with_voxels(np.array(vol.voxels[voi.slices])), out / "voi.vvol")
    label = _load_label(run)
    if label is not None:
        save_vvol(label.with_voxels(np.array(label.voxels[voi.slices])), out / "voi_label.vvol")
    (out / "voi.json").write_text(json.dumps(voi.to_dict(), indent=2))
    return {"voi": voi.to_dict(), "voi_dims": list(voi.dims)}


def _stage_segment(run: _Run, out: Path) -> dict:
    voi_vol = load_vvol(run.art("fuse", "voi.vvol"))
    Z, Y, X = voi_vol.dims
    for view in ("sagittal", "coronal"):
        save_proj(project(voi_vol, view, "energy"), out / f"{view}_energy.pgm")
    if run.m.masks:
        if set(run.m.masks) != {"sagittal", "coronal"}:
            raise StageDependencyError("segment", "ingested masks need both sagittal and coronal files")
        sag = fit_mask(load_multilabel(run.m.path(run.m.masks["sagittal"]), "sagittal",
                                       run.m.mask_threshold), (Z, Y))
        cor = fit_mask(load_multilabel(run.m.path(run.m.masks["coronal"]), "coronal",
                                       run.m.mask_threshold), (Z, X))
        source = "ingested"
    elif run.results["interpolate"]["has_label"]:
        voi_label = load_vvol(run.art("fuse", "voi_label.vvol"))
        sag = multilabel_project(voi_label, "sagittal")
        cor = multilabel_project(voi_label, "coronal")
        source = "oracle"
    else:
        raise StageDependencyError("segment", "no ingested masks and no label volume")
    save_multilabel(sag, out / "sagittal_mask.vvol")
    save_multilabel(cor, out / "coronal_mask.vvol")
    if run.m.figures:
        plotting.plot_multilabel(sag, out / "sagittal_mask.png")
        plotting.plot_multilabel(cor, out / "coronal_mask.png")
    return {"source": source}


def _load_approx(run: _Run) -> ApproxMask3D:
    planes = [load_vvol(run.art("approximate", f"C{v}_mask.vvol")).voxels.astype(bool)
              for v in range(1, N_VERTEBRAE + 1)]
    return ApproxMask3D(np.stack(planes))


def _stage_approximate(run: _Run, out: Path) -> dict:
    sag = load_multilabel(run.art("segment", "sagittal_mask.vvol"))
    cor = load_multilabel(run.art("segment", "coronal_mask.vvol"))
    approx = approximate_mask3d(sag, cor, run.results["fuse"]["voi_dims"])
    counts = {}
    for v in range(1, N_VERTEBRAE + 1):
        save_vvol(VoxelGrid(approx.mask(v).astype(np.uint8), (1.0, 1.0, 1.0), LABEL),
                  out / f"C{v}_mask.vvol")
        counts[f"C{v}"] = int(approx.mask(v).sum())
    return {"voxels": counts}


def _stage_extract(run: _Run, out: Path) -> dict:
    voi_vol = load_vvol(run.art("fuse", "voi.vvol"))
    verts, failed = extract_all(voi_vol, _load_approx(run), run.m.margin)
    for v, (grid, _) in verts.items():
        save_vvol(grid, out / f"C{v}.vvol")
    return {"boxes": {str(v): b.to_dict() for v, (_, b) in verts.items()},
            "failed": {str(v): msg for v, msg in failed.items()}}


def _stage_stacks(run: _Run, out: Path) -> dict:
    made = []
    for v_str in sorted(run.results["extract"]["boxes"], key=int):
        v = int(v_str)
        vert = load_vvol(run.art("extract", f"C{v}.vvol"))
        for variant in run.m.stack_variants:
            st = build_stacks(vert, variant, run.window(), v)
            save_stacks(st, out / f"C{v}_{variant}.vvol", run.window())
            if run.m.figures and v == 1:
                plotting.plot_stack_montage(st, out / f"C{v}_{variant}.png")
            made.append(f"C{v}_{variant}")
    return {"stacks": made}


def _stage_aggregate(run: _Run, out: Path) -> dict:
    table = PredictionTable.from_csv(run.m.path(run.m.predictions))
    rec = decide_patient(table, run.m.patient_id, run.m.mode, AdaptiveParams(*run.m.adaptive),
                         run.m.vote_thr, run.m.fuse_weight)
    (out / "decisions.jsonl").write_text(json.dumps(rec) + "\n")
    return rec


def _stage_evaluate(run: _Run, out: Path) -> dict:
    label = _load_label(run)
    voi = Box3D.from_dict(run.results["fuse"]["voi"])
    spacing = tuple(run.results["interpolate"]["spacing"])
    gt_box = tight_box3d(np.isin(label.voxels, CERVICAL))
    metrics = {"voi_iou": box_iou(voi, gt_box), "voi_contains_gt": voi.contains(gt_box),
               "gt_box": gt_box.to_dict(), "views": {}, "vertebrae": {}}
    for view, b in run.results["detect"]["boxes"].items():
        metrics["views"][view] = {"box_iou": box_iou(Box2D(**b), bbox_from_mask(label, view))}

    approx = _load_approx(run)
    voi_label = label.voxels[voi.slices]
    extracted = run.results["extract"]["boxes"]
    for v in range(1, N_VERTEBRAE + 1):
        truth = label.voxels == v
        n_true = int(truth.sum())
        entry = {"label_voxels": n_true}
        if str(v) in extracted and n_true:
            eb = Box3D.from_dict(extracted[str(v)])
            glob = Box3D(eb.z0 + voi.z0, eb.z1 + voi.z0, eb.y0 + voi.y0, eb.y1 + voi.y0,
                         eb.x0 + voi.x0, eb.x1 + voi.x0)
            entry["containment"] = float(truth[glob.slices].sum()) / n_true
        else:
            entry["containment"] = 0.0 if n_true else None
        crop_truth = voi_label == v
        pred = approx.mask(v)
        iou, dice = overlap_metrics(pred, crop_truth)
        entry.update(iou=iou, dice=dice)
        if pred.any() and crop_truth.any():
            entry["hd95_mm"] = hd95(pred, crop_truth, spacing)
        metrics["vertebrae"][f"C{v}"] = entry
    if run.m.figures:
        flat = {"voi_iou": metrics["voi_iou"]}
        flat.update({f"{k} dice": e["dice"] for k, e in metrics["vertebrae"].items()})
        plotting.plot_metrics(flat, out / "metrics.png", f"patient {run.m.patient_id}")
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    return metrics


_BODIES = {
    "interpolate": _stage_interpolate,
    "detect": _stage_detect,
    "fuse": _stage_fuse,
    "segment": _stage_segment,
    "approximate": _stage_approximate,
    "extract": _stage_extract,
    "stacks": _stage_stacks,
    "aggregate": _stage_aggregate,
    "evaluate": _stage_evaluate,
}


def _stage_inputs(m: Manifest, stage: str) -> Tuple[dict, dict]:
    """(parameters, ingested files) that feed ``stage``'s key."""
    files = {}
    if stage == "interpolate":
        files = {"volume": m.volume, "label": m.label}
        params = {"min_slices": m.min_slices}
    elif stage == "detect":
        files = {"boxes": m.boxes}
        params = {"base_sagittal": list(m.base_sagittal)}
    elif stage == "fuse":
        params = {"t": m.t}
    elif stage == "segment":
        files = dict(m.masks)
        params = {"mask_threshold": m.mask_threshold}
    elif stage == "extract":
        params = {"margin": m.margin}
    elif stage == "stacks":
        params = {"window": list(m.window), "variants": list(m.stack_variants)}
    elif stage == "aggregate":
        files = {"predictions": m.predictions}
        params = {"mode": m.mode, "vote_thr": m.vote_thr, "weight": m.fuse_weight,
                  "adaptive": list(m.adaptive), "patient": m.patient_id}
    else:
        params = {}
    params["figures"] = m.figures
    hashes = {k: file_sha256(m.path(p)) for k, p in files.items() if p}
    return params, hashes


def _artifact_hashes(stage_dir: Path) -> Tuple[dict, list]:
    arts, figs = {}, []
    for p in sorted(stage_dir.iterdir()):
        if p.name == "done.json":
            continue
        if p.suffix == ".png":
            figs.append(p.name)
        else:
            arts[p.name] = file_sha256(p)
    return arts, figs


def _valid_done(stage_dir: Path, key: str) -> Optional[dict]:
    done = stage_dir / "done.json"
    if not done.is_file():
        return None
    try:
        rec = json.loads(done.read_text())
    except json.JSONDecodeError:
        return None
    if rec.get("key") != key:
        return None
    for name, digest in rec.get("artifacts", {}).items():
        p = stage_dir / name
        if not p.is_file() or file_sha256(p) != digest:
            return None
    return rec


def run_pipeline(manifest: Manifest, out_dir) -> dict:
    """Run every applicable stage for one patient and write ``report.json``.

    Raises :class:`StageError` naming the failing stage.
    """
    manifest.validate()
    patient_dir = Path(out_dir) / manifest.patient_id
    patient_dir.mkdir(parents=True, exist_ok=True)
    run = _Run(manifest, patient_dir)
    report = {"patient_id": manifest.patient_id,
              "started_at": datetime.now(timezone.utc).isoformat(),
              "manifest": {k: v for k, v in asdict(manifest).items() if k != "base_dir"},
              "stages": []}
    upstream = ""
    for stage in STAGES:
        if stage == "aggregate" and not manifest.predictions:
            report["stages"].append({"stage": stage, "status": "skipped",
                                     "reason": "no predictions CSV"})
            continue
        if stage == "evaluate" and not run.results["interpolate"]["has_label"]:
            report["stages"].append({"stage": stage, "status": "skipped",
                                     "reason": "no label volume"})
            continue
        params, inputs = _stage_inputs(manifest, stage)
        key = _key({"stage": stage, "params": params, "inputs": inputs, "upstream": upstream})
        stage_dir = patient_dir / f"{stage}-{key}"
        run.stage_dirs[stage] = stage_dir
        t0 = time.perf_counter()
        rec = _valid_done(stage_dir, key)
        status = "resumed"
        if rec is None:
            status = "ran"
            stage_dir.mkdir(exist_ok=True)
            for stale in stage_dir.iterdir():
                stale.unlink()
            log.info("stage %s starting", stage, extra={"stage": stage, "patient": manifest.patient_id})
            try:
                result = _BODIES[stage](run, stage_dir)
            except StageError as exc:
                if exc.stage == stage:
                    raise
                raise StageError(stage, str(exc)) from exc
            except (SpinevoxError, ValueError, KeyError, OSError) as exc:
                raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
            arts, figs = _artifact_hashes(stage_dir)
            rec = {"stage": stage, "key": key, "result": result, "artifacts": arts, "figures": figs}
            (stage_dir / "done.json").write_text(json.dumps(rec, indent=2, sort_keys=True))
        run.results[stage] = rec["result"]
        elapsed = time.perf_counter() - t0
        log.info("stage %s %s in %.3f s", stage, status, elapsed,
                 extra={"stage": stage, "patient": manifest.patient_id})
        report["stages"].append({"stage": stage, "status": status, "dir": stage_dir.name,
                                 "seconds": elapsed, "artifacts": rec["artifacts"],
                                 "figures": rec["figures"]})
        upstream = key
    if "evaluate" in run.results:
        report["metrics"] = run.results["evaluate"]
    if "aggregate" in run.results:
        report["decision"] = run.results["aggregate"]
    report["total_seconds"] = sum(s.get("seconds", 0.0) for s in report["stages"])
    (patient_dir / "report.json").write_text(json.dumps(report, indent=2))
    return report


def run_many(manifests: List[Manifest], out_dir, workers: Optional[int] = None) -> List[dict]:
    """Patients run concurrently; each owns its own directory."""
    workers = workers or min(n_threads(), max(1, len(manifests)))
    if workers == 1 or len(manifests) == 1:
        return [run_pipeline(m, out_dir) for m in manifests]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda m: run_pipeline(m, out_dir), manifests))


def phantom_case(out_dir, seed: int = 0, dims=(160, 96, 96), t: int = 0, **params) -> Manifest:
    """Write a phantom pair into ``out_dir`` and return an oracle-mode manifest for it."""
    from .volgrid import make_phantom

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    inten, lab = make_phantom(seed, dims=dims)
    save_vvol(inten, out_dir / f"phantom{seed}.vvol")
    save_vvol(lab, out_dir / f"phantom{seed}_label.vvol")
    params.setdefault("base_sagittal", (0, int(dims[2])))
    return Manifest(patient_id=f"phantom{seed}", volume=f"phantom{seed}.vvol",
                    label=f"phantom{seed}_label.vvol", t=t, base_dir=str(out_dir), **params)
