"""Command-line entry point: ``spinevox <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import aggregate as agg
from . import metrics
from .errors import EmptyMaskError, FormatError, SpinevoxError, StageError
from .pipeline import EXIT_CODES, load_manifests, run_many
from .project import AXES, OPERATORS, ProjParams, project, save_proj
from .roivoi import Box3D, fuse_voi, read_boxes_jsonl
from .stacks import build_stacks, save_stacks
from .vertmask import N_VERTEBRAE, ApproxMask3D, approximate_mask3d, extract_all, load_multilabel
from .volgrid import LABEL, VoxelGrid, WindowSpec, load_vvol, make_phantom, parse_dims, save_vvol

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_INPUT = 4
EXIT_MISSING = 5

log = logging.getLogger("spinevox")


class JsonFormatter(logging.Formatter):
    def format(self, record):
        rec = {"ts": self.formatTime(record, "%Y-%m-%dT%H:%M:%S"), "level": record.levelname,
               "logger": record.name, "msg": record.getMessage()}
        for extra in ("stage", "patient"):
            if hasattr(record, extra):
                rec[extra] = getattr(record, extra)
        return json.dumps(rec)


def _setup_logging(fmt: str, level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if fmt == "json":
        handler.setFormatter(JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(level.upper())
    log.propagate = False


def _floats(text: str, n: int):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    return tuple(parts)


def _write_json(obj, path) -> None:
    text = json.dumps(obj, indent=2)
    if path in (None, "-"):
        print(text)
    else:
        Path(path).write_text(text + "\n")


# ---------------------------------------------------------------- subcommands

def cmd_phantom(a):
    inten, lab = make_phantom(a.seed, a.n_vertebrae, parse_dims(a.dims))
    save_vvol(inten, a.out_intensity)
    save_vvol(lab, a.out_label)
    log.info("phantom seed %d dims %s written", a.seed, inten.dims)


def cmd_project(a):
    grid = load_vvol(a.input)
    slab = tuple(int(v) for v in a.slab.split(",")) if a.slab else None
    img = project(grid, a.axis, a.op, ProjParams(), slab=slab)
    save_proj(img, a.out)
    if a.figure:
        from .plotting import plot_projection

        plot_projection(img, a.figure, title=f"{a.axis} {a.op}")


def cmd_voi_fuse(a):
    boxes = read_boxes_jsonl(a.boxes)
    missing = [v for v in ("coronal", "sagittal", "axial") if v not in boxes]
    if missing:
        raise ValueError(f"{a.boxes}: missing views {missing}")
    voi = fuse_voi(boxes["coronal"], boxes["sagittal"], boxes["axial"], a.t, parse_dims(a.dims))
    _write_json(voi.to_dict(), a.out)


def cmd_mask3d(a):
    sag = load_multilabel(a.sag, "sagittal")
    cor = load_multilabel(a.cor, "coronal")
    voi = Box3D.from_dict(json.loads(Path(a.voi).read_text()))
    approx = approximate_mask3d(sag, cor, voi.dims)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for v in range(1, N_VERTEBRAE + 1):
        save_vvol(VoxelGrid(approx.mask(v).astype(np.uint8), (1.0, 1.0, 1.0), LABEL), out / f"C{v}_mask.vvol")
    (out / "voi.json").write_text(json.dumps(voi.to_dict(), indent=2))


def cmd_extract(a):
    mdir = Path(a.masks)
    planes = [load_vvol(mdir / f"C{v}_mask.vvol").voxels.astype(bool) for v in range(1, N_VERTEBRAE + 1)]
    approx = ApproxMask3D(np.stack(planes))
    vol = load_vvol(a.vol)
    if vol.dims != approx.dims:
        # a full volume is cropped to the VOI the masks were built for
        voi_file = mdir / "voi.json"
        if not voi_file.exists():
            raise ValueError(f"volume dims {vol.dims} differ from mask dims {approx.dims} and no voi.json")
        voi = Box3D.from_dict(json.loads(voi_file.read_text()))
        vol = vol.with_voxels(np.array(vol.voxels[voi.slices]))
    verts, failed = extract_all(vol, approx, a.margin)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for v, (grid, _) in verts.items():
        save_vvol(grid, out / f"C{v}.vvol")
    _write_json({"boxes": {str(v): b.to_dict() for v, (_, b) in verts.items()},
                 "failed": {str(v): m for v, m in failed.items()}}, out / "extract.json")
    for v, msg in failed.items():
        log.warning("C%d not extracted: %s", v, msg)


def cmd_stacks(a):
    window = WindowSpec(a.window_width, a.window_level)
    st = build_stacks(load_vvol(a.vert), a.variant, window)
    save_stacks(st, a.out, window)
    if a.figure:
        from .plotting import plot_stack_montage

        plot_stack_montage(st, a.figure)


def cmd_aggregate(a):
    table = agg.PredictionTable.from_csv(a.pred)
    params = agg.AdaptiveParams(a.thr_low, a.thr_high, a.d_ref)
    lines = [json.dumps(agg.decide_patient(table, pid, a.mode, params, a.vote_thr, a.weight))
             for pid in table.patients()]
    text = "".join(line + "\n" for line in lines)
    if a.out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(a.out).write_text(text)


def cmd_evaluate(a):
    pred = load_vvol(a.pred_mask)
    gt = load_vvol(a.gt_mask)
    spacing = a.spacing or gt.spacing
    p, g = pred.voxels > 0, gt.voxels > 0
    iou, dice = metrics.overlap_metrics(p, g)
    res = {"iou": iou, "dice": dice, "hd95_mm": None, "hausdorff_mm": None}
    try:
        res["hd95_mm"] = metrics.hd95(p, g, spacing)
        res["hausdorff_mm"] = metrics.hausdorff(p, g, spacing)
    except EmptyMaskError as exc:
        log.warning("distances undefined: %s", exc)
    _write_json(res, a.json)


def cmd_kappa(a):
    ratings = metrics.read_ratings_csv(a.ratings)
    if a.mode == "fleiss":
        counts, subjects, cats = metrics.fleiss_counts(ratings)
        res = {"mode": "fleiss", "kappa": metrics.fleiss_kappa(counts), "subjects": len(subjects),
               "categories": cats}
    else:
        pairs = metrics.pairwise_cohen(ratings)
        if a.mode == "cohen" and len(pairs) != 1:
            raise ValueError(f"cohen mode needs exactly two raters, found {len(pairs)} rater pairs")
        res = {"mode": a.mode, "pairs": [{"a": ra, "b": rb, "kappa": k} for (ra, rb), k in pairs.items()]}
        if a.mode == "cohen":
            res["kappa"] = res["pairs"][0]["kappa"]
    _write_json(res, a.json)


def cmd_run(a):
    manifests = load_manifests(a.manifest)
    if a.no_figures:
        for m in manifests:
            m.figures = False
    reports = run_many(manifests, a.out, a.workers)
    for r in reports:
        summary = {"patient_id": r["patient_id"], "total_seconds": round(r["total_seconds"], 3)}
        if "metrics" in r:
            summary["voi_iou"] = r["metrics"]["voi_iou"]
        print(json.dumps(summary))


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spinevox", description="Projection-driven cervical spine pipeline.")
    p.add_argument("--log-format", choices=("text", "json"), default="text")
    p.add_argument("--log-level", default="info", choices=("debug", "info", "warning", "error"))
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="write a synthetic intensity/label phantom pair")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dims", default="160,96,96")
    s.add_argument("--n-vertebrae", type=int, default=7)
    s.add_argument("--out-intensity", required=True)
    s.add_argument("--out-label", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("project", help="project a volume to a 16-bit PGM")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--axis", choices=AXES, required=True)
    s.add_argument("--op", choices=OPERATORS, required=True)
    s.add_argument("--slab", help="lo,hi index range along the reduced axis")
    s.add_argument("--out", required=True)
    s.add_argument("--figure", help="also render a PNG")
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("voi-fuse", help="fuse three detector boxes into a VOI")
    s.add_argument("--boxes", required=True)
    s.add_argument("--dims", required=True)
    s.add_argument("--t", type=int, default=20)
    s.add_argument("--out")
    s.set_defaults(func=cmd_voi_fuse)

    s = sub.add_parser("mask3d", help="approximate 3D vertebra masks from two multi-label masks")
    s.add_argument("--sag", required=True)
    s.add_argument("--cor", required=True)
    s.add_argument("--voi", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_mask3d)

    s = sub.add_parser("extract", help="crop vertebra volumes")
    s.add_argument("--vol", required=True)
    s.add_argument("--masks", required=True)
    s.add_argument("--margin", type=int, default=2)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("stacks", help="build 2.5D stacks for one vertebra")
    s.add_argument("--vert", required=True)
    s.add_argument("--variant", choices=("raw", "mip"), default="mip")
    s.add_argument("--window-width", type=float, default=400.0)
    s.add_argument("--window-level", type=float, default=1400.0)
    s.add_argument("--out", required=True)
    s.add_argument("--figure")
    s.set_defaults(func=cmd_stacks)

    s = sub.add_parser("aggregate", help="vertebra and patient decisions from stack probabilities")
    s.add_argument("--pred", required=True)
    s.add_argument("--mode", choices=("adaptive", "if-any"), default="adaptive")
    s.add_argument("--thr-low", type=float, default=0.4)
    s.add_argument("--thr-high", type=float, default=0.6)
    s.add_argument("--d-ref", type=float, default=0.2)
    s.add_argument("--vote-thr", type=float, default=0.5)
    s.add_argument("--weight", type=float, default=0.5)
    s.add_argument("--out")
    s.set_defaults(func=cmd_aggregate)

    s = sub.add_parser("evaluate", help="overlap and distance metrics of two masks")
    s.add_argument("--pred-mask", required=True)
    s.add_argument("--gt-mask", required=True)
    s.add_argument("--spacing", type=lambda t: _floats(t, 3))
    s.add_argument("--json")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("kappa", help="inter-rater agreement from a ratings CSV")
    s.add_argument("--ratings", required=True)
    s.add_argument("--mode", choices=("fleiss", "cohen", "pairwise"), default="fleiss")
    s.add_argument("--json")
    s.set_defaults(func=cmd_kappa)

    s = sub.add_parser("run", help="run the full pipeline from a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.log_format, args.log_level)
    try:
        args.func(args)
    except StageError as exc:
        log.error("%s", exc, extra={"stage": exc.stage})
        return EXIT_CODES.get(exc.stage, EXIT_ERROR)
    except FormatError as exc:
        log.error("format error: %s", exc)
        return EXIT_FORMAT
    except FileNotFoundError as exc:
        log.error("missing file: %s", exc)
        return EXIT_MISSING
    except (SpinevoxError, ValueError, KeyError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INPUT
    except Exception:
        log.exception("unexpected error")
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
