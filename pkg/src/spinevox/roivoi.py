"""
ROI geometry: ground-truth boxes from label volumes, sequential slice
selection, fusion of three 2D detections into a 3D VOI, and box overlap.

Box2D coordinates are image coordinates of a projection: ``x`` runs along
image columns and ``y`` along image rows, both half-open. With the
projection convention of :mod:`spinevox.project` that means

=========  ===========  ===========
view       box x         box y
=========  ===========  ===========
sagittal   volume y      volume z
coronal    volume x      volume z
axial      volume x      volume y
=========  ===========  ===========
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import EmptyMaskError, GeometryError, StageError
from .project import ProjImage, ProjParams, project
from .volgrid import LABEL, VoxelGrid

CERVICAL = tuple(range(1, 8))
VIEWS = ("sagittal", "coronal", "axial")


@dataclass(frozen=True)
class Box2D:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise GeometryError(f"degenerate box {self}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Box3D:
    z0: int
    z1: int
    y0: int
    y1: int
    x0: int
    x1: int

    def __post_init__(self):
        for name in ("z0", "z1", "y0", "y1", "x0", "x1"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if not (self.z0 < self.z1 and self.y0 < self.y1 and self.x0 < self.x1):
            raise GeometryError(f"degenerate box {self}")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return (self.z1 - self.z0, self.y1 - self.y0, self.x1 - self.x0)

    @property
    def volume(self) -> int:
        d = self.dims
        return d[0] * d[1] * d[2]

    @property
    def slices(self):
        return (slice(self.z0, self.z1), slice(self.y0, self.y1), slice(self.x0, self.x1))

    def contains(self, other: "Box3D") -> bool:
        return (self.z0 <= other.z0 and other.z1 <= self.z1 and self.y0 <= other.y0
                and other.y1 <= self.y1 and self.x0 <= other.x0 and other.x1 <= self.x1)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(d["z0"], d["z1"], d["y0"], d["y1"], d["x0"], d["x1"])


@dataclass
class SliceRanges:
    sagittal: Tuple[int, int]
    coronal: Tuple[int, int]
    axial: Tuple[int, int]
    boxes: Dict[str, Box2D] = field(default_factory=dict)


def _box_of(binary: np.ndarray) -> Box2D:
    rows = np.flatnonzero(binary.any(axis=1))
    cols = np.flatnonzero(binary.any(axis=0))
    return Box2D(cols[0], rows[0], cols[-1] + 1, rows[-1] + 1)


def tight_box3d(mask: np.ndarray) -> Box3D:
    """Tight half-open bounding box of the non-zero voxels of ``mask``."""
    idx = np.argwhere(mask)
    if idx.size == 0:
        raise EmptyMaskError("cannot box an empty mask")
    lo = idx.min(axis=0)
    hi = idx.max(axis=0) + 1
    return Box3D(lo[0], hi[0], lo[1], hi[1], lo[2], hi[2])


def largest_component(binary: ProjImage | np.ndarray):
    """Keep only the largest 8-connected component.

    Ties go to the component whose first pixel comes first in raster order.
    Returns the same type it was given.
    """
    px = binary.pixels if isinstance(binary, ProjImage) else np.asarray(binary)
    if px.size and not np.isin(px, (0, 1)).all():
        raise ValueError("largest_component expects a binary image")
    mask = px.astype(bool)
    if not mask.any():
        raise EmptyMaskError("no foreground pixels")
    lab, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    sizes = np.bincount(lab.ravel())[1:]
    # ndimage.label numbers components in raster order of their first pixel
    winner = int(np.argmax(sizes)) + 1
    out = (lab == winner).astype(px.dtype)
    if isinstance(binary, ProjImage):
        return ProjImage(out, binary.axis, binary.operator, binary.source_dims)
    return out


def bbox_from_mask(mask3d: VoxelGrid, axis: str, labels: Iterable[int] = CERVICAL,
                   slab: Optional[Tuple[int, int]] = None) -> Box2D:
    """Box of the largest component of the max-projected label selection."""
    if mask3d.kind != LABEL:
        raise ValueError("bbox_from_mask expects a label grid")
    sel = np.isin(mask3d.voxels, list(labels)).astype(np.uint8)
    if not sel.any():
        raise EmptyMaskError(f"no voxels carry labels {sorted(labels)}")
    proj = project(VoxelGrid(sel, mask3d.spacing, LABEL), axis, "max", slab=slab)
    if not proj.pixels.any():
        raise EmptyMaskError(f"selected labels absent from slab {slab}")
    return _box_of(largest_component(proj.pixels).astype(bool))


def _check_box(box, img_dims, stage):
    h, w = img_dims
    if not isinstance(box, Box2D):
        raise StageError(stage, f"detector returned {box!r} instead of a Box2D")
    if box.x0 < 0 or box.y0 < 0 or box.x1 > w or box.y1 > h:
        raise StageError(stage, f"detector box {box} outside image {img_dims}")


def _mean_lo(a, b):
    return (a + b) // 2


def _mean_hi(a, b):
    return -((-(a + b)) // 2)


def sequential_slice_select(grid: VoxelGrid, detector: Callable[[ProjImage], Box2D],
                            base_sagittal: Tuple[int, int] = (100, 420),
                            params: ProjParams | None = None,
                            detect_axial: bool = True) -> SliceRanges:
    """Refine per-view slab ranges with variance projections and a detector.

    1. Sagittal projection over x in the clamped base range.
    2. Coronal projection over the sagittal box's column span (volume y).
    3. Axial projection over the average of the sagittal and coronal row
       spans (volume z); lows round down, highs round up.
    """
    Z, Y, X = grid.dims
    lo, hi = max(0, int(base_sagittal[0])), min(X, int(base_sagittal[1]))
    if lo >= hi:
        raise GeometryError(f"base sagittal range {base_sagittal} does not intersect x in [0, {X})")
    ranges = SliceRanges((lo, hi), (0, 0), (0, 0))

    def detect(view, slab):
        img = project(grid, view, "variance", params, slab=slab)
        try:
            box = detector(img)
        except GeometryError as exc:
            raise StageError(view, f"degenerate detector box: {exc}") from exc
        _check_box(box, img.dims, view)
        ranges.boxes[view] = box
        return box

    sag = detect("sagittal", (lo, hi))
    ranges.coronal = (sag.x0, sag.x1)
    cor = detect("coronal", ranges.coronal)
    ranges.axial = (_mean_lo(sag.y0, cor.y0), _mean_hi(sag.y1, cor.y1))
    if detect_axial:
        detect("axial", ranges.axial)
    return ranges


def fuse_voi(c: Box2D, s: Box2D, a: Box2D, t: int = 20, grid_dims=None) -> Box3D:
    """Fuse coronal, sagittal and axial boxes into a 3D VOI.

    z comes from the coronal and sagittal rows, x from the coronal and axial
    columns, y from the sagittal columns and axial rows. Matching endpoints
    are averaged (lows floor, highs ceil), every side then grows by ``t`` and
    the result is clamped to ``grid_dims``.
    """
    if t < 0:
        raise ValueError("tolerance must be non-negative")
    z0, z1 = _mean_lo(c.y0, s.y0), _mean_hi(c.y1, s.y1)
    x0, x1 = _mean_lo(c.x0, a.x0), _mean_hi(c.x1, a.x1)
    y0, y1 = _mean_lo(s.x0, a.y0), _mean_hi(s.x1, a.y1)
    lo = [z0 - t, y0 - t, x0 - t]
    hi = [z1 + t, y1 + t, x1 + t]
    if grid_dims is not None:
        lo = [max(0, v) for v in lo]
        hi = [min(int(d), v) for v, d in zip(hi, grid_dims)]
    if any(l >= h for l, h in zip(lo, hi)):
        raise GeometryError(f"fused VOI is empty after clamping to {grid_dims}")
    return Box3D(lo[0], hi[0], lo[1], hi[1], lo[2], hi[2])


def _intersection(a, b):
    if isinstance(a, Box2D) and isinstance(b, Box2D):
        spans = [(a.x0, a.x1, b.x0, b.x1), (a.y0, a.y1, b.y0, b.y1)]
        sa, sb = a.area, b.area
    elif isinstance(a, Box3D) and isinstance(b, Box3D):
        spans = [(a.z0, a.z1, b.z0, b.z1), (a.y0, a.y1, b.y0, b.y1), (a.x0, a.x1, b.x0, b.x1)]
        sa, sb = a.volume, b.volume
    else:
        raise TypeError("box_iou needs two boxes of the same dimensionality")
    inter = 1
    for l1, h1, l2, h2 in spans:
        inter *= max(0, min(h1, h2) - max(l1, l2))
    return inter, sa, sb


def box_iou(a, b) -> float:
    inter, sa, sb = _intersection(a, b)
    return inter / float(sa + sb - inter)


def miou(pairs: Sequence) -> float:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("miou of an empty sequence")
    return sum(box_iou(a, b) for a, b in pairs) / len(pairs)


# ---------------------------------------------------------------- box files

def read_boxes_jsonl(path) -> Dict[str, Box2D]:
    """Highest-scoring box per view from a detector JSONL file."""
    best: Dict[str, Tuple[float, Box2D]] = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            view = rec.get("view")
            if view not in VIEWS:
                raise ValueError(f"{path}:{n}: unknown view {view!r}")
            box = Box2D(rec["x0"], rec["y0"], rec["x1"], rec["y1"])
            score = float(rec.get("score", 1.0))
            if view not in best or score > best[view][0]:
                best[view] = (score, box)
    return {v: b for v, (_, b) in best.items()}


def write_boxes_jsonl(boxes: Dict[str, Box2D], path, scores=None) -> None:
    with open(path, "w") as fh:
        for view in VIEWS:
            if view in boxes:
                rec = {"view": view, **boxes[view].to_dict(),
                       "score": float((scores or {}).get(view, 1.0))}
                fh.write(json.dumps(rec) + "\n")
