"""
Per-vertebra masks: multi-label 2D projections of a label volume, 3D
approximation by extrusion and intersection of sagittal and coronal masks,
and cropping of vertebra volumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .errors import EmptyMaskError, GeometryError
from .roivoi import Box3D, tight_box3d
from .volgrid import LABEL, VoxelGrid, load_vvol, save_vvol

N_VERTEBRAE = 7
MASK_VIEWS = ("sagittal", "coronal")
NETWORK_SIZE = 256


@dataclass(frozen=True)
class MultiLabelMask:
    """Seven binary channels C1..C7 of one view. Channels may overlap."""

    channels: np.ndarray  # (7, H, W) uint8
    axis: str

    def __post_init__(self):
        ch = np.asarray(self.channels)
        if ch.ndim != 3 or ch.shape[0] != N_VERTEBRAE:
            raise GeometryError(f"expected (7, H, W) channels, got {ch.shape}")
        if self.axis not in MASK_VIEWS:
            raise ValueError(f"mask axis must be sagittal or coronal, got {self.axis!r}")
        object.__setattr__(self, "channels", (ch > 0).astype(np.uint8))

    @property
    def dims(self) -> Tuple[int, int]:
        return tuple(int(d) for d in self.channels.shape[1:])

    def channel(self, v: int) -> np.ndarray:
        return self.channels[v - 1]


@dataclass(frozen=True)
class ApproxMask3D:
    """Approximated binary masks, shape (7, Z, Y, X), aligned to the VOI grid."""

    masks: np.ndarray

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.masks.shape[1:])

    def mask(self, v: int) -> np.ndarray:
        return self.masks[v - 1]


def multilabel_project(mask3d: VoxelGrid, axis: str) -> MultiLabelMask:
    """Max-project each of labels 1..7 independently along ``axis``."""
    if axis not in MASK_VIEWS:
        raise ValueError(f"multi-label projection supports sagittal/coronal, got {axis!r}")
    ax = 2 if axis == "sagittal" else 1
    vox = mask3d.voxels
    channels = np.stack([(vox == v).any(axis=ax) for v in range(1, N_VERTEBRAE + 1)])
    return MultiLabelMask(channels.astype(np.uint8), axis)


def approximate_mask3d(sag: MultiLabelMask, cor: MultiLabelMask, voi_dims) -> ApproxMask3D:
    """Voxel (z, y, x) belongs to vertebra v iff sag_v(z, y) and cor_v(z, x)."""
    Z, Y, X = (int(d) for d in voi_dims)
    if sag.dims != (Z, Y) or cor.dims != (Z, X):
        raise GeometryError(
            f"sagittal {sag.dims} / coronal {cor.dims} inconsistent with VOI dims {(Z, Y, X)}")
    s = sag.channels.astype(bool)[:, :, :, None]
    c = cor.channels.astype(bool)[:, :, None, :]
    return ApproxMask3D(s & c)


# ---------------------------------------------------------------- pad / resize

def _nearest_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[-2:]
    # pixel-centre aligned; keeps pad_resize . unpad . pad_resize == pad_resize
    rows = ((2 * np.arange(out_h) + 1) * h) // (2 * out_h)
    cols = ((2 * np.arange(out_w) + 1) * w) // (2 * out_w)
    return img[..., rows[:, None], cols[None, :]]


def _pad_offsets(h, w):
    side = max(h, w)
    return side, (side - h) // 2, (side - w) // 2


def pad_resize_mask(mask: MultiLabelMask, size: int = NETWORK_SIZE) -> MultiLabelMask:
    """Centre-pad to a square with zeros, then nearest-resize to ``size``."""
    h, w = mask.dims
    side, oy, ox = _pad_offsets(h, w)
    sq = np.zeros((N_VERTEBRAE, side, side), dtype=np.uint8)
    sq[:, oy:oy + h, ox:ox + w] = mask.channels
    return MultiLabelMask(_nearest_resize(sq, size, size), mask.axis)


def unpad_resize_mask(pred: MultiLabelMask, original_dims) -> MultiLabelMask:
    """Undo :func:`pad_resize_mask`: resize back to the padded square and crop."""
    h, w = (int(d) for d in original_dims)
    if h < 1 or w < 1:
        raise GeometryError(f"original dims must be positive, got {original_dims}")
    side, oy, ox = _pad_offsets(h, w)
    sq = _nearest_resize(pred.channels, side, side)
    return MultiLabelMask(sq[:, oy:oy + h, ox:ox + w], pred.axis)


# ---------------------------------------------------------------- extraction

def vertebra_box(approx: ApproxMask3D, v: int, margin: int = 0) -> Box3D:
    """Bounding box of vertebra ``v`` grown by ``margin`` and clamped."""
    m = approx.mask(v)
    if not m.any():
        raise EmptyMaskError(f"approximate mask for C{v} is empty")
    b = tight_box3d(m)
    Z, Y, X = approx.dims
    return Box3D(max(0, b.z0 - margin), min(Z, b.z1 + margin),
                 max(0, b.y0 - margin), min(Y, b.y1 + margin),
                 max(0, b.x0 - margin), min(X, b.x1 + margin))


def extract_vertebra(vol: VoxelGrid, approx: ApproxMask3D, v: int, margin: int = 0) -> VoxelGrid:
    """Crop the raw intensities inside the vertebra's bounding box (no masking)."""
    if vol.dims != approx.dims:
        raise GeometryError(f"volume dims {vol.dims} differ from mask dims {approx.dims}")
    b = vertebra_box(approx, v, margin)
    return vol.with_voxels(np.array(vol.voxels[b.slices]))


def extract_all(vol: VoxelGrid, approx: ApproxMask3D, margin: int = 0):
    """Extract every vertebra; empty ones are reported instead of raising."""
    out: Dict[int, Tuple[VoxelGrid, Box3D]] = {}
    failed = {}
    for v in range(1, N_VERTEBRAE + 1):
        try:
            b = vertebra_box(approx, v, margin)
        except EmptyMaskError as exc:
            failed[v] = str(exc)
            continue
        out[v] = (vol.with_voxels(np.array(vol.voxels[b.slices])), b)
    return out, failed


# ---------------------------------------------------------------- mask files

def save_multilabel(mask: MultiLabelMask, path) -> None:
    """Seven-plane label VVOL plus a JSON sidecar recording the view."""
    save_vvol(VoxelGrid(mask.channels, (1.0, 1.0, 1.0), LABEL), path)
    Path(path).with_suffix(".json").write_text(json.dumps({"axis": mask.axis}))


def load_multilabel(path, axis: str | None = None, threshold: float = 0.5) -> MultiLabelMask:
    """Read a seven-plane mask file.

    Intensity-kind files are treated as probabilities and binarised at
    ``threshold``.
    """
    grid = load_vvol(path)
    if grid.dims[0] != N_VERTEBRAE:
        raise GeometryError(f"{path}: expected 7 planes, found {grid.dims[0]}")
    side = Path(path).with_suffix(".json")
    if axis is None:
        if not side.exists():
            raise ValueError(f"{path}: no sidecar and no axis given")
        axis = json.loads(side.read_text())["axis"]
    vox = grid.voxels
    binary = vox > threshold if not grid.is_label else vox > 0
    return MultiLabelMask(binary.astype(np.uint8), axis)


def fit_mask(mask: MultiLabelMask, dims) -> MultiLabelMask:
    """Bring an ingested mask to ``dims``: unchanged, or un-pad a network-sized output."""
    dims = tuple(int(d) for d in dims)
    if mask.dims == dims:
        return mask
    if mask.dims[0] == mask.dims[1]:
        return unpad_resize_mask(mask, dims)
    raise GeometryError(f"mask dims {mask.dims} cannot be mapped to {dims}")
