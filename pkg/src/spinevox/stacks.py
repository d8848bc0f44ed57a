"""
2.5D classifier inputs. Every vertebra volume becomes 15 stacks of five
256x256 planes, either raw neighbouring slices or MIPs of mini-stacks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GeometryError
from .volgrid import INTENSITY, VoxelGrid, WindowSpec, apply_window, save_vvol

N_STACKS = 15
STACK_DEPTH = 5
PLANE_SIZE = 256
HALF = STACK_DEPTH // 2


@dataclass(frozen=True)
class StackSet:
    """planes: (15, 5, 256, 256) float32 in [0, 1]; centers: slice index per plane."""

    planes: np.ndarray
    centers: np.ndarray
    variant: str
    vertebra: int = 0

    @property
    def shape(self):
        return self.planes.shape


def stack_centers(z: int, n: int) -> np.ndarray:
    """Endpoint-inclusive evenly spaced slice indices, rounded half up."""
    if z < 1:
        raise GeometryError("volume has no slices")
    return np.floor(np.linspace(0.0, z - 1.0, n) + 0.5).astype(np.int64)


def neighbour_indices(center: int, z: int) -> np.ndarray:
    """center-2 .. center+2 with out-of-range indices replicated from the border."""
    return np.clip(np.arange(center - HALF, center + HALF + 1), 0, z - 1)


def _linear_taps(n_in, n_out):
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def pad_resize_planes(planes: np.ndarray, size: int = PLANE_SIZE) -> np.ndarray:
    """Zero-pad (..., H, W) planes to a centred square, then bilinear resize."""
    h, w = planes.shape[-2:]
    side = max(h, w)
    oy, ox = (side - h) // 2, (side - w) // 2
    sq = np.zeros(planes.shape[:-2] + (side, side), dtype=np.float64)
    sq[..., oy:oy + h, ox:ox + w] = planes
    lo, hi, f = _linear_taps(side, size)
    rows = sq[..., lo, :] * (1.0 - f)[:, None] + sq[..., hi, :] * f[:, None]
    return rows[..., lo] * (1.0 - f) + rows[..., hi] * f


def _check(vert: VoxelGrid):
    if vert.kind != INTENSITY:
        raise GeometryError("stacks are built from intensity volumes")


def build_raw_stacks(vert: VoxelGrid, window: WindowSpec = WindowSpec(), vertebra: int = 0) -> StackSet:
    """15 stacks of the slices at ``c-2..c+2`` around evenly spaced centres ``c``."""
    _check(vert)
    vox = apply_window(vert, window).voxels
    z = vox.shape[0]
    centers = stack_centers(z, N_STACKS)
    idx = np.stack([neighbour_indices(c, z) for c in centers])
    uniq, inverse = np.unique(idx, return_inverse=True)
    resized = pad_resize_planes(vox[uniq]).astype(np.float32)
    planes = resized[inverse.reshape(idx.shape)]
    return StackSet(planes, centers, "raw", vertebra)


def build_mip_stacks(vert: VoxelGrid, window: WindowSpec = WindowSpec(), vertebra: int = 0) -> StackSet:
    """75 mini-stack MIPs grouped five at a time into 15 stacks."""
    _check(vert)
    vox = apply_window(vert, window).voxels
    z = vox.shape[0]
    centers = stack_centers(z, N_STACKS * STACK_DEPTH)
    mips = np.stack([vox[neighbour_indices(c, z)].max(axis=0) for c in centers])
    planes = pad_resize_planes(mips).astype(np.float32)
    return StackSet(planes.reshape(N_STACKS, STACK_DEPTH, PLANE_SIZE, PLANE_SIZE),
                    centers.reshape(N_STACKS, STACK_DEPTH), "mip", vertebra)


def build_stacks(vert: VoxelGrid, variant: str, window: WindowSpec = WindowSpec(), vertebra: int = 0):
    if variant == "raw":
        return build_raw_stacks(vert, window, vertebra)
    if variant == "mip":
        return build_mip_stacks(vert, window, vertebra)
    raise ValueError(f"unknown stack variant {variant!r}")


def save_stacks(stacks: StackSet, path, window: WindowSpec | None = None) -> None:
    """75-plane intensity VVOL (stack-major) and a JSON index next to it."""
    flat = stacks.planes.reshape(N_STACKS * STACK_DEPTH, PLANE_SIZE, PLANE_SIZE)
    save_vvol(VoxelGrid(flat, (1.0, 1.0, 1.0), INTENSITY), path)
    index = {
        "variant": stacks.variant,
        "vertebra": stacks.vertebra,
        "n_stacks": N_STACKS,
        "depth": STACK_DEPTH,
        "centers": np.asarray(stacks.centers).tolist(),
    }
    if window is not None:
        index["window"] = {"width": window.width, "level": window.level}
    Path(path).with_suffix(".json").write_text(json.dumps(index, indent=2))
