"""
Voxel grids: in-memory representation, VVOL binary I/O, HU windowing,
slice interpolation and a synthetic cervical-spine phantom.

Axis convention used throughout the package: arrays are indexed (z, y, x)
where z is the axial slice index, y the rows (anterior-posterior) and x the
columns (left-right).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import (
    FormatError,
    GeometryError,
    InsufficientSamplesError,
    KindError,
    TruncationError,
)

INTENSITY = "intensity"
LABEL = "label"
KINDS = (INTENSITY, LABEL)
MAX_LABEL = 19

VVOL_MAGIC = b"VVOL"
VVOL_VERSION = 1
_HEADER = struct.Struct("<4sIB3xIIIfff")
_KIND_CODE = {INTENSITY: 0, LABEL: 1}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


@dataclass(frozen=True)
class VoxelGrid:
    """
    3D scalar field with spacing metadata.

    Attributes:
        voxels: array of shape (Z, Y, X). Intensity grids hold floats (HU),
            label grids hold uint8 codes 0-19.
        spacing: (sz, sy, sx) millimetres per voxel.
        kind: "intensity" or "label".
    """

    voxels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = INTENSITY

    def __post_init__(self):
        if self.kind not in KINDS:
            raise KindError(f"unknown grid kind {self.kind!r}")
        vox = np.asarray(self.voxels)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise GeometryError(f"voxel array must be 3D and non-empty, got {vox.shape}")
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise GeometryError(f"spacing must be three positive reals, got {self.spacing}")
        if self.kind == LABEL:
            if vox.dtype != np.uint8:
                if vox.size and (vox.min() < 0 or vox.max() > MAX_LABEL):
                    raise KindError("label codes must lie in 0..19")
                vox = vox.astype(np.uint8)
            elif vox.size and vox.max() > MAX_LABEL:
                raise KindError("label codes must lie in 0..19")
        elif not np.issubdtype(vox.dtype, np.floating):
            vox = vox.astype(np.float64)
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.voxels.shape)

    @property
    def is_label(self) -> bool:
        return self.kind == LABEL

    def extent_mm(self) -> Tuple[float, float, float]:
        return tuple(d * s for d, s in zip(self.dims, self.spacing))

    def with_voxels(self, voxels, spacing=None, kind=None) -> "VoxelGrid":
        return VoxelGrid(voxels, spacing or self.spacing, kind or self.kind)


@dataclass(frozen=True)
class WindowSpec:
    """HU display window. Defaults are the bone window used for stack inputs."""

    width: float = 400.0
    level: float = 1400.0

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"window width must be positive, got {self.width}")


# ---------------------------------------------------------------- VVOL I/O

def save_vvol(grid: VoxelGrid, path) -> None:
    """Write ``grid`` as VVOL (little-endian header, z-major voxel payload)."""
    z, y, x = grid.dims
    sz, sy, sx = grid.spacing
    header = _HEADER.pack(VVOL_MAGIC, VVOL_VERSION, _KIND_CODE[grid.kind], z, y, x, sz, sy, sx)
    if grid.is_label:
        payload = np.ascontiguousarray(grid.voxels, dtype=np.uint8)
    else:
        payload = np.ascontiguousarray(grid.voxels, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def load_vvol(path) -> VoxelGrid:
    """Read a VVOL file written by :func:`save_vvol`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise TruncationError(f"{path}: header truncated ({len(raw)} bytes)")
    magic, version, code, z, y, x, sz, sy, sx = _HEADER.unpack_from(raw)
    if magic != VVOL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VVOL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _CODE_KIND:
        raise FormatError(f"{path}: unknown kind code {code}")
    if min(z, y, x) < 1:
        raise FormatError(f"{path}: degenerate dims {(z, y, x)}")
    kind = _CODE_KIND[code]
    dtype = np.dtype(np.uint8) if kind == LABEL else np.dtype("<f4")
    expected = z * y * x * dtype.itemsize
    body = raw[_HEADER.size:]
    if len(body) < expected:
        raise TruncationError(f"{path}: expected {expected} voxel bytes, found {len(body)}")
    if len(body) > expected:
        raise FormatError(f"{path}: {len(body) - expected} trailing bytes after voxel payload")
    vox = np.frombuffer(body, dtype=dtype).reshape(z, y, x)
    if kind == INTENSITY:
        vox = vox.astype(np.float32)
    else:
        vox = vox.copy()
    return VoxelGrid(vox, (sz, sy, sx), kind)


# ---------------------------------------------------------------- windowing

def apply_window(grid: VoxelGrid, w: WindowSpec = WindowSpec()) -> VoxelGrid:
    """Map HU linearly onto [0, 1]: ``clamp((v - (level - width/2)) / width, 0, 1)``.

    Only idempotent when re-applied with width=1, level=0.5.
    """
    if grid.is_label:
        raise KindError("windowing applies to intensity grids only")
    lower = w.level - w.width / 2.0
    out = (np.asarray(grid.voxels, dtype=np.float64) - lower) / w.width
    np.clip(out, 0.0, 1.0, out=out)
    return grid.with_voxels(out)


# ---------------------------------------------------------------- interpolation

def interpolate_slices(grid: VoxelGrid, min_slices: int = 400) -> VoxelGrid:
    """Resample along z to exactly ``min_slices`` slices when the grid has fewer.

    Intensity grids use a natural cubic spline per (y, x) column; label grids
    use nearest-neighbour so no new codes appear. Sample positions are
    endpoint-inclusive, so slice 0 and slice Z-1 are kept, and ``sz`` is
    rescaled by Z_old/Z_new to preserve the physical extent.
    """
    if min_slices < 1:
        raise ValueError("min_slices must be >= 1")
    z_old = grid.dims[0]
    if z_old >= min_slices:
        return grid
    z_new = int(min_slices)
    pos = np.linspace(0.0, z_old - 1.0, z_new)
    if grid.is_label:
        idx = np.floor(pos + 0.5).astype(np.intp)
        np.clip(idx, 0, z_old - 1, out=idx)
        vox = grid.voxels[idx]
    else:
        if z_old < 2:
            raise InsufficientSamplesError("cubic spline interpolation needs at least 2 slices")
        spline = CubicSpline(np.arange(z_old, dtype=np.float64),
                             np.asarray(grid.voxels, dtype=np.float64),
                             axis=0, bc_type="natural")
        vox = spline(pos)
    sz, sy, sx = grid.spacing
    return VoxelGrid(vox, (sz * z_old / z_new, sy, sx), grid.kind)


# ---------------------------------------------------------------- phantom

@dataclass
class PhantomSpec:
    bone_hu: float = 1200.0
    bone_noise: float = 50.0
    tissue_hu: float = 40.0
    tissue_noise: float = 20.0
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)


def make_phantom(seed: int, n_vertebrae: int = 7, dims=(160, 96, 96),
                 spec: PhantomSpec | None = None):
    """Build a deterministic (intensity, label) phantom pair.

    Each vertebra is a body ellipsoid clipped to its own z band; all but the
    last also get a small posterior process that hangs into the band below. Bands touch, so the
    spine projects as one connected region; the processes make neighbouring
    channels overlap in coronal projections. A seed-dependent sinusoidal
    lateral offset mimics neck curvature.
    """
    spec = spec or PhantomSpec()
    Z, Y, X = (int(d) for d in dims)
    if n_vertebrae < 1 or n_vertebrae > 7:
        raise GeometryError("n_vertebrae must be in 1..7")
    if Z < 8 * n_vertebrae or Y < 16 or X < 16:
        raise GeometryError(f"dims {dims} too small for {n_vertebrae} vertebrae")
    rng = np.random.default_rng(seed)

    margin = max(2, Z // 16)
    band = (Z - 2 * margin) / (n_vertebrae + 0.5)
    ry = Y * (0.12 + 0.03 * rng.random())
    rx = X * (0.15 + 0.03 * rng.random())
    amp = 0.25 * rx * rng.random()
    phase = 2 * np.pi * rng.random()
    freq = 0.5 + 0.5 * rng.random()
    yc = Y * 0.45

    zz, yy, xx = np.ogrid[:Z, :Y, :X]
    labels = np.zeros((Z, Y, X), dtype=np.uint8)
    for v in range(n_vertebrae):
        z_lo = margin + v * band
        z_hi = z_lo + band
        zc = 0.5 * (z_lo + z_hi)
        xc = X / 2.0 + amp * np.sin(2 * np.pi * freq * zc / Z + phase)
        az = 0.6 * band
        body = (((zz - zc) / az) ** 2 + ((yy - yc) / ry) ** 2 + ((xx - xc) / rx) ** 2) <= 1.0
        body &= (zz >= np.floor(z_lo)) & (zz < np.floor(z_hi))
        labels[body & (labels == 0)] = v + 1
        if v == n_vertebrae - 1:
            continue
        pz, py = zc + 0.6 * band, yc + 1.2 * ry
        process = (((zz - pz) / (0.35 * band)) ** 2 + ((yy - py) / (0.4 * ry)) ** 2
                   + ((xx - xc) / (0.3 * rx)) ** 2) <= 1.0
        process &= zz >= np.floor(zc)
        labels[process & (labels == 0)] = v + 1

    tissue = spec.tissue_hu + rng.uniform(-spec.tissue_noise, spec.tissue_noise, (Z, Y, X))
    bone = spec.bone_hu + rng.uniform(-spec.bone_noise, spec.bone_noise, (Z, Y, X))
    intensity = np.where(labels > 0, bone, tissue).astype(np.float32)
    return (VoxelGrid(intensity, spec.spacing, INTENSITY),
            VoxelGrid(labels, spec.spacing, LABEL))


def parse_dims(text: str) -> Tuple[int, ...]:
    """Parse ``"Z,Y,X"`` into three positive ints."""
    try:
        dims = tuple(int(p) for p in text.split(","))
    except ValueError as exc:
        raise ValueError(f"cannot parse dims {text!r}") from exc
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be three positive integers, got {text!r}")
    return dims
