"""
Orthogonal projection engine.

A projection reduces a :class:`VoxelGrid` along one principal axis to a 2D
image. Axial projections reduce z and give (y, x) images, sagittal reduce x
and give (z, y), coronal reduce y and give (z, x).

Column operators (max, mean, variance, ...) evaluate a statistic over each
line of voxels parallel to the viewing axis. Filter operators (sobel, canny,
gabor, ...) apply a 2D filter to every slice perpendicular to the viewing
axis and then sum (or max) the responses across slices. All 2D filters use
edge replication at the image border.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
from scipy import ndimage

from .errors import FormatError, InsufficientSamplesError, KindError
from .volgrid import VoxelGrid

AXES = ("axial", "sagittal", "coronal")
AXIS_INDEX = {"axial": 0, "sagittal": 2, "coronal": 1}

OPERATORS = (
    "max", "mean", "sum", "gradient_max", "variance", "difference", "energy",
    "gradient_magnitude", "kurtosis", "median", "percentile_range", "skewness",
    "stddev", "edge", "gabor", "frangi", "hessian", "wavelet", "diffusion",
    "nonlinear", "texture_energy", "standardized", "inversion", "sobel",
    "zscore", "total_variation", "min",
)
# need at least two samples along the reduced axis
DEPTH_OPS = frozenset({
    "variance", "stddev", "kurtosis", "skewness", "standardized", "zscore",
    "difference", "percentile_range",
})
LABEL_OPS = frozenset({"max", "min"})


@dataclass(frozen=True)
class ProjParams:
    p: float = 2.0
    percentiles: Tuple[float, float] = (5.0, 95.0)
    frangi_beta: float = 0.5
    frangi_gamma: float = 15.0
    gabor: Tuple[float, int] = (8.0, 4)
    wavelet_level: int = 1
    diffusion: Tuple[int, float, float] = (10, 30.0, 0.15)
    canny_sigma: float = 1.0
    canny_thresholds: Tuple[float, float] = (0.1, 0.3)
    epsilon: float = 1e-8

    def __post_init__(self):
        lo, hi = self.percentiles
        if not (0 <= lo < hi <= 100):
            raise ValueError(f"percentiles must satisfy 0 <= low < high <= 100, got {self.percentiles}")
        wavelength, n_orient = self.gabor
        iters, kappa, dt = self.diffusion
        if min(self.p, self.frangi_beta, self.frangi_gamma, wavelength, self.epsilon,
               kappa, dt, self.canny_sigma) <= 0:
            raise ValueError("projection parameters must be positive")
        if n_orient < 1 or self.wavelet_level < 1 or iters < 1:
            raise ValueError("orientation count, wavelet level and iterations must be >= 1")
        t_lo, t_hi = self.canny_thresholds
        if not 0 < t_lo <= t_hi:
            raise ValueError("canny thresholds must satisfy 0 < low <= high")


@dataclass(frozen=True)
class ProjImage:
    pixels: np.ndarray
    axis: str
    operator: str
    source_dims: Tuple[int, int, int] = (0, 0, 0)

    @property
    def dims(self) -> Tuple[int, int]:
        return tuple(int(d) for d in self.pixels.shape)


def image_dims(grid_dims, axis: str) -> Tuple[int, int]:
    """(H, W) of a projection of a grid with ``grid_dims`` along ``axis``."""
    z, y, x = grid_dims
    return {"axial": (y, x), "sagittal": (z, y), "coronal": (z, x)}[axis]


def n_threads() -> int:
    env = os.environ.get("SPINEVOX_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


# ---------------------------------------------------------------- column operators
# Each takes a float64 block and the reduction axis.

def _central_moments(a, ax):
    mu = a.mean(axis=ax, keepdims=True)
    d = a - mu
    return d, mu


def _col_variance(a, ax, prm):
    d, _ = _central_moments(a, ax)
    return np.mean(d * d, axis=ax)


def _col_stddev(a, ax, prm):
    return np.sqrt(_col_variance(a, ax, prm))


def _col_kurtosis(a, ax, prm):
    d, _ = _central_moments(a, ax)
    d2 = d * d
    m2 = d2.mean(axis=ax)
    m4 = (d2 * d2).mean(axis=ax)
    degenerate = np.sqrt(m2) <= prm.epsilon
    return np.where(degenerate, 0.0, m4 / np.where(degenerate, 1.0, m2 * m2))


def _col_skewness(a, ax, prm):
    d, _ = _central_moments(a, ax)
    m2 = (d * d).mean(axis=ax)
    m3 = (d * d * d).mean(axis=ax)
    sigma = np.sqrt(m2)
    degenerate = sigma <= prm.epsilon
    return np.where(degenerate, 0.0, m3 / np.where(degenerate, 1.0, sigma ** 3))


def _abs_zscores(a, ax, prm):
    d, _ = _central_moments(a, ax)
    sigma = np.sqrt(np.mean(d * d, axis=ax, keepdims=True))
    degenerate = sigma <= prm.epsilon
    return np.where(degenerate, 0.0, np.abs(d) / np.where(degenerate, 1.0, sigma))


def _col_standardized(a, ax, prm):
    return _abs_zscores(a, ax, prm).mean(axis=ax)


def _col_zscore(a, ax, prm):
    return _abs_zscores(a, ax, prm).max(axis=ax)


def _col_percentile_range(a, ax, prm):
    lo, hi = prm.percentiles
    q = np.percentile(a, [lo, hi], axis=ax)
    return q[1] - q[0]


def _col_nonlinear(a, ax, prm):
    p = prm.p
    if float(p).is_integer():
        return np.mean(a ** int(p), axis=ax)
    if (a < 0).any():
        raise ValueError("non-integer power of negative intensities is undefined")
    return np.mean(a ** p, axis=ax)


def _col_inversion(a, ax, prm):
    return np.mean(a.max(axis=ax, keepdims=True) - a, axis=ax)


_COLUMN_OPS = {
    "max": lambda a, ax, prm: a.max(axis=ax),
    "min": lambda a, ax, prm: a.min(axis=ax),
    "mean": lambda a, ax, prm: a.mean(axis=ax),
    "sum": lambda a, ax, prm: a.sum(axis=ax),
    "energy": lambda a, ax, prm: np.sum(a * a, axis=ax),
    "median": lambda a, ax, prm: np.median(a, axis=ax),
    "difference": lambda a, ax, prm: np.abs(np.diff(a, axis=ax)).sum(axis=ax),
    "variance": _col_variance,
    "stddev": _col_stddev,
    "kurtosis": _col_kurtosis,
    "skewness": _col_skewness,
    "standardized": _col_standardized,
    "zscore": _col_zscore,
    "percentile_range": _col_percentile_range,
    "nonlinear": _col_nonlinear,
    "inversion": _col_inversion,
}


def _reduce_columns(vox, ax, op, prm):
    """Apply a column operator in chunks along a non-reduced axis.

    Chunk boundaries depend only on the array shape, so the result is the
    same for any thread count.
    """
    fn = _COLUMN_OPS[op]
    chunk_axis = 0 if ax != 0 else 1
    n = vox.shape[chunk_axis]
    plane = vox.size // max(n, 1)
    step = max(1, (1 << 22) // max(plane, 1))
    bounds = [(i, min(n, i + step)) for i in range(0, n, step)]
    out_axis = chunk_axis if chunk_axis < ax else chunk_axis - 1
    out_shape = list(vox.shape)
    del out_shape[ax]
    out = np.empty(out_shape, dtype=np.float64)

    def work(b):
        lo, hi = b
        sl = [slice(None)] * 3
        sl[chunk_axis] = slice(lo, hi)
        block = np.asarray(vox[tuple(sl)], dtype=np.float64)
        res = fn(block, ax, prm)
        osl = [slice(None)] * 2
        osl[out_axis] = slice(lo, hi)
        out[tuple(osl)] = res

    workers = min(n_threads(), len(bounds))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(work, bounds))
    else:
        for b in bounds:
            work(b)
    return out


# ---------------------------------------------------------------- 2D filters
# All helpers act on stacks of slices shaped (N, H, W).

def _padded(a, r):
    return np.pad(a, ((0, 0), (r, r), (r, r)), mode="edge")


def _shift(p, r, dy, dx, h, w):
    return p[:, r + dy:r + dy + h, r + dx:r + dx + w]


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


def _correlate3x3(a, kernel):
    _, h, w = a.shape
    p = _padded(a, 1)
    acc = np.zeros_like(a)
    for i in range(3):
        for j in range(3):
            k = kernel[i, j]
            if k != 0.0:
                acc = acc + k * _shift(p, 1, i - 1, j - 1, h, w)
    return acc


def sobel_magnitude(a):
    gx = _correlate3x3(a, SOBEL_X)
    gy = _correlate3x3(a, SOBEL_Y)
    return np.sqrt(gx * gx + gy * gy), gx, gy


def _central_gradient(a):
    _, h, w = a.shape
    p = _padded(a, 1)
    dx = (_shift(p, 1, 0, 1, h, w) - _shift(p, 1, 0, -1, h, w)) / 2.0
    dy = (_shift(p, 1, 1, 0, h, w) - _shift(p, 1, -1, 0, h, w)) / 2.0
    return dx, dy


def _forward_gradient(a):
    _, h, w = a.shape
    p = _padded(a, 1)
    dx = _shift(p, 1, 0, 1, h, w) - a
    dy = _shift(p, 1, 1, 0, h, w) - a
    return dx, dy


def second_derivatives(a):
    _, h, w = a.shape
    p = _padded(a, 1)
    ixx = _shift(p, 1, 0, 1, h, w) - 2.0 * a + _shift(p, 1, 0, -1, h, w)
    iyy = _shift(p, 1, 1, 0, h, w) - 2.0 * a + _shift(p, 1, -1, 0, h, w)
    ixy = (_shift(p, 1, 1, 1, h, w) - _shift(p, 1, 1, -1, h, w)
           - _shift(p, 1, -1, 1, h, w) + _shift(p, 1, -1, -1, h, w)) / 4.0
    return ixx, iyy, ixy


def hessian_eigenvalues(ixx, iyy, ixy):
    """Return (lambda1, lambda2) with |lambda1| <= |lambda2|."""
    half_tr = (ixx + iyy) / 2.0
    disc = np.sqrt(((ixx - iyy) / 2.0) ** 2 + ixy * ixy)
    la, lb = half_tr + disc, half_tr - disc
    swap = np.abs(la) > np.abs(lb)
    return np.where(swap, lb, la), np.where(swap, la, lb)


def gaussian_kernel1d(sigma):
    r = max(1, int(np.ceil(2.0 * sigma)))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gabor_kernels(wavelength, n_orient):
    """Zero-mean real (cosine) Gabor kernels, one per orientation."""
    sigma = 0.5 * wavelength
    r = int(np.ceil(2.0 * sigma))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    kernels = []
    for k in range(n_orient):
        theta = np.pi * k / n_orient
        xr = xx * np.cos(theta) + yy * np.sin(theta)
        yr = -xx * np.sin(theta) + yy * np.cos(theta)
        g = np.exp(-(xr * xr + yr * yr) / (2.0 * sigma * sigma)) * np.cos(2.0 * np.pi * xr / wavelength)
        kernels.append(g - g.mean())
    return kernels


def canny(a, sigma=1.0, thresholds=(0.1, 0.3)):
    """Binary Canny edge maps for a stack of slices.

    Gaussian smoothing (separable, x then y), 3x3 Sobel gradients,
    non-maximum suppression over four quantised directions (neighbours
    outside the image count as 0) and hysteresis with 8-connectivity.
    Thresholds are fractions of each slice's maximum gradient magnitude.
    """
    n, h, w = a.shape
    k = gaussian_kernel1d(sigma)
    r = len(k) // 2
    p = np.pad(a, ((0, 0), (0, 0), (r, r)), mode="edge")
    tmp = np.zeros_like(a)
    for i in range(len(k)):
        tmp = tmp + k[i] * p[:, :, i:i + w]
    p = np.pad(tmp, ((0, 0), (r, r), (0, 0)), mode="edge")
    smooth = np.zeros_like(a)
    for i in range(len(k)):
        smooth = smooth + k[i] * p[:, i:i + h, :]
    mag, gx, gy = sobel_magnitude(smooth)

    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    pm = np.pad(mag, ((0, 0), (1, 1), (1, 1)), mode="constant")
    keep = np.zeros(mag.shape, dtype=bool)
    bins = [
        ((angle < 22.5) | (angle >= 157.5), (0, 1)),
        ((angle >= 22.5) & (angle < 67.5), (1, 1)),
        ((angle >= 67.5) & (angle < 112.5), (1, 0)),
        ((angle >= 112.5) & (angle < 157.5), (1, -1)),
    ]
    for sel, (dy, dx) in bins:
        n1 = pm[:, 1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        n2 = pm[:, 1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        keep |= sel & (mag >= n1) & (mag >= n2)
    keep &= mag > 0

    t_lo, t_hi = thresholds
    peak = mag.reshape(n, -1).max(axis=1)[:, None, None]
    weak = keep & (mag >= t_lo * peak)
    strong = keep & (mag >= t_hi * peak)
    edges = np.zeros(a.shape, dtype=bool)
    structure = np.ones((3, 3), dtype=bool)
    for s in range(n):
        if not strong[s].any():
            continue
        lab, count = ndimage.label(weak[s], structure=structure)
        hit = np.unique(lab[strong[s]])
        edges[s] = np.isin(lab, hit[hit > 0])
    return edges


def haar_detail_magnitude(a, levels):
    """Sum over levels of the undecimated 2D Haar detail magnitude."""
    n, h, w = a.shape
    approx = a
    total = np.zeros_like(a)
    for j in range(levels):
        s = 1 << j
        p = np.pad(approx, ((0, 0), (0, s), (0, s)), mode="edge")
        a00 = p[:, :h, :w]
        a01 = p[:, :h, s:s + w]
        a10 = p[:, s:s + h, :w]
        a11 = p[:, s:s + h, s:s + w]
        dh = (a00 + a01 - a10 - a11) / 2.0
        dv = (a00 - a01 + a10 - a11) / 2.0
        dd = (a00 - a01 - a10 + a11) / 2.0
        total = total + np.sqrt(dh * dh + dv * dv + dd * dd)
        approx = (a00 + a01 + a10 + a11) / 2.0
    return total


def perona_malik(a, iterations, kappa, dt):
    """Explicit Perona-Malik diffusion with exponential conductance."""
    _, h, w = a.shape
    u = a.copy()
    for _ in range(iterations):
        p = _padded(u, 1)
        dn = _shift(p, 1, -1, 0, h, w) - u
        ds = _shift(p, 1, 1, 0, h, w) - u
        de = _shift(p, 1, 0, 1, h, w) - u
        dw = _shift(p, 1, 0, -1, h, w) - u
        cn = np.exp(-(dn / kappa) ** 2)
        cs = np.exp(-(ds / kappa) ** 2)
        ce = np.exp(-(de / kappa) ** 2)
        cw = np.exp(-(dw / kappa) ** 2)
        u = u + dt * (cn * dn + cs * ds + ce * de + cw * dw)
    return u


def _filter_response(stack, op, prm):
    """Per-slice response maps (N, H, W) for a filter operator."""
    if op in ("gradient_max", "sobel"):
        return sobel_magnitude(stack)[0]
    if op == "gradient_magnitude":
        dx, dy = _central_gradient(stack)
        return np.sqrt(dx * dx + dy * dy)
    if op == "total_variation":
        dx, dy = _forward_gradient(stack)
        return np.sqrt(dx * dx + dy * dy)
    if op == "texture_energy":
        ixx, iyy, _ = second_derivatives(stack)
        return np.sqrt(ixx * ixx + iyy * iyy)
    if op == "hessian":
        ixx, iyy, ixy = second_derivatives(stack)
        return ixx * iyy - ixy * ixy
    if op == "frangi":
        l1, l2 = hessian_eigenvalues(*second_derivatives(stack))
        b, g = prm.frangi_beta, prm.frangi_gamma
        return np.exp(-(l1 * l1) / (2.0 * b * b) - (l2 * l2) / (2.0 * g * g))
    if op == "gabor":
        wavelength, n_orient = prm.gabor
        best = None
        for kern in gabor_kernels(wavelength, int(n_orient)):
            resp = np.abs(ndimage.correlate(stack, kern[None], mode="nearest"))
            best = resp if best is None else np.maximum(best, resp)
        return best
    if op == "wavelet":
        return haar_detail_magnitude(stack, prm.wavelet_level)
    if op == "diffusion":
        iters, kappa, dt = prm.diffusion
        return perona_malik(stack, int(iters), kappa, dt)
    if op == "edge":
        return canny(stack, prm.canny_sigma, prm.canny_thresholds).astype(np.float64)
    raise KeyError(op)


def project(grid: VoxelGrid, axis: str, op: str, params: ProjParams | None = None,
            slab: Tuple[int, int] | None = None) -> ProjImage:
    """Project ``grid`` along ``axis`` with operator ``op``.

    ``slab`` restricts the reduced axis to the half-open index range
    ``[lo, hi)``; the image dims do not change.
    """
    params = params or ProjParams()
    if axis not in AXIS_INDEX:
        raise ValueError(f"unknown axis {axis!r}; expected one of {AXES}")
    if op not in OPERATORS:
        raise ValueError(f"unknown operator {op!r}")
    if grid.is_label and op not in LABEL_OPS:
        raise KindError(f"operator {op!r} is not defined for label grids")
    ax = AXIS_INDEX[axis]
    vox = grid.voxels
    if slab is not None:
        lo, hi = int(slab[0]), int(slab[1])
        if not 0 <= lo < hi <= vox.shape[ax]:
            raise ValueError(f"slab {slab} outside axis of length {vox.shape[ax]}")
        sl = [slice(None)] * 3
        sl[ax] = slice(lo, hi)
        vox = vox[tuple(sl)]
    if op in DEPTH_OPS and vox.shape[ax] < 2:
        raise InsufficientSamplesError(f"operator {op!r} needs at least 2 slices along {axis}")

    if grid.is_label:
        pixels = (vox.max(axis=ax) if op == "max" else vox.min(axis=ax)).astype(np.float64)
    elif op in _COLUMN_OPS:
        pixels = _reduce_columns(vox, ax, op, params)
    else:
        stack = np.moveaxis(np.asarray(vox, dtype=np.float64), ax, 0)
        resp = _filter_response(stack, op, params)
        pixels = resp.max(axis=0) if op == "gradient_max" else resp.sum(axis=0)
    return ProjImage(np.ascontiguousarray(pixels), axis, op, grid.dims)


# ---------------------------------------------------------------- PGM I/O

def _sidecar(path) -> Path:
    return Path(path).with_suffix(".json")


def save_proj(img: ProjImage, path) -> None:
    """Write a 16-bit binary PGM plus a JSON sidecar holding the value range."""
    px = np.asarray(img.pixels, dtype=np.float64)
    if not np.isfinite(px).all():
        raise ValueError("projection contains NaN or Inf pixels")
    h, w = px.shape
    vmin, vmax = float(px.min()), float(px.max())
    if vmax > vmin:
        q = np.rint((px - vmin) / (vmax - vmin) * 65535.0)
    else:
        q = np.zeros_like(px)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(q.astype(">u2").tobytes())
    meta = {"min": vmin, "max": vmax, "axis": img.axis, "operator": img.operator,
            "source_dims": list(img.source_dims), "dims": [h, w]}
    _sidecar(path).write_text(json.dumps(meta, indent=2))


def _pgm_tokens(raw, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def load_proj(path) -> ProjImage:
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _pgm_tokens(raw, 4)
    if magic != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(w), int(h), int(maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    need = w * h * np.dtype(dtype).itemsize
    body = raw[offset:offset + need]
    if len(body) < need:
        raise FormatError(f"{path}: pixel data truncated")
    q = np.frombuffer(body, dtype=dtype).reshape(h, w).astype(np.float64)
    side = _sidecar(path)
    if side.exists():
        meta = json.loads(side.read_text())
        vmin, vmax = meta["min"], meta["max"]
        axis, op = meta.get("axis", "axial"), meta.get("operator", "max")
        src = tuple(meta.get("source_dims", (0, 0, 0)))
    else:
        vmin, vmax, axis, op, src = 0.0, float(maxval), "axial", "max", (0, 0, 0)
    if vmax > vmin:
        px = vmin + q / maxval * (vmax - vmin)
    else:
        px = np.full((h, w), vmin)
    return ProjImage(px, axis, op, src)
