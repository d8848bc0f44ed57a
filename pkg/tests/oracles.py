"""Naive reference implementations used as test oracles.

Everything here is written pixel by pixel with plain Python loops so it
shares no code path with the vectorised engine.
"""

import math
from collections import deque

import numpy as np

AXIS_INDEX = {"axial": 0, "sagittal": 2, "coronal": 1}


def _column(vox, axis, i, j):
    z, y, x = vox.shape
    if axis == "axial":
        return [float(vox[k, i, j]) for k in range(z)]
    if axis == "sagittal":
        return [float(vox[i, j, k]) for k in range(x)]
    return [float(vox[i, k, j]) for k in range(y)]


def _slices(vox, axis):
    """List of 2D slices (lists of lists) perpendicular to the viewing axis."""
    z, y, x = vox.shape
    if axis == "axial":
        return [[[float(vox[k, i, j]) for j in range(x)] for i in range(y)] for k in range(z)]
    if axis == "sagittal":
        return [[[float(vox[i, j, k]) for j in range(y)] for i in range(z)] for k in range(x)]
    return [[[float(vox[i, k, j]) for j in range(x)] for i in range(z)] for k in range(y)]


def _px(img, i, j):
    h, w = len(img), len(img[0])
    return img[min(max(i, 0), h - 1)][min(max(j, 0), w - 1)]


def percentile7(values, q):
    s = sorted(values)
    h = (len(s) - 1) * q / 100.0
    lo = int(math.floor(h))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (h - lo) * (s[hi] - s[lo])


def _moments(col):
    n = len(col)
    mu = sum(col) / n
    m2 = sum((v - mu) ** 2 for v in col) / n
    return mu, m2


def column_op(col, op, prm):
    n = len(col)
    eps = prm.epsilon
    if op == "max":
        return max(col)
    if op == "min":
        return min(col)
    if op == "sum":
        return sum(col)
    if op == "mean":
        return sum(col) / n
    if op == "energy":
        return sum(v * v for v in col)
    if op == "median":
        s = sorted(col)
        return s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2
    if op == "difference":
        return sum(abs(col[k + 1] - col[k]) for k in range(n - 1))
    mu, m2 = _moments(col)
    sigma = math.sqrt(m2)
    if op == "variance":
        return m2
    if op == "stddev":
        return sigma
    if op == "kurtosis":
        if sigma <= eps:
            return 0.0
        return (sum((v - mu) ** 4 for v in col) / n) / (m2 * m2)
    if op == "skewness":
        if sigma <= eps:
            return 0.0
        return (sum((v - mu) ** 3 for v in col) / n) / sigma ** 3
    if op in ("standardized", "zscore"):
        if sigma <= eps:
            return 0.0
        z = [abs(v - mu) / sigma for v in col]
        return sum(z) / n if op == "standardized" else max(z)
    if op == "percentile_range":
        lo, hi = prm.percentiles
        return percentile7(col, hi) - percentile7(col, lo)
    if op == "nonlinear":
        return sum(v ** prm.p for v in col) / n
    if op == "inversion":
        m = max(col)
        return sum(m - v for v in col) / n
    raise KeyError(op)


# ---- per-pixel 2D filters on one slice (list of lists)

SX = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
SY = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]]


def sobel_at(img, i, j):
    gx = 0.0
    gy = 0.0
    for a in range(3):
        for b in range(3):
            v = _px(img, i + a - 1, j + b - 1)
            if SX[a][b]:
                gx = gx + SX[a][b] * v
            if SY[a][b]:
                gy = gy + SY[a][b] * v
    return gx, gy


def second_at(img, i, j):
    c = _px(img, i, j)
    ixx = _px(img, i, j + 1) - 2 * c + _px(img, i, j - 1)
    iyy = _px(img, i + 1, j) - 2 * c + _px(img, i - 1, j)
    ixy = (_px(img, i + 1, j + 1) - _px(img, i + 1, j - 1)
           - _px(img, i - 1, j + 1) + _px(img, i - 1, j - 1)) / 4
    return ixx, iyy, ixy


def eig2(ixx, iyy, ixy):
    tr, det = ixx + iyy, ixx * iyy - ixy * ixy
    disc = math.sqrt(max(tr * tr / 4 - det, 0.0))
    a, b = tr / 2 + disc, tr / 2 - disc
    return (a, b) if abs(a) <= abs(b) else (b, a)


def gabor_kernel(wavelength, theta):
    sigma = 0.5 * wavelength
    r = int(math.ceil(2 * sigma))
    k = {}
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            xr = dx * math.cos(theta) + dy * math.sin(theta)
            yr = -dx * math.sin(theta) + dy * math.cos(theta)
            k[(dy, dx)] = math.exp(-(xr * xr + yr * yr) / (2 * sigma * sigma)) * math.cos(2 * math.pi * xr / wavelength)
    mean = sum(k.values()) / len(k)
    return {key: v - mean for key, v in k.items()}, r


def haar_at(levels_imgs, i, j, s):
    a = levels_imgs
    a00, a01 = _px(a, i, j), _px(a, i, j + s)
    a10, a11 = _px(a, i + s, j), _px(a, i + s, j + s)
    dh = (a00 + a01 - a10 - a11) / 2
    dv = (a00 - a01 + a10 - a11) / 2
    dd = (a00 - a01 - a10 + a11) / 2
    return math.sqrt(dh * dh + dv * dv + dd * dd), (a00 + a01 + a10 + a11) / 2


def diffuse(img, iterations, kappa, dt):
    h, w = len(img), len(img[0])
    u = [row[:] for row in img]
    for _ in range(iterations):
        nxt = [[0.0] * w for _ in range(h)]
        for i in range(h):
            for j in range(w):
                c = u[i][j]
                dn = _px(u, i - 1, j) - c
                ds = _px(u, i + 1, j) - c
                de = _px(u, i, j + 1) - c
                dw = _px(u, i, j - 1) - c
                flux = (math.exp(-(dn / kappa) ** 2) * dn + math.exp(-(ds / kappa) ** 2) * ds
                        + math.exp(-(de / kappa) ** 2) * de + math.exp(-(dw / kappa) ** 2) * dw)
                nxt[i][j] = c + dt * flux
        u = nxt
    return u


def canny_slice(img, sigma, thresholds):
    h, w = len(img), len(img[0])
    r = max(1, int(math.ceil(2 * sigma)))
    k = [math.exp(-(t * t) / (2 * sigma * sigma)) for t in range(-r, r + 1)]
    tot = sum(k)
    k = [v / tot for v in k]
    tmp = [[sum(k[t + r] * _px(img, i, j + t) for t in range(-r, r + 1)) for j in range(w)] for i in range(h)]
    sm = [[sum(k[t + r] * _px(tmp, i + t, j) for t in range(-r, r + 1)) for j in range(w)] for i in range(h)]
    mag = [[0.0] * w for _ in range(h)]
    ang = [[0.0] * w for _ in range(h)]
    for i in range(h):
        for j in range(w):
            gx, gy = sobel_at(sm, i, j)
            mag[i][j] = math.sqrt(gx * gx + gy * gy)
            ang[i][j] = math.degrees(math.atan2(gy, gx)) % 180.0

    def m(i, j):
        return mag[i][j] if 0 <= i < h and 0 <= j < w else 0.0

    peak = max(max(row) for row in mag)
    lo_t, hi_t = thresholds[0] * peak, thresholds[1] * peak
    weak, strong = set(), set()
    for i in range(h):
        for j in range(w):
            a = ang[i][j]
            if a < 22.5 or a >= 157.5:
                d = (0, 1)
            elif a < 67.5:
                d = (1, 1)
            elif a < 112.5:
                d = (1, 0)
            else:
                d = (1, -1)
            v = mag[i][j]
            if v > 0 and v >= m(i + d[0], j + d[1]) and v >= m(i - d[0], j - d[1]):
                if v >= lo_t:
                    weak.add((i, j))
                if v >= hi_t:
                    strong.add((i, j))
    edges = set()
    for seed in strong:
        if seed in edges:
            continue
        queue = deque([seed])
        edges.add(seed)
        while queue:
            ci, cj = queue.popleft()
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    nb = (ci + di, cj + dj)
                    if nb in weak and nb not in edges:
                        edges.add(nb)
                        queue.append(nb)
    return [[1.0 if (i, j) in edges else 0.0 for j in range(w)] for i in range(h)]


def filter_slice(img, op, prm):
    """Response map of one slice for a filter operator."""
    h, w = len(img), len(img[0])
    if op == "edge":
        return canny_slice(img, prm.canny_sigma, prm.canny_thresholds)
    if op == "diffusion":
        iters, kappa, dt = prm.diffusion
        return diffuse(img, int(iters), kappa, dt)
    if op == "wavelet":
        total = [[0.0] * w for _ in range(h)]
        approx = img
        for level in range(prm.wavelet_level):
            s = 1 << level
            nxt = [[0.0] * w for _ in range(h)]
            for i in range(h):
                for j in range(w):
                    mag, a = haar_at(approx, i, j, s)
                    total[i][j] += mag
                    nxt[i][j] = a
            approx = nxt
        return total
    if op == "gabor":
        wavelength, n_orient = prm.gabor
        kernels = [gabor_kernel(wavelength, math.pi * k / n_orient) for k in range(int(n_orient))]
        out = [[0.0] * w for _ in range(h)]
        for i in range(h):
            for j in range(w):
                best = 0.0
                for kern, r in kernels:
                    acc = 0.0
                    for (dy, dx), kv in kern.items():
                        acc += kv * _px(img, i + dy, j + dx)
                    best = max(best, abs(acc))
                out[i][j] = best
        return out
    out = [[0.0] * w for _ in range(h)]
    for i in range(h):
        for j in range(w):
            if op in ("sobel", "gradient_max"):
                gx, gy = sobel_at(img, i, j)
                val = math.sqrt(gx * gx + gy * gy)
            elif op == "gradient_magnitude":
                dx = (_px(img, i, j + 1) - _px(img, i, j - 1)) / 2
                dy = (_px(img, i + 1, j) - _px(img, i - 1, j)) / 2
                val = math.sqrt(dx * dx + dy * dy)
            elif op == "total_variation":
                dx = _px(img, i, j + 1) - img[i][j]
                dy = _px(img, i + 1, j) - img[i][j]
                val = math.sqrt(dx * dx + dy * dy)
            elif op == "texture_energy":
                ixx, iyy, _ = second_at(img, i, j)
                val = math.sqrt(ixx * ixx + iyy * iyy)
            elif op == "hessian":
                ixx, iyy, ixy = second_at(img, i, j)
                val = ixx * iyy - ixy * ixy
            elif op == "frangi":
                l1, l2 = eig2(*second_at(img, i, j))
                b, g = prm.frangi_beta, prm.frangi_gamma
                val = math.exp(-(l1 * l1) / (2 * b * b) - (l2 * l2) / (2 * g * g))
            else:
                raise KeyError(op)
            out[i][j] = val
    return out


def naive_project(vox, axis, op, prm):
    """Direct evaluation of a projection operator, pixel by pixel."""
    z, y, x = vox.shape
    h, w = {"axial": (y, x), "sagittal": (z, y), "coronal": (z, x)}[axis]
    out = np.zeros((h, w))
    try:
        column_op([1.0, 2.0], op, prm)
        is_column = True
    except KeyError:
        is_column = False
    if is_column:
        for i in range(h):
            for j in range(w):
                out[i, j] = column_op(_column(vox, axis, i, j), op, prm)
        return out
    responses = [filter_slice(s, op, prm) for s in _slices(vox, axis)]
    for i in range(h):
        for j in range(w):
            vals = [r[i][j] for r in responses]
            out[i, j] = max(vals) if op == "gradient_max" else sum(vals)
    return out


# ---- geometry and metric oracles

def brute_hausdorff_distances(a, b, spacing):
    pa = [tuple(p) for p in np.argwhere(a)]
    pb = [tuple(p) for p in np.argwhere(b)]

    def directed(src, dst):
        out = []
        for p in src:
            best = math.inf
            for q in dst:
                d = math.sqrt(sum(((pi - qi) * s) ** 2 for pi, qi, s in zip(p, q, spacing)))
                best = min(best, d)
            out.append(best)
        return out

    return directed(pa, pb), directed(pb, pa)


def brute_hd95(a, b, spacing):
    dab, dba = brute_hausdorff_distances(a, b, spacing)
    return max(percentile7(dab, 95), percentile7(dba, 95))


def brute_hausdorff(a, b, spacing):
    dab, dba = brute_hausdorff_distances(a, b, spacing)
    return max(max(dab), max(dba))


def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def brute_components(binary):
    """8-connected components via BFS; returns list of pixel lists in raster order of first pixel."""
    h, w = binary.shape
    seen = set()
    comps = []
    for i in range(h):
        for j in range(w):
            if binary[i, j] and (i, j) not in seen:
                comp = []
                queue = deque([(i, j)])
                seen.add((i, j))
                while queue:
                    ci, cj = queue.popleft()
                    comp.append((ci, cj))
                    for di in (-1, 0, 1):
                        for dj in (-1, 0, 1):
                            ni, nj = ci + di, cj + dj
                            if 0 <= ni < h and 0 <= nj < w and binary[ni, nj] and (ni, nj) not in seen:
                                seen.add((ni, nj))
                                queue.append((ni, nj))
                comps.append(comp)
    return comps


# ---- projection sweep shared by the unit and acceptance suites

EXACT_OPS = ("max", "min", "sum", "median")


def projection_mismatch(engine, oracle, exact):
    """None when the images agree, otherwise a short description."""
    engine = np.asarray(engine, dtype=np.float64)
    oracle = np.asarray(oracle, dtype=np.float64)
    if engine.shape != oracle.shape:
        return f"shape {engine.shape} != {oracle.shape}"
    if exact:
        bad = engine != oracle
    else:
        floor = 1e-9 * max(1.0, float(np.abs(oracle).max(initial=0.0)))
        bad = np.abs(engine - oracle) > 1e-6 * np.abs(oracle) + floor
    if bad.any():
        i = tuple(np.argwhere(bad)[0])
        return f"pixel {i}: engine {engine[i]!r} oracle {oracle[i]!r}"
    return None


def random_grids(n, seed, max_dim=8):
    """Yields (integer grid, float grid) pairs of random shape up to max_dim per axis."""
    rng = np.random.default_rng(seed)
    for _ in range(n):
        shape = tuple(int(d) for d in rng.integers(1, max_dim + 1, 3))
        yield (rng.integers(-50, 51, shape).astype(np.float64),
               rng.normal(0.0, 40.0, shape) + rng.uniform(-100, 100))
