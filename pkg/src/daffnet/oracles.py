"""Slow, independent reference implementations used to verify the fast paths.

Everything here is plain numpy/scipy on float64 arrays and shares no code
with the torch implementations it checks.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.ndimage import convolve, map_coordinates


def conv3d(x, kernel, bias, stride=1, padding=0):
    """Direct nested-loop cross-correlation; ``x`` is ``[N,C,D,H,W]``."""
    x = np.pad(x, [(0, 0), (0, 0)] + [(padding, padding)] * 3)
    n, cin, d, h, w = x.shape
    cout, _, k, _, _ = kernel.shape
    od, oh, ow = ((s - k) // stride + 1 for s in (d, h, w))
    out = np.zeros((n, cout, od, oh, ow))
    for b, o, i, j, l in itertools.product(range(n), range(cout), range(od), range(oh), range(ow)):
        patch = x[b, :, i * stride : i * stride + k, j * stride : j * stride + k, l * stride : l * stride + k]
        out[b, o, i, j, l] = (patch * kernel[o]).sum() + bias[o]
    return out


def pool3d(x, kind, window):
    n, c, d, h, w = x.shape
    out = np.zeros((n, c, d // window, h // window, w // window))
    for idx in itertools.product(*(range(s) for s in out.shape)):
        b, ch, i, j, l = idx
        block = x[b, ch, i * window : (i + 1) * window, j * window : (j + 1) * window, l * window : (l + 1) * window]
        out[idx] = block.mean() if kind == "average" else block.max()
    return out


def trilinear_point(vol, z, y, x):
    """Trilinear value of a 3-D array at one continuous point, clamped to the border."""
    d, h, w = vol.shape
    z, y, x = min(max(z, 0), d - 1), min(max(y, 0), h - 1), min(max(x, 0), w - 1)
    z0, y0, x0 = int(np.floor(z)), int(np.floor(y)), int(np.floor(x))
    z1, y1, x1 = min(z0 + 1, d - 1), min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fz, fy, fx = z - z0, y - y0, x - x0
    val = 0.0
    for zi, wz in ((z0, 1 - fz), (z1, fz)):
        for yi, wy in ((y0, 1 - fy), (y1, fy)):
            for xi, wx in ((x0, 1 - fx), (x1, fx)):
                val += wz * wy * wx * vol[zi, yi, xi]
    return val


def resize(x, scale):
    """Half-pixel trilinear resize of ``[N,C,D,H,W]`` via the explicit coordinate map."""
    n, c = x.shape[:2]
    new = [int(s * scale) for s in x.shape[2:]]
    out = np.zeros((n, c, *new))
    for b, ch in itertools.product(range(n), range(c)):
        for i, j, l in itertools.product(*(range(s) for s in new)):
            src = [(q + 0.5) / scale - 0.5 for q in (i, j, l)]
            out[b, ch, i, j, l] = trilinear_point(x[b, ch], *src)
    return out


def warp(source, field):
    """Per-voxel resampling of ``[C,D,H,W]`` at ``p + u(p)``."""
    c, d, h, w = source.shape
    out = np.zeros_like(source, dtype=np.float64)
    for i, j, l in itertools.product(range(d), range(h), range(w)):
        p = (i + field[0, i, j, l], j + field[1, i, j, l], l + field[2, i, j, l])
        for ch in range(c):
            out[ch, i, j, l] = trilinear_point(source[ch], *p)
    return out


def gaussian_dense(x, sigma=1.0, ksize=5):
    """Filter ``[D,H,W]`` with the full (non-separable) 3-D Gaussian kernel, mirror borders."""
    r = ksize // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * (t / sigma) ** 2)
    g /= g.sum()
    k3 = g[:, None, None] * g[None, :, None] * g[None, None, :]
    return convolve(np.asarray(x, dtype=np.float64), k3, mode="mirror")


def euler_integrate(velocity, substeps=1024):
    """Flow of a stationary ``[3,D,H,W]`` velocity for unit time by forward Euler."""
    v = np.asarray(velocity, dtype=np.float64)
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in v.shape[1:]], indexing="ij"))
    pos = grid.copy()
    dt = 1.0 / substeps
    hi = np.array(v.shape[1:], dtype=np.float64)[:, None] - 1
    for _ in range(substeps):
        pts = np.clip(pos.reshape(3, -1), 0, hi)
        step = np.stack([map_coordinates(v[c], pts, order=1, mode="nearest") for c in range(3)])
        pos = pos + dt * step.reshape(pos.shape)
    return pos - grid


def windowed_ncc(fixed, warped, n=9, eps=1e-5):
    """Negative mean squared correlation over border-truncated ``n``-cubed windows."""
    f, g = np.asarray(fixed, np.float64), np.asarray(warped, np.float64)
    r = n // 2
    d, h, w = f.shape
    total = 0.0
    for i, j, l in itertools.product(range(d), range(h), range(w)):
        sl = (slice(max(i - r, 0), i + r + 1), slice(max(j - r, 0), j + r + 1), slice(max(l - r, 0), l + r + 1))
        a, b = f[sl] - f[sl].mean(), g[sl] - g[sl].mean()
        cross = (a * b).sum()
        total += cross * cross / ((a * a).sum() * (b * b).sum() + eps)
    return -total / f.size


def surface_points(mask):
    mask = np.asarray(mask, dtype=bool)
    pts = []
    d, h, w = mask.shape
    for i, j, l in np.argwhere(mask):
        for di, dj, dl in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            a, b, c = i + di, j + dj, l + dl
            if not (0 <= a < d and 0 <= b < h and 0 <= c < w) or not mask[a, b, c]:
                pts.append((i, j, l))
                break
    return np.asarray(pts, dtype=np.float64)


def assd(a, b, k, spacing=(1.0, 1.0, 1.0)):
    """All-pairs average symmetric surface distance."""
    sa, sb = surface_points(np.asarray(a) == k), surface_points(np.asarray(b) == k)
    sp = np.asarray(spacing, dtype=np.float64)

    def side(src, dst):
        best = []
        for p in src:
            diff = (p - dst) * sp
            best.append(np.sqrt((diff**2).sum(axis=1)).min())
        return float(np.sum(best))

    return (side(sa, sb) + side(sb, sa)) / (len(sa) + len(sb))


def set_counts(a, b, k):
    """``(|A & B|, |A|, |B|)`` for the voxel sets of class ``k``."""
    sa = {tuple(p) for p in np.argwhere(np.asarray(a) == k)}
    sb = {tuple(p) for p in np.argwhere(np.asarray(b) == k)}
    return len(sa & sb), len(sa), len(sb)


def dice_counts(a, b, k):
    """Dice of class ``k`` in percent from integer set counts."""
    inter, na, nb = set_counts(a, b, k)
    if na + nb == 0:
        return 100.0
    return 100.0 * 2 * inter / (na + nb)
