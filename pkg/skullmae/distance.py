"""
Exact Euclidean distance transform
Separable lower envelope of parabolas, one pass per axis, all lines of an
axis processed in lockstep with numpy.
"""

from typing import Sequence

import numpy as np

from skullmae.errors import EmptyVolume
from skullmae.volume import VoxelGrid


def _lower_envelope(g: np.ndarray, step: float) -> np.ndarray:
    """
    Solve f(q) = min_p g(p) + ((q - p) * step)^2 along the last axis.

    Args:
        g: (lines, n) float64 squared distances, inf where no feature
        step: physical spacing along the axis

    Returns:
        (lines, n) float64
    """
    lines, n = g.shape
    rows = np.arange(lines)
    s2 = step * step
    positions = np.arange(n, dtype=np.float64)

    v = np.zeros((lines, n), dtype=np.int64)
    z = np.full((lines, n + 1), np.inf)
    k = np.full(lines, -1, dtype=np.int64)

    def intersection(sel, q):
        # Abscissa where the parabola rooted at q overtakes the top of the stack
        p = v[sel, k[sel]]
        gp = g[sel, p]
        gq = g[sel, q]
        return ((gq + s2 * q * q) - (gp + s2 * p * p)) / (2.0 * s2 * (q - p))

    for q in range(n):
        active = np.isfinite(g[:, q])
        if not active.any():
            continue
        while True:
            sel = rows[active & (k >= 0)]
            if sel.size == 0:
                break
            x = intersection(sel, q)
            pop = x <= z[sel, k[sel]]
            if not pop.any():
                break
            k[sel[pop]] -= 1

        sel = rows[active]
        stacked = sel[k[sel] >= 0]
        fresh = sel[k[sel] < 0]
        boundary = intersection(stacked, q) if stacked.size else np.empty(0)

        k[sel] += 1
        v[sel, k[sel]] = q
        z[stacked, k[stacked]] = boundary
        z[fresh, 0] = -np.inf
        z[sel, k[sel] + 1] = np.inf

    out = np.full((lines, n), np.inf)
    has = rows[k >= 0]
    if has.size == 0:
        return out

    j = np.zeros(lines, dtype=np.int64)
    for q in range(n):
        while True:
            advance = has[(j[has] < k[has]) & (z[has, j[has] + 1] < q)]
            if advance.size == 0:
                break
            j[advance] += 1
        # Neighbouring parabolas are compared too so near-ties resolve to
        # the exact floating-point minimum
        best = np.full(has.size, np.inf)
        for offset in (-1, 0, 1):
            idx = j[has] + offset
            valid = (idx >= 0) & (idx <= k[has])
            cand_rows = has[valid]
            p = v[cand_rows, idx[valid]]
            value = g[cand_rows, p] + ((positions[q] - p) * step) ** 2
            best[valid] = np.minimum(best[valid], value)
        out[has, q] = best
    return out


def squared_edt(mask: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> np.ndarray:
    """
    Squared distance (mm^2) from every voxel center to the nearest foreground center.

    Terms accumulate in x, y, z order: ((dx*sx)^2 + (dy*sy)^2) + (dz*sz)^2.
    Voxels of a grid without foreground get inf.
    """
    mask = np.asarray(mask, dtype=bool)
    dist = np.where(mask, 0.0, np.inf)
    for axis in range(mask.ndim):
        moved = np.moveaxis(dist, axis, -1)
        shape = moved.shape
        flat = np.ascontiguousarray(moved).reshape(-1, shape[-1])
        solved = _lower_envelope(flat, float(spacing[axis]))
        dist = np.moveaxis(solved.reshape(shape), -1, axis)
    return np.ascontiguousarray(dist)


def edt(g: VoxelGrid) -> np.ndarray:
    """Exact Euclidean distance (mm) to the nearest foreground voxel, honoring spacing"""
    if not g.data.any():
        raise EmptyVolume(f"edt of an empty grid ({g.describe()})")
    return np.sqrt(squared_edt(g.data, g.spacing))
