"""Hot carving kernels.

Set ``CTSDR_DISABLE_NUMBA=1`` to force the pure-numpy path. Both paths apply
the same membership test with the same arithmetic so their masks agree bit for bit.
"""
from __future__ import annotations

import math
import os

import numpy as np


def _numba_requested() -> bool:
    return os.environ.get("CTSDR_DISABLE_NUMBA", "").strip().lower() not in ("1", "true", "yes", "on")


try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and _numba_requested()


def solid_bounds(tips, tangents, radius, cyl_len):
    """Axis-aligned bounds of cylinder + distal hemisphere solids, ``(n, 3)`` each."""
    centers = tips + cyl_len * tangents
    disk = radius * np.sqrt(np.clip(1.0 - tangents * tangents, 0.0, 1.0))
    lo = np.minimum(tips - disk, centers - radius)
    hi = np.maximum(tips + disk, centers + radius)
    return lo, hi


def index_ranges(lo, hi, origin, h, dims):
    """Inclusive voxel index ranges whose centres may fall inside ``[lo, hi]``."""
    i0 = np.ceil((lo - origin) / h - 0.5).astype(np.int64)
    i1 = np.floor((hi - origin) / h - 0.5).astype(np.int64)
    dims = np.asarray(dims, dtype=np.int64)
    return np.maximum(i0, 0), np.minimum(i1, dims - 1)


def carve_numpy(mask, xs, ys, zs, tips, tangents, i0, i1, radius, cyl_len):
    r2 = radius * radius
    for n in range(len(tips)):
        a0, b0, c0 = i0[n]
        a1, b1, c1 = i1[n]
        if a1 < a0 or b1 < b0 or c1 < c0:
            continue
        tx, ty, tz = tips[n]
        ux, uy, uz = tangents[n]
        dx = (xs[a0:a1 + 1] - tx)[:, None, None]
        dy = (ys[b0:b1 + 1] - ty)[None, :, None]
        dz = (zs[c0:c1 + 1] - tz)[None, None, :]
        along = dx * ux + dy * uy + dz * uz
        d2 = dx * dx + dy * dy + dz * dz
        ex = dx - cyl_len * ux
        ey = dy - cyl_len * uy
        ez = dz - cyl_len * uz
        cap2 = ex * ex + ey * ey + ez * ez
        inside = (along >= 0.0) & np.where(along <= cyl_len, d2 - along * along <= r2, cap2 <= r2)
        view = mask[a0:a1 + 1, b0:b1 + 1, c0:c1 + 1]
        # write-only assignment: concurrent partitions never clear each other's bits
        view[inside] = 1


if numba is not None:

    @numba.njit(nogil=True, cache=True)
    def _carve_numba(mask, xs, ys, zs, tips, tangents, i0, i1, radius, cyl_len):  # pragma: no cover
        r2 = radius * radius
        for n in range(tips.shape[0]):
            tx = tips[n, 0]
            ty = tips[n, 1]
            tz = tips[n, 2]
            ux = tangents[n, 0]
            uy = tangents[n, 1]
            uz = tangents[n, 2]
            for a in range(i0[n, 0], i1[n, 0] + 1):
                dx = xs[a] - tx
                for b in range(i0[n, 1], i1[n, 1] + 1):
                    dy = ys[b] - ty
                    for c in range(i0[n, 2], i1[n, 2] + 1):
                        if mask[a, b, c]:
                            continue
                        dz = zs[c] - tz
                        along = dx * ux + dy * uy + dz * uz
                        if along < 0.0:
                            continue
                        if along <= cyl_len:
                            d2 = dx * dx + dy * dy + dz * dz
                            if d2 - along * along <= r2:
                                mask[a, b, c] = 1
                        else:
                            ex = dx - cyl_len * ux
                            ey = dy - cyl_len * uy
                            ez = dz - cyl_len * uz
                            if ex * ex + ey * ey + ez * ez <= r2:
                                mask[a, b, c] = 1
else:  # pragma: no cover
    _carve_numba = None


def carve_kernel(use_numba: bool | None = None):
    """Return the carving kernel for the requested (or configured) backend."""
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba:
        if _carve_numba is None:
            raise RuntimeError("numba backend requested but numba is not importable")
        return _carve_numba
    return carve_numpy


def backend_name(use_numba: bool | None = None) -> str:
    return "numba" if (USE_NUMBA if use_numba is None else use_numba) else "numpy"


def partition(n: int, parts: int):
    """Contiguous, near-equal index ranges covering ``range(n)``."""
    parts = max(1, min(parts, n)) if n else 1
    edges = [math.floor(k * n / parts) for k in range(parts + 1)]
    return [(edges[k], edges[k + 1]) for k in range(parts)]
