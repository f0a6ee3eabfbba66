"""Exact k-nearest-neighbor search on a uniform grid.

The grid is a pure acceleration structure: candidate cells are visited in
expanding Chebyshev shells around the query cell, and the search stops only
once the shell lower bound certifies that no unvisited cell can hold a
closer point.  Results are therefore identical to brute force, including
tie-breaking (ties resolved by ascending point index).
"""

import numpy as np

from ..errors import DegenerateSceneError, ShapeError

__all__ = ["knn"]


def _cell_size(points):
    """Pick a grid cell edge from a median nearest-neighbor estimate.

    The estimate is floored so the grid never exceeds ~2 N^(1/3) cells per
    axis: tight duplicate clusters would otherwise shrink the median to
    near zero and make the shell walk enumerate astronomically many empty
    cells. Cell size only affects speed, never results.
    """
    n = len(points)
    max_side = float(np.max(points.max(axis=0) - points.min(axis=0))) if n > 1 else 0.0
    sample = points[: min(64, n)]
    d2 = np.sum((sample[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    d2[np.arange(len(sample)), np.arange(len(sample))] = np.inf
    med = float(np.sqrt(np.median(np.min(d2, axis=1))))
    cell = 2.0 * med if np.isfinite(med) else 0.0
    floor = max_side / max(8.0, 2.0 * np.ceil(n ** (1.0 / 3.0)))
    cell = max(cell, floor)
    if not np.isfinite(cell) or cell <= 0.0:
        cell = max(max_side, 1.0)
    return cell


def _build_grid(points, cell):
    keys = np.floor(points / cell).astype(np.int64)
    grid = {}
    for idx, key in enumerate(map(tuple, keys)):
        grid.setdefault(key, []).append(idx)
    return keys, grid


def _shell_cells(center, radius):
    """Cells at exactly Chebyshev distance ``radius`` from ``center``."""
    cx, cy, cz = center
    if radius == 0:
        yield (cx, cy, cz)
        return
    r = radius
    for dx in range(-r, r + 1):
        for dy in range(-r, r + 1):
            if max(abs(dx), abs(dy)) == r:
                for dz in range(-r, r + 1):
                    yield (cx + dx, cy + dy, cz + dz)
            else:
                yield (cx + dx, cy + dy, cz - r)
                yield (cx + dx, cy + dy, cz + r)


def knn(points, k, queries=None):
    """Indices of the k nearest points to each query, excluding the query itself.

    points : (N, 3) array.
    k : neighbors per query; requires N > k.
    queries : optional (Q,) int array of point indices; defaults to all points.

    Returns (Q, k) int64 indices ordered by ascending distance, ties by index.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ShapeError(f"points must be (N, 3), got {points.shape}")
    if not np.isfinite(points).all():
        raise ShapeError("points must be finite")
    n = len(points)
    if n <= k:
        raise DegenerateSceneError(f"need more than k={k} points, have {n}")
    if queries is None:
        queries = np.arange(n)
    else:
        queries = np.asarray(queries, dtype=np.int64)

    cell = _cell_size(points)
    keys, grid = _build_grid(points, cell)

    out = np.empty((len(queries), k), dtype=np.int64)
    for row, qi in enumerate(queries):
        q = points[qi]
        center = tuple(keys[qi])
        best = []  # (distance, index), sorted, at most k entries
        radius = 0
        while True:
            # Any point in a cell at Chebyshev shell r lies at Euclidean
            # distance >= (r - 1) * cell from the query, so once k
            # candidates sit below that bound the search is complete.
            if len(best) == k and best[-1][0] <= (radius - 1) * cell:
                break
            for key in _shell_cells(center, radius):
                ids = grid.get(key)
                if not ids:
                    continue
                for j in ids:
                    if j == qi:
                        continue
                    d = float(np.sqrt(np.sum((points[j] - q) ** 2)))
                    best.append((d, j))
            best.sort()
            del best[k:]
            radius += 1
        out[row] = [j for _, j in best]
    return out
