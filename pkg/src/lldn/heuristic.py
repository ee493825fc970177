"""Non-learning lane baseline: intensity threshold, DBSCAN, straight-line fit per cluster."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .bev import GridSpec
from .synth import LaneSpec, bresenham, lane_cells


@dataclass(frozen=True)
class HeuristicConfig:
    intensity_threshold: float = 128.0
    eps: float = 0.6
    min_pts: int = 4
    min_fit_size: int = 8

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.min_pts < 1:
            raise ValueError("min_pts must be >= 1")


def threshold_points(cloud, cfg: HeuristicConfig = HeuristicConfig()) -> np.ndarray:
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 5)
    return cloud[cloud[:, 3] > cfg.intensity_threshold][:, :2]


def dbscan_cluster(pts, eps: float, min_pts: int) -> np.ndarray:
    """DBSCAN labels (noise is -1).

    A point is core when at least ``min_pts`` points, itself included, lie
    within ``eps``. Clusters are numbered in order of their lowest-index core
    point; a border point reachable from several clusters joins the lowest
    numbered one.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    neighbors = cKDTree(pts).query_ball_point(pts, eps)
    core = np.array([len(nb) >= min_pts for nb in neighbors])
    cluster = 0
    for i in range(n):
        if not core[i] or labels[i] != -1:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            j = queue.popleft()
            for k in neighbors[j]:
                if labels[k] == -1:
                    labels[k] = cluster
                    if core[k]:
                        queue.append(k)
        cluster += 1
    return labels


def fit_line(xy: np.ndarray):
    """Least-squares ``y = a x + b``; ``None`` when the x-variance vanishes."""
    x, y = xy[:, 0], xy[:, 1]
    xc = x - x.mean()
    sxx = float((xc * xc).sum())
    if sxx <= 1e-12:
        return None
    a = float((xc * (y - y.mean())).sum() / sxx)
    return a, float(y.mean() - a * x.mean())


def fit_and_rasterize(pts, labels, grid: GridSpec, min_fit_size: int = 8) -> np.ndarray:
    out = np.zeros(grid.shape, dtype=np.uint8)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    labels = np.asarray(labels)
    for k in np.unique(labels[labels >= 0]):
        xy = pts[labels == k]
        if len(xy) < min_fit_size:
            continue
        fit = fit_line(xy)
        if fit is None:
            row0, col = grid.cell_of(xy[0, 0], xy[:, 1].min())
            row1, _ = grid.cell_of(xy[0, 0], xy[:, 1].max())
            cells = bresenham(int(row0), int(col), int(row1), int(col))
        else:
            a, b = fit
            seg = LaneSpec(1, "line", (b, float(np.arctan(a))), float(xy[:, 0].min()), float(xy[:, 0].max()))
            cells = lane_cells(seg, grid)
        for r, c in cells:
            if 0 <= r < grid.rows and 0 <= c < grid.cols:
                out[r, c] = 1
    return out


def heuristic_detect(cloud, grid: GridSpec, cfg: HeuristicConfig = HeuristicConfig()) -> np.ndarray:
    pts = threshold_points(cloud, cfg)
    labels = dbscan_cluster(pts, cfg.eps, cfg.min_pts)
    return fit_and_rasterize(pts, labels, grid, cfg.min_fit_size).astype(np.float64)
