"""BEV grids and the two point-cloud encoders (point projector, pillar encoder).

Point clouds are ``(N, 5)`` float arrays with columns
``x, y, z, intensity, reflectivity``. Grid rows index the lateral axis ``y``
and columns the longitudinal axis ``x``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Z_RANGE = (-2.0, 4.0)
INTENSITY_RANGE = (0.0, 255.0)
N_C = 7


@dataclass(frozen=True)
class GridSpec:
    rows: int = 32
    cols: int = 32
    cell_dx: float = 0.96
    cell_dy: float = 0.48
    x0: float = 0.0
    y0: float = -7.68

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError(f"grid dims must be positive, got {self.rows}x{self.cols}")
        if self.cell_dx <= 0 or self.cell_dy <= 0:
            raise ValueError("cell sizes must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @property
    def x_max(self) -> float:
        return self.x0 + self.cols * self.cell_dx

    @property
    def y_max(self) -> float:
        return self.y0 + self.rows * self.cell_dy

    def refine(self, factor: int) -> "GridSpec":
        return GridSpec(self.rows * factor, self.cols * factor, self.cell_dx / factor,
                        self.cell_dy / factor, self.x0, self.y0)

    def cell_of(self, x, y):
        """(row, col) indices by floor; may fall outside the grid."""
        col = np.floor((np.asarray(x) - self.x0) / self.cell_dx).astype(np.int64)
        row = np.floor((np.asarray(y) - self.y0) / self.cell_dy).astype(np.int64)
        return row, col

    def cell_center(self, row, col):
        return (self.x0 + (np.asarray(col) + 0.5) * self.cell_dx,
                self.y0 + (np.asarray(row) + 0.5) * self.cell_dy)

    def inside(self, row, col):
        return (row >= 0) & (row < self.rows) & (col >= 0) & (col < self.cols)


def _scale(v, lo, hi):
    return np.clip((v - lo) / (hi - lo), 0.0, 1.0)


def project_points(cloud: np.ndarray, grid: GridSpec, scaled: bool = True) -> np.ndarray:
    """Rasterize a cloud into a ``rows x cols x 3`` pseudo-image.

    Channels are the per-cell maxima of z, intensity and reflectivity; empty
    cells stay zero. With ``scaled`` each channel is mapped to [0, 1] by the
    fixed ranges ``Z_RANGE`` and ``INTENSITY_RANGE`` (clamped) before
    aggregation, which commutes with max since the maps are monotone.
    """
    img = np.zeros((grid.rows, grid.cols, 3), dtype=np.float64)
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 5)
    if len(cloud) == 0:
        return img
    row, col = grid.cell_of(cloud[:, 0], cloud[:, 1])
    keep = grid.inside(row, col)
    vals = cloud[keep][:, 2:5]
    if scaled:
        vals = np.column_stack([_scale(vals[:, 0], *Z_RANGE),
                                _scale(vals[:, 1], *INTENSITY_RANGE),
                                _scale(vals[:, 2], *INTENSITY_RANGE)])
    flat = img.reshape(-1, 3)
    idx = row[keep] * grid.cols + col[keep]
    if not scaled:
        flat[:] = -np.inf
    for ch in range(3):
        np.maximum.at(flat[:, ch], idx, vals[:, ch])
    if not scaled:
        flat[~np.isfinite(flat)] = 0.0
    return img


# -- point projector CNN ------------------------------------------------------

def init_projector(rng, c_in: int = 3, widths=(16, 32, 64), dtype=np.float32) -> dict[str, np.ndarray]:
    """Three stride-2 stages: downsampling conv then one two-conv residual unit."""
    params = {}
    prev = c_in
    for s, w in enumerate(widths):
        params[f"proj.s{s}.down.w"] = ad.glorot(rng, (3, 3, prev, w), 9 * prev, 9 * w, dtype)
        params[f"proj.s{s}.down.b"] = np.zeros(w, dtype)
        for k in (1, 2):
            params[f"proj.s{s}.res{k}.w"] = ad.glorot(rng, (3, 3, w, w), 9 * w, 9 * w, dtype)
            params[f"proj.s{s}.res{k}.b"] = np.zeros(w, dtype)
        prev = w
    return params


def projector_cnn(image: Tensor, weights: dict[str, Tensor], stages: int = 3) -> Tensor:
    """``(B, H, W, 3)`` raster to ``(B, H/8, W/8, C)`` features."""
    B, H, W, _ = image.shape
    f = 2 ** stages
    if H % f or W % f:
        raise ad.ShapeError("projector_cnn", f"input {H}x{W} not divisible by {f}")
    x = image
    for s in range(stages):
        x = ad.relu(ad.conv2d(x, weights[f"proj.s{s}.down.w"], weights[f"proj.s{s}.down.b"],
                              stride=2, padding=1))
        y = ad.relu(ad.conv2d(x, weights[f"proj.s{s}.res1.w"], weights[f"proj.s{s}.res1.b"], padding=1))
        y = ad.conv2d(y, weights[f"proj.s{s}.res2.w"], weights[f"proj.s{s}.res2.b"], padding=1)
        x = ad.relu(ad.add(x, y))
    return x


# -- pillar encoder -----------------------------------------------------------

@dataclass
class StackedPillars:
    """Dense ``N_g x N_p x N_c`` point features plus per-pillar occupancy."""

    features: np.ndarray
    counts: np.ndarray
    grid: GridSpec

    @property
    def n_p(self) -> int:
        return self.features.shape[1]


def pillarize(cloud: np.ndarray, grid: GridSpec, n_p: int = 16) -> StackedPillars:
    """Group points into grid pillars, keeping the first ``n_p`` per pillar in input order.

    Per-point components: x, y normalized to the grid extent, z and intensity
    and reflectivity scaled like the projector channels, and the offsets to
    the cell center in units of cell size.
    """
    if n_p < 1:
        raise ValueError("n_p must be >= 1")
    n_g = grid.rows * grid.cols
    feats = np.zeros((n_g, n_p, N_C), dtype=np.float64)
    counts = np.zeros(n_g, dtype=np.int64)
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 5)
    if len(cloud) == 0:
        return StackedPillars(feats, counts, grid)
    row, col = grid.cell_of(cloud[:, 0], cloud[:, 1])
    keep = np.flatnonzero(grid.inside(row, col))
    pid = row[keep] * grid.cols + col[keep]
    # stable sort keeps input order within each pillar
    order = np.argsort(pid, kind="stable")
    pid_sorted = pid[order]
    pts = cloud[keep][order]
    starts = np.searchsorted(pid_sorted, pid_sorted, side="left")
    slot = np.arange(len(pid_sorted)) - starts
    ok = slot < n_p
    pid_ok, slot_ok, pts = pid_sorted[ok], slot[ok], pts[ok]
    cx, cy = grid.cell_center(pid_ok // grid.cols, pid_ok % grid.cols)
    comp = np.column_stack([
        (pts[:, 0] - grid.x0) / (grid.x_max - grid.x0),
        (pts[:, 1] - grid.y0) / (grid.y_max - grid.y0),
        _scale(pts[:, 2], *Z_RANGE),
        _scale(pts[:, 3], *INTENSITY_RANGE),
        _scale(pts[:, 4], *INTENSITY_RANGE),
        (pts[:, 0] - cx) / grid.cell_dx,
        (pts[:, 1] - cy) / grid.cell_dy,
    ])
    feats[pid_ok, slot_ok] = comp
    np.add.at(counts, pid_ok, 1)
    return StackedPillars(feats, counts, grid)


def slot_mask(counts: np.ndarray, n_p: int) -> np.ndarray:
    return (np.arange(n_p)[None, :] < np.asarray(counts)[..., None]).astype(np.float64)


def init_pillar_encoder(rng, c_out: int = 64, dtype=np.float32) -> dict[str, np.ndarray]:
    return {"pillar.w": ad.glorot(rng, (N_C, c_out), N_C, c_out, dtype),
            "pillar.b": np.zeros(c_out, dtype)}


def pillar_encode(features: Tensor, mask: Tensor, rows: int, cols: int,
                  weights: dict[str, Tensor]) -> Tensor:
    """Shared linear + ReLU per point, max over occupied slots, scattered to the grid.

    ``features``: ``(B, N_g, N_p, N_c)``; ``mask``: ``(B, N_g, N_p, 1)`` with 1
    for occupied slots. Masked activations are zeroed before the max, and
    since ReLU output is nonnegative an empty pillar yields the zero vector.
    """
    w = weights["pillar.w"]
    if features.shape[-1] != w.shape[0]:
        raise ad.ShapeError("pillar_encode", f"point components {features.shape[-1]} vs weight {w.shape}")
    h = ad.relu(ad.linear(features, w, weights["pillar.b"]))
    h = ad.mul(h, mask)
    pooled = ad.max_reduce(h, axis=2)
    B = features.shape[0]
    return ad.reshape(pooled, (B, rows, cols, w.shape[1]))
