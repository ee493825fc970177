"""Synthetic Lidar lane frames: geometry, point sampling, label rasters, condition tags, I/O."""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import make_rng
from .bev import GridSpec

MAX_LANES = 6
SLOT_OFFSETS = (6.5, 3.9, 1.3, -1.3, -3.9, -6.5)  # class 1 is the leftmost slot
SHARP_RADIUS = 160.0
GROUND_Z = -1.7
VEHICLE_LENGTH = 4.5
VEHICLE_WIDTH = 1.9
MARK_DENSITY = 12.0  # points per metre of lane at the sensor
FALLOFF_RANGE = 12.0  # density halves at this range
OCCLUDER_X = (7.0, 13.0)  # longitudinal range of occluding vehicle centres

TAGS = ("urban", "highway", "night", "daytime", "normal", "gentle-curve", "sharp-curve",
        "merging", "occlusion-0", "occlusion-1", "occlusion-2", "occlusion-3", "occlusion-4-6")
OCCLUSION_TAGS = TAGS[8:]

FRAME_MAGIC = b"KLNF1"
_HEADER = struct.Struct("<IIddddIIQH")


class FrameFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LaneSpec:
    """A lane line as a function ``y(x)`` over ``[x_start, x_end]``.

    ``kind`` is ``line`` (params: offset, heading rad), ``arc`` (params:
    center_x, center_y, radius, side) or ``polyline`` (params: flat x, y
    vertex list, x strictly increasing).
    """

    class_id: int
    kind: str
    params: tuple
    x_start: float = 0.0
    x_end: float = 1e9
    width: float = 0.16

    def __post_init__(self):
        if not 1 <= self.class_id <= MAX_LANES:
            raise ValueError(f"class_id {self.class_id} outside 1..{MAX_LANES}")
        if self.width <= 0:
            raise ValueError("lane width must be positive")
        if self.kind == "arc" and self.params[2] <= 0:
            raise ValueError("arc radius must be positive")
        if self.kind not in ("line", "arc", "polyline"):
            raise ValueError(f"unknown lane kind {self.kind!r}")

    def span(self, x_lo: float, x_hi: float) -> tuple[float, float]:
        lo, hi = max(self.x_start, x_lo), min(self.x_end, x_hi)
        if self.kind == "arc":
            cx, _, r, _ = self.params
            lo, hi = max(lo, cx - r), min(hi, cx + r)
        elif self.kind == "polyline":
            xs = self.params[0::2]
            lo, hi = max(lo, xs[0]), min(hi, xs[-1])
        return lo, hi

    def y_at(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "line":
            offset, heading = self.params
            return offset + np.tan(heading) * x
        if self.kind == "arc":
            cx, cy, r, side = self.params
            return cy - side * np.sqrt(np.maximum(r * r - (x - cx) ** 2, 0.0))
        xs, ys = self.params[0::2], self.params[1::2]
        return np.interp(x, xs, ys)


@dataclass
class SceneConfig:
    lane_count: int = 4
    radius: Optional[float] = None  # None means straight
    curve_left: bool = True
    merge: bool = False
    occluded: int = 0
    noise: float = 0.2  # >= 0.5 is the night proxy
    points: int = 8192
    lane_width: float = 0.16
    lane_offsets: Optional[tuple] = None

    def validate(self) -> None:
        if not 0 <= self.lane_count <= MAX_LANES:
            raise ValueError(f"lane count {self.lane_count} exceeds {MAX_LANES}")
        if self.lane_offsets is not None and len(self.lane_offsets) != self.lane_count:
            raise ValueError("lane_offsets length must equal lane_count")
        if not 0 <= self.occluded <= self.lane_count:
            raise ValueError(f"occluded count {self.occluded} exceeds lane count {self.lane_count}")
        if self.radius is not None and self.radius <= 0:
            raise ValueError("curve radius must be positive")
        if self.merge and self.lane_count < 2:
            raise ValueError("merging needs at least two lanes")
        if self.points < 0:
            raise ValueError("points must be nonnegative")

    @property
    def night(self) -> bool:
        return self.noise >= 0.5

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SceneConfig":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            if key not in types:
                raise FrameFormatError(f"unknown config key {key!r}")
            if raw == "None":
                kw[key] = None
            elif key in ("lane_count", "occluded", "points"):
                kw[key] = int(raw)
            elif key in ("curve_left", "merge"):
                kw[key] = raw == "True"
            elif key == "lane_offsets":
                kw[key] = tuple(float(x) for x in raw.split(",")) if raw else ()
            else:
                kw[key] = float(raw)
        return cls(**kw)


@dataclass
class Frame:
    cloud: np.ndarray  # (N, 5) float32
    label: np.ndarray  # (rows, cols) uint8 class ids
    tags: frozenset
    seed: int
    config: SceneConfig = field(default_factory=SceneConfig)
    grid: GridSpec = field(default_factory=GridSpec)


# -- conditions ----------------------------------------------------------------

def occlusion_tag(count: int) -> str:
    return OCCLUSION_TAGS[min(count, 4)]


def annotate_conditions(config: SceneConfig) -> frozenset:
    tags = {"highway" if config.lane_count >= 4 else "urban",
            "night" if config.night else "daytime",
            occlusion_tag(config.occluded)}
    if config.radius is not None:
        tags.add("gentle-curve" if config.radius > SHARP_RADIUS else "sharp-curve")
    elif not config.merge:
        tags.add("normal")
    if config.merge:
        tags.add("merging")
    return frozenset(tags)


def tags_to_mask(tags) -> int:
    return sum(1 << i for i, t in enumerate(TAGS) if t in tags)


def mask_to_tags(mask: int) -> frozenset:
    return frozenset(t for i, t in enumerate(TAGS) if mask >> i & 1)


# -- rasterization -------------------------------------------------------------

def bresenham(r0: int, c0: int, r1: int, c1: int) -> list[tuple[int, int]]:
    """Integer cells on the segment between two cells, endpoints included."""
    cells = []
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr = 1 if r1 >= r0 else -1
    sc = 1 if c1 >= c0 else -1
    err = dc - dr
    r, c = r0, c0
    while True:
        cells.append((r, c))
        if r == r1 and c == c1:
            return cells
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr


def lane_cells(lane: LaneSpec, grid: GridSpec) -> list[tuple[int, int]]:
    """Cells traced by one lane: samples at column centres joined by Bresenham segments."""
    lo, hi = lane.span(grid.x0, grid.x_max)
    if hi < lo:
        return []
    c_lo, c_hi = max(int(np.floor((lo - grid.x0) / grid.cell_dx)), 0), \
        min(int(np.floor((hi - grid.x0) / grid.cell_dx)), grid.cols - 1)
    cols = np.arange(c_lo, c_hi + 1)
    if len(cols) == 0:
        return []
    xs = grid.x0 + (cols + 0.5) * grid.cell_dx
    xs = np.clip(xs, lo, hi)
    rows = np.floor((lane.y_at(xs) - grid.y0) / grid.cell_dy).astype(np.int64)
    cells = [(int(rows[0]), int(cols[0]))]
    for k in range(1, len(cols)):
        cells.extend(bresenham(int(rows[k - 1]), int(cols[k - 1]), int(rows[k]), int(cols[k]))[1:])
    return [(r, c) for r, c in cells if 0 <= r < grid.rows and 0 <= c < grid.cols]


def rasterize_label(lanes: Sequence[LaneSpec], grid: GridSpec) -> np.ndarray:
    """One-cell-wide class raster; lower class ids win at collisions."""
    label = np.zeros(grid.shape, dtype=np.uint8)
    for lane in sorted(lanes, key=lambda l: l.class_id):
        for r, c in lane_cells(lane, grid):
            if label[r, c] == 0:
                label[r, c] = lane.class_id
    return label


# -- scene construction --------------------------------------------------------

def _lane_slots(config: SceneConfig, rng) -> list[tuple[int, float]]:
    if config.lane_offsets is not None:
        return [(k + 1, float(o)) for k, o in enumerate(config.lane_offsets)]
    n = config.lane_count
    first = (MAX_LANES - n) // 2
    if (MAX_LANES - n) % 2 and rng.random() < 0.5:
        first += 1
    shift = rng.uniform(-0.4, 0.4)
    return [(first + k + 1, SLOT_OFFSETS[first + k] + shift) for k in range(n)]


def build_lanes(config: SceneConfig, rng, x_max: float) -> list[LaneSpec]:
    slots = _lane_slots(config, rng)
    explicit = config.lane_offsets is not None
    heading = 0.0 if explicit else rng.uniform(-0.015, 0.015)
    lanes = []
    for cid, off in slots:
        if config.radius is not None:
            side = 1.0 if config.curve_left else -1.0
            cy = side * config.radius
            lanes.append(LaneSpec(cid, "arc", (0.0, cy, abs(cy - off), side), width=config.lane_width))
        else:
            lanes.append(LaneSpec(cid, "line", (off, heading), width=config.lane_width))
    if config.merge and len(lanes) >= 2:
        outer_left = rng.random() < 0.5
        k, j = (0, 1) if outer_left else (len(lanes) - 1, len(lanes) - 2)
        y_out = slots[k][1]
        y_in = slots[j][1]
        a = rng.uniform(0.2, 0.4) * x_max
        b = a + rng.uniform(0.3, 0.45) * x_max
        if rng.random() < 0.5:  # converging
            pts = (0.0, y_out, a, y_out, b, y_in + np.tan(heading) * b)
        else:  # diverging
            pts = (a, y_in + np.tan(heading) * a, b, y_out, x_max + 1.0, y_out)
        lanes[k] = LaneSpec(lanes[k].class_id, "polyline", tuple(float(p) for p in pts),
                            width=config.lane_width)
    return lanes


def range_keep(xy: np.ndarray, rng) -> np.ndarray:
    """Thinning mask for scan-ring sparsity: keep probability ``1 / (1 + (r / R)^2)``."""
    r2 = (xy[:, 0] ** 2 + xy[:, 1] ** 2) / FALLOFF_RANGE ** 2
    return rng.random(len(xy)) < 1.0 / (1.0 + r2)


def _sample_marks(lane: LaneSpec, grid: GridSpec, rng) -> np.ndarray:
    lo, hi = lane.span(grid.x0 - 1.0, grid.x_max + 1.0)
    if hi <= lo:
        return np.zeros((0, 2))
    n = int(MARK_DENSITY * (hi - lo))
    xs = rng.uniform(lo, hi, n)
    xs = xs[range_keep(np.column_stack([xs, lane.y_at(xs)]), rng)]
    n = len(xs)
    ys = lane.y_at(xs) + rng.uniform(-lane.width / 2, lane.width / 2, n)
    return np.column_stack([xs, ys])


def _with_attributes(xy: np.ndarray, rng, i_mean: float, r_mean: float, z_sd: float = 0.02,
                     z=None) -> np.ndarray:
    n = len(xy)
    zs = GROUND_Z + rng.normal(0.0, z_sd, n) if z is None else z
    inten = np.clip(rng.normal(i_mean, 15.0, n), 0, 255)
    refl = np.clip(rng.normal(r_mean, 15.0, n), 0, 255)
    return np.column_stack([xy, zs, inten, refl])


def _shadowed(xy: np.ndarray, box_x: float, box_y: float) -> np.ndarray:
    """Inside a vehicle footprint or in its line-of-sight shadow from the sensor origin."""
    hx, hy = VEHICLE_LENGTH / 2, VEHICLE_WIDTH / 2
    corners = np.array([[box_x - hx, box_y - hy], [box_x - hx, box_y + hy],
                        [box_x + hx, box_y - hy], [box_x + hx, box_y + hy]])
    ang = np.arctan2(corners[:, 1], corners[:, 0])
    pa = np.arctan2(xy[:, 1], xy[:, 0])
    return (pa >= ang.min()) & (pa <= ang.max()) & (xy[:, 0] >= box_x - hx)


def generate_frame(config: SceneConfig, seed: int, grid: Optional[GridSpec] = None,
                   return_debug: bool = False):
    """Build a frame deterministically from ``(config, seed)``."""
    config.validate()
    grid = grid or GridSpec()
    rng = make_rng(seed)
    lanes = build_lanes(config, rng, grid.x_max)
    label = rasterize_label(lanes, grid)

    marks = [_sample_marks(l, grid, rng) for l in lanes]
    mark_owner = np.concatenate([np.full(len(m), l.class_id) for m, l in zip(marks, lanes)]) \
        if lanes else np.zeros(0, dtype=np.int64)
    mark_xy = np.concatenate(marks) if marks else np.zeros((0, 2))
    mark_pts = _with_attributes(mark_xy, rng, 200.0, 180.0)

    extra = []
    if config.night:
        r = rng.uniform(1.5, 3.0)
        cx = rng.uniform(grid.x0 + 3.0, grid.x_max - 3.0)
        cy = rng.uniform(grid.y0 + 2.0, grid.y_max - 2.0)
        n = 320
        rad = r * np.sqrt(rng.random(n))
        th = rng.uniform(0, 2 * np.pi, n)
        disk = np.column_stack([cx + rad * np.cos(th), cy + rad * np.sin(th)])
        extra.append(_with_attributes(disk, rng, 215.0, 120.0))

    n_clutter = max(config.points - len(mark_pts) - sum(len(e) for e in extra), 0)
    margin = 1.0
    cand = np.column_stack([rng.uniform(grid.x0 - margin, grid.x_max + margin, 4 * n_clutter),
                            rng.uniform(grid.y0 - margin, grid.y_max + margin, 4 * n_clutter)])
    cxy = cand[range_keep(cand, rng)][:n_clutter]
    n_clutter = len(cxy)
    clutter = _with_attributes(cxy, rng, 40.0, 30.0)
    speckle = rng.random(n_clutter) < 0.02 * config.noise
    clutter[speckle, 3] = rng.uniform(0, 255, int(speckle.sum()))

    occluded_ids = sorted(rng.choice([l.class_id for l in lanes], size=config.occluded,
                                     replace=False).tolist()) if config.occluded else []
    boxes = []
    for cid in occluded_ids:
        lane = next(l for l in lanes if l.class_id == cid)
        lo, hi = lane.span(grid.x0, grid.x_max)
        bx = rng.uniform(max(OCCLUDER_X[0], lo + 2.0), max(min(OCCLUDER_X[1], hi - 2.0), max(OCCLUDER_X[0], lo + 2.0)))
        boxes.append((bx, float(lane.y_at(bx))))

    keep_marks = np.ones(len(mark_pts), dtype=bool)
    body = []
    for bx, by in boxes:
        keep_marks &= ~_shadowed(mark_pts[:, :2], bx, by)
        clutter = clutter[~_shadowed(clutter[:, :2], bx, by)]
        extra = [e[~_shadowed(e[:, :2], bx, by)] for e in extra]
        nb = 80
        sxy = np.column_stack([bx + rng.uniform(-VEHICLE_LENGTH / 2, VEHICLE_LENGTH / 2, nb),
                               by + rng.uniform(-VEHICLE_WIDTH / 2, VEHICLE_WIDTH / 2, nb)])
        body.append(_with_attributes(sxy, rng, 70.0, 60.0, z=rng.uniform(-1.5, 0.0, nb)))
        # retroreflective lamps on the face toward the sensor
        for side in (-0.7, 0.7):
            lamp = np.column_stack([np.full(10, bx - VEHICLE_LENGTH / 2) + rng.uniform(0, 0.1, 10),
                                    by + side + rng.uniform(-0.15, 0.15, 10)])
            body.append(_with_attributes(lamp, rng, 235.0, 220.0, z=rng.uniform(-1.0, -0.7, 10)))

    cloud = np.concatenate([mark_pts[keep_marks], clutter, *extra, *body])
    cloud = cloud[rng.permutation(len(cloud))].astype(np.float32)
    frame = Frame(cloud, label, annotate_conditions(config), int(seed), config, grid)
    if return_debug:
        return frame, {"lanes": lanes, "mark_owner": mark_owner, "mark_kept": keep_marks,
                       "boxes": boxes, "occluded_ids": occluded_ids}
    return frame


# -- dataset schedule ----------------------------------------------------------

PROFILES = ("default", "clean-straight")


def scheduled_config(index: int, seed: int, profile: str = "default", points: int = 8192) -> SceneConfig:
    """Round-robin condition schedule for dataset generation."""
    if profile not in PROFILES:
        raise ValueError(f"unknown scene profile {profile!r}")
    rng = make_rng((seed * 0x9E3779B97F4A7C15 + index) & (2 ** 64 - 1))
    if profile == "clean-straight":
        return SceneConfig(lane_count=int(rng.integers(2, 5)), noise=float(rng.uniform(0.0, 0.3)),
                           points=points)
    bucket = index % 5
    if bucket == 4:
        lanes = int(rng.integers(4, 7))
        occ = int(rng.integers(4, lanes + 1))
    else:
        lanes = int(rng.integers(max(2, bucket), 7))
        occ = bucket
    shape = ("normal", "normal", "gentle", "sharp", "merge")[int(rng.integers(0, 5))]
    radius = None
    if shape == "gentle":
        radius = float(rng.uniform(200.0, 800.0))
    elif shape == "sharp":
        radius = float(rng.uniform(70.0, 150.0))
    noise = float(rng.uniform(0.5, 1.0) if rng.random() < 0.5 else rng.uniform(0.0, 0.45))
    return SceneConfig(lane_count=lanes, radius=radius, curve_left=bool(rng.random() < 0.5),
                       merge=shape == "merge", occluded=occ, noise=noise, points=points)


def frame_seed(seed: int, index: int) -> int:
    """Per-frame seed; consecutive frames alternate parity, which splits train/test."""
    return (seed << 24) + index


def make_frames(n: int, seed: int, profile: str = "default", points: int = 8192,
                grid: Optional[GridSpec] = None) -> list[Frame]:
    return [generate_frame(scheduled_config(i, seed, profile, points), frame_seed(seed, i), grid)
            for i in range(n)]


# -- file format ---------------------------------------------------------------

def write_frame(frame: Frame, path) -> None:
    g = frame.grid
    blob = frame.config.to_text().encode()
    cloud = np.ascontiguousarray(frame.cloud, dtype="<f4").reshape(-1, 5)
    label = np.ascontiguousarray(frame.label, dtype=np.uint8)
    if label.shape != g.shape:
        raise ValueError(f"label shape {label.shape} does not match grid {g.shape}")
    header = _HEADER.pack(g.rows, g.cols, g.cell_dx, g.cell_dy, g.x0, g.y0, len(cloud), len(blob),
                          frame.seed, tags_to_mask(frame.tags))
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC + header + blob + cloud.tobytes() + label.tobytes())


def read_frame(path) -> Frame:
    raw = Path(path).read_bytes()
    magic = raw[:len(FRAME_MAGIC)]
    if magic != FRAME_MAGIC:
        raise FrameFormatError(f"bad frame magic {magic!r} in {path}")
    pos = len(FRAME_MAGIC)
    if len(raw) < pos + _HEADER.size:
        raise FrameFormatError(f"truncated header in {path}")
    rows, cols, dx, dy, x0, y0, n_pts, n_blob, seed, mask = _HEADER.unpack_from(raw, pos)
    pos += _HEADER.size
    need = pos + n_blob + 20 * n_pts + rows * cols
    if len(raw) != need:
        raise FrameFormatError(f"{path}: expected {need} bytes, found {len(raw)}")
    config = SceneConfig.from_text(raw[pos:pos + n_blob].decode())
    pos += n_blob
    cloud = np.frombuffer(raw, dtype="<f4", count=5 * n_pts, offset=pos).reshape(n_pts, 5).astype(np.float32)
    pos += 20 * n_pts
    label = np.frombuffer(raw, dtype=np.uint8, count=rows * cols, offset=pos).reshape(rows, cols).copy()
    return Frame(cloud, label, mask_to_tags(mask), seed, config, GridSpec(rows, cols, dx, dy, x0, y0))


def write_manifest(entries: Sequence[tuple[str, str]], path) -> None:
    Path(path).write_text("".join(f"{p} {s}\n" for p, s in entries))


def read_manifest(path) -> list[tuple[str, str]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            p, s = line.rsplit(" ", 1)
            if s not in ("train", "test"):
                raise FrameFormatError(f"bad split tag {s!r} in manifest")
            out.append((p, s))
    return out


def frame_dict(frame: Frame) -> dict:
    return {"seed": frame.seed, "tags": sorted(frame.tags), "config": asdict(frame.config)}
