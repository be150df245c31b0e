"""Procedural indoor scenes and a ray-cast top-down sensor.

Scenes are rooms bounded by walls, optionally split by partitions with door
gaps, and furnished with three object families (chair, table and bed
analogs). Every object is a compound of axis-aligned rectangles in its own
frame, rotated by a multiple of 90 degrees, with all edges snapped to the
scene resolution so rasterization is exact.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import GridSizeError, ParameterError, PreconditionError
from .grid_core import GridMap, MultiLayerMap, Pose, crop_ego

CHAIR, TABLE, BED = 0, 1, 2
CLASS_NAMES = {CHAIR: "chair", TABLE: "table", BED: "bed"}
CLASS_IDS = tuple(CLASS_NAMES)
WALL_HEIGHT = 2.5

# (x0, y0, x1, y1) in metres, object frame, object centre at the origin
Rect = Tuple[float, float, float, float]


@dataclass(frozen=True)
class ObjectTemplate:
    """A parametric footprint family.

    ``scale_range`` holds one (lo, hi) range in metres per free dimension;
    ``parts`` turns sampled dimensions into rectangles in the object frame.
    """

    class_id: int
    scale_range: Tuple[Tuple[float, float], ...]
    part_heights: Tuple[float, ...]
    allowed_rotations: Tuple[float, ...] = (0.0, math.pi / 2, math.pi, -math.pi / 2)

    def parts(self, dims: Sequence[float]) -> List[Rect]:
        if self.class_id == CHAIR:
            seat, back = dims[0], 0.1
            w = seat + 0.2
            # T-shape: seat square below a wider back bar
            return [(-seat / 2, -(seat + back) / 2 + back, seat / 2, (seat + back) / 2),
                    (-w / 2, -(seat + back) / 2, w / 2, -(seat + back) / 2 + back)]
        if self.class_id == TABLE:
            w, d = dims
            return [(-w / 2, -d / 2, w / 2, d / 2)]
        if self.class_id == BED:
            w, length = dims
            head = 0.1
            hw = w + 0.2
            total = length + head
            return [(-w / 2, -total / 2 + head, w / 2, total / 2),
                    (-hw / 2, -total / 2, hw / 2, -total / 2 + head)]
        raise ParameterError(f"unknown class id {self.class_id}")


TEMPLATES: Dict[int, ObjectTemplate] = {
    CHAIR: ObjectTemplate(CHAIR, ((0.4, 0.6),), part_heights=(0.45, 0.9)),
    TABLE: ObjectTemplate(TABLE, ((1.0, 1.6), (0.6, 1.0)), part_heights=(0.75,)),
    BED: ObjectTemplate(BED, ((1.0, 1.4), (1.6, 2.0)), part_heights=(0.55, 1.0)),
}


@dataclass
class SceneObject:
    class_id: int
    x: float
    y: float
    theta: float
    dims: Tuple[float, ...]

    def world_rects(self) -> List[Rect]:
        """Footprint rectangles in world coordinates."""
        c, s = round(math.cos(self.theta)), round(math.sin(self.theta))
        out = []
        for x0, y0, x1, y1 in TEMPLATES[self.class_id].parts(self.dims):
            xs, ys = [], []
            for px, py in ((x0, y0), (x1, y1)):
                xs.append(self.x + px * c - py * s)
                ys.append(self.y + px * s + py * c)
            out.append((min(xs), min(ys), max(xs), max(ys)))
        return out

    def bbox(self) -> Rect:
        rects = self.world_rects()
        return (min(r[0] for r in rects), min(r[1] for r in rects),
                max(r[2] for r in rects), max(r[3] for r in rects))


@dataclass
class SceneSpec:
    """A procedurally generated scene; ``seed`` alone reproduces it."""

    width: float
    height: float
    resolution: float
    walls: List[Tuple[float, float, float, float]]
    objects: List[SceneObject]
    seed: int
    warning: Optional[str] = None

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return int(round(self.height / self.resolution)), int(round(self.width / self.resolution))

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "extent": [self.width, self.height],
            "resolution": self.resolution,
            "walls": [list(w) for w in self.walls],
            "objects": [
                {"class": CLASS_NAMES[o.class_id], "class_id": o.class_id,
                 "pose": [o.x, o.y, o.theta], "scale": list(o.dims)}
                for o in self.objects
            ],
            "warning": self.warning,
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        doc = json.loads(text)
        objects = [SceneObject(int(o["class_id"]), *map(float, o["pose"]), tuple(o["scale"]))
                   for o in doc["objects"]]
        return cls(float(doc["extent"][0]), float(doc["extent"][1]), float(doc["resolution"]),
                   [tuple(w) for w in doc["walls"]], objects, int(doc["seed"]), doc.get("warning"))


@dataclass
class SceneGenConfig:
    extent_min: float = 6.0
    extent_max: float = 9.0
    resolution: float = 0.1
    max_partitions: int = 3
    door_width: float = 1.0
    counts: Dict[str, Tuple[int, int]] = field(
        default_factory=lambda: {"chair": (2, 4), "table": (1, 2), "bed": (1, 1)})
    max_retries: int = 200
    agent_radius: float = 0.3
    max_grid: int = 2001

    def validate(self) -> None:
        if self.extent_min < 4.0 or self.extent_max < self.extent_min:
            raise ParameterError("scene extent must satisfy 4 <= extent_min <= extent_max")
        if self.resolution <= 0:
            raise ParameterError("resolution must be positive")
        for name, (lo, hi) in self.counts.items():
            if name not in CLASS_NAMES.values() or lo < 0 or hi < lo:
                raise ParameterError(f"bad object count range for {name!r}: {(lo, hi)}")


@dataclass
class SensorSpec:
    """Ray-cast sensor.

    ``mode="first_hit"`` is a planar scan: every ray stops at the first
    occupied cell. ``mode="elevated"`` models a camera at
    ``camera_height`` looking over furniture: a cell is seen when its top
    surface is not hidden behind something nearer along the ray, and only
    structures at least as tall as the camera (walls) stop the ray.
    """

    fov: float = 1.57
    max_range: float = 3.0
    ray_count: int = 181
    ego_size: int = 65
    dropout: float = 0.0
    mode: str = "first_hit"
    camera_height: float = 1.25

    def __post_init__(self):
        if self.mode not in ("first_hit", "elevated"):
            raise ParameterError(f"unknown sensor mode {self.mode!r}")
        if not 0 < self.fov <= 2 * math.pi:
            raise ParameterError("fov must be in (0, 2*pi]")
        if self.ray_count < 2:
            raise ParameterError("ray_count must be >= 2")
        if self.ego_size < 1 or self.ego_size % 2 == 0:
            raise ParameterError("ego_size must be odd")
        if self.max_range <= 0:
            raise ParameterError("max_range must be positive")


PAPER_SENSOR = SensorSpec(ego_size=261)


@dataclass
class ObservationStack:
    """Egocentric partial observation; every layer is ego_size x ego_size."""

    seen: np.ndarray
    occ_visible: np.ndarray
    class_visible: Dict[int, np.ndarray]
    pose: Pose

    def channels(self, class_id: int) -> np.ndarray:
        """Network input ``(H, W, 3)``: seen, visible occupancy, visible class."""
        return np.stack([self.seen, self.occ_visible, self.class_visible[class_id]], axis=-1)


# --- generation --------------------------------------------------------------

def _snap(value: float, res: float) -> float:
    return round(round(value / res) * res, 9)


def _wall_segments(width: float, height: float, res: float, rng: np.random.Generator,
                   cfg: SceneGenConfig) -> List[Tuple[float, float, float, float]]:
    half = res / 2
    xs0, ys0, xs1, ys1 = half, half, round(width - half, 9), round(height - half, 9)
    walls = [(xs0, ys0, xs1, ys0), (xs1, ys0, xs1, ys1), (xs1, ys1, xs0, ys1), (xs0, ys1, xs0, ys0)]
    n_part = int(rng.integers(0, cfg.max_partitions + 1))
    lines = []
    used = {"v": [], "h": []}
    for _ in range(n_part):
        vertical = bool(rng.integers(0, 2))
        span = width if vertical else height
        key = "v" if vertical else "h"
        for _try in range(20):
            cand = round(_snap(rng.uniform(1.5, span - 1.5), res) + half, 9)
            if all(abs(cand - p) >= 2.0 for p in used[key]):
                used[key].append(cand)
                lines.append((vertical, cand))
                break
    # every stretch of partition between two crossings gets its own door,
    # so no region is ever sealed off
    for vertical, pos in lines:
        along = height if vertical else width
        lo_end, hi_end = (ys0, ys1) if vertical else (xs0, xs1)
        bounds = [0.0] + sorted(used["h" if vertical else "v"]) + [along]
        margin = 0.5 if len(bounds) == 2 else 0.2
        pieces, start = [], lo_end
        for a, b in zip(bounds[:-1], bounds[1:]):
            door_lo = _snap(rng.uniform(a + margin, b - margin - cfg.door_width), res)
            pieces.append((start, door_lo))
            start = round(door_lo + cfg.door_width, 9)
        pieces.append((start, hi_end))
        for p0, p1 in pieces:
            walls.append((pos, p0, pos, p1) if vertical else (p0, pos, p1, pos))
    return walls


def _sample_object(class_id: int, width: float, height: float, res: float,
                   rng: np.random.Generator) -> SceneObject:
    tmpl = TEMPLATES[class_id]
    dims = tuple(_snap(rng.uniform(lo, hi), res) for lo, hi in tmpl.scale_range)
    theta = float(tmpl.allowed_rotations[int(rng.integers(0, len(tmpl.allowed_rotations)))])
    probe = SceneObject(class_id, 0.0, 0.0, theta, dims)
    bx0, by0, bx1, by1 = probe.bbox()
    # place the bbox corner on a cell boundary so every edge stays snapped
    x0 = _snap(rng.uniform(0.0, max(width - (bx1 - bx0), 0.0)), res)
    y0 = _snap(rng.uniform(0.0, max(height - (by1 - by0), 0.0)), res)
    return SceneObject(class_id, round(x0 - bx0, 9), round(y0 - by0, 9), theta, dims)


def generate_scene(seed: int, cfg: Optional[SceneGenConfig] = None) -> SceneSpec:
    """Build a scene deterministically from ``seed``.

    Objects are placed by rejection sampling; an object that cannot be
    placed within ``cfg.max_retries`` attempts is skipped and recorded in
    ``SceneSpec.warning``.
    """
    cfg = cfg or SceneGenConfig()
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1)))
    res = cfg.resolution
    width = _snap(rng.uniform(cfg.extent_min, cfg.extent_max), res)
    height = _snap(rng.uniform(cfg.extent_min, cfg.extent_max), res)
    if max(width, height) / res > cfg.max_grid:
        raise GridSizeError("scene exceeds maximum grid size")
    walls = _wall_segments(width, height, res, rng, cfg)
    scene = SceneSpec(width, height, res, walls, [], int(seed))

    blocked = _rasterize_walls(scene)
    # one free cell of margin around walls and between objects
    blocked = ndimage.binary_dilation(blocked, structure=np.ones((3, 3), bool))
    skipped = 0
    name_to_id = {v: k for k, v in CLASS_NAMES.items()}
    # large objects first so small ones fill the gaps
    plan = []
    for name in ("bed", "table", "chair"):
        lo, hi = cfg.counts.get(name, (0, 0))
        plan += [name_to_id[name]] * int(rng.integers(lo, hi + 1))
    for class_id in plan:
        placed = False
        for _ in range(cfg.max_retries):
            obj = _sample_object(class_id, width, height, res, rng)
            cells = _rect_cells([obj.bbox()], res, blocked.shape)
            if cells is None or blocked[cells].any():
                continue
            scene.objects.append(obj)
            grown = np.zeros_like(blocked)
            grown[cells] = True
            blocked |= ndimage.binary_dilation(grown, structure=np.ones((3, 3), bool))
            placed = True
            break
        skipped += not placed

    free = ~rasterize(scene).occupancy.values.astype(bool)
    clearance = ndimage.distance_transform_edt(free) * res
    while scene.objects and not (clearance >= cfg.agent_radius).any():
        scene.objects.pop()
        skipped += 1
        free = ~rasterize(scene).occupancy.values.astype(bool)
        clearance = ndimage.distance_transform_edt(free) * res
    if skipped:
        scene.warning = f"{skipped} object(s) could not be placed"
        warnings.warn(f"scene {seed}: {scene.warning}", RuntimeWarning, stacklevel=2)
    return scene


# --- rasterization -----------------------------------------------------------

def _rect_cells(rects: Sequence[Rect], res: float, shape: Tuple[int, int]):
    """Boolean mask of cells whose centres fall inside any rectangle.

    Returns None if a rectangle leaves the grid.
    """
    H, W = shape
    mask = np.zeros(shape, dtype=bool)
    for x0, y0, x1, y1 in rects:
        c0 = math.ceil(round(x0 / res - 0.5, 6))
        c1 = math.ceil(round(x1 / res - 0.5, 6))
        r0 = math.ceil(round(y0 / res - 0.5, 6))
        r1 = math.ceil(round(y1 / res - 0.5, 6))
        if c0 < 0 or r0 < 0 or c1 > W or r1 > H:
            return None
        mask[r0:r1, c0:c1] = True
    return mask


def _rasterize_walls(scene: SceneSpec, resolution: Optional[float] = None) -> np.ndarray:
    res = resolution or scene.resolution
    shape = (int(round(scene.height / res)), int(round(scene.width / res)))
    occ = np.zeros(shape, dtype=bool)
    # walls are one scene cell thick regardless of the output resolution
    thick = max(int(round(scene.resolution / res)), 1)
    for x0, y0, x1, y1 in scene.walls:
        length = math.hypot(x1 - x0, y1 - y0)
        n = max(int(math.ceil(length / (res / 4))), 1)
        t = np.linspace(0.0, 1.0, n + 1)
        px, py = x0 + t * (x1 - x0), y0 + t * (y1 - y0)
        rows = np.floor(py / res + 1e-9).astype(int)
        cols = np.floor(px / res + 1e-9).astype(int)
        if thick > 1:
            rows = (rows // thick) * thick
            cols = (cols // thick) * thick
        for dr in range(thick):
            for dc in range(thick):
                rr, cc = rows + dr, cols + dc
                ok = (rr >= 0) & (rr < shape[0]) & (cc >= 0) & (cc < shape[1])
                occ[rr[ok], cc[ok]] = True
    return occ


@dataclass
class SceneRaster:
    """Rasterized scene layers plus per-cell object indices."""

    layers: MultiLayerMap
    walls: np.ndarray
    footprints: Dict[int, np.ndarray]
    bboxes: Dict[int, np.ndarray]
    object_index: np.ndarray  # -1 where no object
    class_index: np.ndarray   # -1 where no object
    heights: np.ndarray       # metres; walls at WALL_HEIGHT


def rasterize_full(scene: SceneSpec, resolution: Optional[float] = None,
                   max_grid: int = 2001) -> SceneRaster:
    res = resolution or scene.resolution
    shape = (int(round(scene.height / res)), int(round(scene.width / res)))
    if max(shape) > max_grid:
        raise GridSizeError(f"grid {shape} exceeds the {max_grid} cell limit")
    if res <= 0:
        raise ParameterError("resolution must be positive")
    walls = _rasterize_walls(scene, res)
    footprints = {k: np.zeros(shape, bool) for k in CLASS_IDS}
    bboxes = {k: np.zeros(shape, bool) for k in CLASS_IDS}
    object_index = np.full(shape, -1, dtype=np.int32)
    class_index = np.full(shape, -1, dtype=np.int8)
    heights = np.where(walls, WALL_HEIGHT, 0.0)
    for i, obj in enumerate(scene.objects):
        rects = obj.world_rects()
        fp = _rect_cells(rects, res, shape)
        bb = _rect_cells([obj.bbox()], res, shape)
        if fp is None or bb is None:
            raise PreconditionError(f"object {i} leaves the scene extent")
        for rect, h in zip(rects, TEMPLATES[obj.class_id].part_heights):
            part = _rect_cells([rect], res, shape)
            heights[part] = np.maximum(heights[part], h)
        footprints[obj.class_id] |= fp
        bboxes[obj.class_id] |= bb
        object_index[fp] = i
        class_index[fp] = obj.class_id
    occ = walls.copy()
    for fp in footprints.values():
        occ |= fp
    layers = MultiLayerMap(
        GridMap(occ.astype(np.float32), res),
        GridMap.zeros(*shape, res),
        {k: GridMap(footprints[k].astype(np.float32), res) for k in CLASS_IDS},
    )
    return SceneRaster(layers, walls, footprints, bboxes, object_index, class_index, heights)


def rasterize(scene: SceneSpec, resolution: Optional[float] = None, max_grid: int = 2001) -> MultiLayerMap:
    """Occupancy plus per-class footprint layers (``seen`` is left empty)."""
    return rasterize_full(scene, resolution, max_grid).layers


def valid_viewpoint_mask(raster: SceneRaster, agent_radius: float = 0.3) -> np.ndarray:
    """Free cells with at least ``agent_radius`` clearance to any obstacle."""
    free = raster.layers.occupancy.values < 0.5
    clearance = ndimage.distance_transform_edt(free) * raster.layers.resolution
    return free & (clearance >= agent_radius)


# --- sensing -----------------------------------------------------------------

@dataclass
class WorldView:
    """Ray-cast result in the global frame."""

    seen: np.ndarray
    occ_visible: np.ndarray
    hit_class: np.ndarray  # class id of first-hit object cells, -1 elsewhere


def cast_rays(raster: SceneRaster, pose: Pose, sensor: SensorSpec,
              rng: Optional[np.random.Generator] = None) -> WorldView:
    """March ``sensor.ray_count`` rays in steps of resolution/3.

    Free cells along a ray are marked seen; the first occupied cell is seen
    and visible, after which the ray stops. Rays leaving the map stop
    without a hit.
    """
    occ = raster.layers.occupancy.values > 0.5
    res = raster.layers.resolution
    H, W = occ.shape
    pr, pc = pose.cell(res)
    if not (0 <= pr < H and 0 <= pc < W) or occ[pr, pc]:
        raise PreconditionError(f"pose ({pose.x:.2f}, {pose.y:.2f}) is not in free space")

    if sensor.fov >= 2 * math.pi - 1e-12:
        rel = np.linspace(-math.pi, math.pi, sensor.ray_count, endpoint=False)
    else:
        rel = np.linspace(-sensor.fov / 2, sensor.fov / 2, sensor.ray_count)
    angles = pose.theta + rel
    step = res / 3.0
    n_steps = int(math.floor(sensor.max_range / step))
    ts = np.arange(n_steps + 1) * step
    px = pose.x + np.sin(angles)[:, None] * ts[None, :]
    py = pose.y - np.cos(angles)[:, None] * ts[None, :]
    rows = np.floor(py / res).astype(np.int64)
    cols = np.floor(px / res).astype(np.int64)
    inside = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
    rr, cc = np.where(inside, rows, 0), np.where(inside, cols, 0)
    if sensor.mode == "first_hit":
        blocked = np.where(inside, occ[rr, cc], False)
    else:
        blocked = np.where(inside, raster.heights[rr, cc] >= sensor.camera_height, False)
    stop = ~inside | blocked
    any_stop = stop.any(axis=1)
    first = np.where(any_stop, stop.argmax(axis=1), n_steps + 1)
    hit = any_stop & blocked[np.arange(len(angles)), np.minimum(first, n_steps)]
    if sensor.dropout > 0:
        rng = rng or np.random.default_rng(0)
        hit &= rng.random(len(angles)) >= sensor.dropout

    idx = np.arange(n_steps + 1)[None, :]
    seen_mask = inside & (idx <= first[:, None])
    if sensor.mode == "elevated":
        # a sample is visible if its elevation angle from the camera is not
        # below that of any nearer sample on the same ray
        h = np.where(inside, raster.heights[rr, cc], 0.0)
        with np.errstate(divide="ignore"):
            elev = np.where(ts[None, :] > 0, (h - sensor.camera_height) / ts[None, :], -np.inf)
        prev = np.concatenate([np.full((len(angles), 1), -np.inf),
                               np.maximum.accumulate(elev, axis=1)[:, :-1]], axis=1)
        seen_mask &= elev >= prev - 1e-12
    seen = np.zeros((H, W), dtype=bool)
    seen[rows[seen_mask], cols[seen_mask]] = True
    occ_vis = np.zeros((H, W), dtype=bool)
    hr = rows[hit, first[hit]]
    hc = cols[hit, first[hit]]
    occ_vis[hr, hc] = True
    if sensor.mode == "elevated":
        occ_vis |= seen & occ
        hr, hc = np.nonzero(occ_vis)
    hit_class = np.full((H, W), -1, dtype=np.int8)
    hit_class[hr, hc] = raster.class_index[hr, hc]
    return WorldView(seen, occ_vis, hit_class)


def observe(scene_or_raster, pose: Pose, sensor: Optional[SensorSpec] = None,
            rng: Optional[np.random.Generator] = None) -> ObservationStack:
    """Ray-cast an observation and express it in the agent frame."""
    sensor = sensor or SensorSpec()
    raster = scene_or_raster if isinstance(scene_or_raster, SceneRaster) else rasterize_full(scene_or_raster)
    view = cast_rays(raster, pose, sensor, rng)
    res = raster.layers.resolution
    size = sensor.ego_size

    def ego(layer):
        return crop_ego(layer.astype(np.float32), pose, size, res)

    return ObservationStack(
        seen=ego(view.seen),
        occ_visible=ego(view.occ_visible),
        class_visible={k: ego(view.hit_class == k) for k in CLASS_IDS},
        pose=pose,
    )


def scene_config_dict(cfg: SceneGenConfig) -> dict:
    return asdict(cfg)
