"""Metric 2D grids, binary morphology and ego/global frame transforms.

Frame conventions used throughout the package:

* A grid is a ``(height, width)`` array. Row index grows with the world
  ``y`` coordinate, column index with ``x``. Cell ``(r, c)`` covers
  ``[c*res, (c+1)*res) x [r*res, (r+1)*res)``.
* An egocentric grid is square with odd side ``S``; the agent sits on the
  centre cell ``h = (S - 1) // 2`` facing towards row 0 ("up").
* A pose ``theta`` rotates ego offsets ``(dx, dy) = (col - h, row - h)``
  into global offsets with the ordinary rotation matrix, so ``theta = 0``
  maps an ego window onto the global grid without rotation and the agent's
  heading in world coordinates is ``(sin theta, -cos theta)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
from scipy import ndimage

from .errors import DimensionError, ParameterError

IMGM_MAGIC = b"IMGM"


def normalize_angle(theta: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    wrapped = (theta + math.pi) % (2.0 * math.pi) - math.pi
    # float modulo can land exactly on +pi for inputs just below -pi
    if wrapped >= math.pi:
        wrapped -= 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class Pose:
    """Agent pose in world metres; ``theta`` is normalized on construction."""

    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    def cell(self, resolution: float) -> Tuple[int, int]:
        """Return the ``(row, col)`` of the cell containing the pose."""
        return int(math.floor(self.y / resolution)), int(math.floor(self.x / resolution))


@dataclass
class GridMap:
    """Grid of per-cell values in [0, 1] at a fixed metric resolution."""

    values: np.ndarray
    resolution: float

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.size == 0:
            raise DimensionError(f"GridMap needs a non-empty 2D array, got shape {self.values.shape}")
        if not self.resolution > 0:
            raise ParameterError(f"resolution must be positive, got {self.resolution}")
        if self.values.dtype == bool:
            self.values = self.values.astype(np.float32)
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ParameterError("GridMap values must lie in [0, 1]")

    @classmethod
    def zeros(cls, height: int, width: int, resolution: float, dtype=np.float32) -> "GridMap":
        return cls(np.zeros((height, width), dtype=dtype), resolution)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def copy(self) -> "GridMap":
        return GridMap(self.values.copy(), self.resolution)


@dataclass
class MultiLayerMap:
    """Occupancy, seen-area and per-class semantic layers on one grid."""

    occupancy: GridMap
    seen: GridMap
    class_layers: Dict[int, GridMap] = field(default_factory=dict)

    def __post_init__(self):
        ref = (self.occupancy.shape, self.occupancy.resolution)
        for layer in [self.seen, *self.class_layers.values()]:
            if (layer.shape, layer.resolution) != ref:
                raise DimensionError("all layers of a MultiLayerMap must share shape and resolution")

    @classmethod
    def empty(cls, height: int, width: int, resolution: float, class_ids) -> "MultiLayerMap":
        return cls(
            GridMap.zeros(height, width, resolution),
            GridMap.zeros(height, width, resolution),
            {int(k): GridMap.zeros(height, width, resolution) for k in class_ids},
        )

    @property
    def shape(self) -> Tuple[int, int]:
        return self.occupancy.shape

    @property
    def resolution(self) -> float:
        return self.occupancy.resolution


def _check_same_shape(*arrays: np.ndarray) -> None:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise DimensionError(f"shape mismatch: {sorted(shapes)}")


def _as_array(grid) -> np.ndarray:
    return grid.values if isinstance(grid, GridMap) else np.asarray(grid)


def odd_kernel(size: int) -> int:
    """Round a kernel size up to the next odd integer (30 -> 31)."""
    size = int(size)
    return size if size % 2 == 1 else size + 1


def dilate(mask: np.ndarray, kernel_size: int) -> np.ndarray:
    """Square binary dilation with a ``kernel_size`` x ``kernel_size`` window.

    Cells outside the grid count as false, and the output has the shape of
    the input.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ParameterError(f"kernel_size must be odd and >= 1, got {kernel_size}")
    mask = np.asarray(_as_array(mask), dtype=bool)
    if kernel_size == 1 or not mask.any():
        return mask.copy()
    out = ndimage.maximum_filter(mask.view(np.uint8), size=kernel_size, mode="constant", cval=0)
    return out.astype(bool)


def intersect3(a, b, c, threshold: float = 0.5) -> np.ndarray:
    """Cells where all three layers exceed ``threshold``."""
    a, b, c = _as_array(a), _as_array(b), _as_array(c)
    _check_same_shape(a, b, c)
    return (a > threshold) & (b > threshold) & (c > threshold)


def _ego_offsets(size: int) -> Tuple[np.ndarray, np.ndarray]:
    h = (size - 1) // 2
    dy, dx = np.mgrid[-h:h + 1, -h:h + 1]
    return dx, dy


def _rotate(dx: np.ndarray, dy: np.ndarray, theta: float) -> Tuple[np.ndarray, np.ndarray]:
    c, s = math.cos(theta), math.sin(theta)
    return dx * c - dy * s, dx * s + dy * c


def ego_to_global_cells(size: int, pose: Pose, resolution: float) -> Tuple[np.ndarray, np.ndarray]:
    """Global ``(rows, cols)`` that each ego cell maps to (nearest neighbour)."""
    pr, pc = pose.cell(resolution)
    dx, dy = _ego_offsets(size)
    gx, gy = _rotate(dx, dy, pose.theta)
    return pr + np.rint(gy).astype(np.int64), pc + np.rint(gx).astype(np.int64)


def register_ego(global_map: GridMap, ego, pose: Pose, aggregation: float) -> int:
    """Merge an egocentric grid into ``global_map`` in place.

    Every global cell whose inverse-rotated position rounds into the ego
    window is touched and updated as ``g <- max(aggregation * g, v)``.
    Pulling values through the inverse transform leaves no holes at
    oblique angles and is an exact inverse of :func:`crop_ego` at right
    angles.

    Returns the number of ego cells that fall outside the global grid.
    """
    ego = _as_array(ego)
    size = ego.shape[0]
    if ego.ndim != 2 or ego.shape[1] != size or size % 2 == 0:
        raise DimensionError(f"ego grid must be square with odd side, got {ego.shape}")
    if not 0.0 <= aggregation <= 1.0:
        raise ParameterError(f"aggregation must be in [0, 1], got {aggregation}")
    res = global_map.resolution
    H, W = global_map.shape

    rows, cols = ego_to_global_cells(size, pose, res)
    dropped = int(np.count_nonzero((rows < 0) | (rows >= H) | (cols < 0) | (cols >= W)))

    h = (size - 1) // 2
    pr, pc = pose.cell(res)
    reach = int(math.ceil(h * math.sqrt(2.0))) + 1
    r0, r1 = max(pr - reach, 0), min(pr + reach + 1, H)
    c0, c1 = max(pc - reach, 0), min(pc + reach + 1, W)
    if r0 >= r1 or c0 >= c1:
        return dropped
    gy, gx = np.mgrid[r0 - pr:r1 - pr, c0 - pc:c1 - pc]
    ex, ey = _rotate(gx, gy, -pose.theta)
    ej = np.rint(ex).astype(np.int64) + h
    ei = np.rint(ey).astype(np.int64) + h
    inside = (ei >= 0) & (ei < size) & (ej >= 0) & (ej < size)
    if not inside.any():
        return dropped
    window = global_map.values[r0:r1, c0:c1]
    incoming = ego[ei[inside], ej[inside]].astype(window.dtype)
    window[inside] = np.maximum(aggregation * window[inside], incoming)
    return dropped


def crop_ego(global_map, pose: Pose, size: int, resolution: float | None = None) -> np.ndarray:
    """Extract the ``size`` x ``size`` agent-frame window around ``pose``.

    ``global_map`` may be a :class:`GridMap` or a bare array, in which case
    ``resolution`` is required. Cells whose source lies off the map read 0.
    """
    if size < 1 or size % 2 == 0:
        raise ParameterError(f"ego size must be odd, got {size}")
    if isinstance(global_map, GridMap):
        values, res = global_map.values, global_map.resolution
    else:
        if resolution is None:
            raise ParameterError("resolution is required when cropping a bare array")
        values, res = np.asarray(global_map), resolution
    H, W = values.shape
    rows, cols = ego_to_global_cells(size, pose, res)
    inside = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
    out = np.zeros((size, size), dtype=values.dtype)
    out[inside] = values[rows[inside], cols[inside]]
    return out


def merge_max(maps) -> MultiLayerMap:
    """Per-cell maximum of several maps built by independent episodes."""
    maps = list(maps)
    first = maps[0]
    out = MultiLayerMap(first.occupancy.copy(), first.seen.copy(),
                        {k: v.copy() for k, v in first.class_layers.items()})
    for m in maps[1:]:
        np.maximum(out.occupancy.values, m.occupancy.values, out=out.occupancy.values)
        np.maximum(out.seen.values, m.seen.values, out=out.seen.values)
        for k, layer in m.class_layers.items():
            np.maximum(out.class_layers[k].values, layer.values, out=out.class_layers[k].values)
    return out


# --- serialization ---------------------------------------------------------

def quantize(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, grid) -> None:
    """Write a grid as binary 8-bit PGM (P5); 0 -> black, 1 -> white."""
    data = quantize(_as_array(grid))
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 PGM written by :func:`write_pgm` as floats in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ParameterError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return data.astype(np.float32) / float(maxval)


def write_imgm(path, grid: GridMap) -> None:
    """Lossless float32 container: ``IMGM`` magic, u32 width, u32 height, f32 resolution."""
    values = np.ascontiguousarray(grid.values, dtype="<f4")
    header = IMGM_MAGIC + struct.pack("<IIf", grid.width, grid.height, grid.resolution)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(values.tobytes())


def read_imgm(path) -> GridMap:
    raw = Path(path).read_bytes()
    if raw[:4] != IMGM_MAGIC:
        raise ParameterError(f"{path}: bad magic {raw[:4]!r}")
    width, height, resolution = struct.unpack("<IIf", raw[4:16])
    values = np.frombuffer(raw, dtype="<f4", count=width * height, offset=16)
    # f32 header: restore the decimal resolution the writer most likely meant
    return GridMap(values.reshape(height, width).astype(np.float32), float(f"{resolution:.7g}"))
