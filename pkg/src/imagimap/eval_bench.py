"""Sparse-viewpoint benchmark: viewpoint sampling, episodes, metrics and sweeps."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict, deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DimensionError, InvariantViolation, ParameterError
from .grid_core import MultiLayerMap, Pose
from .imagination.network import ImaginationUnit
from .imagination.train import SceneData
from .mapper import (MapperConfig, count_invalid_cells, imagine_valid_batch, restrict_to_seen,
                     seg_only_update, update_global)
from .scene_sim import CLASS_IDS, CLASS_NAMES, SensorSpec, observe

METHODS = ("seg_gt", "imagination", "imagination_seen_only")
PAPER_CELL_WIDTHS = (3.0, 2.5, 2.0)
CSV_HEADER = ["scene", "set", "class", "cell_width", "method", "iou", "correct_pixels"]


@dataclass
class ViewpointSet:
    points: List[Tuple[float, float]]
    nodes: List[Tuple[float, float]]
    cell_width: float
    seed: int


def sparse_viewpoints(valid: np.ndarray, resolution: float, cell_width: float, seed) -> ViewpointSet:
    """Jittered meshgrid of viewpoints over the valid cells of a map.

    One global offset per axis is drawn from U(-w/2, w/2); each grid node
    shifted by it is kept if it lands on a valid cell, and only then gets
    its own jitter from U(-w/6, w/6). Draw order: global x, global y, then
    x, y for each accepted node in row-major order.
    """
    if not cell_width > 0:
        raise ParameterError(f"cell_width must be positive, got {cell_width}")
    valid = np.asarray(valid, dtype=bool)
    H, W = valid.shape
    rng = np.random.default_rng(seed)
    xs = np.arange(0.0, W * resolution, cell_width)
    ys = np.arange(0.0, H * resolution, cell_width)
    off_x = rng.uniform(-cell_width / 2, cell_width / 2)
    off_y = rng.uniform(-cell_width / 2, cell_width / 2)
    points, nodes = [], []
    for y in ys:
        for x in xs:
            px, py = x + off_x, y + off_y
            r, c = math.floor(py / resolution), math.floor(px / resolution)
            if not (0 <= r < H and 0 <= c < W and valid[r, c]):
                continue
            jx = rng.uniform(-cell_width / 6, cell_width / 6)
            jy = rng.uniform(-cell_width / 6, cell_width / 6)
            points.append((float(px + jx), float(py + jy)))
            nodes.append((float(x), float(y)))
    return ViewpointSet(points, nodes, cell_width, seed if isinstance(seed, int) else -1)


def nearest_valid_cell(valid: np.ndarray, start: Tuple[int, int]) -> Optional[Tuple[int, int]]:
    """Breadth-first search (4-connected) from ``start`` to the closest valid cell."""
    H, W = valid.shape
    r0 = min(max(start[0], 0), H - 1)
    c0 = min(max(start[1], 0), W - 1)
    if valid[r0, c0]:
        return r0, c0
    seen = np.zeros_like(valid, dtype=bool)
    seen[r0, c0] = True
    queue = deque([(r0, c0)])
    while queue:
        r, c = queue.popleft()
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= nr < H and 0 <= nc < W and not seen[nr, nc]:
                if valid[nr, nc]:
                    return nr, nc
                seen[nr, nc] = True
                queue.append((nr, nc))
    return None


def resolve_viewpoint(valid: np.ndarray, resolution: float, point: Tuple[float, float]) -> Optional[Tuple[float, float]]:
    r, c = math.floor(point[1] / resolution), math.floor(point[0] / resolution)
    H, W = valid.shape
    if 0 <= r < H and 0 <= c < W and valid[r, c]:
        return point
    cell = nearest_valid_cell(valid, (r, c))
    if cell is None:
        return None
    return ((cell[1] + 0.5) * resolution, (cell[0] + 0.5) * resolution)


# --- metrics -----------------------------------------------------------------

def _binarize(pred, gt, threshold):
    pred, gt = np.asarray(getattr(pred, "values", pred)), np.asarray(getattr(gt, "values", gt))
    if pred.shape != gt.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred > threshold, gt.astype(bool)


def iou(pred, gt, threshold: float = 0.5) -> float:
    """Intersection over union of ``pred > threshold`` and ``gt``; 1.0 if both are empty."""
    p, g = _binarize(pred, gt, threshold)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def correct_pixels(pred, gt, threshold: float = 0.5) -> int:
    """True positives: predicted cells that are ground-truth object cells."""
    p, g = _binarize(pred, gt, threshold)
    return int(np.count_nonzero(p & g))


# --- episodes ----------------------------------------------------------------

@dataclass
class EpisodeResult:
    maps: Dict[str, MultiLayerMap]
    poses: List[Pose]
    invalid_cells: int = 0
    dropped_cells: int = 0


def run_episode(data: SceneData, viewpoints: ViewpointSet, units: Dict[int, ImaginationUnit],
                sensor: SensorSpec, cfg: MapperConfig, rng_seed) -> EpisodeResult:
    """Observe twice from every viewpoint and build the three global maps."""
    rng = np.random.default_rng(rng_seed)
    res = data.raster.layers.resolution
    H, W = data.raster.layers.shape
    class_ids = sorted(units)
    maps = {m: MultiLayerMap.empty(H, W, res, class_ids) for m in METHODS}
    poses = []
    for point in viewpoints.points:
        resolved = resolve_viewpoint(data.valid, res, point)
        if resolved is None:
            continue
        for _ in range(2):
            poses.append(Pose(resolved[0], resolved[1], rng.uniform(-math.pi, math.pi)))
    observations = [observe(data.raster, p, sensor) for p in poses]
    if not observations:
        return EpisodeResult(maps, poses)
    valid_layers = {k: imagine_valid_batch(units[k], observations, cfg) for k in class_ids}

    invalid = dropped = 0
    for i, (obs, pose) in enumerate(zip(observations, poses)):
        v_valid = {k: valid_layers[k][i] for k in class_ids}
        for k in class_ids:
            invalid += count_invalid_cells(v_valid[k], obs, k, cfg)
        dropped += update_global(maps["imagination"], v_valid, obs, pose, cfg)
        update_global(maps["imagination_seen_only"],
                      {k: restrict_to_seen(v, obs) for k, v in v_valid.items()}, obs, pose, cfg)
        seg_only_update(maps["seg_gt"], obs, pose)
    return EpisodeResult(maps, poses, invalid, dropped)


# --- benchmark ---------------------------------------------------------------

@dataclass(order=True)
class ReportRow:
    scene: int
    set: int
    class_name: str
    cell_width: float
    method: str
    iou: float
    correct_pixels: int


@dataclass
class BenchmarkReport:
    rows: List[ReportRow] = field(default_factory=list)
    invalid_cells: int = 0

    def sorted_rows(self) -> List[ReportRow]:
        return sorted(self.rows)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for r in self.sorted_rows():
                w.writerow([r.scene, r.set, r.class_name, repr(r.cell_width), r.method,
                            repr(float(r.iou)), r.correct_pixels])

    def aggregate(self) -> Dict[Tuple[str, float, str], Dict[str, float]]:
        """Per (class, cell_width, method) means and standard deviations."""
        groups = defaultdict(list)
        for r in self.rows:
            groups[(r.class_name, r.cell_width, r.method)].append(r)
        out = {}
        for key in sorted(groups):
            ious = np.array([r.iou for r in groups[key]], dtype=float)
            pix = np.array([r.correct_pixels for r in groups[key]], dtype=float)
            out[key] = {"n": len(ious), "iou_mean": float(ious.mean()), "iou_std": float(ious.std()),
                        "correct_pixels_mean": float(pix.mean()), "correct_pixels_std": float(pix.std())}
        return out

    def aggregate_json(self) -> str:
        agg = [{"class": c, "cell_width": w, "method": m, **v} for (c, w, m), v in self.aggregate().items()]
        return json.dumps({"groups": agg, "invalid_cells": self.invalid_cells}, indent=1, sort_keys=True)

    def table(self, metric: str = "iou_mean") -> str:
        """Methods as rows, (cell width, class) as columns, like the tables in the write-up."""
        agg = self.aggregate()
        widths = sorted({w for _, w, _ in agg}, reverse=True)
        classes = sorted({c for c, _, _ in agg})
        head = ["method"] + [f"{c}@{w:g}" for w in widths for c in classes]
        lines = ["\t".join(head)]
        for m in METHODS:
            vals = []
            for w in widths:
                for c in classes:
                    v = agg.get((c, w, m), {}).get(metric, float("nan"))
                    vals.append(f"{v:.3f}" if metric.startswith("iou") else f"{v:.1f}")
            lines.append("\t".join([m] + vals))
        return "\n".join(lines)


def episode_seed(seed: int, scene_seed: int, set_index: int, cell_width: float) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & (2**63 - 1), int(scene_seed) & (2**63 - 1),
                                   int(set_index), int(round(cell_width * 1000))])


def evaluate_scene(data: SceneData, units: Dict[int, ImaginationUnit], cell_widths: Sequence[float],
                   sets_per_scene: int, sensor: SensorSpec, cfg: MapperConfig, seed: int,
                   threshold: float = 0.5) -> BenchmarkReport:
    report = BenchmarkReport()
    res = data.raster.layers.resolution
    for w in cell_widths:
        for s in range(sets_per_scene):
            vp_seed, ep_seed = episode_seed(seed, data.scene.seed, s, w).spawn(2)
            vps = sparse_viewpoints(data.valid, res, w, vp_seed)
            ep = run_episode(data, vps, units, sensor, cfg, ep_seed)
            report.invalid_cells += ep.invalid_cells
            for method in METHODS:
                for k in sorted(units):
                    layer = ep.maps[method].class_layers[k]
                    report.rows.append(ReportRow(
                        data.scene.seed, s, CLASS_NAMES.get(k, str(k)), float(w), method,
                        float(iou(layer, data.gt[k], threshold)), correct_pixels(layer, data.gt[k], threshold)))
    return report


def _evaluate_scene_args(args):
    return evaluate_scene(*args)


def run_benchmark(scenes: Sequence[SceneData], units: Dict[int, ImaginationUnit],
                  cell_widths: Sequence[float] = PAPER_CELL_WIDTHS, sets_per_scene: int = 10,
                  sensor: Optional[SensorSpec] = None, cfg: Optional[MapperConfig] = None, seed: int = 0,
                  train_seeds: Sequence[int] = (), jobs: int = 1, strict: bool = True) -> BenchmarkReport:
    """Evaluate every scene x set x cell width x method x class.

    Raises :class:`ConfigError` if an evaluation scene was also used for
    training, and :class:`InvariantViolation` (when ``strict``) if any
    imagination cell survived outside its validity mask.
    """
    sensor = sensor or SensorSpec()
    cfg = cfg or MapperConfig()
    overlap = sorted({d.scene.seed for d in scenes} & {int(s) for s in train_seeds})
    if overlap:
        raise ConfigError(f"evaluation scenes overlap training scenes: {overlap[:5]}")
    jobs_args = [(d, units, tuple(cell_widths), sets_per_scene, sensor, cfg, seed) for d in scenes]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_evaluate_scene_args, jobs_args))
    else:
        parts = [_evaluate_scene_args(a) for a in jobs_args]
    report = BenchmarkReport()
    for p in parts:
        report.rows += p.rows
        report.invalid_cells += p.invalid_cells
    report.rows.sort()
    if strict and report.invalid_cells:
        raise InvariantViolation(f"{report.invalid_cells} imagination cell(s) outside the validity mask")
    return report


def report_dict(report: BenchmarkReport) -> dict:
    return {"rows": [asdict(r) for r in report.sorted_rows()], "invalid_cells": report.invalid_cells}
