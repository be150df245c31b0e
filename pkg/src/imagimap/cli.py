"""Command line entry point: ``imagimap <command> [options]``.

Commands: gen-scenes, train, map, bench, render. Every command is driven
by an optional JSON config (``--config``), a seed (``--seed``) and an
output directory (``--out``), and writes its resolved config next to
its outputs. Exit codes: 0 ok, 2 config error, 3 missing input,
4 runtime invariant violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, GridSizeError, InvariantViolation, MissingInputError, ParameterError
from .eval_bench import (METHODS, PAPER_CELL_WIDTHS, EpisodeResult, ViewpointSet, episode_seed, run_benchmark,
                         run_episode, sparse_viewpoints)
from .grid_core import MultiLayerMap, Pose, quantize, read_imgm, write_pgm
from .ground_truth import GtConfig
from .imagination.checkpoint import load_unit
from .imagination.network import ImaginationUnit
from .imagination.train import SceneData, TrainConfig, Trainer
from .mapper import (MapperConfig, count_invalid_cells, export_map, imagine_valid_batch, restrict_to_seen,
                     seg_only_update, update_global)
from .scene_sim import CLASS_NAMES, SceneGenConfig, SceneSpec, SensorSpec, generate_scene, observe

log = logging.getLogger("imagimap")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_INVARIANT = 0, 2, 3, 4
RESOLVED_NAME = "resolved_config.json"


@dataclass
class BenchConfig:
    cell_widths: Tuple[float, ...] = PAPER_CELL_WIDTHS
    sets_per_scene: int = 10
    threshold: float = 0.5

    def __post_init__(self):
        self.cell_widths = tuple(float(w) for w in self.cell_widths)
        if not self.cell_widths or min(self.cell_widths) <= 0:
            raise ConfigError("bench.cell_widths must be non-empty and positive")
        if self.sets_per_scene < 1:
            raise ConfigError("bench.sets_per_scene must be >= 1")
        if not 0 <= self.threshold < 1:
            raise ConfigError("bench.threshold must be in [0, 1)")


SECTIONS = {
    "scene": SceneGenConfig,
    "sensor": SensorSpec,
    "gt": GtConfig,
    "train": TrainConfig,
    "mapper": MapperConfig,
    "bench": BenchConfig,
}


@dataclass
class RunConfig:
    seed: int = 0
    jobs: int = 1
    scene: SceneGenConfig = field(default_factory=SceneGenConfig)
    sensor: SensorSpec = field(default_factory=SensorSpec)
    gt: GtConfig = field(default_factory=GtConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mapper: MapperConfig = field(default_factory=MapperConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - {"seed", "jobs"} - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        kwargs = {}
        for name, typ in SECTIONS.items():
            section = doc.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            allowed = {f.name for f in dataclasses.fields(typ)}
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f"unknown key(s) in {name!r}: {sorted(bad)}")
            if name == "scene" and "counts" in section:
                section = {**section, "counts": {k: tuple(v) for k, v in section["counts"].items()}}
            try:
                kwargs[name] = typ(**section)
                if name == "scene":
                    kwargs[name].validate()
            except (ParameterError, TypeError, ValueError) as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"config section {name!r}: {exc}") from exc
        try:
            seed, jobs = int(doc.get("seed", 0)), int(doc.get("jobs", 1))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"seed and jobs must be integers: {exc}") from exc
        if seed < 0 or jobs < 1:
            raise ConfigError("seed must be >= 0 and jobs >= 1")
        return cls(seed=seed, jobs=jobs, **kwargs)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def with_overrides(self, seed: Optional[int], jobs: Optional[int]) -> "RunConfig":
        doc = self.to_dict()
        if seed is not None:
            doc["seed"] = seed
        if jobs is not None:
            doc["jobs"] = jobs
        return RunConfig.from_dict(doc)


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(doc)


def write_resolved(out: Path, cfg: RunConfig, command: str, extra: Optional[dict] = None) -> None:
    doc = {"command": command, "config": cfg.to_dict(), **(extra or {})}
    (out / RESOLVED_NAME).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# --- inputs ------------------------------------------------------------------

def load_scenes(directory) -> List[SceneSpec]:
    d = Path(directory)
    if not d.is_dir():
        raise MissingInputError(f"scene directory not found: {d}")
    files = sorted(d.glob("scene_*.json"), key=lambda p: int(p.stem.split("_", 1)[1]))
    if not files:
        raise MissingInputError(f"no scene_<seed>.json files in {d}")
    return [SceneSpec.from_json(f.read_text()) for f in files]


def load_units(directory, class_ids: Sequence[int]) -> Dict[int, ImaginationUnit]:
    d = Path(directory)
    units = {}
    for k in class_ids:
        path = d / f"unit_{CLASS_NAMES.get(k, str(k))}.imun"
        if not path.exists():
            raise MissingInputError(f"missing checkpoint {path}")
        units[k] = load_unit(path)
    return units


def parse_pose(text: str) -> Pose:
    try:
        x, y, theta = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"pose must be 'x,y,theta', got {text!r}") from exc
    return Pose(x, y, theta)


# --- commands ----------------------------------------------------------------

def cmd_gen_scenes(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    for seed in range(cfg.seed, cfg.seed + args.count):
        scene = generate_scene(seed, cfg.scene)
        (out / f"scene_{seed}.json").write_text(scene.to_json() + "\n")
    write_resolved(out, cfg, "gen-scenes", {"count": args.count})
    log.info("wrote %d scene(s) to %s", args.count, out)
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = load_scenes(args.scenes)
    tcfg = TrainConfig(**{**asdict(cfg.train), "rng_seed": cfg.seed})
    data = [SceneData.build(s, cfg.gt, cfg.scene.agent_radius) for s in scenes]
    if args.resume:
        trainer = Trainer.resume(out, data, tcfg, cfg.sensor, cfg.gt)
    else:
        trainer = Trainer(data, tcfg, cfg.sensor, cfg.gt)

    def progress(tr):
        last = {CLASS_NAMES[k]: round(v[-1].loss, 4) for k, v in tr.log.items() if v}
        log.info("step %d/%d %s", tr.steps_done, tcfg.steps, last)

    trainer.run(progress=progress if args.verbose else None)
    trainer.save(out)
    (out / "train_scenes.json").write_text(json.dumps(sorted(s.seed for s in scenes)) + "\n")
    write_resolved(out, cfg, "train", {"scenes": str(args.scenes)})
    return EXIT_OK


def cmd_map(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene_path = Path(args.scene)
    if not scene_path.exists():
        raise MissingInputError(f"scene file not found: {scene_path}")
    data = SceneData.build(SceneSpec.from_json(scene_path.read_text()), cfg.gt, cfg.scene.agent_radius)
    units = load_units(args.units, cfg.train.class_ids)
    res = data.raster.layers.resolution
    if args.pose:
        # explicit viewpoints: each one is observed once with its given heading
        poses = [parse_pose(p) for p in args.pose]
        vps = ViewpointSet([(p.x, p.y) for p in poses], [(p.x, p.y) for p in poses], 0.0, -1)
        ep = _explicit_episode(data, poses, units, cfg)
    else:
        width = args.cell_width or cfg.bench.cell_widths[0]
        vp_seed, ep_seed = episode_seed(cfg.seed, data.scene.seed, args.set, width).spawn(2)
        vps = sparse_viewpoints(data.valid, res, width, vp_seed)
        ep = run_episode(data, vps, units, cfg.sensor, cfg.mapper, ep_seed)
    if ep.invalid_cells:
        raise InvariantViolation(f"{ep.invalid_cells} imagination cell(s) outside the validity mask")
    manifests = {m: export_map(gmap, out, ep.poses, name=m).name for m, gmap in ep.maps.items()}
    summary = {"scene": data.scene.seed, "viewpoints": [list(p) for p in vps.points],
               "poses": [[p.x, p.y, p.theta] for p in ep.poses], "manifests": manifests,
               "dropped_cells": ep.dropped_cells}
    (out / "episode.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    write_resolved(out, cfg, "map", {"scene": str(scene_path), "units": str(args.units)})
    return EXIT_OK


def _explicit_episode(data, poses, units, cfg: RunConfig):
    res = data.raster.layers.resolution
    H, W = data.raster.layers.shape
    class_ids = sorted(units)
    maps = {m: MultiLayerMap.empty(H, W, res, class_ids) for m in METHODS}
    observations = [observe(data.raster, p, cfg.sensor) for p in poses]
    layers = {k: imagine_valid_batch(units[k], observations, cfg.mapper) for k in class_ids} if poses else {}
    invalid = dropped = 0
    for i, (obs, pose) in enumerate(zip(observations, poses)):
        v = {k: layers[k][i] for k in class_ids}
        invalid += sum(count_invalid_cells(v[k], obs, k, cfg.mapper) for k in class_ids)
        dropped += update_global(maps["imagination"], v, obs, pose, cfg.mapper)
        update_global(maps["imagination_seen_only"], {k: restrict_to_seen(a, obs) for k, a in v.items()},
                      obs, pose, cfg.mapper)
        seg_only_update(maps["seg_gt"], obs, pose)
    return EpisodeResult(maps, list(poses), invalid, dropped)


def cmd_bench(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = load_scenes(args.scenes)
    units = load_units(args.units, cfg.train.class_ids)
    seeds_file = Path(args.units) / "train_scenes.json"
    train_seeds = json.loads(seeds_file.read_text()) if seeds_file.exists() else []
    data = [SceneData.build(s, cfg.gt, cfg.scene.agent_radius) for s in scenes]
    report = run_benchmark(data, units, cfg.bench.cell_widths, cfg.bench.sets_per_scene, cfg.sensor,
                           cfg.mapper, cfg.seed, train_seeds, cfg.jobs, strict=False)
    report.write_csv(out / "report.csv")
    (out / "aggregate.json").write_text(report.aggregate_json() + "\n")
    tables = report.table("iou_mean") + "\n\n" + report.table("correct_pixels_mean") + "\n"
    (out / "tables.txt").write_text(tables)
    write_resolved(out, cfg, "bench", {"scenes": str(args.scenes), "units": str(args.units)})
    print(tables, end="")
    if report.invalid_cells:
        raise InvariantViolation(f"{report.invalid_cells} imagination cell(s) outside the validity mask")
    return EXIT_OK


def render_layer(values: np.ndarray, path: Path, threshold: Optional[float] = None) -> None:
    """Write one layer as an 8-bit grey image; the format follows the suffix."""
    values = np.asarray(values, dtype=np.float32)
    if threshold is not None:
        values = (values > threshold).astype(np.float32)
    if path.suffix == ".pgm":
        write_pgm(path, values)
        return
    from PIL import Image
    Image.fromarray(quantize(values), mode="L").save(path, format="PNG")


def cmd_render(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sources: List[Path] = []
    for item in args.inputs:
        p = Path(item)
        if not p.exists():
            raise MissingInputError(f"input not found: {p}")
        if p.suffix == ".json":
            manifest = json.loads(p.read_text())
            sources += [p.parent / entry["imgm"] for _, entry in sorted(manifest["layers"].items())]
        else:
            sources.append(p)
    written = []
    for src in sources:
        if not src.exists():
            raise MissingInputError(f"layer file not found: {src}")
        target = out / f"{src.stem}.{args.format}"
        render_layer(read_imgm(src).values, target, args.threshold)
        written.append(target.name)
    write_resolved(out, cfg, "render", {"inputs": [str(s) for s in sources], "outputs": written,
                                         "threshold": args.threshold})
    return EXIT_OK


# --- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; unknown keys are rejected")
    common.add_argument("--seed", type=int, help="global RNG seed (overrides the config)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--jobs", type=int, help="worker processes for scene-level fan-out")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="imagimap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", parents=[common], help="write scene_<seed>.json files")
    p.add_argument("--count", type=int, default=60)
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("train", parents=[common], help="train one imagination unit per class")
    p.add_argument("--scenes", required=True, help="directory of scene_<seed>.json files")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("map", parents=[common], help="run one mapping episode and export the maps")
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--units", required=True, help="directory with trained units")
    p.add_argument("--cell-width", type=float, help="viewpoint spacing (default: first bench width)")
    p.add_argument("--set", type=int, default=0, help="viewpoint set index")
    p.add_argument("--pose", action="append", help="explicit viewpoint 'x,y,theta' (repeatable)")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("bench", parents=[common], help="sparse-viewpoint benchmark")
    p.add_argument("--scenes", required=True)
    p.add_argument("--units", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("render", parents=[common], help="render layers or map manifests to images")
    p.add_argument("inputs", nargs="+", help=".imgm layer files or *_manifest.json files")
    p.add_argument("--format", choices=("png", "pgm"), default="png")
    p.add_argument("--threshold", type=float, help="binarize at this value before rendering")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.jobs)
        return args.func(args, cfg)
    except (ConfigError, ParameterError, GridSizeError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (MissingInputError, FileNotFoundError) as exc:
        log.error("missing input: %s", exc)
        return EXIT_MISSING
    except InvariantViolation as exc:
        log.error("invariant violation: %s", exc)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
