"""Data collection, replay and the optimization loop for imagination units.

Randomness is keyed, not streamed: sample ``i`` is drawn from
``default_rng([seed, 1, i])`` and update step ``s`` batches from
``default_rng([seed, 2, s])``. That makes a resumed run reproduce the
uninterrupted one exactly, because the replay buffer can be rebuilt from
sample indices alone.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigError, MissingInputError
from ..grid_core import Pose
from ..ground_truth import GtConfig, build_object_gt, make_target
from ..scene_sim import (CLASS_IDS, CLASS_NAMES, SceneRaster, SceneSpec, SensorSpec, observe,
                         rasterize_full, valid_viewpoint_mask)
from .checkpoint import load_optimizer, load_unit, save_optimizer, save_unit
from .network import DEFAULT_WIDTHS, ImaginationUnit
from .optim import Adam
from .loss import sample_weights
from .replay import ReplayBuffer, Sample


@dataclass
class TrainConfig:
    """Training hyperparameters.

    Defaults are sized for a CPU; :data:`PAPER_TRAIN_CONFIG` carries the
    batch size and replay capacity used at full scale.
    """

    learning_rate: float = 1e-3
    batch_size: int = 16
    replay_capacity: int = 2048
    scenes_per_batch: int = 16
    update_interval: int = 5
    update_batches: int = 20
    w_alpha_max: float = 30.0
    w_gamma_max: float = 10.0
    epsilon: int = 31
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    rng_seed: int = 0
    steps: int = 1000
    widths: Tuple[int, int, int, int] = DEFAULT_WIDTHS
    aim_prob: float = 0.7
    aim_radius: float = 2.5
    gamma_denominator: str = "support"
    class_ids: Tuple[int, ...] = CLASS_IDS

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.class_ids = tuple(self.class_ids)
        positive = ("learning_rate", "batch_size", "replay_capacity", "scenes_per_batch",
                    "update_interval", "update_batches", "w_alpha_max", "w_gamma_max", "epsilon")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.steps < 0:
            raise ConfigError("train.steps must be >= 0")
        if self.epsilon % 2 == 0:
            raise ConfigError("train.epsilon must be odd")
        if self.gamma_denominator not in ("support", "label"):
            raise ConfigError("train.gamma_denominator must be 'support' or 'label'")


PAPER_TRAIN_CONFIG = TrainConfig(batch_size=108, replay_capacity=12288)


@dataclass
class SceneData:
    """A scene with everything training and evaluation need precomputed."""

    scene: SceneSpec
    raster: SceneRaster
    valid: np.ndarray
    gt: Dict[int, np.ndarray]

    @classmethod
    def build(cls, scene: SceneSpec, gt_cfg: GtConfig = GtConfig(), agent_radius: float = 0.3) -> "SceneData":
        raster = rasterize_full(scene)
        occ = raster.layers.occupancy.values
        gt = {k: build_object_gt(occ, raster.bboxes[k].astype(np.float32),
                                 raster.footprints[k].astype(np.float32), gt_cfg)
              for k in CLASS_IDS}
        return cls(scene, raster, valid_viewpoint_mask(raster, agent_radius), gt)


def heading_towards(pose_xy, target_xy) -> float:
    """Heading angle that points the sensor from ``pose_xy`` at ``target_xy``."""
    dx, dy = target_xy[0] - pose_xy[0], target_xy[1] - pose_xy[1]
    return math.atan2(dx, -dy)


def random_pose(data: SceneData, rng: np.random.Generator, aim_prob: float = 0.0,
                aim_radius: float = 2.5) -> Pose:
    """A valid pose; with probability ``aim_prob`` it faces a nearby object."""
    res = data.raster.layers.resolution
    cells = np.argwhere(data.valid)
    if len(cells) == 0:
        raise ConfigError(f"scene {data.scene.seed} has no valid agent position")
    objects = data.scene.objects
    if objects and rng.random() < aim_prob:
        obj = objects[int(rng.integers(len(objects)))]
        centre = np.array([obj.y, obj.x]) / res
        near = cells[np.hypot(*(cells - centre).T) * res <= aim_radius]
        if len(near):
            r, c = near[int(rng.integers(len(near)))]
            x, y = (c + 0.5) * res, (r + 0.5) * res
            theta = heading_towards((x, y), (obj.x, obj.y)) + rng.uniform(-0.4, 0.4)
            return Pose(x, y, theta)
    r, c = cells[int(rng.integers(len(cells)))]
    return Pose((c + 0.5) * res, (r + 0.5) * res, rng.uniform(-math.pi, math.pi))


def collect_sample(scenes: Sequence[SceneData], index: int, seed: int, cfg: TrainConfig,
                   sensor: SensorSpec, gt_cfg: GtConfig) -> Sample:
    rng = np.random.default_rng([int(seed), 1, int(index)])
    sid = int(rng.integers(len(scenes)))
    data = scenes[sid]
    pose = random_pose(data, rng, cfg.aim_prob, cfg.aim_radius)
    obs = observe(data.raster, pose, sensor)
    res = data.raster.layers.resolution
    targets = {k: make_target(data.gt[k], pose, obs, k, gt_cfg, res) for k in cfg.class_ids}
    return Sample(obs, targets, data.scene.seed)


def batch_arrays(samples: Sequence[Sample], class_id: int, cfg: TrainConfig):
    """Inputs, binary labels, weights and mean weight scalars for one class."""
    x = np.stack([s.obs.channels(class_id) for s in samples])
    y = np.stack([(s.targets[class_id].target_crop > 0.5).astype(np.float64) for s in samples])
    ws, was, wgs = [], [], []
    for s, label in zip(samples, y):
        w, wa, wg = sample_weights(label, s.targets[class_id].seen_star, cfg.w_alpha_max,
                                   cfg.w_gamma_max, cfg.gamma_denominator)
        ws.append(w)
        was.append(wa)
        wgs.append(wg)
    return x, y, np.stack(ws), float(np.mean(was)), float(np.mean(wgs))


def batch_loss_and_grads(unit: ImaginationUnit, x, y, w):
    """Mean per-sample weighted cross-entropy and its parameter gradients."""
    p = unit.forward(x)
    pc = p.astype(np.float64)
    per_cell = -(w * (y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))
    loss = float(per_cell.reshape(len(x), -1).sum(axis=1).mean())
    grads = unit.backward_logits(w * (pc - y) / len(x))
    return loss, grads


@dataclass
class LossRecord:
    step: int
    loss: float
    w_alpha_mean: float
    w_gamma_mean: float


@dataclass
class Trainer:
    scenes: List[SceneData]
    cfg: TrainConfig
    sensor: SensorSpec = field(default_factory=SensorSpec)
    gt_cfg: GtConfig = field(default_factory=GtConfig)
    units: Dict[int, ImaginationUnit] = field(default_factory=dict)
    opts: Dict[int, Adam] = field(default_factory=dict)
    log: Dict[int, List[LossRecord]] = field(default_factory=dict)
    steps_done: int = 0
    samples_collected: int = 0

    def __post_init__(self):
        if not self.scenes:
            raise ConfigError("training needs at least one scene")
        self.buffer = ReplayBuffer(self.cfg.replay_capacity)
        init_rng = np.random.default_rng([int(self.cfg.rng_seed), 0])
        for k in self.cfg.class_ids:
            if k not in self.units:
                self.units[k] = ImaginationUnit.create(k, init_rng, self.cfg.widths)
            if k not in self.opts:
                self.opts[k] = Adam(self.units[k].params, self.cfg.learning_rate,
                                    self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps)
            self.log.setdefault(k, [])

    def _collect(self, n: int) -> None:
        for _ in range(n):
            self.buffer.push(collect_sample(self.scenes, self.samples_collected, self.cfg.rng_seed,
                                            self.cfg, self.sensor, self.gt_cfg))
            self.samples_collected += 1

    def _update(self) -> None:
        step = self.steps_done
        rng = np.random.default_rng([int(self.cfg.rng_seed), 2, step])
        batch = self.buffer.sample(self.cfg.batch_size, rng, self.cfg.scenes_per_batch)
        for k in self.cfg.class_ids:
            x, y, w, wa, wg = batch_arrays(batch, k, self.cfg)
            loss, grads = batch_loss_and_grads(self.units[k], x, y, w)
            self.opts[k].step(self.units[k].params, grads, step + 1)
            self.log[k].append(LossRecord(step, loss, wa, wg))
        self.steps_done += 1

    def run(self, steps: Optional[int] = None, progress=None) -> None:
        """Train until ``steps`` total update steps have been taken."""
        target = self.cfg.steps if steps is None else steps
        while self.steps_done < target:
            self._collect(self.cfg.update_interval)
            for _ in range(min(self.cfg.update_batches, target - self.steps_done)):
                self._update()
            if progress:
                progress(self)

    # -- persistence ------------------------------------------------------

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for k in self.cfg.class_ids:
            name = CLASS_NAMES.get(k, str(k))
            save_unit(out / f"unit_{name}.imun", self.units[k])
            save_optimizer(out / f"unit_{name}.adam.npz", self.opts[k])
            write_loss_csv(out / f"loss_{name}.csv", self.log[k])
        state = {"steps_done": self.steps_done, "samples_collected": self.samples_collected}
        (out / "train_state.json").write_text(json.dumps(state, sort_keys=True, indent=1))

    @classmethod
    def resume(cls, out_dir, scenes, cfg: TrainConfig, sensor=None, gt_cfg=None) -> "Trainer":
        out = Path(out_dir)
        state_path = out / "train_state.json"
        if not state_path.exists():
            raise MissingInputError(str(state_path))
        state = json.loads(state_path.read_text())
        units, opts, log = {}, {}, {}
        for k in cfg.class_ids:
            name = CLASS_NAMES.get(k, str(k))
            units[k] = load_unit(out / f"unit_{name}.imun")
            opts[k] = Adam(units[k].params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
            load_optimizer(out / f"unit_{name}.adam.npz", opts[k])
            log[k] = read_loss_csv(out / f"loss_{name}.csv")
        tr = cls(scenes, cfg, sensor or SensorSpec(), gt_cfg or GtConfig(), units, opts, log,
                 state["steps_done"], 0)
        n = state["samples_collected"]
        # rebuild the FIFO contents exactly as the uninterrupted run holds them
        for i in range(max(0, n - cfg.replay_capacity), n):
            tr.buffer.push(collect_sample(scenes, i, cfg.rng_seed, cfg, tr.sensor, tr.gt_cfg))
        tr.samples_collected = n
        return tr


def write_loss_csv(path, records: Sequence[LossRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "w_alpha_mean", "w_gamma_mean"])
        for r in records:
            w.writerow([r.step, repr(r.loss), repr(r.w_alpha_mean), repr(r.w_gamma_mean)])


def read_loss_csv(path) -> List[LossRecord]:
    if not Path(path).exists():
        return []
    with open(path, newline="") as fh:
        return [LossRecord(int(r["step"]), float(r["loss"]), float(r["w_alpha_mean"]), float(r["w_gamma_mean"]))
                for r in csv.DictReader(fh)]


def train(scenes: Sequence[SceneSpec], cfg: TrainConfig, rng_seed: Optional[int] = None,
          sensor: Optional[SensorSpec] = None, gt_cfg: Optional[GtConfig] = None,
          progress=None) -> Trainer:
    """Train one unit per class on ``scenes`` and return the finished trainer."""
    if not scenes:
        raise ConfigError("training needs at least one scene")
    if rng_seed is not None:
        cfg = TrainConfig(**{**asdict(cfg), "rng_seed": rng_seed})
    gt_cfg = gt_cfg or GtConfig(epsilon=cfg.epsilon)
    data = [SceneData.build(s, gt_cfg) for s in scenes]
    tr = Trainer(data, cfg, sensor or SensorSpec(), gt_cfg)
    tr.run(progress=progress)
    return tr


def fit_samples(unit: ImaginationUnit, samples: Sequence[Sample], class_id: int, steps: int,
                cfg: TrainConfig) -> List[float]:
    """Full-batch training on a fixed sample set; returns the loss per step."""
    opt = Adam(unit.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    x, y, w, _, _ = batch_arrays(samples, class_id, cfg)
    losses = []
    for t in range(1, steps + 1):
        loss, grads = batch_loss_and_grads(unit, x, y, w)
        opt.step(unit.params, grads, t)
        losses.append(loss)
    return losses
