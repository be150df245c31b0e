"""Turn per-viewpoint predictions into global multi-layer semantic maps."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np

from .errors import InvariantViolation, ParameterError
from .grid_core import MultiLayerMap, Pose, register_ego, write_imgm, write_pgm
from .ground_truth import GtConfig, seen_star
from .imagination.network import ImaginationUnit
from .scene_sim import CLASS_NAMES, ObservationStack


@dataclass
class MapperConfig:
    prediction_threshold: float = 0.5
    aggregation: float = 0.9
    epsilon: int = 31
    # "observed": seed the validity mask from visible class cells;
    # "prediction": from thresholded network output (ablation)
    seed_from: str = "observed"

    def __post_init__(self):
        if not 0.0 < self.prediction_threshold < 1.0:
            raise ParameterError("prediction_threshold must be in (0, 1)")
        if not 0.0 <= self.aggregation <= 1.0:
            raise ParameterError("aggregation must be in [0, 1]")
        if self.epsilon < 1 or self.epsilon % 2 == 0:
            raise ParameterError("epsilon must be odd and >= 1")
        if self.seed_from not in ("observed", "prediction"):
            raise ParameterError("seed_from must be 'observed' or 'prediction'")


def validity_mask(obs: ObservationStack, class_id: int, cfg: MapperConfig,
                  prediction: np.ndarray | None = None) -> np.ndarray:
    """Dilated seen object cells: the only region where imagination is kept."""
    gt_cfg = GtConfig(epsilon=cfg.epsilon, threshold=0.5)
    if cfg.seed_from == "prediction":
        if prediction is None:
            raise ParameterError("prediction-seeded validity needs the prediction")
        seed = prediction > cfg.prediction_threshold
    else:
        seed = obs.class_visible[class_id]
    return seen_star(seed, obs.seen, gt_cfg)


def imagine_valid_batch(unit: ImaginationUnit, observations: Sequence[ObservationStack],
                        cfg: MapperConfig, batch_size: int = 32) -> List[np.ndarray]:
    """Masked predictions for many observations of one class."""
    out = []
    k = unit.class_id
    for start in range(0, len(observations), batch_size):
        chunk = observations[start:start + batch_size]
        x = np.stack([o.channels(k) for o in chunk])
        probs = unit.forward(x)
        for obs, p in zip(chunk, probs):
            mask = validity_mask(obs, k, cfg, p)
            out.append(np.where(mask, p, 0.0).astype(np.float32))
    return out


def imagine_valid(unit: ImaginationUnit, obs: ObservationStack, cfg: MapperConfig = MapperConfig()) -> np.ndarray:
    """Prediction multiplied by the validity mask; zero outside it."""
    return imagine_valid_batch(unit, [obs], cfg)[0]


def count_invalid_cells(v_valid: np.ndarray, obs: ObservationStack, class_id: int, cfg: MapperConfig) -> int:
    """Cells carrying imagination outside the observed validity mask."""
    mask = validity_mask(obs, class_id, cfg, v_valid)
    return int(np.count_nonzero((v_valid > 0) & ~mask))


def update_global(global_map: MultiLayerMap, v_valid: Dict[int, np.ndarray], obs: ObservationStack,
                  pose: Pose, cfg: MapperConfig = MapperConfig()) -> int:
    """Register one viewpoint's layers; returns the number of dropped ego cells."""
    dropped = 0
    for k, layer in v_valid.items():
        dropped += register_ego(global_map.class_layers[k], layer, pose, cfg.aggregation)
    register_ego(global_map.seen, obs.seen, pose, 1.0)
    register_ego(global_map.occupancy, obs.occ_visible, pose, 1.0)
    return dropped


def seg_only_update(global_map: MultiLayerMap, obs: ObservationStack, pose: Pose,
                    threshold: float = 0.5, aggregation: float = 1.0) -> None:
    """Baseline: register the visible class cells as they are, no network."""
    for k, layer in global_map.class_layers.items():
        register_ego(layer, (obs.class_visible[k] > threshold).astype(np.float32), pose, aggregation)
    register_ego(global_map.seen, obs.seen, pose, 1.0)
    register_ego(global_map.occupancy, obs.occ_visible, pose, 1.0)


def restrict_to_seen(v_valid: np.ndarray, obs: ObservationStack) -> np.ndarray:
    return np.where(obs.seen > 0.5, v_valid, 0.0).astype(np.float32)


def export_map(global_map: MultiLayerMap, out_dir, poses: Iterable[Pose] = (), name: str = "map") -> Path:
    """One PGM (and lossless IMGM) per layer plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    layers = {"occupancy": global_map.occupancy, "seen": global_map.seen}
    for k, layer in global_map.class_layers.items():
        layers[CLASS_NAMES.get(k, f"class{k}")] = layer
    files = {}
    for lname, layer in layers.items():
        stem = f"{name}_{lname}"
        write_pgm(out / f"{stem}.pgm", layer)
        write_imgm(out / f"{stem}.imgm", layer)
        files[lname] = {"pgm": f"{stem}.pgm", "imgm": f"{stem}.imgm"}
    manifest = {
        "name": name,
        "resolution": global_map.resolution,
        "shape": list(global_map.shape),
        "class_ids": {CLASS_NAMES.get(k, str(k)): k for k in global_map.class_layers},
        "layers": files,
        "poses": [[p.x, p.y, p.theta] for p in poses],
    }
    path = out / f"{name}_manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def assert_valid_support(v_valid: np.ndarray, obs: ObservationStack, class_id: int, cfg: MapperConfig) -> None:
    bad = count_invalid_cells(v_valid, obs, class_id, cfg)
    if bad:
        raise InvariantViolation(f"{bad} imagination cell(s) outside the validity mask (class {class_id})")
