"""Training targets: object ground truth, imaginable filter and seen-area mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .grid_core import Pose, _as_array, _check_same_shape, crop_ego, dilate, intersect3
from .scene_sim import ObservationStack


@dataclass
class GtConfig:
    """Kernel sizes in cells; all must be odd."""

    seg_kernel: int = 31
    delta: int = 51
    epsilon: int = 31
    threshold: float = 0.5

    def __post_init__(self):
        for name in ("seg_kernel", "delta", "epsilon"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ParameterError(f"{name} must be odd and >= 1, got {k}")


@dataclass
class GroundTruthBundle:
    target_crop: np.ndarray  # float32 {0,1}, ego frame
    filter: np.ndarray       # bool
    seen_star: np.ndarray    # bool


def build_object_gt(m_occu, m_label, m_seg, cfg: GtConfig = GtConfig()) -> np.ndarray:
    """Cells occupied, inside a labelled bounding box, and near a segmented cell."""
    m_occu, m_label, m_seg = _as_array(m_occu), _as_array(m_label), _as_array(m_seg)
    _check_same_shape(m_occu, m_label, m_seg)
    seg = dilate(m_seg > cfg.threshold, cfg.seg_kernel)
    return intersect3(m_occu, m_label, seg, cfg.threshold)


def imaginable_filter(v_object_gt, v_seen, cfg: GtConfig = GtConfig()) -> np.ndarray:
    """Dilate the visible object cells by ``cfg.delta``.

    Objects without a single visible cell yield an empty filter and so drop
    out of the training target entirely.
    """
    v_object_gt, v_seen = _as_array(v_object_gt), _as_array(v_seen)
    _check_same_shape(v_object_gt, v_seen)
    seed = (v_object_gt > cfg.threshold) & (v_seen > cfg.threshold)
    return dilate(seed, cfg.delta)


def seen_star(v_object, v_seen, cfg: GtConfig = GtConfig(), epsilon: int | None = None) -> np.ndarray:
    v_object, v_seen = _as_array(v_object), _as_array(v_seen)
    _check_same_shape(v_object, v_seen)
    seed = (v_object > cfg.threshold) & (v_seen > cfg.threshold)
    return dilate(seed, cfg.epsilon if epsilon is None else epsilon)


def make_target(scene_gt, pose: Pose, obs: ObservationStack, class_id: int,
                cfg: GtConfig = GtConfig(), resolution: float | None = None) -> GroundTruthBundle:
    """Crop the class ground truth around ``pose`` and keep only imaginable cells.

    The filter seed is the set of ground-truth cells the sensor actually
    hit, so objects hidden behind walls are removed from the target.
    """
    size = obs.seen.shape[0]
    crop = crop_ego(scene_gt, pose, size, resolution) > cfg.threshold
    visible = crop & (obs.class_visible[class_id] > cfg.threshold)
    filt = imaginable_filter(visible, obs.seen, cfg)
    star = seen_star(visible, obs.seen, cfg)
    target = (crop & filt).astype(np.float32)
    return GroundTruthBundle(target, filt, star)
