from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from ..ground_truth import GroundTruthBundle
from ..scene_sim import ObservationStack


@dataclass
class Sample:
    obs: ObservationStack
    targets: Dict[int, GroundTruthBundle]
    scene_id: int


class ReplayBuffer:
    """FIFO ring of training samples with scene-stratified batch sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i) -> Sample:
        return self._items[i]

    def push(self, sample: Sample) -> None:
        self._items.append(sample)

    def sample(self, batch_size: int, rng: np.random.Generator, scenes_per_batch: int = 16) -> List[Sample]:
        """Draw without replacement, covering as many distinct scenes as allowed.

        One sample is first drawn from each of ``min(scenes_per_batch,
        distinct scenes, batch_size)`` randomly chosen scenes; the rest of
        the batch is filled uniformly from the remaining samples.
        """
        n = len(self._items)
        batch_size = min(batch_size, n)
        scene_ids = np.array([s.scene_id for s in self._items])
        distinct = np.unique(scene_ids)
        k = min(scenes_per_batch, len(distinct), batch_size)
        chosen_scenes = rng.choice(distinct, size=k, replace=False)
        picked = []
        for sid in chosen_scenes:
            picked.append(int(rng.choice(np.flatnonzero(scene_ids == sid))))
        rest = np.setdiff1d(np.arange(n), picked)
        extra = rng.choice(rest, size=batch_size - k, replace=False) if batch_size > k else []
        return [self._items[i] for i in [*picked, *map(int, extra)]]
