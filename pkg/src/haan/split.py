"""Greedy iterative train/val split with per-class ratio control.

One attempt:

1. Greedy set cover seeds the training set, then the validation set, with
   videos until each contains every fine class.
2. While some class has a training ratio below the target, take the class
   with the lowest ratio and move one unassigned video containing it into
   training.
3. Everything left over goes to validation.

Several seeded attempts are made and the split whose per-class ratios have
the smallest squared deviation from the target is kept.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from .dataset import DatasetManifest


class InfeasibleSplitError(ValueError):
    def __init__(self, class_name: str, count: int):
        super().__init__(f"class {class_name!r} occurs in {count} video(s); a split needs at least 2")
        self.class_name = class_name


@dataclass
class SplitResult:
    train: List[str]
    val: List[str]
    per_class_ratios: Dict[str, float]
    objective: float
    attempt: int

    def to_json(self) -> dict:
        return {"train": self.train, "val": self.val, "per_class_ratios": self.per_class_ratios}


def _cover(labels: np.ndarray, pool: np.ndarray, rng: np.random.Generator) -> List[int]:
    """Greedy set cover of all classes using videos from ``pool``."""
    need = labels[pool].any(axis=0) if pool.size else np.zeros(labels.shape[1], bool)
    uncovered = need.copy()
    chosen: List[int] = []
    available = pool.copy()
    while uncovered.any():
        gain = labels[available][:, uncovered].sum(axis=1)
        best = np.flatnonzero(gain == gain.max())
        pick = int(rng.choice(best))
        chosen.append(int(available[pick]))
        uncovered &= ~labels[available[pick]]
        available = np.delete(available, pick)
    return chosen


def _one_attempt(labels: np.ndarray, ratio: float, rng: np.random.Generator) -> np.ndarray:
    n_videos, n_cls = labels.shape
    totals = labels.sum(axis=0)
    state = np.zeros(n_videos, dtype=np.int8)  # 0 unassigned, 1 train, 2 val
    for v in _cover(labels, np.arange(n_videos), rng):
        state[v] = 1
    for v in _cover(labels, np.flatnonzero(state == 0), rng):
        state[v] = 2

    train_count = labels[state == 1].sum(axis=0).astype(float)
    open_count = labels[state == 0].sum(axis=0)
    while True:
        ratios = train_count / totals
        hungry = (ratios < ratio) & (open_count > 0)
        if not hungry.any():
            break
        lowest = np.where(hungry, ratios, np.inf)
        cls = int(rng.choice(np.flatnonzero(lowest == lowest.min())))
        cand = np.flatnonzero((state == 0) & labels[:, cls])
        # least collateral: prefer videos whose other labels would overshoot
        # the target the least after the move
        after = (train_count + 1) / totals - ratio
        harm = (labels[cand] * np.maximum(after, 0)).sum(axis=1) - np.maximum(after[cls], 0)
        best = cand[harm == harm.min()]
        v = int(rng.choice(best))
        state[v] = 1
        train_count += labels[v]
        open_count -= labels[v]
    state[state == 0] = 2
    return state


def greedy_split(manifest: DatasetManifest, ratio: float = 0.75, attempts: int = 100,
                 seed: int = 0) -> SplitResult:
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    labels = manifest.label_matrix() > 0
    totals = labels.sum(axis=0)
    names = manifest.hierarchy.fine
    for j in np.flatnonzero(totals < 2):
        raise InfeasibleSplitError(names[j], int(totals[j]))

    rng = np.random.default_rng(seed)
    best = None
    for attempt in range(attempts):
        state = _one_attempt(labels, ratio, rng)
        ratios = labels[state == 1].sum(axis=0) / totals
        objective = float(np.sum((ratios - ratio) ** 2))
        if not labels[state == 2].any(axis=0).all():
            objective = np.inf  # a class ended up with no validation video
        if best is None or objective < best[0]:
            best = (objective, attempt, state, ratios)
    objective, attempt, state, ratios = best
    ids = [v.id for v in manifest.videos]
    return SplitResult(
        train=[ids[i] for i in np.flatnonzero(state == 1)],
        val=[ids[i] for i in np.flatnonzero(state == 2)],
        per_class_ratios={names[j]: float(ratios[j]) for j in range(len(names))},
        objective=objective,
        attempt=attempt,
    )
