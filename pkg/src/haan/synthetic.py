"""Synthetic fine-grained corpus built from reusable atomic actions.

Each atomic action gets a fixed unit-norm prototype; an action segment of a
fine class replays the class's atomic sequence, every atomic instance lasting
a few clips, and every clip is its prototype plus Gaussian noise. Segments are
separated by background clips drawn around a dedicated background prototype.
The per-clip atomic ids are kept as ground truth for diagnostics.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .dataset import DatasetManifest, LabelHierarchy, SegmentAnnotation, VideoRecord

BACKGROUND = -1


class SynthConfigError(ValueError):
    pass


def _default_compositions() -> List[List[int]]:
    # three families, each sharing a leading atomic action; family members
    # differ in what follows it (atomic 0 alone vs 0 then 1, as in a skill
    # performed with or without a trailing turn)
    return [[0], [0, 1], [0, 2], [3], [3, 4], [3, 4, 4], [5, 1], [5, 2]]


@dataclass
class SynthConfig:
    num_atomic: int = 6
    atomic_dim: int = 32
    compositions: List[List[int]] = field(default_factory=_default_compositions)
    grouping: List[List[int]] = field(default_factory=lambda: [[0, 1, 2], [3, 4, 5], [6, 7]])
    fine_names: List[str] | None = None
    coarse_names: List[str] | None = None
    videos_per_split: Dict[str, int] = field(default_factory=lambda: {"train": 200, "val": 60})
    clips_per_atomic: Tuple[int, int] = (2, 4)
    actions_per_video: Tuple[int, int] = (1, 3)
    gap_clips: Tuple[int, int] = (2, 6)
    noise_sigma: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.num_atomic < 1 or self.atomic_dim < 1:
            raise SynthConfigError("num_atomic and atomic_dim must be positive")
        if not self.compositions:
            raise SynthConfigError("at least one fine class composition is required")
        for j, comp in enumerate(self.compositions):
            if not comp:
                raise SynthConfigError(f"fine class {j} has an empty composition")
            bad = [a for a in comp if not 0 <= a < self.num_atomic]
            if bad:
                raise SynthConfigError(f"fine class {j} references unknown atomic ids {bad}")
        if len({tuple(c) for c in self.compositions}) != len(self.compositions):
            raise SynthConfigError("fine class compositions must be pairwise distinct")
        if self.noise_sigma < 0:
            raise SynthConfigError("noise_sigma must be non-negative")
        for name in ("clips_per_atomic", "actions_per_video", "gap_clips"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < (0 if name == "gap_clips" else 1):
                raise SynthConfigError(f"{name} must be an increasing range, got {(lo, hi)}")
        self.hierarchy()  # partition check

    def hierarchy(self) -> LabelHierarchy:
        fine = self.fine_names or [
            "fine_%d_%s" % (j, "-".join(map(str, c))) for j, c in enumerate(self.compositions)]
        coarse = self.coarse_names or [f"coarse_{u}" for u in range(len(self.grouping))]
        try:
            return LabelHierarchy(list(fine), list(coarse), [list(g) for g in self.grouping])
        except ValueError as exc:
            raise SynthConfigError(str(exc)) from None

    def to_json(self) -> dict:
        out = asdict(self)
        for key in ("clips_per_atomic", "actions_per_video", "gap_clips"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise SynthConfigError(f"unknown synth config keys: {sorted(unknown)}")
        kwargs = dict(obj)
        for key in ("clips_per_atomic", "actions_per_video", "gap_clips"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class SyntheticCorpus:
    manifest: DatasetManifest
    features: Dict[str, np.ndarray]
    atomic_truth: Dict[str, List[int]]
    split: Dict[str, List[str]]
    prototypes: np.ndarray  # (num_atomic + 1, dim); last row is background


def _unit(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_synthetic(config: SynthConfig) -> SyntheticCorpus:
    """Generate a corpus deterministically from ``config.seed``."""
    config.validate()
    hierarchy = config.hierarchy()
    rng = np.random.default_rng(config.seed)
    protos = _unit(rng, config.num_atomic + 1, config.atomic_dim)
    n_cls = len(config.compositions)

    videos, features, truth, split = [], {}, {}, {}
    for split_name, count in config.videos_per_split.items():
        split[split_name] = []
        for k in range(count):
            vid = f"{split_name}_{k:04d}"
            n_act = int(rng.integers(config.actions_per_video[0], config.actions_per_video[1] + 1))
            classes = rng.integers(0, n_cls, size=n_act)
            ids: List[int] = []
            segments = []
            for cls in classes:
                ids.extend([BACKGROUND] * int(rng.integers(config.gap_clips[0], config.gap_clips[1] + 1)))
                start = len(ids)
                comp = config.compositions[int(cls)]
                for atomic in comp:
                    ids.extend([atomic] * int(rng.integers(config.clips_per_atomic[0],
                                                           config.clips_per_atomic[1] + 1)))
                segments.append(SegmentAnnotation(int(cls), start, len(ids), list(comp)))
            ids.extend([BACKGROUND] * int(rng.integers(config.gap_clips[0], config.gap_clips[1] + 1)))
            if not ids:
                ids = [BACKGROUND]
            idx = np.array(ids)
            feats = protos[np.where(idx == BACKGROUND, config.num_atomic, idx)]
            if config.noise_sigma > 0:
                feats = feats + config.noise_sigma * rng.standard_normal(feats.shape)
            features[vid] = feats.astype(np.float32)
            truth[vid] = ids
            videos.append(VideoRecord(vid, len(ids), sorted({int(c) for c in classes}),
                                      f"features/{vid}.feat", segments))
            split[split_name].append(vid)
    manifest = DatasetManifest(hierarchy, videos, config.atomic_dim)
    return SyntheticCorpus(manifest, features, truth, split, protos.astype(np.float32))


def write_sidecar(path, atomic_truth: Dict[str, List[int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(atomic_truth, fh, separators=(",", ":"))
        fh.write("\n")


def read_sidecar(path) -> Dict[str, List[int]]:
    with open(path, encoding="utf-8") as fh:
        return {k: list(v) for k, v in json.load(fh).items()}


def random_label_corpus(num_classes: int, num_videos: int, seed: int = 0,
                        labels_per_video: Tuple[int, int] = (1, 4), skew: float = 0.5) -> DatasetManifest:
    """Label-only multi-label corpus with a mildly long-tailed class frequency.

    Useful for exercising split generation where features are irrelevant.
    """
    rng = np.random.default_rng(seed)
    weights = 1.0 / np.arange(1, num_classes + 1) ** skew
    weights /= weights.sum()
    hierarchy = LabelHierarchy([f"c{j}" for j in range(num_classes)], ["all"], [list(range(num_classes))])
    videos = []
    for k in range(num_videos):
        n = int(rng.integers(labels_per_video[0], labels_per_video[1] + 1))
        labels = sorted({int(j) for j in rng.choice(num_classes, size=n, p=weights)})
        videos.append(VideoRecord(f"v{k:05d}", 1, labels, f"features/v{k:05d}.feat"))
    return DatasetManifest(hierarchy, videos, 1)
