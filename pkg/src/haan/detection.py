"""Two-step inference (video classification, then thresholded segments) and mAP evaluation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .dataset import DatasetManifest

PROTOCOLS: Dict[str, List[float]] = {
    "finegym": [round(0.1 + 0.05 * i, 2) for i in range(9)],
    "fineaction": [round(0.5 + 0.05 * i, 2) for i in range(10)],
}


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class DetectionSegment:
    fine_class: int
    start_clip: int
    end_clip: int  # exclusive
    confidence: float


@dataclass
class InferenceConfig:
    alpha: float = 0.1
    classify_topk: int = 5
    classify_threshold: float = 0.5
    merge_gap: int = 0

    def validate(self) -> None:
        if self.classify_topk < 1:
            raise ValueError("classify_topk must be at least 1")
        if not 0 < self.classify_threshold < 1:
            raise ValueError("classify_threshold must lie in (0, 1)")
        if self.merge_gap < 0:
            raise ValueError("merge_gap must be non-negative")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def video_class_probs(scores: np.ndarray, topk: int) -> np.ndarray:
    """Sigmoid of the mean of each class's ``topk`` highest clip logits."""
    s = np.asarray(scores, dtype=np.float64)
    k = min(topk, s.shape[0])
    top = -np.sort(-s, axis=0)[:k]
    return _sigmoid(top.mean(axis=0))


def classify_video(scores: np.ndarray, cfg: InferenceConfig) -> List[int]:
    """Fine classes whose top-k probability is strictly above the threshold."""
    probs = video_class_probs(scores, cfg.classify_topk)
    return [int(j) for j in np.flatnonzero(probs > cfg.classify_threshold)]


def detect_segments(class_scores: np.ndarray, fine_class: int, cfg: InferenceConfig) -> List[DetectionSegment]:
    """Runs of clips scoring strictly above ``mean + alpha * (max - min)``.

    Runs separated by at most ``merge_gap`` clips are joined; confidence is the
    mean score over the joined span.
    """
    s = np.asarray(class_scores, dtype=np.float64)
    thresh = s.mean() + cfg.alpha * (s.max() - s.min())
    hot = np.flatnonzero(s > thresh)
    if hot.size == 0:
        return []
    runs: List[List[int]] = [[int(hot[0]), int(hot[0]) + 1]]
    for i in hot[1:]:
        if i - runs[-1][1] <= cfg.merge_gap:
            runs[-1][1] = int(i) + 1
        else:
            runs.append([int(i), int(i) + 1])
    return [DetectionSegment(fine_class, a, b, float(s[a:b].mean())) for a, b in runs]


def temporal_iou(a: Tuple[int, int], b: Tuple[int, int]) -> float:
    """Intersection over union of two half-open clip ranges."""
    (a0, a1), (b0, b1) = a, b
    inter = max(0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union if union > 0 else 0.0


Detection = Tuple[str, int, int, float]  # video id, start, end, confidence


def average_precision(detections: Sequence[Detection], ground_truth: Mapping[str, Sequence[Tuple[int, int]]],
                      threshold: float) -> float:
    """Greedy one-to-one matching in descending confidence; step-summed precision / #GT.

    Confidence ties are ordered by video id, then start clip. A detection takes
    the free ground truth of its video with the highest tIoU (lowest index on ties).
    """
    n_gt = sum(len(v) for v in ground_truth.values())
    if n_gt == 0:
        raise EvaluationError("average precision is undefined without ground truth")
    order = sorted(detections, key=lambda d: (-d[3], d[0], d[1]))
    used = {vid: [False] * len(segs) for vid, segs in ground_truth.items()}
    hits = []
    tp = 0
    for rank, (vid, start, end, _) in enumerate(order, 1):
        best, best_iou = -1, -1.0
        for g, seg in enumerate(ground_truth.get(vid, ())):
            if used[vid][g]:
                continue
            iou = temporal_iou((start, end), seg)
            if iou >= threshold and iou > best_iou:
                best, best_iou = g, iou
        if best >= 0:
            used[vid][best] = True
            tp += 1
            hits.append(tp / rank)
    return math.fsum(hits) / n_gt


def run_inference(scores: Mapping[str, np.ndarray], cfg: InferenceConfig) -> Dict[int, List[Detection]]:
    """Class -> detections over all videos."""
    out: Dict[int, List[Detection]] = {}
    for vid, s in scores.items():
        for j in classify_video(s, cfg):
            for seg in detect_segments(s[:, j], j, cfg):
                out.setdefault(j, []).append((vid, seg.start_clip, seg.end_clip, seg.confidence))
    return out


def ground_truth_by_class(manifest: DatasetManifest) -> Dict[int, Dict[str, List[Tuple[int, int]]]]:
    gt: Dict[int, Dict[str, List[Tuple[int, int]]]] = {}
    for rec in manifest.videos:
        if rec.segments is None:
            raise EvaluationError(f"video {rec.id!r} has no temporal annotations")
        for s in rec.segments:
            gt.setdefault(s.fine_class, {}).setdefault(rec.id, []).append((s.start_clip, s.end_clip))
    return gt


def map_report(scores: Mapping[str, np.ndarray], manifest: DatasetManifest, protocol: str = "finegym",
               cfg: Optional[InferenceConfig] = None, thresholds: Optional[Iterable[float]] = None) -> dict:
    """Per-class AP at each tIoU threshold, mAP per threshold and their average.

    Classes without ground truth segments are left out of the means.
    """
    cfg = cfg or InferenceConfig()
    cfg.validate()
    grid = list(thresholds) if thresholds is not None else PROTOCOLS[protocol]
    if any(b <= a for a, b in zip(grid, grid[1:])) or not all(0 < t <= 1 for t in grid):
        raise EvaluationError("tIoU thresholds must be strictly increasing in (0, 1]")
    gt = ground_truth_by_class(manifest)
    if not gt:
        raise EvaluationError("no ground truth segments to evaluate against")
    missing = [v.id for v in manifest.videos if v.id not in scores]
    if missing:
        raise EvaluationError(f"no scores for videos {missing[:5]}")
    dets = run_inference({v.id: scores[v.id] for v in manifest.videos}, cfg)
    names = manifest.hierarchy.fine
    per_class = {}
    for j in sorted(gt):
        per_class[names[j]] = {f"{t:.2f}": average_precision(dets.get(j, []), gt[j], t) for t in grid}
    map_per = {f"{t:.2f}": math.fsum(ap[f"{t:.2f}"] for ap in per_class.values()) / len(per_class)
               for t in grid}
    return {
        "protocol": protocol if thresholds is None else "custom",
        "thresholds": grid,
        "per_class_ap": per_class,
        "map_per_threshold": map_per,
        "avg_map": math.fsum(map_per.values()) / len(map_per),
        "inference_config": asdict(cfg),
        "segment_confidence": "mean clip score inside the segment",
    }


def write_report(report: dict, json_path, csv_path=None) -> None:
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "tiou", "ap"])
            for cls, aps in report["per_class_ap"].items():
                for t, ap in aps.items():
                    w.writerow([cls, t, repr(ap)])


def write_detections(detections: Mapping[int, Sequence[Detection]], class_names: Sequence[str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for j in sorted(detections):
            for vid, start, end, conf in detections[j]:
                fh.write(json.dumps({"video": vid, "class": class_names[j], "start_clip": start,
                                     "end_clip": end, "confidence": conf}) + "\n")
