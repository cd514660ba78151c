"""Class-to-concept relevance of a trained model (machine-readable concept maps)."""

from __future__ import annotations

from collections import Counter
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .autodiff import Tensor
from .dataset import DatasetManifest
from .model import concept_distances, encode, extract_visual_concepts, topk_selection
from .trainer import TrainConfig, refresh_pseudo_labels

MAX_EXAMPLES = 5


def _runs(labels: np.ndarray, value: int) -> List[List[int]]:
    hit = np.flatnonzero(labels == value)
    runs: List[List[int]] = []
    for i in hit:
        if runs and runs[-1][1] == i:
            runs[-1][1] = int(i) + 1
        else:
            runs.append([int(i), int(i) + 1])
    return runs


def inspect(manifest: DatasetManifest, train_ids: Sequence[str], features: Mapping[str, np.ndarray],
            params: Mapping[str, Tensor], cfg: TrainConfig,
            atomic_truth: Optional[Mapping[str, Sequence[int]]] = None) -> dict:
    """TopK concepts per fine class and example clip ranges per concept.

    Concepts are re-clustered from the model's clip encodings. A concept is
    ranked for class j by how often it falls in the class's TopK set over the
    training videos labelled j, ties broken by mean distance to ``w^j``. With
    ``atomic_truth`` each concept gets the majority atomic id of its clips and
    ``relevance`` is the share of selected (class, concept) pairs whose atomic
    occurs in the class composition.
    """
    labels, model = refresh_pseudo_labels(features, list(train_ids), params, cfg, cfg.epochs)
    n, k = cfg.n_concepts, cfg.topk_concepts
    table = manifest.by_id()
    names = manifest.hierarchy.fine
    counts = np.zeros((len(names), n))
    dist_sum = np.zeros((len(names), n))
    for vid in train_ids:
        x = encode(params, features[vid])
        bank = extract_visual_concepts(x, labels[vid], n)
        dist = concept_distances(bank, params["mil.w"], cfg.distance)
        sel = topk_selection(dist, k)[0]
        for j in table[vid].fine_labels:
            counts[j] += sel[j]
            dist_sum[j] += np.where(sel[j], dist[0, :, j], 0.0)

    ranked: Dict[str, List[int]] = {}
    detail: Dict[str, List[dict]] = {}
    for j, name in enumerate(names):
        mean_d = np.divide(dist_sum[j], counts[j], out=np.full(n, np.inf), where=counts[j] > 0)
        order = sorted((c for c in range(n) if counts[j, c] > 0), key=lambda c: (-counts[j, c], mean_d[c], c))
        ranked[name] = order[:k]
        detail[name] = [{"concept": c, "selected": int(counts[j, c]), "mean_distance": float(mean_d[c])}
                        for c in order[:k]]

    examples: Dict[str, List[dict]] = {str(c): [] for c in range(n)}
    for vid in train_ids:
        for c in range(n):
            if len(examples[str(c)]) >= MAX_EXAMPLES:
                continue
            for start, end in _runs(labels[vid], c)[:MAX_EXAMPLES - len(examples[str(c)])]:
                examples[str(c)].append({"video": vid, "start_clip": start, "end_clip": end})

    out = {"class_concepts": ranked, "class_concept_details": detail, "concept_examples": examples,
           "n_concepts": n, "topk": k, "clustering": model.method}
    if atomic_truth is not None:
        out.update(_relevance(manifest, train_ids, labels, atomic_truth, ranked, n))
    return out


def _relevance(manifest, train_ids, labels, truth, ranked, n) -> dict:
    votes = [Counter() for _ in range(n)]
    for vid in train_ids:
        for c, a in zip(labels[vid].tolist(), truth[vid]):
            votes[c][int(a)] += 1
    majority = {c: (min(v.items(), key=lambda kv: (-kv[1], kv[0]))[0] if v else None) for c, v in enumerate(votes)}
    compositions: Dict[int, set] = {}
    for rec in manifest.videos:
        for seg in rec.segments or ():
            if seg.atomic_sequence is not None:
                compositions.setdefault(seg.fine_class, set()).update(seg.atomic_sequence)
    names = manifest.hierarchy.fine
    hits = total = 0
    per_class = {}
    for j, name in enumerate(names):
        comp = compositions.get(j)
        if comp is None:
            continue
        good = [majority[c] in comp for c in ranked[name]]
        per_class[name] = float(np.mean(good)) if good else 0.0
        hits += sum(good)
        total += len(good)
    return {"concept_atomic": {str(c): majority[c] for c in range(n)},
            "class_relevance": per_class,
            "relevance": hits / total if total else 0.0}
