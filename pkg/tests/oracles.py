"""Brute-force references shared by the test modules."""

import itertools

from haan.detection import temporal_iou


def oracle_ap(dets, gts, thr):
    """Exhaustive search over one-to-one matchings.

    Among all valid partial matchings of the ranked detections, the greedy
    rule picks the one whose per-rank tuple (tIoU of the matched ground truth,
    or -1, with the negated ground-truth index as tie breaker) is
    lexicographically largest. AP follows directly from the hit pattern.
    """
    n_gt = sum(len(v) for v in gts.values())
    order = sorted(dets, key=lambda d: (-d[3], d[0], d[1]))
    flat = [(vid, i, seg) for vid, segs in gts.items() for i, seg in enumerate(segs)]
    options = []
    for vid, s, e, _ in order:
        opts = [None] + [g for g, (gv, _, seg) in enumerate(flat)
                         if gv == vid and temporal_iou((s, e), seg) >= thr]
        options.append(opts)
    best_key, best = None, None
    for choice in itertools.product(*options):
        used = [c for c in choice if c is not None]
        if len(used) != len(set(used)):
            continue
        key = []
        for (vid, s, e, _), c in zip(order, choice):
            key.append((-1.0, 0) if c is None else (temporal_iou((s, e), flat[c][2]), -flat[c][1]))
        if best_key is None or key > best_key:
            best_key, best = key, choice
    tp, total = 0, 0.0
    for rank, c in enumerate(best, 1):
        if c is not None:
            tp += 1
            total += tp / rank
    return total / n_gt


def random_instance(rng):
    vids = ["a", "b"][: int(rng.integers(1, 3))]
    gts = {}
    for _ in range(int(rng.integers(1, 4))):
        v = str(rng.choice(vids))
        s = int(rng.integers(0, 12))
        gts.setdefault(v, []).append((s, s + int(rng.integers(1, 6))))
    dets = []
    for _ in range(int(rng.integers(0, 6))):
        v = str(rng.choice(vids))
        s = int(rng.integers(0, 12))
        conf = float(rng.choice([0.2, 0.5, 0.9, rng.random()]))  # repeated values exercise ties
        dets.append((v, s, s + int(rng.integers(1, 6)), conf))
    return dets, gts
