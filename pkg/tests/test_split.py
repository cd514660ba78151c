import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from haan.dataset import DatasetManifest, LabelHierarchy, VideoRecord
from haan.split import InfeasibleSplitError, greedy_split
from haan.synthetic import random_label_corpus


def _single_label(n_classes, per_class):
    h = LabelHierarchy([f"c{j}" for j in range(n_classes)], ["all"], [list(range(n_classes))])
    vids = [VideoRecord(f"v{j}_{k}", 1, [j], "f") for j in range(n_classes) for k in range(per_class)]
    return DatasetManifest(h, vids, 1)


def test_exact_divisibility():
    res = greedy_split(_single_label(5, 4), ratio=0.75, attempts=10)
    assert all(r == 0.75 for r in res.per_class_ratios.values())
    assert len(res.train) == 15 and len(res.val) == 5


def test_infeasible_class_named():
    h = LabelHierarchy(["a", "b"], ["all"], [[0, 1]])
    vids = [VideoRecord("v0", 1, [0], "f"), VideoRecord("v1", 1, [0], "f"), VideoRecord("v2", 1, [1], "f")]
    with pytest.raises(InfeasibleSplitError, match="'b'"):
        greedy_split(DatasetManifest(h, vids, 1))


def test_bad_ratio():
    with pytest.raises(ValueError):
        greedy_split(_single_label(2, 4), ratio=1.0)


def test_deterministic():
    m = random_label_corpus(12, 120, seed=3)
    a, b = greedy_split(m, attempts=20, seed=7), greedy_split(m, attempts=20, seed=7)
    assert a.train == b.train and a.val == b.val


def test_multilabel_band():
    m = random_label_corpus(30, 500, seed=0)
    res = greedy_split(m, ratio=0.75, attempts=100, seed=0)
    ratios = np.array(list(res.per_class_ratios.values()))
    assert ratios.min() >= 0.75 and ratios.max() <= 0.85


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 15), st.integers(30, 120), st.integers(0, 10_000), st.floats(0.3, 0.9))
def test_split_partitions_and_covers(n_classes, n_videos, seed, ratio):
    m = random_label_corpus(n_classes, n_videos, seed=seed, skew=0.3)
    counts = m.label_matrix().sum(axis=0)
    if counts.min() < 2:
        with pytest.raises(InfeasibleSplitError):
            greedy_split(m, ratio=ratio, attempts=3, seed=seed)
        return
    res = greedy_split(m, ratio=ratio, attempts=3, seed=seed)
    train, val = set(res.train), set(res.val)
    assert not train & val
    assert train | val == {v.id for v in m.videos}
    y = m.label_matrix() > 0
    index = {v.id: i for i, v in enumerate(m.videos)}
    assert y[[index[v] for v in res.train]].any(axis=0).all()
    if np.isfinite(res.objective):
        assert y[[index[v] for v in res.val]].any(axis=0).all()
