import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from haan.dataset import (DatasetError, DatasetManifest, LabelHierarchy, SegmentAnnotation, VideoRecord,
                          coarse_labels_from_fine, load_dataset, read_features, save_dataset, write_features)

H = LabelHierarchy(["a", "b", "c", "d"], ["x", "y"], [[0, 2], [1, 3]])


def _two_videos():
    vids = [
        VideoRecord("v0", 10, [0], "features/v0.feat", [SegmentAnnotation(0, 2, 5)]),
        VideoRecord("v1", 4, [1, 3], "features/v1.feat"),
    ]
    rng = np.random.default_rng(0)
    feats = {"v0": rng.standard_normal((10, 3)).astype(np.float32),
             "v1": rng.standard_normal((4, 3)).astype(np.float32)}
    return DatasetManifest(H, vids, 3), feats


def test_round_trip(tmp_path):
    manifest, feats = _two_videos()
    save_dataset(manifest, feats, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds", check_values=True)
    assert back == manifest
    assert len(back.videos) == 2
    for vid, arr in feats.items():
        assert np.array_equal(back.features(vid), arr)


def test_manifest_fields(tmp_path):
    manifest, feats = _two_videos()
    save_dataset(manifest, feats, tmp_path / "ds")
    obj = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert set(obj) == {"feature_dim", "hierarchy", "videos"}
    assert set(obj["hierarchy"]) == {"fine", "coarse", "grouping"}
    assert set(obj["videos"][0]) == {"id", "num_clips", "fine_labels", "segments", "feature_file"}
    assert "segments" not in obj["videos"][1]


def test_feature_file_layout(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_features(tmp_path / "f.feat", arr)
    raw = (tmp_path / "f.feat").read_bytes()
    assert raw[:8] == b"HAANFEAT"
    assert raw[8:16] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert np.array_equal(np.frombuffer(raw[16:], "<f4").reshape(2, 3), arr)
    assert np.array_equal(read_features(tmp_path / "f.feat"), arr)


def test_header_mismatch_names_video(tmp_path):
    manifest, feats = _two_videos()
    save_dataset(manifest, feats, tmp_path / "ds")
    write_features(tmp_path / "ds" / "features" / "v0.feat", np.zeros((12, 3), np.float32))
    with pytest.raises(DatasetError, match="v0"):
        load_dataset(tmp_path / "ds")


def test_missing_feature_file(tmp_path):
    manifest, feats = _two_videos()
    save_dataset(manifest, feats, tmp_path / "ds")
    (tmp_path / "ds" / "features" / "v1.feat").unlink()
    with pytest.raises(DatasetError, match="v1"):
        load_dataset(tmp_path / "ds")


def test_non_finite_values(tmp_path):
    manifest, feats = _two_videos()
    feats["v1"] = feats["v1"].copy()
    feats["v1"][0, 0] = np.inf
    save_dataset(manifest, feats, tmp_path / "ds")
    ds = load_dataset(tmp_path / "ds")
    with pytest.raises(DatasetError, match="v1"):
        ds.features("v1")
    with pytest.raises(DatasetError, match="v1"):
        load_dataset(tmp_path / "ds", check_values=True)


def test_empty_video_list(tmp_path):
    save_dataset(DatasetManifest(H, [], 5), {}, tmp_path / "ds")
    assert load_dataset(tmp_path / "ds").videos == []


def test_overwrite_needs_force(tmp_path):
    manifest, feats = _two_videos()
    save_dataset(manifest, feats, tmp_path / "ds")
    with pytest.raises(FileExistsError):
        save_dataset(manifest, feats, tmp_path / "ds")
    save_dataset(manifest, feats, tmp_path / "ds", force=True)


def test_missing_parent_is_an_error(tmp_path):
    manifest, feats = _two_videos()
    with pytest.raises(FileNotFoundError):
        save_dataset(manifest, feats, tmp_path / "no" / "such")


@pytest.mark.parametrize("record", [
    VideoRecord("v", 5, [], "f"),
    VideoRecord("v", 5, [7], "f"),
    VideoRecord("v", 0, [0], "f"),
    VideoRecord("v", 5, [0], "f", [SegmentAnnotation(0, 3, 3)]),
    VideoRecord("v", 5, [0], "f", [SegmentAnnotation(0, 2, 6)]),
    VideoRecord("v", 5, [0], "f", [SegmentAnnotation(9, 0, 1)]),
])
def test_invalid_records(record):
    with pytest.raises(DatasetError):
        DatasetManifest(H, [record], 2)


def test_duplicate_ids():
    r = VideoRecord("v", 5, [0], "f")
    with pytest.raises(DatasetError):
        DatasetManifest(H, [r, r], 2)


@pytest.mark.parametrize("grouping", [[[0, 1], [1, 2, 3]], [[0, 1, 2, 3], []], [[0, 1], [2]]])
def test_hierarchy_must_partition(grouping):
    with pytest.raises(DatasetError):
        LabelHierarchy(["a", "b", "c", "d"], ["x", "y"], grouping)


def test_coarse_labels_cases():
    assert coarse_labels_from_fine(np.zeros(4), H).tolist() == [0, 0]
    assert coarse_labels_from_fine(np.array([0, 0, 1, 0]), H).tolist() == [1, 0]
    assert coarse_labels_from_fine(np.array([1, 0, 1, 0]), H).tolist() == [1, 0]
    with pytest.raises(DatasetError):
        coarse_labels_from_fine(np.zeros(3), H)


@given(st.lists(st.booleans(), min_size=4, max_size=4), st.lists(st.booleans(), min_size=4, max_size=4))
def test_coarse_labels_distribute_over_union(a, b):
    a, b = np.array(a), np.array(b)
    union = coarse_labels_from_fine(a | b, H)
    assert np.array_equal(union, coarse_labels_from_fine(a, H) | coarse_labels_from_fine(b, H))
