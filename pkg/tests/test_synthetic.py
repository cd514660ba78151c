import numpy as np
import pytest

from haan.dataset import load_dataset, save_dataset
from haan.synthetic import (BACKGROUND, SynthConfig, SynthConfigError, generate_synthetic, read_sidecar,
                            write_sidecar)


def _small(**kw):
    base = dict(videos_per_split={"train": 12, "val": 4})
    base.update(kw)
    return SynthConfig(**base)


def test_zero_noise_single_class():
    cfg = _small(compositions=[[0]], grouping=[[0]], noise_sigma=0.0, videos_per_split={"train": 1})
    c = generate_synthetic(cfg)
    vid = c.split["train"][0]
    truth = np.array(c.atomic_truth[vid])
    assert np.all(c.features[vid][truth == 0] == c.prototypes[0])
    assert np.all(c.features[vid][truth == BACKGROUND] == c.prototypes[-1])


def test_zero_noise_atomics_bitwise_identical():
    c = generate_synthetic(_small(noise_sigma=0.0))
    rows = {}
    for vid, truth in c.atomic_truth.items():
        for clip, a in enumerate(truth):
            rows.setdefault(a, set()).add(c.features[vid][clip].tobytes())
    assert all(len(v) == 1 for v in rows.values())


def test_prototypes_unit_norm():
    c = generate_synthetic(_small())
    assert np.allclose(np.linalg.norm(c.prototypes, axis=1), 1.0, atol=1e-6)


def test_deterministic_bytes(tmp_path):
    for name in ("a", "b"):
        c = generate_synthetic(_small(seed=9))
        save_dataset(c.manifest, c.features, tmp_path / name)
        write_sidecar(tmp_path / name / "atomic_truth.json", c.atomic_truth)
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_segments_ordered_and_match_truth():
    cfg = _small()
    c = generate_synthetic(cfg)
    for rec in c.manifest.videos:
        truth = c.atomic_truth[rec.id]
        assert len(truth) == rec.num_clips
        ends = 0
        for seg in rec.segments:
            assert seg.start_clip >= ends
            ends = seg.end_clip
            comp = cfg.compositions[seg.fine_class]
            inside = truth[seg.start_clip:seg.end_clip]
            # run-length collapse recovers the composition (repeated atomics keep their count)
            runs = [a for i, a in enumerate(inside) if i == 0 or inside[i - 1] != a]
            assert BACKGROUND not in inside
            assert len(runs) <= len(comp) and set(runs) == set(comp)
            assert seg.atomic_sequence == comp
        assert sorted({s.fine_class for s in rec.segments}) == rec.fine_labels


def test_prefix_sharing_pattern_present():
    cfg = SynthConfig()
    comps = [tuple(c) for c in cfg.compositions]
    assert any(len(b) > len(a) and b[:len(a)] == a for a in comps for b in comps)
    assert len(set(comps)) == len(comps)


def test_round_trip_with_sidecar(tmp_path):
    c = generate_synthetic(_small())
    save_dataset(c.manifest, c.features, tmp_path / "ds")
    write_sidecar(tmp_path / "ds" / "atomic_truth.json", c.atomic_truth)
    back = load_dataset(tmp_path / "ds", check_values=True)
    assert back == c.manifest
    assert read_sidecar(tmp_path / "ds" / "atomic_truth.json") == c.atomic_truth


@pytest.mark.parametrize("kw", [
    dict(compositions=[[0], [7]], grouping=[[0, 1]]),
    dict(compositions=[[0], [0]], grouping=[[0, 1]]),
    dict(compositions=[[0], []], grouping=[[0, 1]]),
    dict(noise_sigma=-0.1),
    dict(grouping=[[0, 1, 2], [3, 4, 5]]),
    dict(clips_per_atomic=(3, 2)),
])
def test_invalid_configs(kw):
    with pytest.raises(SynthConfigError):
        generate_synthetic(_small(**kw))


def test_config_json_round_trip():
    cfg = _small(seed=4)
    assert SynthConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(SynthConfigError):
        SynthConfig.from_json({"bogus": 1})
