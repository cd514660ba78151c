"""Dataset directory format, label hierarchy and feature files.

A dataset directory holds ``manifest.json`` plus one binary feature file per
video::

    b"HAANFEAT" | u32 T | u32 d | T*d float32   (all little-endian, row-major)
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

MAGIC = b"HAANFEAT"
_HEADER = struct.Struct("<8sII")


class DatasetError(ValueError):
    """Malformed dataset, manifest or feature file."""


@dataclass(frozen=True)
class LabelHierarchy:
    fine: List[str]
    coarse: List[str]
    grouping: List[List[int]]  # coarse index -> fine indices

    def __post_init__(self):
        if len(self.grouping) != len(self.coarse):
            raise DatasetError(f"grouping has {len(self.grouping)} groups for {len(self.coarse)} coarse classes")
        seen = []
        for u, group in enumerate(self.grouping):
            if not group:
                raise DatasetError(f"coarse class {self.coarse[u]!r} has no fine classes")
            seen.extend(group)
        if sorted(seen) != list(range(len(self.fine))):
            raise DatasetError("grouping must partition the fine classes")

    @property
    def num_fine(self) -> int:
        return len(self.fine)

    @property
    def num_coarse(self) -> int:
        return len(self.coarse)

    def coarse_of(self) -> np.ndarray:
        """Array mapping each fine index to its coarse index."""
        out = np.empty(self.num_fine, dtype=np.intp)
        for u, group in enumerate(self.grouping):
            out[list(group)] = u
        return out

    def to_json(self) -> dict:
        return {"fine": list(self.fine), "coarse": list(self.coarse),
                "grouping": [list(map(int, g)) for g in self.grouping]}

    @classmethod
    def from_json(cls, obj: Mapping) -> "LabelHierarchy":
        return cls(list(obj["fine"]), list(obj["coarse"]), [list(g) for g in obj["grouping"]])


@dataclass(frozen=True)
class SegmentAnnotation:
    fine_class: int
    start_clip: int
    end_clip: int  # exclusive
    atomic_sequence: Optional[List[int]] = None

    def to_json(self) -> dict:
        out = {"fine_class": self.fine_class, "start_clip": self.start_clip, "end_clip": self.end_clip}
        if self.atomic_sequence is not None:
            out["atomic_sequence"] = list(self.atomic_sequence)
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "SegmentAnnotation":
        seq = obj.get("atomic_sequence")
        return cls(int(obj["fine_class"]), int(obj["start_clip"]), int(obj["end_clip"]),
                   None if seq is None else [int(a) for a in seq])


@dataclass(frozen=True)
class VideoRecord:
    id: str
    num_clips: int
    fine_labels: List[int]  # indices of positive fine classes
    feature_file: str
    segments: Optional[List[SegmentAnnotation]] = None

    def multi_hot(self, num_classes: int) -> np.ndarray:
        y = np.zeros(num_classes, dtype=np.float32)
        y[list(self.fine_labels)] = 1.0
        return y

    def to_json(self) -> dict:
        out = {"id": self.id, "num_clips": self.num_clips, "fine_labels": list(self.fine_labels)}
        if self.segments is not None:
            out["segments"] = [s.to_json() for s in self.segments]
        out["feature_file"] = self.feature_file
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "VideoRecord":
        segs = obj.get("segments")
        return cls(str(obj["id"]), int(obj["num_clips"]), [int(j) for j in obj["fine_labels"]],
                   str(obj["feature_file"]),
                   None if segs is None else [SegmentAnnotation.from_json(s) for s in segs])


@dataclass
class DatasetManifest:
    hierarchy: LabelHierarchy
    videos: List[VideoRecord]
    feature_dim: int
    clip_duration: Optional[float] = None
    root: Optional[Path] = field(default=None, compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        C = self.hierarchy.num_fine
        ids = set()
        for v in self.videos:
            if v.id in ids:
                raise DatasetError(f"duplicate video id {v.id!r}")
            ids.add(v.id)
            if v.num_clips < 1:
                raise DatasetError(f"video {v.id!r}: num_clips must be positive")
            if not v.fine_labels:
                raise DatasetError(f"video {v.id!r}: needs at least one positive fine label")
            if any(not 0 <= j < C for j in v.fine_labels):
                raise DatasetError(f"video {v.id!r}: fine label out of range [0, {C})")
            for s in v.segments or ():
                if not 0 <= s.start_clip < s.end_clip <= v.num_clips:
                    raise DatasetError(
                        f"video {v.id!r}: segment [{s.start_clip}, {s.end_clip}) outside [0, {v.num_clips}]")
                if not 0 <= s.fine_class < C:
                    raise DatasetError(f"video {v.id!r}: segment class {s.fine_class} out of range")

    def by_id(self) -> Dict[str, VideoRecord]:
        return {v.id: v for v in self.videos}

    def subset(self, ids: Sequence[str]) -> "DatasetManifest":
        table = self.by_id()
        missing = [i for i in ids if i not in table]
        if missing:
            raise DatasetError(f"unknown video ids: {missing[:5]}")
        return DatasetManifest(self.hierarchy, [table[i] for i in ids], self.feature_dim,
                               self.clip_duration, self.root)

    def label_matrix(self) -> np.ndarray:
        return np.stack([v.multi_hot(self.hierarchy.num_fine) for v in self.videos]) if self.videos \
            else np.zeros((0, self.hierarchy.num_fine), dtype=np.float32)

    def features(self, video_id: str) -> np.ndarray:
        """Load one video's ``T x d`` float32 feature matrix from disk."""
        if self.root is None:
            raise DatasetError("manifest is not attached to a directory")
        rec = self.by_id()[video_id]
        arr = read_features(self.root / rec.feature_file, video_id)
        _check_shape(arr, rec, self.feature_dim)
        if not np.all(np.isfinite(arr)):
            raise DatasetError(f"video {video_id!r}: non-finite feature values")
        return arr

    def load_all(self) -> Dict[str, np.ndarray]:
        return {v.id: self.features(v.id) for v in self.videos}

    def to_json(self) -> dict:
        out = {"feature_dim": self.feature_dim, "hierarchy": self.hierarchy.to_json(),
               "videos": [v.to_json() for v in self.videos]}
        if self.clip_duration is not None:
            out["clip_duration"] = self.clip_duration
        return out


def _check_shape(arr: np.ndarray, rec: VideoRecord, dim: int) -> None:
    if arr.shape != (rec.num_clips, dim):
        raise DatasetError(
            f"video {rec.id!r}: feature file has shape {arr.shape}, manifest says ({rec.num_clips}, {dim})")


def write_features(path: os.PathLike, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim != 2:
        raise DatasetError(f"features must be 2-D, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_header(path: os.PathLike, video_id: str = "?") -> tuple[int, int]:
    try:
        with open(path, "rb") as fh:
            head = fh.read(_HEADER.size)
    except FileNotFoundError:
        raise DatasetError(f"video {video_id!r}: feature file {os.fspath(path)!r} is missing") from None
    if len(head) < _HEADER.size:
        raise DatasetError(f"video {video_id!r}: truncated feature header")
    magic, T, d = _HEADER.unpack(head)
    if magic != MAGIC:
        raise DatasetError(f"video {video_id!r}: bad feature magic {magic!r}")
    return T, d


def read_features(path: os.PathLike, video_id: str = "?") -> np.ndarray:
    T, d = read_header(path, video_id)
    raw = Path(path).read_bytes()[_HEADER.size:]
    if len(raw) != 4 * T * d:
        raise DatasetError(f"video {video_id!r}: expected {T * d} floats, found {len(raw) // 4}")
    return np.frombuffer(raw, dtype="<f4").reshape(T, d).astype(np.float32)


def load_dataset(root: os.PathLike, check_values: bool = False) -> DatasetManifest:
    """Read and validate a dataset directory.

    Feature headers are checked against the manifest immediately; the float
    payloads are read lazily through :meth:`DatasetManifest.features` unless
    ``check_values`` is set.
    """
    root = Path(root)
    try:
        obj = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetError(f"{os.fspath(root)!r} has no manifest.json") from None
    try:
        manifest = DatasetManifest(
            hierarchy=LabelHierarchy.from_json(obj["hierarchy"]),
            videos=[VideoRecord.from_json(v) for v in obj["videos"]],
            feature_dim=int(obj["feature_dim"]),
            clip_duration=obj.get("clip_duration"),
            root=root,
        )
    except KeyError as exc:
        raise DatasetError(f"manifest.json missing field {exc}") from None
    for rec in manifest.videos:
        T, d = read_header(root / rec.feature_file, rec.id)
        if (T, d) != (rec.num_clips, manifest.feature_dim):
            raise DatasetError(
                f"video {rec.id!r}: feature header declares T={T}, d={d}; "
                f"manifest says T={rec.num_clips}, d={manifest.feature_dim}")
        if check_values:
            manifest.features(rec.id)
    return manifest


def save_dataset(manifest: DatasetManifest, features: Mapping[str, np.ndarray], root: os.PathLike,
                 force: bool = False) -> DatasetManifest:
    """Write ``manifest.json`` and every feature file under ``root``.

    An existing dataset is only overwritten with ``force=True``.
    """
    root = Path(root)
    manifest.validate()
    target = root / "manifest.json"
    if target.exists() and not force:
        raise FileExistsError(f"{os.fspath(target)!r} exists; pass force=True to overwrite")
    root.mkdir(parents=False, exist_ok=True)
    for rec in manifest.videos:
        arr = np.asarray(features[rec.id], dtype=np.float32)
        _check_shape(arr, rec, manifest.feature_dim)
        path = root / rec.feature_file
        path.parent.mkdir(parents=True, exist_ok=True)
        write_features(path, arr)
    target.write_text(json.dumps(manifest.to_json(), indent=1) + "\n", encoding="utf-8")
    return DatasetManifest(manifest.hierarchy, list(manifest.videos), manifest.feature_dim,
                           manifest.clip_duration, root)


def coarse_labels_from_fine(y: np.ndarray, hierarchy: LabelHierarchy) -> np.ndarray:
    """Coarse multi-hot: a coarse class is on iff any of its fine classes is."""
    y = np.asarray(y)
    if y.shape[-1] != hierarchy.num_fine:
        raise DatasetError(f"expected {hierarchy.num_fine} fine labels, got {y.shape[-1]}")
    out = np.zeros(y.shape[:-1] + (hierarchy.num_coarse,), dtype=y.dtype)
    for u, group in enumerate(hierarchy.grouping):
        out[..., u] = (y[..., list(group)] > 0).any(axis=-1)
    return out
