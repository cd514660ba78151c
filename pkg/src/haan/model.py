"""HAAN network: encoder, MIL classifier, concept classifier, coarse classifier and losses.

Every video in a batch is processed in one vectorized pass: clips of all
videos are concatenated row-wise and per-video quantities (MIL pooling,
visual concepts, TopK composition) are formed with segment ids. Pseudo
labels are 0-based cluster ids in ``[0, N)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import LabelHierarchy

LOSS_NAMES = ("mil", "pseudo", "concept", "coarse")
CKPT_MAGIC = b"HAANCKPT"
ABSENT = np.inf  # distance sentinel for concepts with no clip


class CheckpointError(ValueError):
    pass


@dataclass
class HaanConfig:
    feature_dim: int
    num_fine: int
    num_coarse: int
    embed_dim: int = 32  # d'
    hidden: int = 32  # encoder hidden width h
    concept_hidden: int = 32  # h_f
    n_concepts: int = 7  # N
    topk: int = 2  # k concepts per class
    distance: str = "cosine"
    compose: str = "mean"
    lambdas: Sequence[float] = (1.0, 0.001, 0.01, 1.0)
    losses: Sequence[str] = LOSS_NAMES

    def validate(self) -> None:
        if self.topk < 1:
            raise ValueError("topk must be at least 1")
        if self.n_concepts < 2:
            raise ValueError("need at least 2 concepts")
        if self.distance not in ("cosine", "euclidean"):
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.compose not in ("mean", "max"):
            raise ValueError(f"unknown coarse composition {self.compose!r}")
        if len(self.lambdas) != 4:
            raise ValueError("exactly four loss weights are required")
        bad = set(self.losses) - set(LOSS_NAMES)
        if bad:
            raise ValueError(f"unknown loss names {sorted(bad)}")
        if "mil" not in self.losses:
            raise ValueError("the MIL loss is always enabled")

    @property
    def needs_pseudo_labels(self) -> bool:
        return any(name in self.losses for name in LOSS_NAMES[1:])


# --- parameters -----------------------------------------------------------------

def param_shapes(cfg: HaanConfig) -> Dict[str, tuple]:
    d, h, e, hf = cfg.feature_dim, cfg.hidden, cfg.embed_dim, cfg.concept_hidden
    return {
        "enc1.w": (h, d), "enc1.b": (h,),
        "enc2.w": (e, h), "enc2.b": (e,),
        "mil.w": (cfg.num_fine, e), "mil.b": (cfg.num_fine,),
        "concept1.w": (hf, e), "concept1.b": (hf,),
        "concept2.w": (cfg.n_concepts, hf), "concept2.b": (cfg.n_concepts,),
        "coarse.w": (cfg.num_coarse, e), "coarse.b": (cfg.num_coarse,),
    }


def init_params(cfg: HaanConfig, seed: int = 0, dtype=np.float32) -> Dict[str, Tensor]:
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases alike."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = {}
    shapes = param_shapes(cfg)
    for name, shape in shapes.items():
        fan_in = shapes[name[:-1] + "w"][1]
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True,
                              dtype=dtype, name=name)
    return params


# --- per-clip maps ----------------------------------------------------------------

def encode(params: Dict[str, Tensor], clips) -> Tensor:
    """Shared clip representation x_i = E(clip_i)."""
    w1 = params["enc1.w"]
    clips = clips if isinstance(clips, Tensor) else Tensor(clips, dtype=w1.dtype)
    if clips.ndim != 2 or clips.shape[1] != w1.shape[1]:
        raise ad.DimensionError(f"encode: clips {clips.shape} do not match feature dim {w1.shape[1]}")
    hidden = ad.relu(ad.linear(clips, w1, params["enc1.b"]))
    return ad.linear(hidden, params["enc2.w"], params["enc2.b"])


def clip_scores(params: Dict[str, Tensor], x: Tensor) -> Tensor:
    return ad.linear(x, params["mil.w"], params["mil.b"])


def concept_logits(params: Dict[str, Tensor], x: Tensor) -> Tensor:
    hidden = ad.relu(ad.linear(x, params["concept1.w"], params["concept1.b"]))
    return ad.linear(hidden, params["concept2.w"], params["concept2.b"])


def mil_loss(yhat: Tensor, y) -> Tensor:
    """Mean BCE over classes (and over videos for a batch of logits)."""
    return ad.bce_with_logits(yhat, np.asarray(y, dtype=yhat.dtype))


def pseudo_loss(params: Dict[str, Tensor], x: Tensor, labels, lengths: Optional[Sequence[int]] = None) -> Tensor:
    """Clip-mean cross entropy of F(x_i) against pseudo labels, averaged over videos."""
    labels = np.asarray(labels, dtype=np.intp)
    n = params["concept2.w"].shape[0]
    if labels.shape != (x.shape[0],):
        raise ad.DimensionError(f"pseudo_loss: {labels.shape[0]} labels for {x.shape[0]} clips")
    if np.any(labels < 0) or np.any(labels >= n):
        raise IndexError(f"pseudo label out of range [0, {n})")
    lengths = [x.shape[0]] if lengths is None else list(lengths)
    weights = np.repeat([1.0 / (len(lengths) * t) for t in lengths], lengths)
    return ad.softmax_cross_entropy(concept_logits(params, x), labels, weights=weights)


# --- visual concepts ------------------------------------------------------------

@dataclass
class VisualConceptBank:
    """Concept vectors of one or more videos, stacked as ``(B*N, d')``."""
    vectors: Tensor
    counts: np.ndarray  # (B, N) clips per concept
    n_concepts: int

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0

    @property
    def num_videos(self) -> int:
        return self.counts.shape[0]


def extract_visual_concepts(x: Tensor, labels, n_concepts: int,
                            lengths: Optional[Sequence[int]] = None) -> VisualConceptBank:
    """Mean of the clip features sharing each pseudo label; absent concepts are zero rows."""
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (x.shape[0],) or np.any(labels < 0) or np.any(labels >= n_concepts):
        raise ValueError(f"labels must be {x.shape[0]} ids in [0, {n_concepts})")
    lengths = [x.shape[0]] if lengths is None else list(lengths)
    video = np.repeat(np.arange(len(lengths)), lengths)
    seg = video * n_concepts + labels
    vectors = ad.segment_mean(x, seg, len(lengths) * n_concepts)
    counts = np.bincount(seg, minlength=len(lengths) * n_concepts).reshape(len(lengths), n_concepts)
    return VisualConceptBank(vectors, counts, n_concepts)


def _np_distances(v: np.ndarray, w: np.ndarray, metric: str) -> np.ndarray:
    if metric == "cosine":
        vn = np.linalg.norm(v, axis=1)
        wn = np.linalg.norm(w, axis=1)
        if np.any(wn == 0):
            raise ad.DomainError("a class prototype has zero norm")
        safe = np.where(vn > 0, vn, 1.0)
        return 1.0 - (v @ w.T) / (safe[:, None] * wn[None, :])
    diff = v[:, None, :] - w[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=2))


def concept_distances(bank: VisualConceptBank, prototypes: Tensor, metric: str = "cosine") -> np.ndarray:
    """``(B, N, C)`` distances between concepts and class prototypes; absent rows are +inf."""
    v = bank.vectors.data.astype(np.float64)
    w = prototypes.data.astype(np.float64)
    dist = _np_distances(v, w, metric).reshape(bank.num_videos, bank.n_concepts, w.shape[0])
    unusable = ~bank.present
    if metric == "cosine":
        unusable |= (np.linalg.norm(v, axis=1) == 0).reshape(unusable.shape)
    dist[unusable] = ABSENT
    return dist


def topk_selection(dist: np.ndarray, k: int) -> np.ndarray:
    """Boolean ``(B, C, N)`` mask of the k nearest usable concepts per video and class.

    Ties go to the lower concept id; with fewer than k usable concepts all are used.
    """
    b, n, c = dist.shape
    sel = np.zeros((b, c, n), dtype=bool)
    for vb in range(b):
        usable = np.isfinite(dist[vb, :, 0])
        if not usable.any():
            raise ad.ContractError(f"video {vb} has no usable visual concept")
        kk = min(k, int(usable.sum()))
        for j in range(c):
            order = np.argsort(dist[vb, :, j], kind="stable")
            sel[vb, j, order[:kk]] = True
    return sel


def compose_fine(bank: VisualConceptBank, dist: np.ndarray, k: int) -> Tensor:
    """Average of each class's TopK concepts: ``(B*C, d')`` rows ordered video-major.

    The selection enters as a constant averaging matrix.
    """
    sel = topk_selection(dist, k)
    ad.note_branch("topk", sel)
    b, c, n = sel.shape
    mix = np.zeros((b * c, b * n), dtype=bank.vectors.dtype)
    for vb in range(b):
        block = sel[vb].astype(mix.dtype)
        mix[vb * c:(vb + 1) * c, vb * n:(vb + 1) * n] = block / block.sum(axis=1, keepdims=True)
    return ad.matmul(Tensor(mix, dtype=mix.dtype), bank.vectors)


def _distance(a: Tensor, b: Tensor, metric: str) -> Tensor:
    return ad.cosine_distance(a, b) if metric == "cosine" else ad.euclidean_distance(a, b)


def concept_loss(fine: Tensor, prototypes: Tensor, y, metric: str = "cosine") -> Tensor:
    """Distance between e^j and w^j over positive classes; mean per video, then over videos."""
    y = np.atleast_2d(np.asarray(y))
    b, c = y.shape
    vids, classes = np.nonzero(y > 0)
    if vids.size == 0:
        raise ad.ContractError("concept_loss needs at least one positive class")
    per_video = np.bincount(vids, minlength=b)
    weights = 1.0 / (b * per_video[vids])
    d = _distance(ad.take(fine, vids * c + classes), ad.take(prototypes, classes), metric)
    return ad.tsum(ad.mul(d, Tensor(weights, dtype=d.dtype)))


def compose_coarse(fine: Tensor, hierarchy: LabelHierarchy, mode: str = "mean") -> Tensor:
    """``(B*U, d')`` coarse representations from ``(B*C, d')`` fine ones."""
    c, u = hierarchy.num_fine, hierarchy.num_coarse
    b = fine.shape[0] // c
    owner = hierarchy.coarse_of()
    seg = (np.arange(b)[:, None] * u + owner[None, :]).ravel()
    if mode == "max":
        return ad.segment_max(fine, seg, b * u)
    if mode != "mean":
        raise ValueError(f"unknown coarse composition {mode!r}")
    return ad.segment_mean(fine, seg, b * u)


def coarse_loss(coarse: Tensor, params: Dict[str, Tensor], y_coarse) -> Tensor:
    """BCE of the u-th logit of S'(e'_u) against y'_u; mean over coarse classes and videos."""
    y_coarse = np.atleast_2d(np.asarray(y_coarse, dtype=coarse.dtype))
    b, u = y_coarse.shape
    rows = np.tile(np.arange(u), b)
    w = ad.take(params["coarse.w"], rows)
    logits = ad.add(ad.tsum(ad.mul(coarse, w), axis=1), ad.take(params["coarse.b"], rows))
    return ad.bce_with_logits(logits, y_coarse.ravel())


# --- total loss -----------------------------------------------------------------

@dataclass
class LossBreakdown:
    l_mil: Tensor
    l_pseudo: Optional[Tensor]
    l_concept: Optional[Tensor]
    l_coarse: Optional[Tensor]
    total: Tensor
    lambdas: tuple

    def as_floats(self) -> Dict[str, float]:
        out = {}
        for name in ("l_mil", "l_pseudo", "l_concept", "l_coarse", "total"):
            t = getattr(self, name)
            out[name] = 0.0 if t is None else float(t.data)
        return out


@dataclass
class Batch:
    clips: np.ndarray  # (sum T, d) concatenated
    lengths: List[int]
    y: np.ndarray  # (B, C)
    y_coarse: np.ndarray  # (B, U)
    pseudo: Optional[np.ndarray] = None  # (sum T,) 0-based cluster ids

    @classmethod
    def from_videos(cls, clips: Sequence[np.ndarray], y: np.ndarray, hierarchy: LabelHierarchy,
                    pseudo: Optional[Sequence[np.ndarray]] = None) -> "Batch":
        from .dataset import coarse_labels_from_fine
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        return cls(np.concatenate(clips, axis=0), [len(c) for c in clips], y,
                   coarse_labels_from_fine(y, hierarchy),
                   None if pseudo is None else np.concatenate([np.asarray(p) for p in pseudo]))


def total_loss(params: Dict[str, Tensor], batch: Batch, cfg: HaanConfig,
               hierarchy: LabelHierarchy) -> LossBreakdown:
    """Weighted sum of the enabled losses; disabled terms are not computed."""
    l1, l2, l3, l4 = (float(v) for v in cfg.lambdas)
    x = encode(params, batch.clips)
    scores = clip_scores(params, x)
    yhat = ad.mil_pool(scores, batch.lengths)
    l_mil = mil_loss(yhat, batch.y)
    total = ad.mul(l_mil, l1)
    l_pseudo = l_concept = l_coarse = None
    if cfg.needs_pseudo_labels and batch.pseudo is None:
        raise ad.ContractError("pseudo labels are required by the enabled losses")
    if "pseudo" in cfg.losses:
        l_pseudo = pseudo_loss(params, x, batch.pseudo, batch.lengths)
        total = ad.add(total, ad.mul(l_pseudo, l2))
    if "concept" in cfg.losses or "coarse" in cfg.losses:
        bank = extract_visual_concepts(x, batch.pseudo, cfg.n_concepts, batch.lengths)
        dist = concept_distances(bank, params["mil.w"], cfg.distance)
        fine = compose_fine(bank, dist, cfg.topk)
        if "concept" in cfg.losses:
            l_concept = concept_loss(fine, params["mil.w"], batch.y, cfg.distance)
            total = ad.add(total, ad.mul(l_concept, l3))
        if "coarse" in cfg.losses:
            coarse = compose_coarse(fine, hierarchy, cfg.compose)
            l_coarse = coarse_loss(coarse, params, batch.y_coarse)
            total = ad.add(total, ad.mul(l_coarse, l4))
    return LossBreakdown(l_mil, l_pseudo, l_concept, l_coarse, total, (l1, l2, l3, l4))


def video_scores(params: Dict[str, Tensor], clips: np.ndarray) -> np.ndarray:
    """Clip logits ``(T, C)`` for inference (no recording)."""
    return clip_scores(params, encode(params, clips)).data


def encode_numpy(params: Dict[str, Tensor], clips: np.ndarray) -> np.ndarray:
    return encode(params, clips).data


# --- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, params: Dict[str, Tensor], config: dict, epoch: int, seed: int) -> None:
    """Magic, u32 header length, JSON header, then float32 LE blobs in header order."""
    names = list(params)
    header = {"params": [{"name": n, "shape": list(params[n].shape)} for n in names],
              "config": config, "epoch": int(epoch), "seed": int(seed)}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(raw)) + raw)
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[Dict[str, Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n].decode("utf-8"))
    offset = 12 + n
    params = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"]))
        if offset + 4 * count > len(data):
            raise CheckpointError(f"{path}: truncated parameter {entry['name']!r}")
        arr = np.frombuffer(data, "<f4", count, offset).reshape(entry["shape"]).astype(np.float32)
        params[entry["name"]] = Tensor(arr, requires_grad=True, name=entry["name"])
        offset += 4 * count
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return params, header


def check_params(params: Dict[str, Tensor], cfg: HaanConfig) -> None:
    """Raise CheckpointError when the parameter shapes do not fit ``cfg``."""
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        raise CheckpointError(f"parameter names differ: {sorted(set(params) ^ set(expected))}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise CheckpointError(f"parameter {name!r} has shape {params[name].shape}, expected {shape}")


def config_dict(cfg: HaanConfig) -> dict:
    out = asdict(cfg)
    out["lambdas"] = list(cfg.lambdas)
    out["losses"] = list(cfg.losses)
    return out
