"""Training loop: per-epoch clustering for pseudo labels, Adam on the total loss, checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import clustering
from .autodiff import Tensor
from .dataset import DatasetManifest
from .detection import InferenceConfig, map_report
from .model import (LOSS_NAMES, Batch, HaanConfig, check_params, config_dict, encode_numpy,
                    init_params, save_checkpoint, total_loss, video_scores)

log = logging.getLogger(__name__)

# fixed offsets deriving sub-seeds from the single run seed
SHUFFLE_SEED_OFFSET = 1
CLUSTER_SEED_OFFSET = 1000


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 3e-5
    lambda1: float = 1.0
    lambda2: float = 0.001
    lambda3: float = 0.01
    lambda4: float = 1.0
    n_concepts: int = 500
    topk_concepts: int = 5
    clustering: str = "kmeans"
    cluster_n_init: int = 10
    cluster_max_iters: int = 100
    compose: str = "mean"
    distance: str = "cosine"
    losses: List[str] = field(default_factory=lambda: list(LOSS_NAMES))
    embed_dim: int = 32
    hidden: int = 32
    concept_hidden: int = 32
    alpha: float = 0.1
    classify_topk: int = 5
    classify_threshold: float = 0.5
    merge_gap: int = 0
    protocol: str = "finegym"
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.topk_concepts < 1:
            raise ConfigError("topk_concepts must be at least 1")
        if self.n_concepts < 2:
            raise ConfigError("n_concepts must be at least 2")
        if not self.losses or "mil" not in self.losses:
            raise ConfigError("the enabled loss set must contain mil")
        if self.clustering not in ("kmeans", "gmm"):
            raise ConfigError(f"unknown clustering method {self.clustering!r}")
        if self.protocol not in ("finegym", "fineaction"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        try:
            self.inference().validate()
            HaanConfig(1, 1, 1, **self._model_kwargs()).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def _model_kwargs(self) -> dict:
        return dict(embed_dim=self.embed_dim, hidden=self.hidden, concept_hidden=self.concept_hidden,
                    n_concepts=self.n_concepts, topk=self.topk_concepts, distance=self.distance,
                    compose=self.compose, losses=tuple(self.losses),
                    lambdas=(self.lambda1, self.lambda2, self.lambda3, self.lambda4))

    def model_config(self, manifest: DatasetManifest) -> HaanConfig:
        h = manifest.hierarchy
        return HaanConfig(manifest.feature_dim, h.num_fine, h.num_coarse, **self._model_kwargs())

    def inference(self) -> InferenceConfig:
        return InferenceConfig(self.alpha, self.classify_topk, self.classify_threshold, self.merge_gap)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            lines.append(f"{k} = {','.join(v) if isinstance(v, list) else v}")
        return "\n".join(lines) + "\n"

    def updated(self, **overrides) -> "TrainConfig":
        cfg = dataclasses.replace(self, **{k: v for k, v in overrides.items() if v is not None})
        cfg.validate()
        return cfg


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    try:
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        if kind in (str, "str"):
            return raw
        return [s.strip() for s in raw.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r}") from None


def parse_config_text(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment; lists are comma separated."""
    kinds = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"config line {n}: unknown key {key!r}")
        values[key] = _coerce(key, kinds[key], raw)
    cfg = dataclasses.replace(base or TrainConfig(), **values)
    cfg.validate()
    return cfg


def load_config(path, base: Optional[TrainConfig] = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)


# --- optimizer -----------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState,
              lr: float) -> None:
    """Bias-corrected Adam update of ``params`` in place."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {k!r} at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k].astype(p.data.dtype)
        m = state.m[k] = b1 * state.m[k] + (1 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype)


# --- pseudo labels -------------------------------------------------------------------

def refresh_pseudo_labels(features: Mapping[str, np.ndarray], video_ids: Sequence[str],
                          params: Mapping[str, Tensor], cfg: TrainConfig, epoch: int):
    """Cluster the encoded clips of ``video_ids``; returns (labels per video, ClusterModel)."""
    encoded = [encode_numpy(params, features[v]) for v in video_ids]
    pool = np.concatenate(encoded, axis=0)
    model = clustering.fit(cfg.clustering, pool, cfg.n_concepts, seed=cfg.seed + CLUSTER_SEED_OFFSET + epoch,
                           max_iters=cfg.cluster_max_iters, n_init=cfg.cluster_n_init)
    labels = {}
    start = 0
    for vid, x in zip(video_ids, encoded):
        labels[vid] = model.labels[start:start + len(x)]
        start += len(x)
    return labels, model


# --- training -----------------------------------------------------------------------

@dataclass
class TrainResult:
    params: Dict[str, Tensor]  # best by validation avg.mAP (or last when no validation)
    final_params: Dict[str, Tensor]
    log: List[dict]
    best_epoch: int
    best_val: Optional[float]
    cluster_model: Optional[clustering.ClusterModel] = None


def _copy(params: Mapping[str, Tensor]) -> Dict[str, Tensor]:
    return {k: Tensor(p.data.copy(), requires_grad=True, dtype=p.dtype, name=k) for k, p in params.items()}


def evaluate(params: Mapping[str, Tensor], manifest: DatasetManifest, features: Mapping[str, np.ndarray],
             cfg: TrainConfig) -> dict:
    scores = {v.id: video_scores(params, features[v.id]) for v in manifest.videos}
    return map_report(scores, manifest, cfg.protocol, cfg.inference())


def _has_segments(manifest: DatasetManifest) -> bool:
    return bool(manifest.videos) and all(v.segments is not None for v in manifest.videos)


def train(manifest: DatasetManifest, split: Mapping[str, Sequence[str]], cfg: TrainConfig,
          out_dir=None, features: Optional[Mapping[str, np.ndarray]] = None,
          init: Optional[Mapping[str, Tensor]] = None) -> TrainResult:
    """Optimize HAAN on ``split['train']``; select the checkpoint by ``split['val']`` avg.mAP.

    With ``out_dir`` the run writes ``metrics.jsonl``, ``best.ckpt``,
    ``final.ckpt`` and ``config.txt`` there.
    """
    cfg.validate()
    mcfg = cfg.model_config(manifest)
    train_ids = list(split["train"])
    val_ids = list(split.get("val", []))
    if not train_ids:
        raise ConfigError("the training split is empty")
    if features is None:
        features = {v: manifest.features(v) for v in train_ids + val_ids}
    val_manifest = manifest.subset(val_ids) if val_ids else None
    can_validate = val_manifest is not None and _has_segments(val_manifest)
    table = manifest.by_id()
    hierarchy = manifest.hierarchy
    y_all = {v: table[v].multi_hot(hierarchy.num_fine) for v in train_ids}

    params = _copy(init) if init is not None else init_params(mcfg, seed=cfg.seed)
    check_params(params, mcfg)
    state = OptimizerState.zeros_like(params)
    shuffle = np.random.default_rng(cfg.seed + SHUFFLE_SEED_OFFSET)
    out = Path(out_dir) if out_dir is not None else None
    meta = {"train": cfg.to_dict(), "model": config_dict(mcfg)}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
        log_fh = open(out / "metrics.jsonl", "w", encoding="utf-8")
    else:
        log_fh = None

    records: List[dict] = []
    best = (_copy(params), -1, None)
    cluster_model = None

    def emit(rec: dict) -> None:
        records.append(rec)
        if log_fh is not None:
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log_fh.flush()

    try:
        for epoch in range(cfg.epochs):
            last_good = _copy(params)
            pseudo = None
            if mcfg.needs_pseudo_labels:
                pseudo, cluster_model = refresh_pseudo_labels(features, train_ids, params, cfg, epoch)
            order = [train_ids[i] for i in shuffle.permutation(len(train_ids))]
            for b, start in enumerate(range(0, len(order), cfg.batch_size)):
                ids = order[start:start + cfg.batch_size]
                batch = Batch.from_videos([features[v] for v in ids], np.stack([y_all[v] for v in ids]),
                                          hierarchy, None if pseudo is None else [pseudo[v] for v in ids])
                with ad.Tape() as tape:
                    parts = total_loss(params, batch, mcfg, hierarchy)
                values = parts.as_floats()
                try:
                    if not np.isfinite(values["total"]):
                        raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}")
                    adam_step(params, ad.backward(tape, parts.total, params), state, cfg.learning_rate)
                except TrainingError:
                    if out is not None:
                        save_checkpoint(out / "last_good.ckpt", last_good, meta, epoch, cfg.seed)
                    raise
                emit({"epoch": epoch, "batch": b, **values, "val_avg_map": None})
            val = evaluate(params, val_manifest, features, cfg)["avg_map"] if can_validate else None
            emit({"epoch": epoch, "batch": None, **_epoch_means(records, epoch), "val_avg_map": val})
            log.info("epoch %d val avg.mAP %s", epoch, val)
            if not can_validate or best[2] is None or val > best[2]:
                best = (_copy(params), epoch, val)
    finally:
        if log_fh is not None:
            log_fh.close()

    best_params, best_epoch, best_val = best
    if out is not None:
        save_checkpoint(out / "best.ckpt", best_params, meta, best_epoch, cfg.seed)
        save_checkpoint(out / "final.ckpt", params, meta, cfg.epochs - 1, cfg.seed)
    return TrainResult(best_params, params, records, best_epoch, best_val, cluster_model)


def _epoch_means(records: List[dict], epoch: int) -> dict:
    rows = [r for r in records if r["epoch"] == epoch and r["batch"] is not None]
    keys = ("l_mil", "l_pseudo", "l_concept", "l_coarse", "total")
    return {k: float(np.mean([r[k] for r in rows])) if rows else 0.0 for k in keys}
