"""Command line: synth, split, train, eval, ablate, inspect-concepts.

Exit codes: 0 ok, 1 internal error, 2 bad configuration, 3 infeasible or
unannotated data, 4 artifact mismatch (checkpoint vs dataset/config).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .clustering import ClusteringError
from .dataset import DatasetError, DatasetManifest, load_dataset, save_dataset
from .detection import EvaluationError, map_report, run_inference, write_detections, write_report
from .model import CheckpointError, check_params, load_checkpoint, video_scores
from .split import InfeasibleSplitError, greedy_split
from .synthetic import SynthConfig, SynthConfigError, generate_synthetic, read_sidecar, write_sidecar
from .trainer import ConfigError, TrainConfig, TrainingError, load_config, train
from . import concepts

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_DATA, EXIT_MISMATCH = 0, 1, 2, 3, 4
LADDER = (("mil",), ("mil", "pseudo"), ("mil", "pseudo", "concept"), ("mil", "pseudo", "concept", "coarse"))

log = logging.getLogger("haan")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _resolved(path: Path, command: str, args: argparse.Namespace, **extra) -> None:
    """Record everything needed to rerun ``command``."""
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    _write_json(path, {"command": command, "version": __version__, "args": flags, **extra})


def _out_dir(path: Path, create: bool = True) -> Path:
    if not path.parent.exists():
        raise CliError(EXIT_CONFIG, f"parent directory of {path} does not exist")
    if create:
        path.mkdir(exist_ok=True)
    return path


def _load_split(path: Path) -> Dict[str, List[str]]:
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"split file {path} not found") from None
    if "train" not in obj:
        raise CliError(EXIT_CONFIG, f"split file {path} has no 'train' list")
    return {"train": list(obj["train"]), "val": list(obj.get("val", []))}


# --- commands ---------------------------------------------------------------------

def cmd_synth(args) -> None:
    cfg = SynthConfig()
    if args.config is not None:
        cfg = SynthConfig.from_json(json.loads(Path(args.config).read_text(encoding="utf-8")))
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    out = _out_dir(args.out, create=False)
    corpus = generate_synthetic(cfg)
    save_dataset(corpus.manifest, corpus.features, out, force=args.force)
    write_sidecar(out / "atomic_truth.json", corpus.atomic_truth)
    _write_json(out / "split.json", corpus.split)
    _resolved(out / "resolved_config.json", "synth", args, synth_config=cfg.to_json())


def cmd_split(args) -> None:
    manifest = load_dataset(args.dataset)
    res = greedy_split(manifest, ratio=args.ratio, attempts=args.attempts, seed=args.seed)
    out = Path(args.out)
    _out_dir(out, create=False)
    _write_json(out, res.to_json())
    _resolved(out.with_suffix(".resolved.json"), "split", args, objective=res.objective, attempt=res.attempt)


def _train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config is not None else TrainConfig()
    overrides = dict(seed=args.seed, alpha=args.alpha, classify_topk=args.topk_clips,
                     classify_threshold=args.threshold, protocol=args.protocol, clustering=args.clustering,
                     n_concepts=args.clusters, distance=args.distance, compose=args.compose,
                     epochs=getattr(args, "epochs", None), learning_rate=getattr(args, "lr", None))
    if getattr(args, "losses", None):
        overrides["losses"] = list(args.losses)
    return cfg.updated(**overrides)


def cmd_train(args) -> None:
    cfg = _train_config(args)
    manifest = load_dataset(args.dataset)
    split = _load_split(args.split)
    out = _out_dir(args.out)
    result = train(manifest, split, cfg, out_dir=out)
    _resolved(out / "resolved_config.json", "train", args, train_config=cfg.to_dict(),
              best_epoch=result.best_epoch, best_val_avg_map=result.best_val)


def _checkpoint_for(manifest: DatasetManifest, path: Path):
    try:
        params, header = load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"checkpoint {path} not found") from None
    cfg = TrainConfig(**header["config"]["train"])
    check_params(params, cfg.model_config(manifest))
    return params, cfg


def evaluate_checkpoint(manifest: DatasetManifest, ids: Sequence[str], params, cfg: TrainConfig,
                        out: Path, features=None) -> dict:
    sub = manifest.subset(list(ids))
    feats = features or {v.id: manifest.features(v.id) for v in sub.videos}
    scores = {v.id: video_scores(params, feats[v.id]) for v in sub.videos}
    report = map_report(scores, sub, cfg.protocol, cfg.inference())
    write_report(report, out / "report.json", out / "report.csv")
    write_detections(run_inference(scores, cfg.inference()), manifest.hierarchy.fine, out / "detections.jsonl")
    return report


def cmd_eval(args) -> None:
    manifest = load_dataset(args.dataset)
    params, cfg = _checkpoint_for(manifest, args.checkpoint)
    cfg = cfg.updated(alpha=args.alpha, classify_topk=args.topk_clips, classify_threshold=args.threshold,
                      protocol=args.protocol)
    ids = _load_split(args.split)[args.subset] if args.split is not None else [v.id for v in manifest.videos]
    out = _out_dir(args.out)
    report = evaluate_checkpoint(manifest, ids, params, cfg, out)
    _resolved(out / "resolved_config.json", "eval", args, train_config=cfg.to_dict())
    print(f"avg.mAP {report['avg_map']:.4f}")


def ablation_cells(base: TrainConfig, grids: Sequence[str], cluster_counts: Sequence[int]) -> Dict[str, TrainConfig]:
    cells: Dict[str, TrainConfig] = {}
    full = list(LADDER[-1])
    if "ladder" in grids:
        for losses in LADDER:
            cells["losses=" + "+".join(losses)] = base.updated(losses=list(losses))
    if "clustering" in grids:
        for method in ("kmeans", "gmm"):
            for n in cluster_counts:
                cells[f"clustering={method},N={n}"] = base.updated(losses=full, clustering=method, n_concepts=n)
    if "distance" in grids:
        for metric in ("euclidean", "cosine"):
            cells[f"distance={metric}"] = base.updated(losses=full, distance=metric)
    return cells


def cmd_ablate(args) -> None:
    base = _train_config(args)
    manifest = load_dataset(args.dataset)
    split = _load_split(args.split)
    features = {v: manifest.features(v) for v in split["train"] + split["val"]}
    out = _out_dir(args.out)
    counts = args.cluster_grid or [base.n_concepts]
    cells = ablation_cells(base, args.grid, counts)
    rows = []
    for name, cfg in cells.items():
        values = []
        for seed in args.seeds:
            run_cfg = cfg.updated(seed=seed)
            cell_dir = out / name.replace("=", "-").replace(",", "_").replace("+", "-") / f"seed{seed}"
            cell_dir.mkdir(parents=True, exist_ok=True)
            result = train(manifest, split, run_cfg, out_dir=cell_dir, features=features)
            report = evaluate_checkpoint(manifest, split["val"], result.params, run_cfg, cell_dir, features)
            values.append(report["avg_map"])
            log.info("%s seed %d avg.mAP %.4f", name, seed, report["avg_map"])
        rows.append({"cell": name, "seeds": list(args.seeds), "avg_map": values,
                     "median_avg_map": float(np.median(values))})
    _write_json(out / "summary.json", rows)
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", "median_avg_map"] + [f"seed{s}" for s in args.seeds])
        for r in rows:
            w.writerow([r["cell"], repr(r["median_avg_map"])] + [repr(v) for v in r["avg_map"]])
    _resolved(out / "resolved_config.json", "ablate", args, train_config=base.to_dict())
    for r in rows:
        print(f"{r['cell']:<40s} {r['median_avg_map']:.4f}")


def cmd_inspect(args) -> None:
    manifest = load_dataset(args.dataset)
    params, cfg = _checkpoint_for(manifest, args.checkpoint)
    split = _load_split(args.split)
    out = _out_dir(args.out)
    sidecar = args.sidecar
    if sidecar is None and (Path(args.dataset) / "atomic_truth.json").exists():
        sidecar = Path(args.dataset) / "atomic_truth.json"
    truth = read_sidecar(sidecar) if sidecar is not None else None
    features = {v: manifest.features(v) for v in split["train"]}
    result = concepts.inspect(manifest, split["train"], features, params, cfg, truth)
    _write_json(out / "concepts.json", result)
    _resolved(out / "resolved_config.json", "inspect-concepts", args, train_config=cfg.to_dict())
    if "relevance" in result:
        print(f"concept relevance {result['relevance']:.3f}")


# --- parser -----------------------------------------------------------------------

def _add_model_flags(p: argparse.ArgumentParser, training: bool = True) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float, help="detection threshold coefficient")
    p.add_argument("--topk-clips", type=int, help="clips averaged for video classification")
    p.add_argument("--threshold", type=float, help="video classification probability cutoff")
    p.add_argument("--protocol", choices=["fineaction", "finegym"])
    if training:
        p.add_argument("--config", type=Path, help="flat key = value training config")
        p.add_argument("--losses", nargs="+", choices=["mil", "pseudo", "concept", "coarse"])
        p.add_argument("--clustering", choices=["kmeans", "gmm"])
        p.add_argument("--clusters", type=int, help="number of visual concepts N")
        p.add_argument("--distance", choices=["cosine", "euclidean"])
        p.add_argument("--compose", choices=["mean", "max"])
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="haan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", type=Path, help="JSON synthetic corpus config")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="greedy train/val split")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--ratio", type=float, default=0.75)
    p.add_argument("--attempts", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--split", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", type=Path)
    p.add_argument("--subset", choices=["train", "val"], default="val")
    p.add_argument("--out", type=Path, required=True)
    _add_model_flags(p, training=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="loss ladder, clustering and distance ablations")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--split", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--grid", nargs="+", choices=["ladder", "clustering", "distance"], default=["ladder"])
    p.add_argument("--cluster-grid", type=int, nargs="+", help="N values for the clustering grid")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    _add_model_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect-concepts", help="per-class TopK visual concepts")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sidecar", type=Path, help="atomic_truth.json for relevance scoring")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, SynthConfigError, FileExistsError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleSplitError, EvaluationError, DatasetError, ClusteringError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
