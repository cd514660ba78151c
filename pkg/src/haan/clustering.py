"""K-means and diagonal-covariance Gaussian mixtures for clip pseudo labels."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

MAGIC = b"HAANCLUS"
VAR_FLOOR = 1e-6


class ClusteringError(ValueError):
    pass


@dataclass
class ClusterModel:
    method: str  # "kmeans" or "gmm"
    centroids: np.ndarray  # (N, d) float64
    variances: Optional[np.ndarray] = None  # gmm only, (N, d)
    weights: Optional[np.ndarray] = None  # gmm only, (N,)
    seed: int = 0
    history: List[float] = field(default_factory=list)  # inertia or mean log-likelihood per iteration
    labels: Optional[np.ndarray] = None  # final assignment of the fitted pool

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _row_sq(diff: np.ndarray) -> np.ndarray:
    # one reduction for every exact cost, so equal inputs give equal bits
    return (diff * diff).sum(axis=1)


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact squared distances ``(M, N)``, computed column by column on differences."""
    out = np.empty((x.shape[0], centroids.shape[0]))
    for k, c in enumerate(centroids):
        out[:, k] = _row_sq(x - c)
    return out


def _point_cost(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return _row_sq(x - centroids[labels])


def _group_fsum(values: np.ndarray, labels: np.ndarray, n: int) -> np.ndarray:
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(n + 1))
    v = values[order]
    return np.array([math.fsum(v[bounds[k]:bounds[k + 1]]) for k in range(n)])


def _fast_sq_dists(x: np.ndarray, x_sq: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = x_sq[:, None] - 2.0 * (x @ centroids.T) + (centroids ** 2).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _check(features: np.ndarray, n_clusters: int) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ClusteringError(f"features must be 2-D, got shape {x.shape}")
    if n_clusters < 1:
        raise ClusteringError("need at least one cluster")
    if x.shape[0] < n_clusters:
        raise ClusteringError(f"{x.shape[0]} points cannot form {n_clusters} clusters")
    if not np.all(np.isfinite(x)):
        raise ClusteringError("features contain non-finite values")
    return x


def _kmeans_pp(x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: D^2-sample a few candidates per step, keep the best."""
    trials = 2 + int(np.log(n))
    centers = np.empty((n, x.shape[1]))
    centers[0] = x[rng.integers(x.shape[0])]
    x_sq = (x ** 2).sum(axis=1)
    closest = _fast_sq_dists(x, x_sq, centers[:1])[:, 0]
    for k in range(1, n):
        total = closest.sum()
        if total <= 0:  # fewer distinct points than clusters
            centers[k] = x[rng.integers(x.shape[0])]
            continue
        picks = np.searchsorted(np.cumsum(closest), rng.random(trials) * total, side="right")
        picks = np.minimum(picks, x.shape[0] - 1)
        cand = np.minimum(closest[:, None], _fast_sq_dists(x, x_sq, x[picks]))
        best = int(np.argmin(cand.sum(axis=0)))
        centers[k] = x[picks[best]]
        closest = cand[:, best]
    return centers


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iters: int, tol: float):
    """Lloyd iterations with an exactly monotone inertia record.

    Candidate labels come from the fast distance expansion, but a point only
    moves when its exact cost strictly drops, and a recomputed mean replaces
    its centroid only when the cluster's exact cost does not rise. Inertia is
    a correctly rounded sum of the exact per-point costs.
    """
    n = len(centers)
    rows = np.arange(x.shape[0])
    x_sq = (x ** 2).sum(axis=1)
    labels = np.argmin(_fast_sq_dists(x, x_sq, centers), axis=1)
    cost = _point_cost(x, centers, labels)
    history = [math.fsum(cost)]
    for _ in range(max_iters):
        counts = np.bincount(labels, minlength=n)
        new = np.zeros_like(centers)
        np.add.at(new, labels, x)
        present = counts > 0
        new[present] /= counts[present, None]
        new_cost = _point_cost(x, new, labels)
        worse = _group_fsum(new_cost, labels, n) > _group_fsum(cost, labels, n)
        new[worse] = centers[worse]
        new_cost = np.where(worse[labels], cost, new_cost)
        taken = set()
        for k in np.flatnonzero(~present):
            # reseed an empty cluster at the point worst served by its centroid
            order = np.argsort(-cost, kind="stable")
            far = next(int(i) for i in order if int(i) not in taken)
            taken.add(far)
            new[k] = x[far]
        shift = float(np.sqrt(((new - centers) ** 2).sum(axis=1)).max())
        centers = new
        cand = np.argmin(_fast_sq_dists(x, x_sq, centers), axis=1)
        cand_cost = _point_cost(x, centers, cand)
        moved = cand_cost < new_cost
        labels = np.where(moved, cand, labels)
        cost = np.where(moved, cand_cost, new_cost)
        history.append(math.fsum(cost))
        if shift < tol and present.all() and not moved.any():
            break
    dist = _sq_dists(x, centers)
    labels = np.argmin(dist, axis=1)
    history.append(math.fsum(dist[rows, labels]))
    return centers, labels, history


def kmeans_fit(features: np.ndarray, n_clusters: int, seed: int = 0, max_iters: int = 100,
               tol: float = 1e-6, n_init: int = 10) -> ClusterModel:
    """Lloyd's algorithm from k-means++ seeds; best of ``n_init`` restarts by inertia.

    ``history`` holds the inertia after every assignment step of the kept run
    and is non-increasing.
    """
    x = _check(features, n_clusters)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        centers, labels, history = _lloyd(x, _kmeans_pp(x, n_clusters, rng), max_iters, tol)
        if best is None or history[-1] < best[2][-1]:
            best = (centers, labels, history)
    centers, labels, history = best
    return ClusterModel("kmeans", centers, seed=seed, history=history, labels=labels)


def _log_gauss(x: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """log N(x | mean_k, diag(var_k)) as an ``(M, N)`` array."""
    inv = 1.0 / variances
    const = -0.5 * (x.shape[1] * np.log(2 * np.pi) + np.log(variances).sum(axis=1))
    quad = (x ** 2) @ inv.T - 2 * x @ (means * inv).T + (means ** 2 * inv).sum(axis=1)
    return const - 0.5 * quad


def _responsibilities(x, means, variances, weights):
    log_p = _log_gauss(x, means, variances) + np.log(weights)
    top = log_p.max(axis=1, keepdims=True)
    log_norm = top[:, 0] + np.log(np.exp(log_p - top).sum(axis=1))
    return np.exp(log_p - log_norm[:, None]), log_norm


def gmm_fit(features: np.ndarray, n_clusters: int, seed: int = 0, max_iters: int = 100,
            tol: float = 1e-6, n_init: int = 1) -> ClusterModel:
    """EM for a diagonal Gaussian mixture, started from a k-means solution.

    ``history`` is the mean log-likelihood per EM iteration.
    """
    x = _check(features, n_clusters)
    km = kmeans_fit(x, n_clusters, seed=seed, max_iters=max_iters, n_init=n_init)
    labels = km.labels
    means = km.centroids.copy()
    variances = np.empty_like(means)
    weights = np.empty(n_clusters)
    for k in range(n_clusters):
        members = x[labels == k]
        variances[k] = np.maximum(members.var(axis=0) if len(members) > 1 else x.var(axis=0), VAR_FLOOR)
        weights[k] = max(len(members), 1) / x.shape[0]
    weights /= weights.sum()

    history: List[float] = []
    for _ in range(max_iters):
        resp, log_norm = _responsibilities(x, means, variances, weights)
        history.append(float(log_norm.mean()))
        if len(history) > 1 and abs(history[-1] - history[-2]) < tol:
            break
        mass = resp.sum(axis=0) + 1e-300
        weights = mass / mass.sum()
        means = (resp.T @ x) / mass[:, None]
        variances = np.maximum((resp.T @ (x ** 2)) / mass[:, None] - means ** 2, VAR_FLOOR)
    resp, log_norm = _responsibilities(x, means, variances, weights)
    return ClusterModel("gmm", means, variances, weights, seed=seed, history=history,
                        labels=np.argmax(resp, axis=1))


def fit(method: str, features: np.ndarray, n_clusters: int, seed: int = 0, **kwargs) -> ClusterModel:
    if method == "kmeans":
        return kmeans_fit(features, n_clusters, seed=seed, **kwargs)
    if method == "gmm":
        return gmm_fit(features, n_clusters, seed=seed, **kwargs)
    raise ClusteringError(f"unknown clustering method {method!r}")


def responsibilities(model: ClusterModel, features: np.ndarray) -> np.ndarray:
    if model.method != "gmm":
        raise ClusteringError("responsibilities are only defined for gmm models")
    x = np.asarray(features, dtype=np.float64)
    return _responsibilities(x, model.centroids, model.variances, model.weights)[0]


def assign(model: ClusterModel, features: np.ndarray) -> np.ndarray:
    """Nearest centroid (k-means) or most responsible component (gmm); ties go to the lower index."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ClusteringError(f"features of shape {x.shape} do not match model dimension {model.dim}")
    if model.method == "kmeans":
        return np.argmin(_sq_dists(x, model.centroids), axis=1)
    return np.argmax(responsibilities(model, x), axis=1)


def save_model(model: ClusterModel, path) -> None:
    """Binary dump: magic, u32 header length, JSON header, float64 LE blobs."""
    blobs = [("centroids", model.centroids)]
    if model.method == "gmm":
        blobs += [("variances", model.variances), ("weights", model.weights)]
    header = {
        "method": model.method, "n_clusters": model.n_clusters, "dim": model.dim, "seed": model.seed,
        "history": model.history,
        "blobs": [{"name": n, "shape": list(a.shape)} for n, a in blobs],
    }
    raw = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(raw)) + raw)
        for _, arr in blobs:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path) -> ClusterModel:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ClusteringError(f"{path}: not a cluster model dump")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n].decode("utf-8"))
    offset = 12 + n
    arrays = {}
    for blob in header["blobs"]:
        count = int(np.prod(blob["shape"]))
        arrays[blob["name"]] = np.frombuffer(data, "<f8", count, offset).reshape(blob["shape"]).copy()
        offset += 8 * count
    return ClusterModel(header["method"], arrays["centroids"], arrays.get("variances"),
                        arrays.get("weights"), seed=header["seed"], history=header["history"])
