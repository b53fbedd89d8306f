"""Embedding providers plus K-Medoids / K-Means used for sample distillation.

The default provider hashes tokens into a fixed number of buckets and
L2-normalizes, so everything runs offline and deterministically. K-Medoids
is classic PAM (greedy BUILD, then best-improvement SWAP) over Euclidean
distances; K-Means is k-means++ seeded Lloyd iteration.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class ClusteringError(ValueError):
    pass


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def _bucket(token: str, dim: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % dim


@dataclass
class HashingProvider:
    """Deterministic offline embeddings: token counts hashed into dim buckets."""

    dim: int = 256
    name: str = "hashing"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            for token in _TOKEN_RE.findall(text.lower()):
                out[row, _bucket(token, self.dim)] += 1.0
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        np.divide(out, norms, out=out, where=norms > 0)
        return out


class CachedProvider:
    """Wraps a provider with a JSONL {text_hash, vector} cache file."""

    def __init__(self, inner, cache_path: str | Path):
        self.inner = inner
        self.dim = inner.dim
        self.name = f"cached-{inner.name}"
        self.cache_path = Path(cache_path)
        self._cache: dict[str, list[float]] = {}
        if self.cache_path.exists():
            with self.cache_path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        row = json.loads(line)
                        self._cache[row["text_hash"]] = row["vector"]

    @staticmethod
    def _key(text: str) -> str:
        return hashlib.sha1(text.encode("utf-8")).hexdigest()

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        keys = [self._key(t) for t in texts]
        missing = [i for i, k in enumerate(keys) if k not in self._cache]
        if missing:
            vectors = self.inner.embed([texts[i] for i in missing])
            with self.cache_path.open("a", encoding="utf-8") as fh:
                for pos, i in enumerate(missing):
                    vec = vectors[pos].tolist()
                    self._cache[keys[i]] = vec
                    fh.write(json.dumps({"text_hash": keys[i], "vector": vec}) + "\n")
        return np.array([self._cache[k] for k in keys], dtype=np.float64)


def embed_batch(provider, texts: Sequence[str]) -> np.ndarray:
    """Embed text list; validates shape and finiteness."""
    if not texts:
        raise ClusteringError("texts must be non-empty")
    vectors = provider.embed(list(texts))
    if vectors.shape != (len(texts), provider.dim):
        raise ClusteringError(
            f"provider {provider.name} returned shape {vectors.shape}, "
            f"expected {(len(texts), provider.dim)}")
    if not np.all(np.isfinite(vectors)):
        raise ClusteringError("provider returned non-finite values")
    return vectors


@dataclass
class ClusterResult:
    k: int
    assignment: np.ndarray
    total_cost: float
    medoid_indices: list[int] | None = None
    centroids: np.ndarray | None = None
    cost_history: list[float] = field(default_factory=list)


def _check_inputs(vectors: np.ndarray, k: int) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise ClusteringError("vectors must be a 2-D array")
    n = vectors.shape[0]
    if not 1 <= k <= n:
        raise ClusteringError(f"k={k} must satisfy 1 <= k <= n={n}")
    if not np.all(np.isfinite(vectors)):
        raise ClusteringError("vectors contain NaN or inf")
    return vectors


def _distance_matrix(vectors: np.ndarray) -> np.ndarray:
    sq = np.sum(vectors ** 2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * vectors @ vectors.T
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def _pam_build(dist: np.ndarray, k: int) -> list[int]:
    """Greedy BUILD: 1-medoid optimum, then the best-improving additions."""
    medoids = [int(np.argmin(dist.sum(axis=0)))]
    nearest = dist[:, medoids[0]].copy()
    while len(medoids) < k:
        candidate_cost = np.minimum(nearest[:, None], dist).sum(axis=0)
        candidate_cost[medoids] = np.inf
        best = int(np.argmin(candidate_cost))
        medoids.append(best)
        np.minimum(nearest, dist[:, best], out=nearest)
    return medoids


def _swap_descent(dist: np.ndarray, medoids: list[int],
                  max_iter: int) -> tuple[list[int], float, list[float]]:
    """Best-improvement SWAP until no swap lowers the cost."""
    n = dist.shape[0]
    k = len(medoids)
    medoids = list(medoids)

    def _nearest_two(medoid_list: list[int]):
        cols = dist[:, medoid_list]
        order = np.argsort(cols, axis=1, kind="stable")
        d1 = cols[np.arange(n), order[:, 0]]
        owner = order[:, 0]
        if len(medoid_list) > 1:
            d2 = cols[np.arange(n), order[:, 1]]
        else:
            d2 = np.full(n, np.inf)
        return d1, d2, owner

    d1, d2, owner = _nearest_two(medoids)
    cost = float(d1.sum())
    history = [cost]
    for _ in range(max_iter):
        best_delta = -1e-12
        best_swap: tuple[int, int] | None = None
        for mi in range(k):
            mine = owner == mi
            others = ~mine
            # Swapping medoid mi for candidate h: points owned by mi move to
            # min(d(h), second-nearest); other points may defect to h.
            gain_mine = (np.minimum(dist[mine], d2[mine, None]) -
                         d1[mine, None]).sum(axis=0)
            gain_others = np.minimum(dist[others] - d1[others, None], 0.0).sum(axis=0)
            delta = gain_mine + gain_others
            delta[medoids] = np.inf
            h = int(np.argmin(delta))
            if delta[h] < best_delta:
                best_delta = float(delta[h])
                best_swap = (mi, h)
        if best_swap is None:
            break
        medoids[best_swap[0]] = best_swap[1]
        d1, d2, owner = _nearest_two(medoids)
        cost = float(d1.sum())
        history.append(cost)
    return medoids, cost, history


_RESTART_SIZE_CAP = 512
_DEFAULT_RESTARTS = 6


def k_medoids(vectors: np.ndarray, k: int, seed: int = 0,
              max_iter: int = 100,
              n_restarts: int | None = None) -> ClusterResult:
    """PAM: greedy BUILD then best-improvement SWAP until no swap improves.

    Distances are Euclidean and all ties break toward the lowest index.
    SWAP alone can stall in a single-swap local optimum, so small instances
    (n <= 512 by default) additionally descend from ``n_restarts`` seeded
    random starts and keep the best result; large instances use the BUILD
    start only. Deterministic for a fixed seed.
    """
    vectors = _check_inputs(vectors, k)
    n = vectors.shape[0]
    if k == n:
        return ClusterResult(k=k, assignment=np.arange(n), total_cost=0.0,
                             medoid_indices=list(range(n)), cost_history=[0.0])
    dist = _distance_matrix(vectors)
    if n_restarts is None:
        n_restarts = _DEFAULT_RESTARTS if n <= _RESTART_SIZE_CAP else 0

    starts = [_pam_build(dist, k)]
    rng = np.random.default_rng(seed)
    for _ in range(n_restarts):
        starts.append(sorted(int(i) for i in rng.choice(n, size=k, replace=False)))

    best: tuple[float, list[int], list[float]] | None = None
    for start in starts:
        medoids, cost, history = _swap_descent(dist, start, max_iter)
        key = (cost, sorted(medoids))
        if best is None or key < (best[0], best[1]):
            best = (cost, sorted(medoids), history)
    cost, sorted_medoids, history = best
    cols = dist[:, sorted_medoids]
    owner = np.argmin(cols, axis=1)
    return ClusterResult(k=k, assignment=owner, total_cost=cost,
                         medoid_indices=sorted_medoids, cost_history=history)


def brute_force_medoids(vectors: np.ndarray, k: int) -> tuple[list[int], float]:
    """Exhaustive optimum over all medoid subsets; test oracle for small n."""
    from itertools import combinations

    vectors = _check_inputs(vectors, k)
    dist = _distance_matrix(vectors)
    best_cost = np.inf
    best: tuple[int, ...] = ()
    for combo in combinations(range(vectors.shape[0]), k):
        cost = dist[:, combo].min(axis=1).sum()
        if cost < best_cost - 1e-15:
            best_cost = cost
            best = combo
    return list(best), float(best_cost)


def k_means(vectors: np.ndarray, k: int, seed: int = 0,
            max_iters: int = 100) -> ClusterResult:
    """k-means++ seeding then Lloyd iterations to an assignment fixpoint.

    Empty clusters are re-seeded from the point farthest from its center.
    ``total_cost`` is the sum of Euclidean point-to-centroid distances.
    """
    vectors = _check_inputs(vectors, k)
    n = vectors.shape[0]
    rng = np.random.default_rng(seed)

    centers = np.empty((k, vectors.shape[1]))
    first = int(rng.integers(n))
    centers[0] = vectors[first]
    closest_sq = np.sum((vectors - centers[0]) ** 2, axis=1)
    for ci in range(1, k):
        total = closest_sq.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest_sq / total))
        centers[ci] = vectors[idx]
        closest_sq = np.minimum(closest_sq,
                                np.sum((vectors - centers[ci]) ** 2, axis=1))

    assignment = np.full(n, -1)
    for _ in range(max_iters):
        d2 = (np.sum(vectors ** 2, axis=1)[:, None]
              + np.sum(centers ** 2, axis=1)[None, :]
              - 2.0 * vectors @ centers.T)
        new_assignment = np.argmin(d2, axis=1)
        for ci in range(k):
            mask = new_assignment == ci
            if mask.any():
                centers[ci] = vectors[mask].mean(axis=0)
            else:
                dists = np.take_along_axis(
                    d2, new_assignment[:, None], axis=1).ravel()
                far = int(np.argmax(dists))
                centers[ci] = vectors[far]
                new_assignment[far] = ci
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
    diffs = vectors - centers[assignment]
    total_cost = float(np.sqrt(np.sum(diffs ** 2, axis=1)).sum())
    return ClusterResult(k=k, assignment=assignment, total_cost=total_cost,
                         centroids=centers)


def distill(elements: Sequence, k: int, provider,
            seed: int = 0, text_of: Callable = str) -> list:
    """Diverse representatives: embed, run K-Medoids, return the medoids.

    Output preserves input order and is always a subset of the input;
    ``k >= len(elements)`` returns the input unchanged.
    """
    elements = list(elements)
    if not elements:
        raise ClusteringError("cannot distill an empty collection")
    if k >= len(elements):
        return elements
    texts = [text_of(e) for e in elements]
    vectors = embed_batch(provider, texts)
    result = k_medoids(vectors, k, seed=seed)
    return [elements[i] for i in sorted(result.medoid_indices)]
