"""Spherical KMeans on unit-norm embeddings, exact cosine silhouette, and the
three-pass elbow estimation of the cluster count.

Distances are cosine (1 - dot on unit vectors). Silhouette is computed exactly
in O(n*K) through per-cluster embedding sums instead of the O(n^2) pairwise
matrix, which keeps 20K-point scans cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ValidationError
from .store import EmbeddingMatrix

_SIL_CHUNK = 4096
_SUBSAMPLE_LIMIT = 20_000


@dataclass
class ClusterPartition:
    """Assignment of n instances to k clusters; no cluster may be empty."""

    assignment: np.ndarray
    k: int

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.assignment.ndim != 1 or self.assignment.size == 0:
            raise ValidationError("assignment must be a non-empty 1-D vector")
        if self.assignment.min() < 0 or self.assignment.max() >= self.k:
            raise ValidationError(f"cluster ids must lie in [0, {self.k})")
        self.sizes = np.bincount(self.assignment, minlength=self.k)
        empty = np.flatnonzero(self.sizes == 0)
        if empty.size:
            raise ValidationError(f"empty clusters not allowed: {empty.tolist()}")

    @property
    def n(self) -> int:
        return self.assignment.shape[0]


def _plusplus_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding with cosine distance as the sampling weight."""
    n = data.shape[0]
    centers = np.empty(k, dtype=np.int64)
    centers[0] = rng.integers(n)
    dist = 1.0 - data @ data[centers[0]]
    np.maximum(dist, 0.0, out=dist)
    for c in range(1, k):
        total = dist.sum()
        if total <= 0:
            # remaining points coincide with chosen centers; pick fresh indices
            unchosen = np.setdiff1d(np.arange(n), centers[:c], assume_unique=False)
            centers[c] = unchosen[0]
        else:
            centers[c] = rng.choice(n, p=dist / total)
        np.minimum(dist, np.maximum(1.0 - data @ data[centers[c]], 0.0), out=dist)
    return centers


def kmeans(
    x: EmbeddingMatrix, k: int, seed: int, max_iter: int = 100, n_init: int = 10
) -> tuple[ClusterPartition, EmbeddingMatrix]:
    """Spherical KMeans: k-means++ seeding, cosine distance, unit-norm
    centroids. Runs n_init seeded inits and keeps the lowest-objective run
    (first on ties), so results are deterministic for a fixed (x, k, seed).
    Empty clusters are repaired by reseeding on the point farthest from its
    current centroid."""
    best = None
    for init in range(max(1, n_init)):
        part, cents = _kmeans_once(x, k, seed + 7919 * init, max_iter)
        obj = kmeans_objective(x, part, cents)
        if best is None or obj < best[0] - 1e-12:
            best = (obj, part, cents)
    return best[1], best[2]


def _kmeans_once(
    x: EmbeddingMatrix, k: int, seed: int, max_iter: int = 100
) -> tuple[ClusterPartition, EmbeddingMatrix]:
    if not x.normalized:
        raise ValidationError("kmeans requires a normalized matrix")
    if k < 1:
        raise ValidationError("k must be >= 1")
    if k > x.n:
        raise ValidationError(f"k={k} exceeds point count {x.n}")
    rng = np.random.default_rng(np.random.PCG64(seed))
    data = x.data
    centroids = data[_plusplus_init(data, k, rng)].copy()

    assignment = np.full(x.n, -1, dtype=np.int64)
    for _ in range(max_iter):
        sims = data @ centroids.T
        new_assignment = sims.argmax(axis=1)

        sizes = np.bincount(new_assignment, minlength=k)
        for empty in np.flatnonzero(sizes == 0):
            own = sims[np.arange(x.n), new_assignment]
            donors = np.flatnonzero(sizes[new_assignment] > 1)
            mover = donors[np.argmin(own[donors])]  # farthest = lowest similarity
            sizes[new_assignment[mover]] -= 1
            new_assignment[mover] = empty
            sizes[empty] += 1
            centroids[empty] = data[mover]

        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment

        order = np.argsort(assignment, kind="stable")
        bounds = np.searchsorted(assignment[order], np.arange(k + 1))
        sums = np.add.reduceat(data[order], bounds[:-1], axis=0)
        norms = np.linalg.norm(sums, axis=1)
        keep = norms < 1e-12
        centroids = np.where(keep[:, None], centroids, sums / np.where(keep, 1.0, norms)[:, None])

    part = ClusterPartition(assignment, k)
    return part, EmbeddingMatrix(centroids, normalized=True)


def kmeans_objective(x: EmbeddingMatrix, part: ClusterPartition, centroids: EmbeddingMatrix) -> float:
    sims = np.einsum("ij,ij->i", x.data, centroids.data[part.assignment])
    return float(np.sum(1.0 - sims))


def silhouette(x: EmbeddingMatrix, part: ClusterPartition) -> float:
    """Mean silhouette with cosine distance; singleton clusters and 0/0 score 0."""
    if part.k < 2:
        raise ValidationError("silhouette needs at least 2 clusters")
    if part.n != x.n:
        raise ValidationError("partition and matrix sizes differ")
    order = np.argsort(part.assignment, kind="stable")
    bounds = np.searchsorted(part.assignment[order], np.arange(part.k + 1))
    sums = np.add.reduceat(x.data[order], bounds[:-1], axis=0)  # (k, d)
    sizes = part.sizes.astype(np.float64)

    total = 0.0
    for start in range(0, x.n, _SIL_CHUNK):
        stop = min(start + _SIL_CHUNK, x.n)
        chunk = x.data[start:stop]
        own = part.assignment[start:stop]
        sim_sums = chunk @ sums.T  # (c, k)
        self_sim = np.einsum("ij,ij->i", chunk, chunk)
        rows = np.arange(stop - start)

        mean_dist = 1.0 - sim_sums / sizes[None, :]
        own_size = sizes[own]
        a = 1.0 - (sim_sums[rows, own] - self_sim) / np.maximum(own_size - 1.0, 1.0)
        mean_dist[rows, own] = np.inf
        b = mean_dist.min(axis=1)

        denom = np.maximum(a, b)
        s = np.zeros_like(a)
        ok = denom > 0
        s[ok] = (b[ok] - a[ok]) / denom[ok]
        s[own_size < 2] = 0.0  # singleton convention
        total += float(s.sum())
    return total / x.n


@dataclass
class KEstimate:
    k_hat: int
    pass_solutions: tuple[int, int, int]
    scan_log: list = field(default_factory=list)  # per pass: list of (k, score)
    notes: list = field(default_factory=list)


def _grid(lo: int, hi: int, points: int) -> list[int]:
    vals = np.unique(np.rint(np.geomspace(lo, hi, points)).astype(int))
    return [int(v) for v in vals if lo <= v <= hi]


def _elbow(ks: list[int], scores: list[float]) -> int:
    """Locate the deceleration point of the score curve. An interior score
    maximum is the onset of deceleration and wins directly; a maximum at the
    top of the window means the curve is still improving, so the window top is
    kept; a monotone-decreasing window falls back to the point of largest
    deviation from the chord joining the endpoints (min-max normalized axes).
    Ties resolve to the smallest k."""
    sy = np.asarray(scores, dtype=np.float64)
    i_star = int(np.argmax(sy))
    if i_star > 0:
        return ks[i_star]
    kx = np.asarray(ks, dtype=np.float64)
    xn = (kx - kx[0]) / (kx[-1] - kx[0])
    span = sy.max() - sy.min()
    yn = (sy - sy.min()) / span if span > 0 else np.zeros_like(sy)
    chord = yn[0] + (yn[-1] - yn[0]) * xn
    return ks[int(np.argmax(np.abs(yn - chord)))]


def estimate_k(
    x: EmbeddingMatrix,
    lb0: int = 50,
    ub0: int = 2000,
    points_per_pass: int = 15,
    seed: int = 0,
    restarts: int = 3,
    subsample: int = _SUBSAMPLE_LIMIT,
) -> KEstimate:
    """Three elbow passes: scan [lb0, ub0], then [lb0, S1], then
    [S2, (S1+S2)/2]. Each grid point takes the best silhouette over a few
    seeded kmeans restarts to tame single-init noise. A derived pass whose
    integer range holds fewer than three candidates is treated as converged
    and keeps the previous solution."""
    if lb0 >= ub0:
        raise ValidationError(f"need lb0 < ub0, got [{lb0}, {ub0}]")
    if lb0 < 2:
        raise ValidationError("lb0 must be >= 2 (silhouette undefined below)")
    if ub0 > x.n:
        raise ValidationError(f"ub0={ub0} exceeds point count {x.n}")

    sub_idx = None
    if x.n > subsample:
        rng = np.random.default_rng(np.random.PCG64(seed))
        sub_idx = np.sort(rng.choice(x.n, size=subsample, replace=False))

    scan_log: list[list[tuple[int, float]]] = []
    notes: list[str] = []

    def score_at(kk: int) -> float:
        part, _ = kmeans(x, kk, seed=seed, n_init=max(1, restarts))
        if sub_idx is None:
            return silhouette(x, part)
        return _silhouette_subsampled(x, part, sub_idx)

    def run_pass(lo: int, hi: int, label: str, fallback: int | None) -> int:
        ks = _grid(lo, hi, points_per_pass)
        if len(ks) < 3:
            if fallback is None:
                raise ValidationError(
                    f"{label}: degenerate grid in [{lo}, {hi}] ({len(ks)} candidates)"
                )
            notes.append(f"{label}: range [{lo}, {hi}] converged, keeping {fallback}")
            scan_log.append([])
            return fallback
        scores = [score_at(kk) for kk in ks]
        scan_log.append(list(zip(ks, scores)))
        return _elbow(ks, scores)

    s1 = run_pass(lb0, ub0, "pass 1", fallback=None)
    s2 = run_pass(lb0, s1, "pass 2", fallback=s1)
    hi3 = (s1 + s2) // 2
    if hi3 < s2:
        raise ValidationError(
            f"pass 3 bounds inverted: lower {s2} > upper {hi3}; "
            f"second pass exceeded the first (S1={s1}, S2={s2})"
        )
    s3 = run_pass(s2, hi3, "pass 3", fallback=s2)
    return KEstimate(k_hat=s3, pass_solutions=(s1, s2, s3), scan_log=scan_log, notes=notes)


def _silhouette_subsampled(x: EmbeddingMatrix, part: ClusterPartition, idx: np.ndarray) -> float:
    sub_assign = part.assignment[idx]
    present = np.unique(sub_assign)
    if present.size < 2:
        return silhouette(x, part)  # degenerate subsample; fall back to exact
    relabel = np.zeros(part.k, dtype=np.int64)
    relabel[present] = np.arange(present.size)
    sub = ClusterPartition(relabel[sub_assign], int(present.size))
    return silhouette(EmbeddingMatrix(x.data[idx], normalized=x.normalized), sub)
