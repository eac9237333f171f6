"""Cluster-vocabulary alignment: voting, maximum-weight assignment, iterative
refinement against word prototypes, and re-alignment on augmented text banks.

The assignment solver is a rectangular shortest-augmenting-path implementation
(rows = clusters, columns = candidate words, rows <= columns). It keeps the
dual variables so that ties between equal-objective assignments can be
resolved deterministically: lowest word_id first, then lowest cluster_id.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

from . import ValidationError, FormatError
from .store import EmbeddingMatrix, Vocabulary, nearest
from .cluster import ClusterPartition, kmeans
from .prompts import (
    AugmentedTextBank,
    AttributeCatalog,
    assemble_bank,
    build_prompt,
    compose_prompt_sentences,
    parse_attributes,
    query_attributes,
)


# ---------------------------------------------------------------------------
# assignment solver
# ---------------------------------------------------------------------------


class InfeasibleAssignment(ValidationError):
    def __init__(self, rows, msg):
        super().__init__(msg)
        self.rows = list(rows)


def _lsap_min(cost: np.ndarray):
    """Min-cost rectangular assignment via shortest augmenting paths.

    cost: (R, C) with R <= C; np.inf marks forbidden edges. Returns
    (col4row, u, v) where the duals satisfy cost[i,j] - u[i] - v[j] >= 0
    up to float rounding, with equality on matched edges.
    """
    r_n, c_n = cost.shape
    u = np.zeros(r_n)
    v = np.zeros(c_n)
    col4row = np.full(r_n, -1, dtype=np.int64)
    row4col = np.full(c_n, -1, dtype=np.int64)
    for cur in range(r_n):
        shortest = np.full(c_n, np.inf)
        path = np.full(c_n, -1, dtype=np.int64)
        done = np.zeros(c_n, dtype=bool)
        scanned_rows = [cur]
        i = cur
        minval = 0.0
        sink = -1
        while sink == -1:
            reduced = minval + cost[i] - u[i] - v
            better = ~done & (reduced < shortest)
            shortest[better] = reduced[better]
            path[better] = i
            masked = np.where(done, np.inf, shortest)
            j = int(np.argmin(masked))
            minval = masked[j]
            if not np.isfinite(minval):
                raise InfeasibleAssignment(
                    scanned_rows,
                    f"no feasible assignment: rows {sorted(set(scanned_rows))} "
                    f"cannot all reach unmatched columns",
                )
            done[j] = True
            if row4col[j] == -1:
                sink = j
            else:
                i = int(row4col[j])
                scanned_rows.append(i)
        u[cur] += minval
        for r in scanned_rows:
            if r != cur:
                u[r] += minval - shortest[col4row[r]]
        sc = np.flatnonzero(done)
        v[sc] -= minval - shortest[sc]
        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur:
                break
    return col4row, u, v


def _lexicographic_refine(cost, u, v, col4row):
    """Among equal-objective assignments, pick the lexicographically smallest
    (each row in order takes the lowest feasible column). Works on the
    tight-edge graph implied by the duals; falls back to the solver's
    assignment if the tolerance produced an inconsistent graph."""
    r_n, c_n = cost.shape
    finite = np.isfinite(cost)
    scale = float(np.abs(cost[finite]).max()) if finite.any() else 1.0
    tol = 1e-9 * max(1.0, scale)
    tight = (cost - u[:, None] - v[None, :] <= tol) & finite
    degree = tight.sum(axis=1)
    if (degree <= 1).all():
        return col4row
    tight_cols = [np.flatnonzero(tight[r]).tolist() for r in range(r_n)]
    used = np.zeros(c_n, dtype=bool)
    chosen = np.full(r_n, -1, dtype=np.int64)

    def matchable(first_row):
        match_col: dict[int, int] = {}

        def try_row(r, visited):
            for c in tight_cols[r]:
                if used[c] or c in visited:
                    continue
                visited.add(c)
                if c not in match_col or try_row(match_col[c], visited):
                    match_col[c] = r
                    return True
            return False

        return all(try_row(r, set()) for r in range(first_row, r_n))

    for r in range(r_n):
        picked = False
        for c in tight_cols[r]:
            if used[c]:
                continue
            used[c] = True
            if matchable(r + 1):
                chosen[r] = c
                picked = True
                break
            used[c] = False
        if not picked:
            return col4row
    rows = np.arange(r_n)
    if abs(cost[rows, chosen].sum() - cost[rows, col4row].sum()) > tol * max(1, r_n):
        return col4row
    return chosen


def max_weight_assignment(weights: np.ndarray) -> tuple[np.ndarray, float]:
    """Maximum-weight injective assignment of rows to columns (R <= C).

    Returns (col4row, objective). -inf weights are forbidden edges.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ValidationError(f"weight matrix must be 2-D, got shape {w.shape}")
    r_n, c_n = w.shape
    if r_n > c_n:
        raise ValidationError(f"need at least as many columns as rows, got {r_n}x{c_n}")
    if np.isnan(w).any():
        raise ValidationError("weight matrix contains NaN")
    cost = np.where(np.isneginf(w), np.inf, -w)
    col4row, u, v = _lsap_min(cost)
    col4row = _lexicographic_refine(cost, u, v, col4row)
    objective = float(w[np.arange(r_n), col4row].sum())
    return col4row, objective


# ---------------------------------------------------------------------------
# vote matrices and assignment maps
# ---------------------------------------------------------------------------


@dataclass
class VoteMatrix:
    """Sparse K x |vocab| matrix of per-cluster vote weights."""

    k: int
    vocab_size: int
    rows: list[dict[int, float]]

    def row_sum(self, cluster_id: int) -> float:
        return sum(self.rows[cluster_id].values())

    def entries(self):
        for k, row in enumerate(self.rows):
            for j, w in sorted(row.items()):
                yield k, j, w

    def scaled(self, factor: float) -> "VoteMatrix":
        if factor <= 0:
            raise ValidationError("scale factor must be positive")
        return VoteMatrix(
            self.k, self.vocab_size, [{j: w * factor for j, w in row.items()} for row in self.rows]
        )

    def supported_columns(self) -> np.ndarray:
        cols = set()
        for row in self.rows:
            cols.update(row.keys())
        return np.array(sorted(cols), dtype=np.int64)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# k={self.k} vocab={self.vocab_size}\n")
            for k, j, w in self.entries():
                fh.write(f"{k} {j} {w:.17g}\n")

    @classmethod
    def load(cls, path) -> "VoteMatrix":
        path = Path(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("# k="):
            raise FormatError(f"{path}: missing vote-matrix header")
        head = dict(part.split("=") for part in lines[0][2:].split())
        k, vocab = int(head["k"]), int(head["vocab"])
        rows: list[dict[int, float]] = [{} for _ in range(k)]
        for line in lines[1:]:
            ck, j, w = line.split()
            rows[int(ck)][int(j)] = float(w)
        return cls(k, vocab, rows)


@dataclass
class CandidateSet:
    """Per-cluster top-m candidate word ids, ties by lowest word_id."""

    m: int
    members: list[list[int]]
    padded: list[bool]


@dataclass
class AssignmentMap:
    """Injective, total cluster -> word map."""

    mapping: dict[int, int]
    objective: float = 0.0

    def __post_init__(self):
        words = list(self.mapping.values())
        if len(set(words)) != len(words):
            raise ValidationError("assignment map is not injective")

    def words_in_cluster_order(self) -> np.ndarray:
        return np.array([self.mapping[k] for k in range(len(self.mapping))], dtype=np.int64)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for k in sorted(self.mapping):
                fh.write(f"{k} {self.mapping[k]}\n")

    @classmethod
    def load(cls, path) -> "AssignmentMap":
        mapping = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            k, j = line.split()
            mapping[int(k)] = int(j)
        return cls(mapping)


@dataclass
class StructuralLabels:
    """Per-instance word ids broadcast from the cluster assignment."""

    words: np.ndarray
    epoch: int = 0
    partition_hash: str = ""

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# epoch={self.epoch} partition={self.partition_hash}\n")
            for i, w in enumerate(self.words):
                fh.write(f"{i} {int(w)}\n")

    @classmethod
    def load(cls, path) -> "StructuralLabels":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        epoch, phash = 0, ""
        if lines and lines[0].startswith("#"):
            head = dict(part.split("=") for part in lines[0][2:].split())
            epoch, phash = int(head.get("epoch", 0)), head.get("partition", "")
            lines = lines[1:]
        words = np.array([int(line.split()[1]) for line in lines], dtype=np.int64)
        return cls(words, epoch, phash)


def partition_hash(assignment: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(assignment, dtype=np.int64).tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def vote(
    p: ClusterPartition, nn_word: np.ndarray, m: int, vocab_size: int
) -> tuple[VoteMatrix, CandidateSet]:
    """Top-1 voting: weight of word j in cluster k is
    count(instances of k whose nearest word is j) / (K * |cluster k|),
    so every row sums to exactly 1/K. Candidates are the top-m words per row
    by count (ties to the lowest word_id); rows with fewer than m distinct
    voted words are padded from the global vote-frequency order and flagged.
    """
    nn_word = np.asarray(nn_word, dtype=np.int64)
    if nn_word.shape[0] != p.n:
        raise ValidationError(f"nn_word has {nn_word.shape[0]} entries, partition has {p.n}")
    if m < 1:
        raise ValidationError("m must be >= 1")
    if m > vocab_size:
        raise ValidationError(f"m={m} exceeds vocabulary size {vocab_size}")
    if nn_word.min() < 0 or nn_word.max() >= vocab_size:
        raise ValidationError("nn_word contains out-of-vocabulary ids")

    counts: list[dict[int, int]] = [{} for _ in range(p.k)]
    order = np.argsort(p.assignment, kind="stable")
    sorted_clusters = p.assignment[order]
    bounds = np.searchsorted(sorted_clusters, np.arange(p.k + 1))
    for k in range(p.k):
        members = order[bounds[k] : bounds[k + 1]]
        words, cnt = np.unique(nn_word[members], return_counts=True)
        counts[k] = {int(w): int(c) for w, c in zip(words, cnt)}

    global_counts: dict[int, int] = {}
    for row in counts:
        for j, c in row.items():
            global_counts[j] = global_counts.get(j, 0) + c
    global_order = [j for j, _ in sorted(global_counts.items(), key=lambda it: (-it[1], it[0]))]

    rows = []
    members_out = []
    padded = []
    for k in range(p.k):
        denom = p.k * int(p.sizes[k])
        rows.append({j: c / denom for j, c in counts[k].items()})
        ranked = [j for j, _ in sorted(counts[k].items(), key=lambda it: (-it[1], it[0]))]
        pad_needed = len(ranked) < m
        if pad_needed:
            have = set(ranked)
            for j in global_order:
                if len(ranked) == m:
                    break
                if j not in have:
                    ranked.append(j)
                    have.add(j)
            j = 0
            while len(ranked) < m:  # tiny vocabularies: fill by ascending id
                if j not in have:
                    ranked.append(j)
                    have.add(j)
                j += 1
        members_out.append(ranked[:m])
        padded.append(pad_needed)
    return VoteMatrix(p.k, vocab_size, rows), CandidateSet(m, members_out, padded)


def hungarian(votes: VoteMatrix) -> AssignmentMap:
    """Maximum-weight injective cluster -> word assignment.

    Solved on the candidate-restricted column set (union of all voted words);
    zero-weight edges inside the restriction are permitted, which preserves
    the optimum because all support lies in the restricted set.
    """
    cols = votes.supported_columns()
    if cols.size < votes.k:
        support = {k: len(votes.rows[k]) for k in range(votes.k)}
        raise InfeasibleAssignment(
            list(range(votes.k)),
            f"only {cols.size} distinct voted words for {votes.k} clusters; "
            f"per-cluster support sizes: {support}",
        )
    col_pos = {int(j): i for i, j in enumerate(cols)}
    dense = np.zeros((votes.k, cols.size))
    for k, row in enumerate(votes.rows):
        for j, w in row.items():
            dense[k, col_pos[j]] = w
    col4row, objective = max_weight_assignment(dense)
    mapping = {k: int(cols[c]) for k, c in enumerate(col4row)}
    return AssignmentMap(mapping, objective)


def iterative_cluster_vote(
    x: EmbeddingMatrix,
    vocab_bank: EmbeddingMatrix,
    k: int,
    seed: int,
    max_iter: int = 50,
    threads: int = 1,
) -> tuple[ClusterPartition, AssignmentMap, bool]:
    """Alternate top-1 voting, assignment, and reassignment of every instance
    to the nearest of the K assigned word prototypes, until the partition is a
    fixed point or max_iter is hit. Per-instance nearest-word votes are
    computed once up front. Returns (partition, map, converged)."""
    if x.d != vocab_bank.d:
        raise ValidationError(f"dimension mismatch: images d={x.d}, vocabulary d={vocab_bank.d}")
    part, _ = kmeans(x, k, seed)
    nn_word = nearest(x, vocab_bank, k=1, threads=threads)[0][:, 0]

    seen: dict[str, int] = {}
    best: tuple[float, ClusterPartition, AssignmentMap] | None = None
    converged = False
    amap = None
    for _ in range(max_iter):
        h = partition_hash(part.assignment)
        votes, _ = vote(part, nn_word, m=1, vocab_size=vocab_bank.n)
        amap = hungarian(votes)
        if best is None or amap.objective > best[0]:
            best = (amap.objective, part, amap)
        if h in seen:
            log.warning(
                "iterative clustering revisited a partition; returning the "
                "best-objective state seen (objective %.6g)", best[0]
            )
            return best[1], best[2], False
        seen[h] = 1

        protos = EmbeddingMatrix(
            vocab_bank.data[amap.words_in_cluster_order()], normalized=True
        )
        new_assign = nearest(x, protos, k=1, threads=threads)[0][:, 0]
        new_part = _repair_empty(new_assign, x, protos, k)
        if np.array_equal(new_part.assignment, part.assignment):
            converged = True
            break
        part = new_part
    if amap is None or not converged:
        votes, _ = vote(part, nn_word, m=1, vocab_size=vocab_bank.n)
        amap = hungarian(votes)
    return part, amap, converged


def _repair_empty(assignment: np.ndarray, x: EmbeddingMatrix, protos: EmbeddingMatrix, k: int):
    """Prototype reassignment can empty a cluster; move the instance farthest
    from its own prototype into each empty cluster (lowest index on ties)."""
    assignment = assignment.copy()
    sizes = np.bincount(assignment, minlength=k)
    if (sizes > 0).all():
        return ClusterPartition(assignment, k)
    log.warning(
        "prototype reassignment emptied clusters %s; repairing with farthest instances",
        np.flatnonzero(sizes == 0).tolist(),
    )
    sims = np.einsum("ij,ij->i", x.data, protos.data[assignment])
    for empty in np.flatnonzero(sizes == 0):
        for cand in np.argsort(sims, kind="stable"):  # farthest first
            cand = int(cand)
            if sizes[assignment[cand]] > 1:
                sizes[assignment[cand]] -= 1
                assignment[cand] = empty
                sizes[empty] += 1
                sims[cand] = np.inf  # moved points cannot be picked again
                break
    return ClusterPartition(assignment, k)


def realign(
    p: ClusterPartition,
    x: EmbeddingMatrix,
    banks: list[AugmentedTextBank],
    vocab_size: int,
    epoch: int = 0,
    top: int = 3,
) -> tuple[VoteMatrix, AssignmentMap, StructuralLabels]:
    """Re-vote every instance on its cluster's augmented text bank: the top-3
    bank entries each contribute one count to their word, scaled so a full row
    sums to 1/K. Duplicate words inside an instance's top-3 accrue multiple
    counts. Banks smaller than 3 renormalize each instance's contribution to
    keep its total mass at 1/(K*|cluster|)."""
    if len(banks) != p.k:
        raise ValidationError(f"{len(banks)} banks for {p.k} clusters")
    rows: list[dict[int, float]] = []
    for k in range(p.k):
        bank = banks[k]
        if bank is None or bank.embeddings is None or bank.embeddings.n == 0:
            raise ValidationError(f"cluster {k} has an empty augmented bank")
        if bank.embeddings.d != x.d:
            raise ValidationError(
                f"cluster {k} bank dimension {bank.embeddings.d} != image dimension {x.d}"
            )
        members = np.flatnonzero(p.assignment == k)
        take = min(top, bank.embeddings.n)
        idx, _ = nearest(
            EmbeddingMatrix(x.data[members], normalized=x.normalized),
            bank.embeddings,
            k=take,
        )
        word_ids = np.asarray(bank.word_ids, dtype=np.int64)
        hits = word_ids[idx]  # (members, take)
        denom = take * p.k * int(p.sizes[k])
        row: dict[int, float] = {}
        words, cnt = np.unique(hits, return_counts=True)
        for w, c in zip(words, cnt):
            row[int(w)] = int(c) / denom
        rows.append(row)
    votes = VoteMatrix(p.k, vocab_size, rows)
    amap = hungarian(votes)
    labels = StructuralLabels(
        amap.words_in_cluster_order()[p.assignment],
        epoch=epoch,
        partition_hash=partition_hash(p.assignment),
    )
    return votes, amap, labels


# ---------------------------------------------------------------------------
# pipeline orchestration
# ---------------------------------------------------------------------------


@dataclass
class PipelineResult:
    partition: ClusterPartition
    vote_matrix: VoteMatrix
    candidates: CandidateSet | None
    realign_matrix: VoteMatrix | None
    assignment: AssignmentMap
    labels: StructuralLabels
    converged: bool
    catalog: AttributeCatalog | None
    banks: list[AugmentedTextBank] | None
    timings: dict[str, float] = field(default_factory=dict)


def run_cvpr(
    x: EmbeddingMatrix,
    vocab: Vocabulary,
    vocab_bank: EmbeddingMatrix,
    k: int,
    seed: int = 0,
    m: int = 3,
    mode: str = "cvpr",
    max_iter: int = 50,
    threads: int = 1,
    llm_client=None,
    cache=None,
    embedder=None,
    templates: list[str] | None = None,
    catalog: AttributeCatalog | None = None,
    epoch: int = 0,
) -> PipelineResult:
    """Full pseudo-labeling pipeline over precomputed embeddings.

    mode "group": one clustering pass, top-1 vote, assignment.
    mode "scd":   iterative cluster refinement against word prototypes.
    mode "cvpr":  iterative refinement, then candidate prompting and
                  re-alignment on the augmented banks.
    """
    if len(vocab) != vocab_bank.n:
        raise ValidationError(
            f"vocabulary has {len(vocab)} words but bank has {vocab_bank.n} rows"
        )
    if mode not in ("group", "scd", "cvpr"):
        raise ValidationError(f"unknown pipeline mode {mode!r}")
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    if mode == "group":
        part, _ = kmeans(x, k, seed)
        converged = True
    else:
        part, _, converged = iterative_cluster_vote(
            x, vocab_bank, k, seed, max_iter=max_iter, threads=threads
        )
    timings["cluster"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    nn_word = nearest(x, vocab_bank, k=1, threads=threads)[0][:, 0]
    votes, candidates = vote(part, nn_word, m=m, vocab_size=vocab_bank.n)
    amap = hungarian(votes)
    timings["vote"] = time.perf_counter() - t0

    if mode != "cvpr":
        labels = StructuralLabels(
            amap.words_in_cluster_order()[part.assignment],
            epoch=epoch,
            partition_hash=partition_hash(part.assignment),
        )
        return PipelineResult(
            part, votes, candidates, None, amap, labels, converged, None, None, timings
        )

    if embedder is None:
        raise ValidationError("cvpr mode needs a sentence embedder for the augmented banks")

    t0 = time.perf_counter()
    catalog = catalog if catalog is not None else AttributeCatalog({}, source="cache")
    for cid in range(part.k):
        cluster_words = candidates.members[cid]
        missing = [j for j in cluster_words if j not in catalog.attributes]
        if not missing:
            continue
        # prompt carries the whole candidate set of the cluster so the model
        # can contrast them; already-catalogued words keep their first answer
        prompt = build_prompt([(vocab.name(j), vocab[j].synsets) for j in cluster_words])
        response = query_attributes(prompt, client=llm_client, cache=cache)
        parsed = parse_attributes(response, [(j, vocab.name(j)) for j in cluster_words])
        for j in missing:
            catalog.attributes[j] = parsed.attributes[j]
        catalog.warnings.extend(parsed.warnings)
    timings["prompt"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    banks = []
    for cid in range(part.k):
        sentences = compose_prompt_sentences(catalog, candidates.members[cid], vocab, templates)
        embeddings = embedder(sentences)
        banks.append(assemble_bank(cid, sentences, embeddings))
    realigned, amap2, labels = realign(part, x, banks, vocab_bank.n, epoch=epoch)
    timings["realign"] = time.perf_counter() - t0

    return PipelineResult(
        part, votes, candidates, realigned, amap2, labels, converged, catalog, banks, timings
    )
