"""Evaluation metrics for latent embeddings: clustering agreement,
batch mixing, kNN-graph scores, PCA/PCR, k-means, and cross-validated
kNN classification.

Everything is computed from first principles on dense arrays (desk scale),
with deterministic tie-breaking rules so repeated runs agree bit-for-bit:
distance ties resolve by index order, vote ties by label order, and k-means
restarts are keyed by (seed, restart).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .rng import philox_gen


def densify_labels(labels) -> np.ndarray:
    """Map arbitrary label values to dense integers 0..K-1.

    Integer inputs keep their numeric order; other values sort
    lexicographically.  Length must be positive.
    """
    arr = np.asarray(labels)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("labels must be a non-empty 1-d sequence")
    _, dense = np.unique(arr, return_inverse=True)
    return dense.astype(np.int64)


def _contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ka, kb = a.max() + 1, b.max() + 1
    table = np.zeros((ka, kb), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    return table


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = densify_labels(a)
    b = densify_labels(b)
    if a.size != b.size:
        raise ValueError(f"label lengths differ: {a.size} vs {b.size}")
    return a, b


def _same_partition(a: np.ndarray, b: np.ndarray) -> bool:
    # canonical relabeling by first occurrence; equal arrays = equal partitions
    def canon(x):
        seen = {}
        out = np.empty(x.size, dtype=np.int64)
        nxt = 0
        for i, v in enumerate(x.tolist()):
            if v not in seen:
                seen[v] = nxt
                nxt += 1
            out[i] = seen[v]
        return out

    return bool(np.array_equal(canon(a), canon(b)))


def _comb2(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1.0) / 2.0


def ari(a, b) -> float:
    """Adjusted Rand index via the contingency pair-counting formula.

    Identical partitions score exactly 1 (including the degenerate cases
    where the chance-correction denominator vanishes).
    """
    a, b = _check_pair(a, b)
    if _same_partition(a, b):
        return 1.0
    table = _contingency(a, b)
    n = a.size
    index = _comb2(table).sum()
    row = _comb2(table.sum(axis=1)).sum()
    col = _comb2(table.sum(axis=0)).sum()
    total = _comb2(n)
    expected = row * col / total
    max_index = 0.5 * (row + col)
    denom = max_index - expected
    if denom == 0.0:
        return 1.0 if index == expected else 0.0
    return float((index - expected) / denom)


def _entropy_from_counts(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def _mutual_information(table: np.ndarray, n: int) -> float:
    nz = table > 0
    nij = table[nz].astype(np.float64)
    ai = table.sum(axis=1, keepdims=True)
    bj = table.sum(axis=0, keepdims=True)
    outer = (ai @ bj)[nz].astype(np.float64)
    return float(np.sum(nij / n * np.log(n * nij / outer)))


def nmi(a, b) -> float:
    """I(a;b) normalized by the geometric mean of the entropies; 0 when an
    entropy vanishes and the partitions differ."""
    a, b = _check_pair(a, b)
    if _same_partition(a, b):
        return 1.0
    table = _contingency(a, b)
    n = a.size
    ha = _entropy_from_counts(table.sum(axis=1), n)
    hb = _entropy_from_counts(table.sum(axis=0), n)
    if ha == 0.0 or hb == 0.0:
        return 0.0
    return float(_mutual_information(table, n) / np.sqrt(ha * hb))


def expected_mutual_information(table: np.ndarray, n: int) -> float:
    """E[I] under the hypergeometric model of random tables with fixed
    margins; the standard chance term of AMI."""
    ai = table.sum(axis=1)
    bj = table.sum(axis=0)
    log_n_fact = gammaln(n + 1)
    emi = 0.0
    for av in ai:
        for bv in bj:
            lo = max(1, av + bv - n)
            hi = min(av, bv)
            if hi < lo:
                continue
            nij = np.arange(lo, hi + 1, dtype=np.float64)
            term = nij / n * np.log(n * nij / (float(av) * float(bv)))
            # hypergeometric pmf in log space
            log_p = (gammaln(av + 1) + gammaln(bv + 1)
                     + gammaln(n - av + 1) + gammaln(n - bv + 1)
                     - log_n_fact - gammaln(nij + 1)
                     - gammaln(av - nij + 1) - gammaln(bv - nij + 1)
                     - gammaln(n - av - bv + nij + 1))
            emi += float(np.sum(term * np.exp(log_p)))
    return emi


def ami(a, b) -> float:
    """Chance-adjusted mutual information, normalized by max(H(a), H(b))."""
    a, b = _check_pair(a, b)
    if _same_partition(a, b):
        return 1.0
    table = _contingency(a, b)
    n = a.size
    ha = _entropy_from_counts(table.sum(axis=1), n)
    hb = _entropy_from_counts(table.sum(axis=0), n)
    if ha == 0.0 or hb == 0.0:
        return 0.0
    mi = _mutual_information(table, n)
    emi = expected_mutual_information(table, n)
    denom = max(ha, hb) - emi
    if abs(denom) < 1e-15:
        return 0.0
    return float((mi - emi) / denom)


def fmi(a, b) -> float:
    """Fowlkes-Mallows: TP / sqrt((TP+FP)(TP+FN)) over sample pairs."""
    a, b = _check_pair(a, b)
    if _same_partition(a, b):
        return 1.0
    table = _contingency(a, b)
    tp = _comb2(table).sum()
    tp_fp = _comb2(table.sum(axis=1)).sum()
    tp_fn = _comb2(table.sum(axis=0)).sum()
    if tp_fp == 0.0 or tp_fn == 0.0:
        return 0.0
    return float(tp / np.sqrt(tp_fp * tp_fn))


@dataclass(frozen=True)
class KnnGraph:
    """Per-node neighbor lists; exactly k out-neighbors before
    symmetrization (the symmetrized flag records which form this is)."""

    neighbors: tuple
    symmetrized: bool
    k: int

    def __post_init__(self):
        for i, nbrs in enumerate(self.neighbors):
            if i in nbrs:
                raise ValueError(f"self-edge at node {i}")
            if not self.symmetrized and len(nbrs) != self.k:
                raise ValueError(f"node {i} has {len(nbrs)} neighbors, expected {self.k}")

    @property
    def n_nodes(self) -> int:
        return len(self.neighbors)

    def symmetrize(self) -> "KnnGraph":
        """Union adjacency: j is a neighbor of i if either points at the other."""
        sets = [set(nbrs) for nbrs in self.neighbors]
        for i, nbrs in enumerate(self.neighbors):
            for j in nbrs:
                sets[j].add(i)
        return KnnGraph(tuple(tuple(sorted(s)) for s in sets), True, self.k)


def knn_graph(X, k: int) -> KnnGraph:
    """Exact Euclidean k-nearest-neighbor graph, ties broken by index order.

    Brute-force distances, computed in row blocks; duplicated points are
    each other's neighbors (only the self-index is excluded, not zero
    distances).
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n_samples, got k={k}, n={n}")
    sq = np.einsum("ij,ij->i", X, X)
    neighbors = []
    block = 512
    for start in range(0, n, block):
        stop = min(start + block, n)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * X[start:stop] @ X.T
        for i in range(start, stop):
            row = d2[i - start].copy()
            row[i] = np.inf
            order = np.argsort(row, kind="stable")  # equal distances keep index order
            neighbors.append(tuple(int(j) for j in order[:k]))
    return KnnGraph(tuple(neighbors), False, k)


def ilisi(g: KnnGraph, batch) -> float:
    """Mean normalized inverse Simpson index of batch labels over
    neighborhoods: 0 = every neighborhood single-batch, 1 = perfectly mixed."""
    batch = densify_labels(batch)
    if batch.size != g.n_nodes:
        raise ValueError("batch labels must cover every node")
    n_batches = int(batch.max()) + 1
    if n_batches < 2:
        raise ValueError("iLISI needs at least two batches")
    scores = np.empty(g.n_nodes)
    for i, nbrs in enumerate(g.neighbors):
        counts = np.bincount(batch[list(nbrs)], minlength=n_batches)
        p = counts / counts.sum()
        simpson = float(np.sum(p * p))
        scores[i] = (1.0 / simpson - 1.0) / (n_batches - 1.0)
    return float(scores.mean())


def knet_entropy(g: KnnGraph, celltype) -> float:
    """Mean Shannon entropy (nats) of cell-type labels over neighborhoods;
    lower means cleaner type separation."""
    celltype = densify_labels(celltype)
    if celltype.size != g.n_nodes:
        raise ValueError("celltype labels must cover every node")
    total = 0.0
    for nbrs in g.neighbors:
        counts = np.bincount(celltype[list(nbrs)])
        total += _entropy_from_counts(counts, len(nbrs))
    return total / g.n_nodes


def graph_connectivity(g: KnnGraph, celltype) -> float:
    """Per type, the fraction of its cells in the largest connected component
    of the type-restricted subgraph; averaged over types.  Requires the
    symmetrized graph (connectivity is an undirected notion)."""
    if not g.symmetrized:
        raise ValueError("graph_connectivity needs a symmetrized graph")
    celltype = densify_labels(celltype)
    if celltype.size != g.n_nodes:
        raise ValueError("celltype labels must cover every node")
    parent = np.arange(g.n_nodes)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, nbrs in enumerate(g.neighbors):
        for j in nbrs:
            if celltype[i] == celltype[j]:
                ri, rj = find(i), find(int(j))
                if ri != rj:
                    parent[ri] = rj
    fractions = []
    for t in range(int(celltype.max()) + 1):
        members = np.flatnonzero(celltype == t)
        if members.size == 0:
            continue
        roots = np.array([find(int(m)) for m in members])
        largest = np.bincount(np.unique(roots, return_inverse=True)[1]).max()
        fractions.append(largest / members.size)
    return float(np.mean(fractions))


def pca(X, n_components: int = 50):
    """Centered PCA via SVD.

    Returns (components, explained_variance, scores).  Null directions
    (zero singular values) are dropped; each component's largest-magnitude
    loading is made positive so the decomposition is sign-deterministic.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if not 1 <= n_components <= min(n, d):
        raise ValueError(f"n_components must lie in 1..{min(n, d)}")
    mean = X.mean(axis=0)
    Xc = X - mean
    U, S, Vt = np.linalg.svd(Xc, full_matrices=False)
    keep = S > S[0] * 1e-12 if S[0] > 0 else S > 0
    r = min(n_components, int(keep.sum()))
    U, S, Vt = U[:, :r], S[:r], Vt[:r]
    for c in range(r):
        pivot = int(np.argmax(np.abs(Vt[c])))
        if Vt[c, pivot] < 0:
            Vt[c] = -Vt[c]
            U[:, c] = -U[:, c]
    explained = S ** 2 / max(n - 1, 1)
    scores = U * S
    return Vt.copy(), explained, scores


def pcr_r2(scores, explained_variance, batch) -> float:
    """Variance-weighted mean R^2 of each PC regressed on batch one-hots.

    Lower = less batch signal in the embedding.  The design is an intercept
    plus B-1 indicator columns; a single batch leaves nothing to regress on.
    """
    scores = np.asarray(scores, dtype=np.float64)
    ev = np.asarray(explained_variance, dtype=np.float64)
    batch = densify_labels(batch)
    if scores.shape[0] != batch.size:
        raise ValueError("scores and batch labels disagree in length")
    if scores.shape[1] != ev.size:
        raise ValueError("one explained-variance entry per PC required")
    n_batches = int(batch.max()) + 1
    if n_batches < 2:
        raise ValueError("PCR needs at least two batches")
    design = np.zeros((batch.size, n_batches), dtype=np.float64)
    design[:, 0] = 1.0
    for b in range(1, n_batches):
        design[:, b] = batch == b
    coef, _, rank, _ = np.linalg.lstsq(design, scores, rcond=None)
    if rank < n_batches:
        raise ValueError("rank-deficient batch design")
    fitted = design @ coef
    ss_res = np.sum((scores - fitted) ** 2, axis=0)
    ss_tot = np.sum((scores - scores.mean(axis=0)) ** 2, axis=0)
    r2 = np.where(ss_tot > 0, 1.0 - ss_res / np.maximum(ss_tot, 1e-300), 0.0)
    return float(np.sum(r2 * ev) / ev.sum())


def _lloyd(X: np.ndarray, centers: np.ndarray, max_iter: int = 100):
    """Lloyd iterations from given centers; returns labels, final inertia,
    and the per-iteration inertia trace (non-increasing)."""
    n, _ = X.shape
    K = centers.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    history = []
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(n), new_labels].sum())
        history.append(inertia)
        new_centers = centers.copy()
        for c in range(K):
            members = X[new_labels == c]
            if members.shape[0] > 0:
                new_centers[c] = members.mean(axis=0)
            else:
                # re-seed an empty cluster on the point farthest from its center
                far = int(np.argmax(d2[np.arange(n), new_labels]))
                new_centers[c] = X[far]
        if np.array_equal(new_labels, labels) and len(history) > 1:
            break
        labels = new_labels
        centers = new_centers
    return labels, history[-1], history


def _kmeans_pp_init(X: np.ndarray, K: int, gen: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((K, X.shape[1]), dtype=np.float64)
    centers[0] = X[int(gen.integers(n))]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for c in range(1, K):
        total = d2.sum()
        if total > 0:
            idx = int(gen.choice(n, p=d2 / total))
        else:
            idx = int(gen.integers(n))
        centers[c] = X[idx]
        d2 = np.minimum(d2, ((X - centers[c]) ** 2).sum(axis=1))
    return centers


def kmeans(X, K: int, n_restarts: int = 10, seed: int = 0) -> np.ndarray:
    """Best-inertia k-means labels over seeded k-means++ restarts."""
    X = np.asarray(X, dtype=np.float64)
    if K < 1 or K > X.shape[0]:
        raise ValueError(f"need 1 <= K <= n_samples, got K={K}")
    if K == 1:
        return np.zeros(X.shape[0], dtype=np.int64)
    best_labels = None
    best_inertia = np.inf
    for restart in range(n_restarts):
        gen = philox_gen(seed, restart)
        centers = _kmeans_pp_init(X, K, gen)
        labels, inertia, _ = _lloyd(X, centers)
        if inertia < best_inertia:
            best_inertia = inertia
            best_labels = labels
    return best_labels


def stratified_folds(labels: np.ndarray, folds: int, seed: int) -> np.ndarray:
    """Fold id per sample; each class is shuffled once and dealt round-robin."""
    labels = densify_labels(labels)
    gen = philox_gen(seed, 104729)
    assignment = np.empty(labels.size, dtype=np.int64)
    for cls in range(int(labels.max()) + 1):
        members = np.flatnonzero(labels == cls)
        if members.size < folds:
            raise ValueError(
                f"class {cls} has {members.size} members, fewer than {folds} folds")
        perm = gen.permutation(members.size)
        assignment[members[perm]] = np.arange(members.size) % folds
    return assignment


def classify_knn_cv(X, labels, k_neighbors: int = 15, folds: int = 5,
                    seed: int = 0) -> tuple[float, float, float, float]:
    """Stratified k-fold majority-vote kNN classification of the embedding.

    Returns (accuracy, macro precision, macro recall, macro F1) from the
    pooled cross-validated confusion matrix.  Vote ties go to the smaller
    label, distance ties to the smaller index.
    """
    X = np.asarray(X, dtype=np.float64)
    y = densify_labels(labels)
    if X.shape[0] != y.size:
        raise ValueError("X and labels disagree in length")
    n_classes = int(y.max()) + 1
    fold_of = stratified_folds(y, folds, seed)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for f in range(folds):
        test = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        k = min(k_neighbors, train.size)
        d2 = (np.einsum("ij,ij->i", X[test], X[test])[:, None]
              + np.einsum("ij,ij->i", X[train], X[train])[None, :]
              - 2.0 * X[test] @ X[train].T)
        for row, i in enumerate(test):
            order = np.argsort(d2[row], kind="stable")[:k]
            votes = np.bincount(y[train[order]], minlength=n_classes)
            pred = int(np.argmax(votes))
            confusion[y[i], pred] += 1
    tp = np.diag(confusion).astype(np.float64)
    support = confusion.sum(axis=1).astype(np.float64)
    predicted = confusion.sum(axis=0).astype(np.float64)
    acc = float(tp.sum() / confusion.sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        f1 = np.where(precision + recall > 0,
                      2 * precision * recall / (precision + recall), 0.0)
    present = support > 0
    return (acc, float(precision[present].mean()),
            float(recall[present].mean()), float(f1[present].mean()))
