"""Boltzmann machines, Ising problems, and exact small-system machinery.

Binary-variable energy model over z in {0,1}^n:

    E(z) = sum_l z_l h_l + sum_{l<m} W_lm z_l z_m

with W symmetric and zero-diagonal; each unordered pair enters the sum once.
The spin-variable Hamiltonian over sigma in {-1,+1}^n is

    H(sigma) = - sum_{i<j} J_ij sigma_i sigma_j - mu * sum_i field_i sigma_i.

Two BM -> Ising routes coexist on purpose.  ``pack_ising`` reproduces the
verbatim packed matrix (W block, bias in the last row/column, auxiliary spin
pinned to +1); it does not preserve the BM's distribution.  For anything
correctness-critical use ``bm_to_spin_model``, the exact change of variables
sigma = 2z - 1, which matches energies up to a reported constant offset.

Exact enumeration is available up to n = 25 (the probability vector alone is
a quarter gigabyte there; states are generated blockwise so the state matrix
never materializes).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .rng import philox_gen
from .textio import floats_line, fmt, parse_floats

ENUMERATION_CAP = 25
_BLOCK_BITS = 16


def _frozen_array(obj, name: str, value, dtype=np.float64) -> None:
    arr = np.array(value, dtype=dtype)
    arr.setflags(write=False)
    object.__setattr__(obj, name, arr)


@dataclass(frozen=True)
class BoltzmannMachine:
    """Symmetric zero-diagonal couplings W and biases h over n binary units."""

    n_visible: int
    n_hidden: int
    W: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        n = self.n_visible + self.n_hidden
        if self.n_visible < 0 or self.n_hidden < 0 or n < 1:
            raise ValueError("need n_visible + n_hidden >= 1")
        _frozen_array(self, "W", self.W)
        _frozen_array(self, "h", self.h)
        if self.W.shape != (n, n):
            raise ValueError(f"W must be {n}x{n}, got {self.W.shape}")
        if self.h.shape != (n,):
            raise ValueError(f"h must have length {n}, got {self.h.shape}")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.h))):
            raise ValueError("non-finite BM parameters")
        if not np.array_equal(self.W, self.W.T):
            raise ValueError("W must be exactly symmetric")
        if np.any(np.diagonal(self.W) != 0.0):
            raise ValueError("W must have a zero diagonal")

    @property
    def n(self) -> int:
        return self.n_visible + self.n_hidden


@dataclass(frozen=True)
class IsingProblem:
    """Spin model with couplings J, per-spin field, and field strength mu."""

    n_spins: int
    J: np.ndarray
    field: np.ndarray
    mu: float = 1.0

    def __post_init__(self):
        _frozen_array(self, "J", self.J)
        _frozen_array(self, "field", self.field)
        n = self.n_spins
        if self.J.shape != (n, n):
            raise ValueError(f"J must be {n}x{n}, got {self.J.shape}")
        if self.field.shape != (n,):
            raise ValueError(f"field must have length {n}, got {self.field.shape}")
        if not (np.all(np.isfinite(self.J)) and np.all(np.isfinite(self.field))
                and np.isfinite(self.mu)):
            raise ValueError("non-finite Ising parameters")
        if not np.array_equal(self.J, self.J.T):
            raise ValueError("J must be exactly symmetric")
        if np.any(np.diagonal(self.J) != 0.0):
            raise ValueError("J must have a zero diagonal")


@dataclass(frozen=True)
class PackedIsingMatrix:
    """(n+1)x(n+1) matrix with the W block and the bias in the border.

    The last spin is the auxiliary unit pinned to +1; the diagonal is zeroed
    last, exactly as the packing procedure prescribes.
    """

    I: np.ndarray

    def __post_init__(self):
        _frozen_array(self, "I", self.I)
        if self.I.ndim != 2 or self.I.shape[0] != self.I.shape[1] or self.I.shape[0] < 2:
            raise ValueError("I must be square of size >= 2")
        if np.any(np.diagonal(self.I) != 0.0):
            raise ValueError("I must have a zero diagonal")

    @property
    def n(self) -> int:
        return self.I.shape[0] - 1

    def unpack(self) -> tuple[np.ndarray, np.ndarray]:
        """Recover (W, h) from the packed layout."""
        n = self.n
        return self.I[:n, :n].copy(), self.I[:n, n].copy()


@dataclass(frozen=True)
class Graph:
    """Unweighted simple graph stored as sorted unordered vertex pairs."""

    n_vertices: int
    edges: tuple

    def __post_init__(self):
        norm = []
        seen = set()
        for e in self.edges:
            i, j = int(e[0]), int(e[1])
            if i == j:
                raise ValueError(f"self-loop at vertex {i}")
            if not (0 <= i < self.n_vertices and 0 <= j < self.n_vertices):
                raise ValueError(f"edge ({i},{j}) outside 0..{self.n_vertices - 1}")
            pair = (min(i, j), max(i, j))
            if pair in seen:
                raise ValueError(f"duplicate edge {pair}")
            seen.add(pair)
            norm.append(pair)
        object.__setattr__(self, "edges", tuple(norm))

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edge_array(self) -> np.ndarray:
        return np.array(self.edges, dtype=np.int64).reshape(-1, 2)


def random_bm(n_visible: int, n_hidden: int = 0, scale: float = 0.01,
              seed: int = 0) -> BoltzmannMachine:
    """Random BM: standard-normal couplings, masked diagonal, symmetrized
    as (A + A^T)/2, standard-normal bias, everything multiplied by scale.

    Unit-scale couplings make desk-size chains mix poorly, hence the small
    training default; parity experiments pass scale=1.
    """
    n = n_visible + n_hidden
    gen = philox_gen(seed, 0)
    A = gen.standard_normal((n, n))
    np.fill_diagonal(A, 0.0)
    W = (A + A.T) / 2.0 * scale
    h = gen.standard_normal(n) * scale
    return BoltzmannMachine(n_visible, n_hidden, W, h)


def _check_binary(z: np.ndarray, relaxed: bool) -> None:
    if relaxed:
        if np.any(z < 0.0) or np.any(z > 1.0):
            raise ValueError("relaxed state entries must lie in [0,1]")
    elif not np.all((z == 0.0) | (z == 1.0)):
        raise ValueError("state entries must be 0 or 1")


def bm_energy(z, bm: BoltzmannMachine, relaxed: bool = False) -> float:
    """E(z) = h.z + sum over unordered pairs W_lm z_l z_m.

    With relaxed=True entries may lie anywhere in [0,1] (training path);
    the formula is unchanged.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (bm.n,):
        raise ValueError(f"state length {z.shape} does not match n={bm.n}")
    _check_binary(z, relaxed)
    # z.W.z counts each pair twice; halving matches the l<m single count.
    return float(z @ bm.h + 0.5 * z @ bm.W @ z)


def bm_energies(Z, bm: BoltzmannMachine, relaxed: bool = False) -> np.ndarray:
    """Row-wise bm_energy for a (m, n) batch of states."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != bm.n:
        raise ValueError(f"batch shape {Z.shape} does not match n={bm.n}")
    _check_binary(Z, relaxed)
    return Z @ bm.h + 0.5 * np.einsum("ij,ij->i", Z @ bm.W, Z)


def ising_energy(sigma, p: IsingProblem) -> float:
    """H(sigma) with the conventional minus signs and field strength mu."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (p.n_spins,):
        raise ValueError(f"spin length {sigma.shape} does not match n={p.n_spins}")
    if not np.all((sigma == 1.0) | (sigma == -1.0)):
        raise ValueError("spin entries must be -1 or +1")
    return float(-0.5 * sigma @ p.J @ sigma - p.mu * (p.field @ sigma))


def ising_energies(S, p: IsingProblem) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[1] != p.n_spins:
        raise ValueError(f"batch shape {S.shape} does not match n={p.n_spins}")
    if not np.all(np.abs(S) == 1.0):
        raise ValueError("spin entries must be -1 or +1")
    return -0.5 * np.einsum("ij,ij->i", S @ p.J, S) - p.mu * (S @ p.field)


def pack_ising(bm: BoltzmannMachine) -> PackedIsingMatrix:
    """Verbatim packed matrix: W block, bias border, diagonal zeroed.

    Parity path only; the exact distribution-preserving route is
    bm_to_spin_model.
    """
    n = bm.n
    I = np.zeros((n + 1, n + 1), dtype=np.float64)
    I[:n, :n] = bm.W
    I[:n, n] = bm.h
    I[n, :n] = bm.h
    np.fill_diagonal(I, 0.0)
    return PackedIsingMatrix(I)


def bm_to_spin_model(bm: BoltzmannMachine) -> tuple[IsingProblem, float]:
    """Exact 0/1 -> +-1 change of variables.

    Substituting z = (sigma + 1)/2 into E(z) and matching against
    H(sigma) = -sum_{i<j} J sigma sigma - mu sum field sigma gives

        J_lm    = -W_lm / 4
        field_l = -(h_l/2 + sum_{m != l} W_lm / 4)
        offset  = sum_l h_l/2 + sum_{l<m} W_lm / 4

    so bm_energy(z) = ising_energy(2z-1) + offset for every z.
    """
    J = -bm.W / 4.0
    field = -(bm.h / 2.0 + bm.W.sum(axis=1) / 4.0)
    offset = float(bm.h.sum() / 2.0 + np.triu(bm.W, 1).sum() / 4.0)
    return IsingProblem(bm.n, J, field, mu=1.0), offset


def spins_to_binary(S) -> np.ndarray:
    S = np.asarray(S)
    return ((S + 1) // 2).astype(np.int8)


def binary_to_spins(Z) -> np.ndarray:
    Z = np.asarray(Z)
    return (2 * Z.astype(np.int64) - 1).astype(np.int8)


@lru_cache(maxsize=8)
def all_states(n: int) -> np.ndarray:
    """All 2^n binary states, state i having bit l = (i >> l) & 1.

    Cached; only permitted for n <= 20 (the blockwise enumeration below
    covers larger systems without materializing this matrix).
    """
    if n > 20:
        raise ValueError("all_states is capped at n=20; use blockwise enumeration")
    idx = np.arange(1 << n, dtype=np.uint32)
    out = np.zeros((1 << n, n), dtype=np.int8)
    for l in range(n):
        out[:, l] = (idx >> l) & 1
    out.setflags(write=False)
    return out


def states_to_indices(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.int64)
    weights = (np.int64(1) << np.arange(Z.shape[-1], dtype=np.int64))
    return Z @ weights


@dataclass(frozen=True)
class EnumerationResult:
    log_z: float
    probabilities: np.ndarray
    mean: np.ndarray
    pair: np.ndarray

    def __post_init__(self):
        _frozen_array(self, "probabilities", self.probabilities)
        _frozen_array(self, "mean", self.mean)
        _frozen_array(self, "pair", self.pair)


def enumerate_energies(bm: BoltzmannMachine) -> np.ndarray:
    """Energies of all 2^n states, indexed by the bit convention above."""
    n = bm.n
    if n > ENUMERATION_CAP:
        raise ValueError(f"enumeration capped at n={ENUMERATION_CAP}, got {n}")
    total = 1 << n
    energies = np.empty(total, dtype=np.float64)
    block = 1 << min(_BLOCK_BITS, n)
    for start in range(0, total, block):
        idx = np.arange(start, start + block, dtype=np.int64)
        Z = np.empty((block, n), dtype=np.float64)
        for l in range(n):
            Z[:, l] = (idx >> l) & 1
        energies[start:start + block] = Z @ bm.h + 0.5 * np.einsum(
            "ij,ij->i", Z @ bm.W, Z)
    return energies


def exact_enumeration(bm: BoltzmannMachine) -> EnumerationResult:
    """log Z (max-shifted), all state probabilities, and first/second moments.

    pair[l,l] is E[z_l z_l] = E[z_l], matching the sampled-moment convention.
    """
    n = bm.n
    energies = enumerate_energies(bm)
    neg = -energies
    shift = neg.max()
    weights = np.exp(neg - shift)
    total_weight = weights.sum()
    log_z = float(shift + np.log(total_weight))
    probs = weights / total_weight

    mean = np.zeros(n, dtype=np.float64)
    pair = np.zeros((n, n), dtype=np.float64)
    block = 1 << min(_BLOCK_BITS, n)
    for start in range(0, 1 << n, block):
        idx = np.arange(start, start + block, dtype=np.int64)
        Z = np.empty((block, n), dtype=np.float64)
        for l in range(n):
            Z[:, l] = (idx >> l) & 1
        p = probs[start:start + block]
        mean += p @ Z
        pair += (Z * p[:, None]).T @ Z
    np.fill_diagonal(pair, mean)
    return EnumerationResult(log_z, probs, mean, pair)


def mobius_ladder(N: int) -> Graph:
    """Cycle 0..N-1 plus the N/2 antipodal chords; every vertex has degree 3."""
    if N < 4 or N % 2 != 0:
        raise ValueError("Moebius ladder needs even N >= 4")
    edges = [(i, (i + 1) % N) for i in range(N)]
    edges += [(i, i + N // 2) for i in range(N // 2)]
    return Graph(N, tuple(edges))


def maxcut_to_ising(g: Graph) -> IsingProblem:
    """J_ij = -1 on edges, zero field: H(sigma) = |E| - 2 * cut(sigma).

    Minimizing H therefore maximizes the cut; recover the cut value with
    cut_from_spins(g, sigma) = (|E| - H) / 2.
    """
    J = np.zeros((g.n_vertices, g.n_vertices), dtype=np.float64)
    for i, j in g.edges:
        J[i, j] = -1.0
        J[j, i] = -1.0
    return IsingProblem(g.n_vertices, J, np.zeros(g.n_vertices), mu=1.0)


def cut_value(g: Graph, sigma) -> int:
    """Number of edges whose endpoints carry opposite spins."""
    sigma = np.asarray(sigma)
    if sigma.shape != (g.n_vertices,):
        raise ValueError(f"spin length {sigma.shape} does not match {g.n_vertices}")
    if not np.all(np.abs(sigma.astype(np.float64)) == 1.0):
        raise ValueError("spin entries must be -1 or +1")
    e = g.edge_array()
    if e.size == 0:
        return 0
    return int(np.count_nonzero(sigma[e[:, 0]] != sigma[e[:, 1]]))


cut_from_spins = cut_value


def brute_force_max_cut(g: Graph) -> tuple[int, np.ndarray]:
    """Exhaustive maximum cut for N <= 20 (spin 0 fixed by symmetry)."""
    N = g.n_vertices
    if N > 20:
        raise ValueError("brute force capped at 20 vertices")
    half = 1 << (N - 1)
    idx = np.arange(half, dtype=np.int64)
    cuts = np.zeros(half, dtype=np.int32)
    # vertex 0's bit is always 0; flipping all spins preserves the cut
    for i, j in g.edges:
        bi = (idx >> i) & 1 if i > 0 else np.zeros(half, dtype=np.int64)
        bj = (idx >> j) & 1 if j > 0 else np.zeros(half, dtype=np.int64)
        cuts += (bi != bj)
    best = int(np.argmax(cuts))
    sigma = np.ones(N, dtype=np.int8)
    for v in range(1, N):
        if (best >> v) & 1:
            sigma[v] = -1
    return int(cuts[best]), sigma


def save_bm(bm: BoltzmannMachine, path) -> None:
    """Text format: 'bm v1 n_visible n_hidden', h line, strict upper triangle
    of W row-major; full round-trip precision."""
    n = bm.n
    iu = np.triu_indices(n, k=1)
    lines = [
        f"bm v1 {bm.n_visible} {bm.n_hidden}",
        floats_line(bm.h),
        floats_line(bm.W[iu]) if n > 1 else "",
    ]
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def load_bm(path) -> BoltzmannMachine:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty BM file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "bm" or head[1] != "v1":
        raise ValueError(f"{path}: bad header {lines[0]!r}")
    n_visible, n_hidden = int(head[2]), int(head[3])
    n = n_visible + n_hidden
    if len(lines) < 3:
        raise ValueError(f"{path}: truncated BM file")
    h = parse_floats(lines[1], expect=n, what="bias entries")
    iu = np.triu_indices(n, k=1)
    upper = parse_floats(lines[2], expect=len(iu[0]), what="coupling entries")
    W = np.zeros((n, n), dtype=np.float64)
    W[iu] = upper
    W = W + W.T
    return BoltzmannMachine(n_visible, n_hidden, W, h)


def bm_from_upper(n: int, upper, h) -> BoltzmannMachine:
    """Build a BM from its strict upper triangle (row-major) and bias."""
    iu = np.triu_indices(n, k=1)
    upper = np.asarray(upper, dtype=np.float64)
    if upper.shape != (len(iu[0]),):
        raise ValueError(f"expected {len(iu[0])} couplings for n={n}, got {upper.shape}")
    W = np.zeros((n, n), dtype=np.float64)
    W[iu] = upper
    return BoltzmannMachine(n, 0, W + W.T, h)


def upper_triangle(M: np.ndarray) -> np.ndarray:
    n = M.shape[0]
    return M[np.triu_indices(n, k=1)].copy()


def save_graph(g: Graph, path) -> None:
    lines = [f"{g.n_vertices} {g.n_edges}"]
    lines += [f"{i} {j}" for i, j in g.edges]
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def load_graph(path) -> Graph:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty graph file")
    head = lines[0].split()
    if len(head) != 2:
        raise ValueError(f"{path}: bad graph header {lines[0]!r}")
    n, m = int(head[0]), int(head[1])
    if len(lines) - 1 != m:
        raise ValueError(f"{path}: header promises {m} edges, found {len(lines) - 1}")
    edges = []
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 2:
            raise ValueError(f"{path}: bad edge line {ln!r}")
        edges.append((int(parts[0]), int(parts[1])))
    return Graph(n, tuple(edges))
