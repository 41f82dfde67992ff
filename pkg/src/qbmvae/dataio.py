"""Expression-matrix ingestion: CSV and MatrixMarket readers/writers,
count preprocessing (QC filter, library-size + log1p normalization,
highly-variable-gene selection), stratified splits, and a negative-binomial
synthetic data generator with planted cell types and batch effects.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .rng import philox_gen
from .textio import fmt


@dataclass(frozen=True)
class ExpressionDataset:
    """Cells x genes matrix with per-cell batch labels and optional
    ground-truth cell types.  Processing state travels in the flags so a
    pipeline step can refuse to run twice."""

    matrix: np.ndarray
    cell_ids: tuple
    gene_names: tuple
    batch: np.ndarray
    celltype: np.ndarray | None = None
    normalized: bool = False
    logged: bool = False
    hvg_selected: bool = False

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        b = np.asarray(self.batch, dtype=np.int64)
        b.setflags(write=False)
        object.__setattr__(self, "batch", b)
        if self.celltype is not None:
            c = np.asarray(self.celltype, dtype=np.int64)
            c.setflags(write=False)
            object.__setattr__(self, "celltype", c)
        object.__setattr__(self, "cell_ids", tuple(str(c) for c in self.cell_ids))
        object.__setattr__(self, "gene_names", tuple(str(g) for g in self.gene_names))
        n, g = m.shape
        if len(self.cell_ids) != n:
            raise ValueError(f"{len(self.cell_ids)} cell ids for {n} rows")
        if len(self.gene_names) != g:
            raise ValueError(f"{len(self.gene_names)} gene names for {g} columns")
        if self.batch.shape != (n,):
            raise ValueError("one batch label per cell required")
        if self.celltype is not None and self.celltype.shape != (n,):
            raise ValueError("one celltype label per cell required")
        if not np.all(np.isfinite(m)):
            raise ValueError("matrix contains non-finite values")
        if np.any(m < 0):
            raise ValueError("expression values must be non-negative")
        if len(set(self.cell_ids)) != n:
            raise ValueError("cell ids must be unique")
        if len(set(self.gene_names)) != g:
            raise ValueError("gene names must be unique")

    @property
    def n_cells(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_genes(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_batches(self) -> int:
        return int(self.batch.max()) + 1 if self.batch.size else 0


def _parse_count(token: str, path: str, lineno: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise ValueError(f"{path}:{lineno}: not a number: {token!r}") from None


def load_csv(path: str) -> ExpressionDataset:
    """Read `cell_id,<genes...>,batch[,celltype]` with one row per cell."""
    path = str(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}:1: empty file")
    header = lines[0].split(",")
    if header[0] != "cell_id":
        raise ValueError(f"{path}:1: header must start with 'cell_id', got {header[0]!r}")
    has_celltype = header[-1] == "celltype"
    tail = 2 if has_celltype else 1
    if len(header) < tail + 2 or header[-tail] != "batch":
        raise ValueError(f"{path}:1: header must end with 'batch' (then optional 'celltype')")
    genes = header[1:-tail]
    rows, ids, batches, types = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise ValueError(
                f"{path}:{lineno}: expected {len(header)} fields, got {len(parts)}")
        ids.append(parts[0])
        rows.append([_parse_count(t, path, lineno) for t in parts[1:-tail]])
        batches.append(int(_parse_count(parts[-tail], path, lineno)))
        if has_celltype:
            types.append(int(_parse_count(parts[-1], path, lineno)))
    if not rows:
        raise ValueError(f"{path}:2: no data rows")
    return ExpressionDataset(
        np.array(rows), tuple(ids), tuple(genes), np.array(batches),
        np.array(types) if has_celltype else None)


def save_csv(path: str, ds: ExpressionDataset) -> None:
    header = ["cell_id", *ds.gene_names, "batch"]
    if ds.celltype is not None:
        header.append("celltype")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(ds.n_cells):
            parts = [ds.cell_ids[i]]
            parts.extend(fmt(v) for v in ds.matrix[i])
            parts.append(str(int(ds.batch[i])))
            if ds.celltype is not None:
                parts.append(str(int(ds.celltype[i])))
            fh.write(",".join(parts) + "\n")


MTX_HEADER = "%%MatrixMarket matrix coordinate real general"


def load_mtx(path: str, labels_path: str, genes_path: str | None = None) -> ExpressionDataset:
    """Read a cells-by-genes coordinate MatrixMarket file plus a sidecar
    label CSV (`cell_id,batch[,celltype]`, one row per cell, in matrix row
    order) and an optional one-name-per-line gene list."""
    path = str(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("%%MatrixMarket"):
        raise ValueError(f"{path}:1: missing MatrixMarket banner")
    if lines[0].strip() != MTX_HEADER:
        raise ValueError(f"{path}:1: unsupported format {lines[0]!r}")
    body = [(i + 1, ln) for i, ln in enumerate(lines[1:], start=1)
            if ln.strip() and not ln.startswith("%")]
    if not body:
        raise ValueError(f"{path}: no size line")
    size_lineno, size_line = body[0]
    parts = size_line.split()
    if len(parts) != 3:
        raise ValueError(f"{path}:{size_lineno}: size line needs 'rows cols nnz'")
    n, g, nnz = (int(p) for p in parts)
    if len(body) - 1 != nnz:
        raise ValueError(f"{path}: declared {nnz} entries, found {len(body) - 1}")
    matrix = np.zeros((n, g))
    for lineno, line in body[1:]:
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: entry needs 'row col value'")
        i, j = int(parts[0]), int(parts[1])
        if not (1 <= i <= n and 1 <= j <= g):
            raise ValueError(f"{path}:{lineno}: index ({i},{j}) outside {n}x{g}")
        matrix[i - 1, j - 1] = _parse_count(parts[2], path, lineno)

    labels_path = str(labels_path)
    with open(labels_path, "r", encoding="utf-8") as fh:
        lab_lines = [ln for ln in fh.read().splitlines() if ln]
    if not lab_lines or not lab_lines[0].startswith("cell_id,batch"):
        raise ValueError(f"{labels_path}:1: header must be 'cell_id,batch[,celltype]'")
    has_celltype = lab_lines[0] == "cell_id,batch,celltype"
    if len(lab_lines) - 1 != n:
        raise ValueError(
            f"{labels_path}: {len(lab_lines) - 1} label rows for {n} matrix rows")
    ids, batches, types = [], [], []
    for lineno, line in enumerate(lab_lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != (3 if has_celltype else 2):
            raise ValueError(f"{labels_path}:{lineno}: wrong field count")
        ids.append(parts[0])
        batches.append(int(parts[1]))
        if has_celltype:
            types.append(int(parts[2]))

    if genes_path is not None:
        with open(str(genes_path), "r", encoding="utf-8") as fh:
            genes = [ln for ln in fh.read().splitlines() if ln]
        if len(genes) != g:
            raise ValueError(f"{genes_path}: {len(genes)} gene names for {g} columns")
    else:
        genes = [f"gene{j + 1}" for j in range(g)]
    return ExpressionDataset(matrix, tuple(ids), tuple(genes), np.array(batches),
                             np.array(types) if has_celltype else None)


def save_mtx(path: str, labels_path: str, ds: ExpressionDataset,
             genes_path: str | None = None) -> None:
    nz = np.nonzero(ds.matrix)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(MTX_HEADER + "\n")
        fh.write(f"{ds.n_cells} {ds.n_genes} {len(nz[0])}\n")
        for i, j in zip(*nz):
            fh.write(f"{i + 1} {j + 1} {fmt(ds.matrix[i, j])}\n")
    with open(labels_path, "w", encoding="utf-8", newline="") as fh:
        if ds.celltype is not None:
            fh.write("cell_id,batch,celltype\n")
            for i in range(ds.n_cells):
                fh.write(f"{ds.cell_ids[i]},{int(ds.batch[i])},{int(ds.celltype[i])}\n")
        else:
            fh.write("cell_id,batch\n")
            for i in range(ds.n_cells):
                fh.write(f"{ds.cell_ids[i]},{int(ds.batch[i])}\n")
    if genes_path is not None:
        with open(str(genes_path), "w", encoding="utf-8", newline="") as fh:
            for gname in ds.gene_names:
                fh.write(gname + "\n")


def qc_filter(ds: ExpressionDataset, min_genes: int = 200,
              min_counts: int = 500) -> ExpressionDataset:
    """Drop cells expressing fewer than min_genes genes or with total count
    below min_counts.  Refuses to drop every cell."""
    genes_per_cell = np.count_nonzero(ds.matrix, axis=1)
    counts_per_cell = ds.matrix.sum(axis=1)
    keep = (genes_per_cell >= min_genes) & (counts_per_cell >= min_counts)
    if not keep.any():
        raise ValueError("QC filter removed every cell")
    idx = np.flatnonzero(keep)
    return replace(
        ds,
        matrix=ds.matrix[idx],
        cell_ids=tuple(ds.cell_ids[i] for i in idx),
        batch=ds.batch[idx],
        celltype=None if ds.celltype is None else ds.celltype[idx])


def normalize_log1p(ds: ExpressionDataset, target_sum: float = 10000.0) -> ExpressionDataset:
    """Scale each cell to target_sum total counts, then log1p.

    Running it twice is almost always a pipeline bug, so the flag makes the
    second call an error; a zero-count cell cannot be scaled and is also an
    error (run qc_filter first).
    """
    if ds.normalized or ds.logged:
        raise ValueError("dataset is already normalized")
    totals = ds.matrix.sum(axis=1)
    zero = np.flatnonzero(totals == 0)
    if zero.size:
        raise ValueError(f"cell {ds.cell_ids[zero[0]]!r} has zero counts; filter first")
    scaled = ds.matrix * (target_sum / totals)[:, None]
    return replace(ds, matrix=np.log1p(scaled), normalized=True, logged=True)


def select_hvg(ds: ExpressionDataset, n_top: int = 4000) -> ExpressionDataset:
    """Keep the n_top genes with the largest variance.

    Ties resolve toward the lower column index; original gene order is
    preserved among the survivors.
    """
    if ds.hvg_selected:
        raise ValueError("highly variable genes already selected")
    if not 1 <= n_top <= ds.n_genes:
        raise ValueError(f"n_top must lie in 1..{ds.n_genes}, got {n_top}")
    var = ds.matrix.var(axis=0)
    # stable argsort on -var: equal variances keep index order
    order = np.argsort(-var, kind="stable")[:n_top]
    keep = np.sort(order)
    return replace(
        ds,
        matrix=ds.matrix[:, keep],
        gene_names=tuple(ds.gene_names[j] for j in keep),
        hvg_selected=True)


def split(ds: ExpressionDataset, val_fraction: float = 0.1,
          seed: int = 0) -> tuple[ExpressionDataset, ExpressionDataset]:
    """Batch-stratified train/validation split.

    Each batch contributes round(val_fraction * size) cells (at least one)
    to validation; a fraction that empties either side is rejected.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie strictly between 0 and 1")
    gen = philox_gen(seed, 271828)
    val_mask = np.zeros(ds.n_cells, dtype=bool)
    for b in range(ds.n_batches):
        members = np.flatnonzero(ds.batch == b)
        if members.size == 0:
            continue
        n_val = max(1, int(round(val_fraction * members.size)))
        if n_val >= members.size:
            raise ValueError(
                f"val_fraction={val_fraction} empties the training side of batch {b}")
        chosen = members[gen.permutation(members.size)[:n_val]]
        val_mask[chosen] = True

    def take(mask):
        idx = np.flatnonzero(mask)
        return replace(
            ds,
            matrix=ds.matrix[idx],
            cell_ids=tuple(ds.cell_ids[i] for i in idx),
            batch=ds.batch[idx],
            celltype=None if ds.celltype is None else ds.celltype[idx])

    return take(~val_mask), take(val_mask)


def synthesize(n_cells: int = 2000, n_genes: int = 200, n_types: int = 4,
               n_batches: int = 2, seed: int = 0, batch_strength: float = 0.5,
               separation: float = 1.0) -> ExpressionDataset:
    """Negative-binomial counts with planted cell types and batch effects.

    Each type gets a lognormal mean-expression profile whose spread scales
    with `separation`; each batch multiplies gene means by
    exp(batch_strength * N(0,1)) noise; counts are Gamma-Poisson with
    dispersion 0.1.  Types and batches are assigned round-robin so classes
    stay balanced.
    """
    if n_cells < 1 or n_genes < 1 or n_types < 1 or n_batches < 1:
        raise ValueError("all sizes must be positive")
    if n_types > n_cells:
        raise ValueError("more types than cells")
    gen = philox_gen(seed, 42)
    base = gen.normal(loc=1.0, scale=0.5, size=n_genes)
    type_logmean = base[None, :] + separation * gen.normal(size=(n_types, n_genes))
    type_mean = np.exp(type_logmean)
    batch_factor = np.exp(batch_strength * gen.normal(size=(n_batches, n_genes)))
    celltype = np.arange(n_cells) % n_types
    batch = (np.arange(n_cells) // n_types) % n_batches
    mean = type_mean[celltype] * batch_factor[batch]
    dispersion = 0.1
    # NB via Gamma-Poisson: rate ~ Gamma(1/d, scale=mean*d)
    rate = gen.gamma(shape=1.0 / dispersion, scale=mean * dispersion)
    counts = gen.poisson(rate).astype(np.float64)
    ids = tuple(f"cell{i + 1}" for i in range(n_cells))
    genes = tuple(f"gene{j + 1}" for j in range(n_genes))
    return ExpressionDataset(counts, ids, genes, batch, celltype)
