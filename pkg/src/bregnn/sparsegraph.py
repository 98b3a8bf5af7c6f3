"""Graph data model: CSR adjacency, normalization, datasets and generators.

Canonical dataset directory layout (no headers, UTF-8, LF line endings)::

    meta.json      {"n", "d0", "num_classes", "name", "row_normalize"}
    edges.csv      i,j        one undirected edge per line, i < j
    features.csv   n rows x d0 reals
    labels.csv    one integer per line
    masks.csv      train,val,test as 0/1
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, custom_op


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Square n x n matrix in CSR form with sorted column indices per row."""

    n: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    vals: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        row_ptr = np.asarray(self.row_ptr, dtype=np.int64)
        col_idx = np.asarray(self.col_idx, dtype=np.int64)
        vals = np.asarray(self.vals, dtype=np.float64)
        object.__setattr__(self, "row_ptr", row_ptr)
        object.__setattr__(self, "col_idx", col_idx)
        object.__setattr__(self, "vals", vals)
        if row_ptr.shape != (self.n + 1,) or row_ptr[0] != 0:
            raise ValueError("row_ptr must have length n+1 and start at 0")
        if np.any(np.diff(row_ptr) < 0):
            raise ValueError("row_ptr must be nondecreasing")
        if row_ptr[-1] != col_idx.size or col_idx.size != vals.size:
            raise ValueError("row_ptr[n], len(col_idx) and len(vals) must agree")
        if col_idx.size and (col_idx.min() < 0 or col_idx.max() >= self.n):
            raise ValueError("column index out of range")
        rows = self.row_ids()
        same_row = rows[1:] == rows[:-1]
        if np.any(col_idx[1:][same_row] <= col_idx[:-1][same_row]):
            raise ValueError("column indices must be strictly increasing within each row")

    @classmethod
    def from_coo(cls, n, rows, cols, vals=None):
        """Build from coordinate triples, summing duplicates."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.ones(rows.size) if vals is None else np.asarray(vals, dtype=np.float64)
        key = rows * n + cols
        uniq, inverse = np.unique(key, return_inverse=True)
        summed = np.zeros(uniq.size)
        np.add.at(summed, inverse, vals)
        r, c = uniq // n, uniq % n
        row_ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(r, minlength=n), out=row_ptr[1:])
        return cls(n, row_ptr, c, summed)

    @classmethod
    def from_edges(cls, n, edges):
        """Symmetric 0/1 adjacency of an undirected edge list."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        mat = cls.from_coo(n, rows, cols)
        # duplicates collapse to a single unit weight
        return cls(n, mat.row_ptr, mat.col_idx, np.ones(mat.nnz))

    @classmethod
    def identity(cls, n):
        return cls(n, np.arange(n + 1), np.arange(n), np.ones(n))

    @property
    def nnz(self):
        return int(self.col_idx.size)

    def row_ids(self):
        return np.repeat(np.arange(self.n), np.diff(self.row_ptr))

    def degrees(self):
        return np.diff(self.row_ptr)

    def row_sums(self):
        out = np.zeros(self.n)
        np.add.at(out, self.row_ids(), self.vals)
        return out

    def with_values(self, vals):
        return SparseMatrix(self.n, self.row_ptr, self.col_idx, vals)

    def to_dense(self):
        dense = np.zeros((self.n, self.n))
        dense[self.row_ids(), self.col_idx] = self.vals
        return dense

    def is_structurally_symmetric(self):
        rows = self.row_ids()
        fwd = set(zip(rows.tolist(), self.col_idx.tolist()))
        return all((j, i) in fwd for i, j in fwd)

    def transpose(self):
        return SparseMatrix.from_coo(self.n, self.col_idx, self.row_ids(), self.vals)


def normalize_sym(adj, add_self_loops=True):
    """Symmetric normalization D^{-1/2} (A [+ I]) D^{-1/2}.

    Rows with zero degree stay zero.
    """
    rows, cols, vals = adj.row_ids(), adj.col_idx, adj.vals
    if add_self_loops:
        diag = np.arange(adj.n)
        rows = np.concatenate([rows, diag])
        cols = np.concatenate([cols, diag])
        vals = np.concatenate([vals, np.ones(adj.n)])
    mat = SparseMatrix.from_coo(adj.n, rows, cols, vals)
    deg = mat.row_sums()
    inv_sqrt = np.zeros_like(deg)
    pos = deg > 0
    inv_sqrt[pos] = deg[pos] ** -0.5
    return mat.with_values(inv_sqrt[mat.row_ids()] * mat.vals * inv_sqrt[mat.col_idx])


def normalize_rw(adj):
    """Row normalization D^{-1} A (neighbor mean); empty rows stay zero."""
    deg = adj.row_sums()
    inv = np.zeros_like(deg)
    inv[deg > 0] = 1.0 / deg[deg > 0]
    return adj.with_values(inv[adj.row_ids()] * adj.vals)


def spmm(adj, x):
    """Differentiable sparse-dense product ``adj @ x``."""
    if adj.n != x.rows:
        raise ShapeError(f"spmm: matrix is {adj.n}x{adj.n} but x has shape {x.shape}")
    rp, ci, v = adj.row_ptr, adj.col_idx, adj.vals
    out = kernels.csr_spmm(rp, ci, v, x.values)
    return custom_op(out, (x,), lambda g: (kernels.csr_spmm_t(rp, ci, v, g, adj.n),))


def weighted_spmm(adj, weights, x):
    """``S @ x`` where S has the sparsity of ``adj`` and entries ``weights``.

    ``weights`` is an (nnz x 1) tensor aligned with ``adj.col_idx``; the
    product is differentiable in both ``weights`` and ``x``.
    """
    if weights.shape != (adj.nnz, 1):
        raise ShapeError(f"weighted_spmm: weights must be ({adj.nnz}, 1), got {weights.shape}")
    if adj.n != x.rows:
        raise ShapeError(f"weighted_spmm: matrix is {adj.n}x{adj.n} but x has shape {x.shape}")
    rp, ci = adj.row_ptr, adj.col_idx
    w = weights.values[:, 0]
    xv = x.values
    out = kernels.csr_spmm(rp, ci, w, xv)

    def rule(g):
        return kernels.csr_sddmm(rp, ci, g, xv)[:, None], kernels.csr_spmm_t(rp, ci, w, g, adj.n)

    return custom_op(out, (weights, x), rule)


def segment_softmax(adj, scores):
    """Softmax of per-entry ``scores`` (nnz x 1) within each row of ``adj``."""
    if scores.shape != (adj.nnz, 1):
        raise ShapeError(f"segment_softmax: scores must be ({adj.nnz}, 1), got {scores.shape}")
    rp = adj.row_ptr
    alpha = kernels.segment_softmax(rp, scores.values[:, 0])
    return custom_op(alpha[:, None], (scores,),
                     lambda g: (kernels.segment_softmax_backward(rp, alpha, g[:, 0])[:, None],))


# ----------------------------------------------------------------------
# datasets


class DatasetError(ValueError):
    """Base class for dataset parse errors; carries ``path`` and ``line``."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}" + (f":{line}" if line is not None else "") + ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class MissingFileError(DatasetError):
    pass


class MalformedRowError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


class MaskOverlapError(DatasetError):
    pass


@dataclass(eq=False)
class GraphDataset:
    features: Tensor
    labels: np.ndarray
    edges: np.ndarray
    num_classes: int
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    name: str = "graph"
    row_normalize: bool = False

    def __post_init__(self):
        if not isinstance(self.features, Tensor):
            self.features = Tensor(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        for attr in ("train_mask", "val_mask", "test_mask"):
            setattr(self, attr, np.asarray(getattr(self, attr), dtype=bool))
        n = self.features.rows
        if self.labels.shape != (n,):
            raise ValueError(f"expected {n} labels, got {self.labels.shape}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelRangeError(f"labels must lie in [0, {self.num_classes})")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= n):
            raise ValueError("edge endpoint out of range")
        masks = (self.train_mask, self.val_mask, self.test_mask)
        if any(m.shape != (n,) for m in masks):
            raise ValueError("masks must have one entry per node")
        if np.any(masks[0] & masks[1]) or np.any(masks[0] & masks[2]) or np.any(masks[1] & masks[2]):
            raise MaskOverlapError("train/val/test masks overlap")
        self._adj = None

    @property
    def n(self):
        return self.features.rows

    @property
    def num_features(self):
        return self.features.cols

    @property
    def num_edges(self):
        return int(self.edges.shape[0])

    def adjacency(self):
        if self._adj is None:
            self._adj = SparseMatrix.from_edges(self.n, self.edges)
        return self._adj


def canonical_edges(edges):
    """Undirected edge list with i < j, self-loops and duplicates removed."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    e = np.sort(e, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    if e.size == 0:
        return e
    return np.unique(e, axis=0)


def edge_homophily(ds):
    """Fraction of undirected edges whose two endpoints share a label."""
    edges = canonical_edges(ds.edges)
    if edges.shape[0] == 0:
        raise ValueError("edge homophily is undefined for a graph without edges")
    same = ds.labels[edges[:, 0]] == ds.labels[edges[:, 1]]
    return float(same.mean())


def row_normalize_features(x):
    x = np.asarray(x, dtype=np.float64)
    s = x.sum(axis=1, keepdims=True)
    s[s == 0] = 1.0
    return x / s


def _read_lines(path):
    if not path.is_file():
        raise MissingFileError("required file is missing", path=path)
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _parse_rows(path, width, cast, expected_rows=None):
    rows = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        parts = line.split(",")
        if width is not None and len(parts) != width:
            raise MalformedRowError(f"expected {width} columns, found {len(parts)}", path=path, line=lineno)
        try:
            rows.append([cast(p) for p in parts])
        except ValueError:
            raise MalformedRowError(f"cannot parse {line!r}", path=path, line=lineno) from None
    if expected_rows is not None and len(rows) != expected_rows:
        raise MalformedRowError(f"expected {expected_rows} rows, found {len(rows)}", path=path,
                                line=len(rows) + 1)
    return rows


def load_dataset(directory):
    """Read a dataset stored in the canonical directory layout."""
    d = Path(directory)
    meta_path = d / "meta.json"
    if not meta_path.is_file():
        raise MissingFileError("required file is missing", path=meta_path)
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        n, d0, c = int(meta["n"]), int(meta["d0"]), int(meta["num_classes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedRowError(f"bad metadata: {exc}", path=meta_path) from None

    feats = np.array(_parse_rows(d / "features.csv", d0, float, n), dtype=np.float64).reshape(n, d0)
    label_rows = _parse_rows(d / "labels.csv", 1, int, n)
    labels = np.array([r[0] for r in label_rows], dtype=np.int64)
    for lineno, y in enumerate(labels, start=1):
        if not 0 <= y < c:
            raise LabelRangeError(f"label {y} outside [0, {c})", path=d / "labels.csv", line=lineno)

    edges_path = d / "edges.csv"
    edge_rows = _parse_rows(edges_path, 2, int)
    for lineno, (i, j) in enumerate(edge_rows, start=1):
        if not (0 <= i < n and 0 <= j < n) or i >= j:
            raise MalformedRowError(f"edge ({i},{j}) must satisfy 0 <= i < j < {n}", path=edges_path,
                                    line=lineno)
    edges = np.array(edge_rows, dtype=np.int64).reshape(-1, 2)

    masks_path = d / "masks.csv"
    mask_rows = _parse_rows(masks_path, 3, int, n)
    masks = np.array(mask_rows, dtype=np.int64).reshape(n, 3)
    for lineno, row in enumerate(masks, start=1):
        if np.any((row != 0) & (row != 1)):
            raise MalformedRowError("mask entries must be 0 or 1", path=masks_path, line=lineno)
        if row.sum() > 1:
            raise MaskOverlapError("node belongs to more than one split", path=masks_path, line=lineno)

    row_norm = bool(meta.get("row_normalize", False))
    if row_norm:
        feats = row_normalize_features(feats)
    return GraphDataset(
        features=Tensor(feats),
        labels=labels,
        edges=edges,
        num_classes=c,
        train_mask=masks[:, 0] == 1,
        val_mask=masks[:, 1] == 1,
        test_mask=masks[:, 2] == 1,
        name=str(meta.get("name", d.name)),
        row_normalize=row_norm,
    )


def _fmt(x):
    return repr(float(x))


def save_dataset(ds, directory):
    """Write ``ds`` in the canonical layout (inverse of :func:`load_dataset`)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"n": ds.n, "d0": ds.num_features, "num_classes": int(ds.num_classes), "name": ds.name,
            "row_normalize": bool(ds.row_normalize)}
    (d / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    edges = canonical_edges(ds.edges)
    with open(d / "edges.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{i},{j}\n" for i, j in edges)
    with open(d / "features.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(",".join(_fmt(v) for v in row) + "\n" for row in ds.features.values)
    with open(d / "labels.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{int(y)}\n" for y in ds.labels)
    with open(d / "masks.csv", "w", encoding="utf-8", newline="\n") as fh:
        for a, b, c in zip(ds.train_mask, ds.val_mask, ds.test_mask):
            fh.write(f"{int(a)},{int(b)},{int(c)}\n")


def stratified_split(labels, fractions, rng):
    """Per-class random split into disjoint masks with the given fractions."""
    labels = np.asarray(labels)
    n = labels.size
    masks = [np.zeros(n, dtype=bool) for _ in fractions]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        bounds = np.round(np.cumsum(fractions) * idx.size).astype(int)
        start = 0
        for m, stop in zip(masks, bounds):
            m[idx[start:stop]] = True
            start = stop
    return masks


def generate_sbm(n, classes, p_in, p_out, feat_dim, seed, *, feature_signal=1.0, feature_noise=1.0):
    """Two-parameter stochastic block model with Gaussian class features.

    Nodes are split as evenly as possible across ``classes``; each pair is
    joined with probability ``p_in`` (same class) or ``p_out`` (different
    classes). Features are ``feature_signal * mu_y + feature_noise * N(0, I)``
    with class means ``mu_c ~ N(0, I)``. Masks are a stratified 60/20/20 split.
    """
    for name, p in (("p_in", p_in), ("p_out", p_out)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must be a probability, got {p}")
    if classes < 1 or n < classes:
        raise ValueError("need n >= classes >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    means = rng.standard_normal((classes, feat_dim))
    feats = feature_signal * means[labels] + feature_noise * rng.standard_normal((n, feat_dim))
    train, val, test = stratified_split(labels, (0.6, 0.2, 0.2), rng)
    return GraphDataset(
        features=Tensor(feats),
        labels=labels,
        edges=edges,
        num_classes=classes,
        train_mask=train,
        val_mask=val,
        test_mask=test,
        name=f"sbm-n{n}-c{classes}-pin{p_in}-pout{p_out}-s{seed}",
    )
