"""One-time conversion of native benchmark formats to the canonical layout.

Supported inputs:

* Planetoid (Cora, CiteSeer, PubMed): ``ind.<name>.{x,y,tx,ty,allx,ally,graph}``
  pickles plus ``ind.<name>.test.index``; public split of 20 labels per class
  for training, the next 500 nodes for validation and the 1000 test nodes.
* Geom-GCN (Texas, Actor/"film", ...): ``out1_node_feature_label.txt``,
  ``out1_graph_edges.txt`` and ``<name>_split_0.6_0.2_<k>.npz``.

Directed source edges are symmetrized; self-loops and duplicates are dropped.
"""

from __future__ import annotations

import pickle
from pathlib import Path

import numpy as np

from .sparsegraph import GraphDataset, MalformedRowError, MissingFileError, canonical_edges, save_dataset
from .tensor import Tensor

PLANETOID_PARTS = ("x", "y", "tx", "ty", "allx", "ally", "graph")


def _dense(m):
    return np.asarray(m.todense() if hasattr(m, "todense") else m, dtype=np.float64)


def _load_pickle(path):
    if not path.is_file():
        raise MissingFileError("required file is missing", path=path)
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="latin1")


def read_planetoid(directory, name):
    d = Path(directory)
    parts = {k: _load_pickle(d / f"ind.{name}.{k}") for k in PLANETOID_PARTS}
    index_path = d / f"ind.{name}.test.index"
    if not index_path.is_file():
        raise MissingFileError("required file is missing", path=index_path)
    test_idx = np.array([int(line) for line in index_path.read_text().split()], dtype=np.int64)
    test_sorted = np.sort(test_idx)

    x, y = _dense(parts["x"]), _dense(parts["y"])
    tx, ty = _dense(parts["tx"]), _dense(parts["ty"])
    allx, ally = _dense(parts["allx"]), _dense(parts["ally"])
    if name.lower() == "citeseer":
        # some test ids are isolated nodes absent from tx/ty: pad with zeros
        full = np.arange(test_sorted.min(), test_sorted.max() + 1)
        tx_ext = np.zeros((full.size, tx.shape[1]))
        tx_ext[test_sorted - test_sorted.min()] = tx
        ty_ext = np.zeros((full.size, ty.shape[1]))
        ty_ext[test_sorted - test_sorted.min()] = ty
        tx, ty = tx_ext, ty_ext

    features = np.vstack([allx, tx])
    labels_1h = np.vstack([ally, ty])
    features[test_idx] = features[test_sorted]
    labels_1h[test_idx] = labels_1h[test_sorted]
    labels = labels_1h.argmax(axis=1)
    n = features.shape[0]

    graph = parts["graph"]
    edges = [(int(i), int(j)) for i, nbrs in graph.items() for j in nbrs if int(j) < n and int(i) < n]
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    train[: y.shape[0]] = True
    # the 500 nodes after the training block; never past the labelled (allx) part
    val[y.shape[0]: min(y.shape[0] + 500, allx.shape[0])] = True
    test[test_sorted] = True
    return GraphDataset(
        features=Tensor(features),
        labels=labels,
        edges=canonical_edges(np.array(edges, dtype=np.int64).reshape(-1, 2)),
        num_classes=int(labels_1h.shape[1]),
        train_mask=train,
        val_mask=val,
        test_mask=test,
        name=name,
        row_normalize=True,
    )


def read_geom_gcn(directory, name, split=0, num_features=None):
    """Read a Geom-GCN style dataset.

    Feature fields are either a dense comma list or, for datasets such as
    Actor, the comma-separated indices of nonzero binary features; the latter
    is detected when rows have different lengths or ``num_features`` is given.
    """
    d = Path(directory)
    feat_path = d / "out1_node_feature_label.txt"
    edge_path = d / "out1_graph_edges.txt"
    for p in (feat_path, edge_path):
        if not p.is_file():
            raise MissingFileError("required file is missing", path=p)
    ids, raw, labels = [], [], []
    for lineno, line in enumerate(feat_path.read_text(encoding="utf-8").splitlines(), start=1):
        if lineno == 1 or not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise MalformedRowError("expected node_id<TAB>features<TAB>label", path=feat_path, line=lineno)
        try:
            ids.append(int(parts[0]))
            raw.append([int(float(v)) for v in parts[1].split(",") if v != ""])
            labels.append(int(parts[2]))
        except ValueError:
            raise MalformedRowError(f"cannot parse {line!r}", path=feat_path, line=lineno) from None
    n = max(ids) + 1
    lengths = {len(r) for r in raw}
    sparse = num_features is not None or len(lengths) > 1
    if sparse:
        dim = num_features if num_features is not None else max(max(r) for r in raw if r) + 1
        features = np.zeros((n, dim))
        for i, r in zip(ids, raw):
            features[i, r] = 1.0
    else:
        features = np.zeros((n, lengths.pop()))
        for i, r in zip(ids, raw):
            features[i] = r
    y = np.zeros(n, dtype=np.int64)
    y[ids] = labels

    edges = []
    for lineno, line in enumerate(edge_path.read_text(encoding="utf-8").splitlines(), start=1):
        if lineno == 1 or not line.strip():
            continue
        parts = line.split("\t")
        try:
            edges.append((int(parts[0]), int(parts[1])))
        except (ValueError, IndexError):
            raise MalformedRowError(f"cannot parse {line!r}", path=edge_path, line=lineno) from None

    split_path = d / f"{name}_split_0.6_0.2_{split}.npz"
    if not split_path.is_file():
        raise MissingFileError("required file is missing", path=split_path)
    with np.load(split_path) as s:
        train, val, test = (np.asarray(s[k], dtype=bool) for k in ("train_mask", "val_mask", "test_mask"))
    return GraphDataset(
        features=Tensor(features),
        labels=y,
        edges=canonical_edges(np.array(edges, dtype=np.int64).reshape(-1, 2)),
        num_classes=int(y.max()) + 1,
        train_mask=train,
        val_mask=val,
        test_mask=test,
        name=name,
        row_normalize=False,
    )


def convert(source, dest, fmt, name, split=0, num_features=None):
    """Read a native dataset and write it in the canonical layout."""
    if fmt == "planetoid":
        ds = read_planetoid(source, name)
    elif fmt == "geom-gcn":
        ds = read_geom_gcn(source, name, split=split, num_features=num_features)
    else:
        raise ValueError(f"unknown source format {fmt!r}; expected 'planetoid' or 'geom-gcn'")
    save_dataset(ds, dest)
    return ds
